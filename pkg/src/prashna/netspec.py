"""Protocol, buffer, helper and action tables loaded from a netspec file.

The format is line oriented and sectioned::

    [protocol ipv4 len=20]
    field 9 1 proto
    tail proto 0x06=tcp

    [buffer xdp_md]
    field 0 data
    role data=data data_end=data_end

    [helpers]
    1 bpf_map_lookup_elem

    [actions xdp]
    2 XDP_PASS

    [hook xdp]
    buffer xdp_md
    root eth

``#`` starts a comment.  Field names are local to their section; lookups
return them qualified (``ipv4.proto``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import (
    MissingDataRole,
    OverlappingFields,
    SpecParseError,
    UnknownHook,
    UnknownProtocol,
)


@dataclass
class ProtocolSpec:
    name: str
    header_len: int
    fields: dict[int, tuple[str, int]] = field(default_factory=dict)
    tail_fields: dict[str, dict[int, str]] = field(default_factory=dict)

    def field_at(self, rel_off: int) -> tuple[str, int, int] | None:
        """(local name, offset, width) of the field covering rel_off."""
        for off, (name, width) in self.fields.items():
            if off <= rel_off < off + width:
                return name, off, width
        return None

    def width_of(self, local: str) -> int | None:
        for name, width in self.fields.values():
            if name == local:
                return width
        return None


@dataclass
class BufferSpec:
    buff_type: str
    fields: dict[int, str] = field(default_factory=dict)
    data: str = ""
    data_end: str = ""

    def offset_of(self, local: str) -> int | None:
        for off, name in self.fields.items():
            if name == local:
                return off
        return None


@dataclass
class HookSpec:
    name: str
    buffer: str
    root: str


@dataclass
class NetSpec:
    protocols: dict[str, ProtocolSpec] = field(default_factory=dict)
    buffers: dict[str, BufferSpec] = field(default_factory=dict)
    helpers: dict[int, str] = field(default_factory=dict)
    actions: dict[str, dict[int, str]] = field(default_factory=dict)
    hooks: dict[str, HookSpec] = field(default_factory=dict)

    def proto(self, name: str) -> ProtocolSpec:
        try:
            return self.protocols[name]
        except KeyError:
            raise UnknownProtocol(name) from None

    def hook(self, name: str) -> HookSpec:
        try:
            return self.hooks[name]
        except KeyError:
            raise UnknownHook(name) from None

    def header_len(self, proto: str) -> int:
        return self.proto(proto).header_len

    def hdr_field_name(self, proto: str, rel_off: int) -> str:
        hit = self.proto(proto).field_at(rel_off)
        if hit is None:
            return f"{proto}.unknown@{rel_off}"
        return f"{proto}.{hit[0]}"

    def is_tail_field(self, proto: str, field_name: str) -> bool:
        return _local(proto, field_name) in self.proto(proto).tail_fields

    def next_proto(self, proto: str, field_name: str, value: int) -> str | None:
        table = self.proto(proto).tail_fields.get(_local(proto, field_name))
        if table is None:
            return None
        return table.get(value)

    def field_width(self, qualified: str) -> int | None:
        proto, _, local = qualified.partition(".")
        spec = self.protocols.get(proto)
        return spec.width_of(local) if spec else None

    def buffer(self, name: str) -> BufferSpec:
        try:
            return self.buffers[name]
        except KeyError:
            raise SpecParseError(f"unknown buffer {name!r}") from None

    def buff_field(self, buff_type: str, off: int) -> str:
        name = self.buffer(buff_type).fields.get(off)
        if name is None:
            return f"{buff_type}.unknown@{off}"
        return f"{buff_type}.{name}"

    def buff_offset(self, buff_type: str, role: str) -> int:
        """Offset of the field carrying ``role`` (data or data_end)."""
        buf = self.buffer(buff_type)
        return buf.offset_of(buf.data if role == "data" else buf.data_end)

    def helper_name(self, helper_id: int) -> str:
        return self.helpers.get(helper_id, f"unknown@{helper_id}")

    def action_name(self, hook: str, code: int | None) -> str:
        if hook not in self.actions:
            raise UnknownHook(hook)
        if code is None:
            return "UnknownAction(?)"
        return self.actions[hook].get(code, f"UnknownAction({code})")


def _local(proto: str, field_name: str) -> str:
    prefix = proto + "."
    return field_name[len(prefix):] if field_name.startswith(prefix) else field_name


_HEADER = re.compile(r"^\[(\w+)(?:\s+(\S+))?(?:\s+len=(\d+))?\]$")


def _num(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise SpecParseError(f"expected a number, got {tok!r}", lineno) from None


def loads(text: str) -> NetSpec:
    spec = NetSpec()
    section = None
    current = None
    pending_tails: list[tuple[ProtocolSpec, str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = _HEADER.match(line)
            if not m:
                raise SpecParseError(f"bad section header {line!r}", lineno)
            section, name, length = m.groups()
            if section == "protocol":
                if not name or length is None:
                    raise SpecParseError("protocol needs a name and len=", lineno)
                if name in spec.protocols:
                    raise SpecParseError(f"duplicate protocol {name}", lineno)
                current = spec.protocols[name] = ProtocolSpec(name, int(length))
            elif section == "buffer" and name:
                if name in spec.buffers:
                    raise SpecParseError(f"duplicate buffer {name}", lineno)
                current = spec.buffers[name] = BufferSpec(name)
            elif section == "helpers" and not name:
                current = spec.helpers
            elif section == "actions" and name:
                current = spec.actions.setdefault(name, {})
            elif section == "hook" and name:
                current = spec.hooks[name] = HookSpec(name, "", "")
            else:
                raise SpecParseError(f"bad section header {line!r}", lineno)
            continue
        if section is None:
            raise SpecParseError("content before the first section", lineno)
        toks = line.split()
        if section == "protocol":
            _protocol_line(current, toks, lineno, pending_tails)
        elif section == "buffer":
            _buffer_line(current, toks, lineno)
        elif section in ("helpers", "actions"):
            if len(toks) != 2:
                raise SpecParseError(f"expected '<id> <name>', got {line!r}", lineno)
            key = _num(toks[0], lineno)
            if key in current:
                raise SpecParseError(f"duplicate id {key}", lineno)
            current[key] = toks[1]
        elif section == "hook":
            if len(toks) != 2 or toks[0] not in ("buffer", "root"):
                raise SpecParseError(f"expected 'buffer <name>' or 'root <proto>', got {line!r}", lineno)
            setattr(current, toks[0], toks[1])
    if not (spec.protocols or spec.buffers or spec.helpers or spec.actions):
        raise SpecParseError("empty netspec")
    _validate(spec, pending_tails)
    return spec


def _protocol_line(proto: ProtocolSpec, toks, lineno, pending):
    if toks[0] == "field" and len(toks) == 4:
        off, width, name = _num(toks[1], lineno), _num(toks[2], lineno), toks[3]
        if width <= 0 or off < 0 or off + width > proto.header_len:
            raise OverlappingFields(
                f"line {lineno}: {proto.name}.{name} [{off},{off + width}) "
                f"outside header of length {proto.header_len}")
        for other, (oname, owidth) in proto.fields.items():
            if off < other + owidth and other < off + width:
                raise OverlappingFields(
                    f"line {lineno}: {proto.name}.{name} overlaps {proto.name}.{oname}")
        proto.fields[off] = (name, width)
    elif toks[0] == "tail" and len(toks) == 3 and "=" in toks[2]:
        value, _, target = toks[2].partition("=")
        local = _local(proto.name, toks[1])
        proto.tail_fields.setdefault(local, {})[_num(value, lineno)] = target
        pending.append((proto, local, lineno))
    else:
        raise SpecParseError(f"bad protocol line {' '.join(toks)!r}", lineno)


def _buffer_line(buf: BufferSpec, toks, lineno):
    if toks[0] == "field" and len(toks) == 3:
        off = _num(toks[1], lineno)
        if off in buf.fields:
            raise OverlappingFields(f"line {lineno}: two fields at {buf.buff_type} offset {off}")
        buf.fields[off] = toks[2]
    elif toks[0] == "role" and len(toks) >= 2:
        for tok in toks[1:]:
            key, _, value = tok.partition("=")
            if key not in ("data", "data_end") or not value:
                raise SpecParseError(f"bad role {tok!r}", lineno)
            setattr(buf, key, value)
    else:
        raise SpecParseError(f"bad buffer line {' '.join(toks)!r}", lineno)


def _validate(spec: NetSpec, pending_tails) -> None:
    for proto, local, lineno in pending_tails:
        if proto.width_of(local) is None:
            raise SpecParseError(f"tail field {proto.name}.{local} is not declared", lineno)
        for target in proto.tail_fields[local].values():
            if target not in spec.protocols:
                raise UnknownProtocol(f"{proto.name}.{local} dispatches to unknown protocol {target}")
    for buf in spec.buffers.values():
        for role in ("data", "data_end"):
            name = getattr(buf, role)
            if not name or buf.offset_of(name) is None:
                raise MissingDataRole(f"buffer {buf.buff_type} has no {role} field")
    for hook in spec.hooks.values():
        if hook.buffer not in spec.buffers:
            raise SpecParseError(f"hook {hook.name} names unknown buffer {hook.buffer!r}")
        if hook.root not in spec.protocols:
            raise UnknownProtocol(f"hook {hook.name} root {hook.root!r}")
        if hook.name not in spec.actions:
            raise SpecParseError(f"hook {hook.name} has no [actions {hook.name}] table")


def dumps(spec: NetSpec) -> str:
    """Canonical text; loads(dumps(s)) == s."""
    out: list[str] = []
    for proto in spec.protocols.values():
        out.append(f"[protocol {proto.name} len={proto.header_len}]")
        for off in sorted(proto.fields):
            name, width = proto.fields[off]
            out.append(f"field {off} {width} {name}")
        for local, table in proto.tail_fields.items():
            digits = 2 * proto.width_of(local)
            for value, target in sorted(table.items()):
                out.append(f"tail {local} 0x{value:0{digits}x}={target}")
        out.append("")
    for buf in spec.buffers.values():
        out.append(f"[buffer {buf.buff_type}]")
        for off in sorted(buf.fields):
            out.append(f"field {off} {buf.fields[off]}")
        out.append(f"role data={buf.data} data_end={buf.data_end}")
        out.append("")
    if spec.helpers:
        out.append("[helpers]")
        out.extend(f"{k} {v}" for k, v in sorted(spec.helpers.items()))
        out.append("")
    for hook, table in spec.actions.items():
        out.append(f"[actions {hook}]")
        out.extend(f"{k} {v}" for k, v in sorted(table.items()))
        out.append("")
    for hook in spec.hooks.values():
        out.append(f"[hook {hook.name}]")
        out.append(f"buffer {hook.buffer}")
        out.append(f"root {hook.root}")
        out.append("")
    return "\n".join(out)


def load_netspec(path: str | Path) -> NetSpec:
    return loads(Path(path).read_text(encoding="utf-8"))


def default_text() -> str:
    return resources.files(__package__).joinpath("default.netspec").read_text(encoding="utf-8")


_DEFAULT: NetSpec | None = None


def default_spec() -> NetSpec:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = loads(default_text())
    return _DEFAULT
