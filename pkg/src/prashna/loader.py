"""Loading network functions from ELF objects or text bundles."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

from elftools.common.exceptions import ELFError
from elftools.elf.constants import SH_FLAGS
from elftools.elf.elffile import ELFFile

from .errors import (
    AmbiguousSection,
    DuplicateMapName,
    NoProgramSection,
    NotElf,
    UnknownHook,
    UnresolvedMapRelocation,
)
from .isa import LDDW, PSEUDO_MAP_FD, PSEUDO_MAP_VALUE, SLOT, Instruction, decode_program, parse_text

# section-name prefix -> hook
HOOK_PREFIXES = {
    "xdp": "xdp",
    "tc": "tc",
    "classifier": "tc",
    "tc_ingress": "tc",
    "tc_egress": "tc",
    "tcx": "tc",
}


@dataclass
class NfObject:
    nf_id: str
    hook: str
    instructions: list[Instruction]
    map_table: dict[int, str]
    source: str | None = field(default=None, compare=False)

    @property
    def maps(self) -> list[str]:
        return list(dict.fromkeys(self.map_table[i] for i in sorted(self.map_table)))

    def map_name(self, index: int) -> str:
        return self.map_table.get(index, f"map@{index}")


def hook_from_section(name: str) -> str | None:
    prefix = name.split("/", 1)[0]
    return HOOK_PREFIXES.get(prefix)


def _program_sections(elf: ELFFile):
    out = []
    for sec in elf.iter_sections():
        if (sec["sh_type"] == "SHT_PROGBITS" and sec["sh_flags"] & SH_FLAGS.SHF_EXECINSTR
                and sec["sh_size"] > 0):
            out.append(sec)
    return out


def _function_name(elf: ELFFile, sec_index: int) -> str | None:
    symtab = elf.get_section_by_name(".symtab")
    if symtab is None:
        return None
    for sym in symtab.iter_symbols():
        if (sym["st_info"]["type"] == "STT_FUNC" and sym["st_shndx"] == sec_index
                and sym["st_value"] == 0 and sym.name):
            return sym.name
    return None


def load_object(path: str | Path, section: str | None = None, hook: str | None = None) -> NfObject:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != b"\x7fELF":
            raise NotElf(f"{path}: not an ELF file")
        fh.seek(0)
        try:
            elf = ELFFile(fh)
            return _load(elf, path, section, hook)
        except ELFError as exc:
            raise NotElf(f"{path}: {exc}") from exc


def _load(elf: ELFFile, path: Path, section: str | None, hook: str | None) -> NfObject:
    programs = _program_sections(elf)
    if not programs:
        raise NoProgramSection(f"{path}: no executable section")
    indexed = [(elf.get_section_index(sec.name), sec) for sec in programs]
    if section is not None:
        chosen = [(i, s) for i, s in indexed
                  if s.name == section or _function_name(elf, i) == section]
        if not chosen:
            raise NoProgramSection(f"{path}: no program section named {section!r}")
    else:
        chosen = indexed
    if len(chosen) > 1:
        names = ", ".join(s.name for _, s in chosen)
        raise AmbiguousSection(f"{path}: several program sections ({names}); pick one")
    sec_index, sec = chosen[0]

    hook = hook or hook_from_section(sec.name)
    if hook is None:
        raise UnknownHook(f"{path}: cannot infer the hook from section {sec.name!r}")
    nf_id = _function_name(elf, sec_index) or sec.name

    data = bytearray(sec.data())
    map_table = _apply_relocations(elf, sec, data, path)
    insns = decode_program(bytes(data))
    return NfObject(nf_id, hook, insns, map_table, str(path))


def _apply_relocations(elf: ELFFile, sec, data: bytearray, path: Path) -> dict[int, str]:
    relsec = elf.get_section_by_name(".rel" + sec.name)
    if relsec is None:
        return {}
    symtab = elf.get_section(relsec["sh_link"])
    ordinals: dict[str, int] = {}
    table: dict[int, str] = {}
    for rel in sorted(relsec.iter_relocations(), key=lambda r: r["r_offset"]):
        off = rel["r_offset"]
        if off % 8 or off + 16 > len(data) or data[off] != LDDW:
            continue
        sym = symtab.get_symbol(rel["r_info_sym"])
        if sym["st_info"]["type"] == "STT_SECTION":
            name = elf.get_section(sym["st_shndx"]).name
            src = PSEUDO_MAP_VALUE
        else:
            name = sym.name
            src = PSEUDO_MAP_FD
        if not name:
            raise UnresolvedMapRelocation(
                f"{path}: relocation at slot {off // 8} in {sec.name} names no symbol")
        ordinal = ordinals.setdefault(name, len(ordinals))
        opcode, regs, insn_off, addend = SLOT.unpack_from(data, off)
        regs = (regs & 0x0F) | (src << 4)
        hi = addend if src == PSEUDO_MAP_VALUE else 0
        SLOT.pack_into(data, off, opcode, regs, insn_off, ordinal)
        SLOT.pack_into(data, off + 8, 0, 0, 0, hi)
        table[off // 8] = name
    return table


def read_sidecar(path: str | Path) -> list[str]:
    names: list[str] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        name = raw.split("#", 1)[0].strip()
        if not name:
            continue
        if name in names:
            raise DuplicateMapName(f"{path}:{lineno}: map {name!r} listed twice")
        names.append(name)
    return names


def load_bundle(asm_path: str | Path, maps_path: str | Path | None = None,
                hook: str | None = None) -> NfObject:
    asm_path = Path(asm_path)
    sidecar = read_sidecar(maps_path) if maps_path is not None else []
    prog = parse_text(asm_path.read_text(encoding="utf-8"), sidecar)
    for insn in prog.instructions:
        if insn.kind == "load_map_fd" and insn.index not in prog.map_refs:
            raise UnresolvedMapRelocation(
                f"{asm_path}: map ordinal {insn.imm} at slot {insn.index} has no name")
    nf_id = prog.nf_id or asm_path.stem
    return NfObject(nf_id, hook or prog.hook or "xdp", prog.instructions,
                    dict(prog.map_refs), str(asm_path))


def load_any(path: str | Path, section: str | None = None, hook: str | None = None) -> NfObject:
    """Dispatch on content: ELF objects go through load_object, text through load_bundle."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"\x7fELF":
        return load_object(path, section, hook)
    maps = path.with_suffix(".maps")
    return load_bundle(path, maps if maps.exists() else None, hook)
