"""eBPF instruction decoding, encoding and the text assembly format.

Every slot is eight little-endian bytes::

    opcode:8  dst:4 src:4  off:16 (signed)  imm:32 (signed)

The wide load (``lddw``) spans two slots; the second slot carries the upper
32 bits of the 64-bit immediate.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import BadRegister, ParseError, TruncatedProgram, UnknownOpcode

SLOT = struct.Struct("<BBhi")

# instruction classes
LD, LDX, ST, STX, ALU, JMP, JMP32, ALU64 = range(8)

# source bit
K, X = 0x00, 0x08

# memory sizes and modes
SIZE_W, SIZE_H, SIZE_B, SIZE_DW = 0x00, 0x08, 0x10, 0x18
MODE_IMM, MODE_MEM, MODE_ATOMIC = 0x00, 0x60, 0xC0
WIDTHS = {SIZE_B: 1, SIZE_H: 2, SIZE_W: 4, SIZE_DW: 8}
SIZE_OF_WIDTH = {v: k for k, v in WIDTHS.items()}
SIZE_SUFFIX = {SIZE_B: "b", SIZE_H: "h", SIZE_W: "w", SIZE_DW: "dw"}
SUFFIX_SIZE = {v: k for k, v in SIZE_SUFFIX.items()}

ALU_OPS = {
    0x00: "add", 0x10: "sub", 0x20: "mul", 0x30: "div", 0x40: "or",
    0x50: "and", 0x60: "lsh", 0x70: "rsh", 0x80: "neg", 0x90: "mod",
    0xA0: "xor", 0xB0: "mov", 0xC0: "arsh", 0xD0: "end",
}
ALU_CODES = {v: k for k, v in ALU_OPS.items()}
BINARY_ALU = ("add", "sub", "mul", "div", "or", "and", "lsh", "rsh",
              "mod", "xor", "arsh")

JMP_OPS = {
    0x00: "ja", 0x10: "eq", 0x20: "gt", 0x30: "ge", 0x40: "set", 0x50: "ne",
    0x60: "sgt", 0x70: "sge", 0x80: "call", 0x90: "exit", 0xA0: "lt",
    0xB0: "le", 0xC0: "slt", 0xD0: "sle",
}
JMP_CODES = {v: k for k, v in JMP_OPS.items()}
COND_OPS = ("eq", "gt", "ge", "set", "ne", "sgt", "sge", "lt", "le", "slt", "sle")

ATOMIC_FETCH = 0x01
ATOMIC_OPS = {
    0x00: "add", 0x40: "or", 0x50: "and", 0xA0: "xor",
    0x01: "fetch_add", 0x41: "fetch_or", 0x51: "fetch_and", 0xA1: "fetch_xor",
    0xE1: "xchg", 0xF1: "cmpxchg",
}
ATOMIC_CODES = {v: k for k, v in ATOMIC_OPS.items()}

# src_reg values of the wide load that this decoder understands
PSEUDO_MAP_FD = 1
PSEUDO_MAP_VALUE = 2

LDDW = LD | MODE_IMM | SIZE_DW

KINDS = ("alu", "mov", "load_mem", "store_mem", "load_map_fd",
         "jump_cond", "jump_uncond", "call", "exit")


@dataclass(frozen=True)
class Instruction:
    index: int
    opcode: int
    dst_reg: int
    src_reg: int
    offset: int
    imm: int
    imm64: int | None = None
    kind: str = "alu"

    @property
    def cls(self) -> int:
        return self.opcode & 0x07

    @property
    def op(self) -> int:
        return self.opcode & 0xF0

    @property
    def uses_reg(self) -> bool:
        return bool(self.opcode & X)

    @property
    def is64(self) -> bool:
        return self.cls in (ALU64, JMP)

    @property
    def width(self) -> int:
        """Access width in bytes for memory instructions."""
        return WIDTHS[self.opcode & 0x18]

    @property
    def slots(self) -> int:
        return 2 if self.opcode == LDDW else 1

    @property
    def target(self) -> int:
        """Slot index a jump lands on."""
        return self.index + 1 + self.offset

    @property
    def is_atomic(self) -> bool:
        return self.cls == STX and self.opcode & 0xE0 == MODE_ATOMIC


def _s32(value: int) -> int:
    value &= 0xFFFFFFFF
    return value - (1 << 32) if value & 0x80000000 else value


def _s64(value: int) -> int:
    value &= (1 << 64) - 1
    return value - (1 << 64) if value >> 63 else value


def classify(opcode: int, src: int, off: int, imm: int, index: int) -> str:
    """Return the instruction kind, or raise UnknownOpcode."""
    cls = opcode & 0x07
    if cls in (ALU, ALU64):
        name = ALU_OPS.get(opcode & 0xF0)
        if name is None:
            raise UnknownOpcode(opcode, index)
        if name == "mov":
            if off != 0:
                raise UnknownOpcode(opcode, index, "sign-extending move")
            return "mov"
        if name == "neg" and opcode & X:
            raise UnknownOpcode(opcode, index)
        if name == "end":
            if cls == ALU64 and opcode & X:
                raise UnknownOpcode(opcode, index)
            if imm not in (16, 32, 64):
                raise UnknownOpcode(opcode, index, f"byte swap width {imm}")
            return "alu"
        if name in ("div", "mod"):
            if off not in (0, 1):
                raise UnknownOpcode(opcode, index)
        elif off != 0:
            raise UnknownOpcode(opcode, index, "nonzero offset")
        return "alu"
    if cls in (JMP, JMP32):
        name = JMP_OPS.get(opcode & 0xF0)
        if name is None:
            raise UnknownOpcode(opcode, index)
        if name in ("call", "exit", "ja"):
            if cls == JMP32 or opcode & X:
                raise UnknownOpcode(opcode, index)
            if name == "call" and src != 0:
                raise UnknownOpcode(opcode, index, "only helper calls are supported")
            return {"call": "call", "exit": "exit", "ja": "jump_uncond"}[name]
        return "jump_cond"
    if cls == LDX:
        if opcode & 0xE0 != MODE_MEM:
            raise UnknownOpcode(opcode, index)
        return "load_mem"
    if cls == ST:
        if opcode & 0xE0 != MODE_MEM:
            raise UnknownOpcode(opcode, index)
        return "store_mem"
    if cls == STX:
        mode = opcode & 0xE0
        if mode == MODE_MEM:
            return "store_mem"
        if mode == MODE_ATOMIC and opcode & 0x18 in (SIZE_W, SIZE_DW):
            if imm not in ATOMIC_OPS:
                raise UnknownOpcode(opcode, index, f"atomic op 0x{imm & 0xff:02x}")
            return "alu"
        raise UnknownOpcode(opcode, index)
    if opcode == LDDW:
        if src == 0:
            return "mov"
        if src in (PSEUDO_MAP_FD, PSEUDO_MAP_VALUE):
            return "load_map_fd"
        raise UnknownOpcode(opcode, index, f"wide load source {src}")
    raise UnknownOpcode(opcode, index)


def make(index: int, opcode: int, dst: int = 0, src: int = 0, off: int = 0,
         imm: int = 0, imm64: int | None = None) -> Instruction:
    """Build a validated instruction (used by the parser and by tests)."""
    for reg in (dst, src):
        if not 0 <= reg <= 10:
            raise BadRegister(reg, index)
    if opcode == LDDW:
        if imm64 is None:
            imm64 = imm
        imm64 = _s64(imm64)
        imm = _s32(imm64)
    elif imm64 is not None:
        raise ValueError("imm64 is only valid on a wide load")
    kind = classify(opcode, src, off, imm, index)
    return Instruction(index, opcode, dst, src, off, imm, imm64, kind)


def decode_program(data: bytes) -> list[Instruction]:
    if len(data) % 8:
        raise TruncatedProgram(f"{len(data)} bytes is not a whole number of slots")
    count = len(data) // 8
    out = []
    i = 0
    while i < count:
        opcode, regs, off, imm = SLOT.unpack_from(data, i * 8)
        dst, src = regs & 0x0F, regs >> 4
        if opcode == LDDW:
            if i + 1 >= count:
                raise TruncatedProgram(f"wide load at slot {i} has no second half")
            op2, regs2, off2, hi = SLOT.unpack_from(data, (i + 1) * 8)
            if op2 or regs2 or off2:
                raise TruncatedProgram(f"wide load at slot {i} has a malformed second half")
            out.append(make(i, opcode, dst, src, off, imm64=(hi << 32) | (imm & 0xFFFFFFFF)))
            i += 2
            continue
        out.append(make(i, opcode, dst, src, off, imm))
        i += 1
    return out


def encode_instruction(insn: Instruction) -> bytes:
    regs = (insn.src_reg << 4) | insn.dst_reg
    if insn.opcode == LDDW:
        value = insn.imm64 if insn.imm64 is not None else insn.imm
        lo, hi = _s32(value), _s32(value >> 32)
        return SLOT.pack(insn.opcode, regs, insn.offset, lo) + SLOT.pack(0, 0, 0, hi)
    return SLOT.pack(insn.opcode, regs, insn.offset, insn.imm)


def encode_program(insns: Iterable[Instruction]) -> bytes:
    return b"".join(encode_instruction(i) for i in insns)


# -- text format --------------------------------------------------------------

@dataclass
class TextProgram:
    instructions: list[Instruction]
    map_refs: dict[int, str]
    maps: list[str]
    nf_id: str | None = None
    hook: str | None = None


_LINE = re.compile(r"^\s*(\d+)\s*:\s*([a-z0-9_]+)\s*(.*?)\s*$")
_REG = re.compile(r"^r(\d+)$")
_MEM = re.compile(r"^\[\s*r(\d+)\s*(?:([+-])\s*(0x[0-9a-fA-F]+|\d+))?\s*\]$")


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(f"expected an integer, got {tok!r}", lineno) from None


def _reg(tok: str, lineno: int) -> int:
    m = _REG.match(tok)
    if not m:
        raise ParseError(f"expected a register, got {tok!r}", lineno)
    reg = int(m.group(1))
    if reg > 10:
        raise BadRegister(reg, None)
    return reg


def _mem(tok: str, lineno: int) -> tuple[int, int]:
    m = _MEM.match(tok)
    if not m:
        raise ParseError(f"expected [rN+off], got {tok!r}", lineno)
    reg = int(m.group(1))
    if reg > 10:
        raise BadRegister(reg, None)
    off = int(m.group(3), 0) if m.group(3) else 0
    return reg, -off if m.group(2) == "-" else off


def _jump_off(tok: str, lineno: int) -> int:
    if not re.match(r"^[+-]\d+$", tok):
        raise ParseError(f"expected a signed jump offset like +3, got {tok!r}", lineno)
    return int(tok)


def _split_operands(rest: str) -> list[str]:
    if not rest:
        return []
    parts, depth, cur = [], 0, []
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur).strip())
    return parts


def _expect(ops: list[str], n: int, mnem: str, lineno: int) -> None:
    if len(ops) != n:
        raise ParseError(f"{mnem} takes {n} operand(s), got {len(ops)}", lineno)


def parse_text(text: str, maps: Sequence[str] | None = None) -> TextProgram:
    """Parse the text assembly format.

    ``maps`` seeds the map ordinal table (a sidecar); names first seen in
    ``map=<name>`` operands are appended in order of first reference.
    """
    names = list(maps or ())
    ordinal = {n: i for i, n in enumerate(names)}
    insns: list[Instruction] = []
    refs: dict[int, str] = {}
    nf_id = hook = None
    slot = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("."):
            key, _, value = line.partition(" ")
            value = value.strip()
            if key == ".nf" and value:
                nf_id = value
            elif key == ".hook" and value:
                hook = value
            else:
                raise ParseError(f"bad directive {line!r}", lineno)
            continue
        m = _LINE.match(line)
        if not m:
            raise ParseError(f"cannot parse {line!r}", lineno)
        idx = int(m.group(1))
        if idx != slot:
            raise ParseError(f"index {idx} does not match slot {slot}", lineno)
        mnem, ops = m.group(2), _split_operands(m.group(3))
        try:
            insn, mapname = _assemble(slot, mnem, ops, lineno, names, ordinal)
        except (BadRegister, UnknownOpcode) as exc:
            exc.line = lineno
            exc.args = (f"line {lineno}: {exc}",)
            raise
        if mapname is not None:
            refs[slot] = mapname
        insns.append(insn)
        slot += insn.slots
    return TextProgram(insns, refs, names, nf_id, hook)


def parse_text_program(text: str) -> list[Instruction]:
    return parse_text(text).instructions


def _map_operand(tok: str, lineno: int, names: list[str], ordinal: dict[str, int]):
    if not tok.startswith("map="):
        raise ParseError(f"expected map=<name>, got {tok!r}", lineno)
    name = tok[4:].strip()
    if not name:
        raise ParseError("empty map name", lineno)
    if name.isdigit():
        idx = int(name)
        return idx, names[idx] if idx < len(names) else None
    if name not in ordinal:
        ordinal[name] = len(names)
        names.append(name)
    return ordinal[name], name


def _assemble(slot, mnem, ops, lineno, names, ordinal):
    if mnem == "exit":
        _expect(ops, 0, mnem, lineno)
        return make(slot, JMP | JMP_CODES["exit"]), None
    if mnem == "call":
        _expect(ops, 1, mnem, lineno)
        return make(slot, JMP | JMP_CODES["call"], imm=_int(ops[0], lineno)), None
    if mnem == "jmp":
        _expect(ops, 1, mnem, lineno)
        return make(slot, JMP | JMP_CODES["ja"], off=_jump_off(ops[0], lineno)), None
    if mnem in ("mov", "mov32"):
        _expect(ops, 2, mnem, lineno)
        cls = ALU64 if mnem == "mov" else ALU
        return _binop(slot, cls, ALU_CODES["mov"], ops, lineno), None
    if mnem == "lddw":
        _expect(ops, 2, mnem, lineno)
        return make(slot, LDDW, _reg(ops[0], lineno), imm64=_int(ops[1], lineno)), None
    if mnem in ("ldmapfd", "ldmapval"):
        want = 2 if mnem == "ldmapfd" else 3
        if mnem == "ldmapval" and len(ops) == 2:
            ops = ops + ["0"]
        _expect(ops, want, mnem, lineno)
        dst = _reg(ops[0], lineno)
        idx, name = _map_operand(ops[1], lineno, names, ordinal)
        if mnem == "ldmapfd":
            return make(slot, LDDW, dst, PSEUDO_MAP_FD, imm64=idx), name
        off = _int(ops[2], lineno)
        return make(slot, LDDW, dst, PSEUDO_MAP_VALUE, imm64=(off << 32) | idx), name
    if mnem.startswith("ldx") and mnem[3:] in SUFFIX_SIZE:
        _expect(ops, 2, mnem, lineno)
        src, off = _mem(ops[1], lineno)
        op = LDX | MODE_MEM | SUFFIX_SIZE[mnem[3:]]
        return make(slot, op, _reg(ops[0], lineno), src, off), None
    if mnem.startswith("stx") and mnem[3:] in SUFFIX_SIZE:
        _expect(ops, 2, mnem, lineno)
        dst, off = _mem(ops[0], lineno)
        op = STX | MODE_MEM | SUFFIX_SIZE[mnem[3:]]
        return make(slot, op, dst, _reg(ops[1], lineno), off), None
    if mnem.startswith("st") and mnem[2:] in SUFFIX_SIZE:
        _expect(ops, 2, mnem, lineno)
        dst, off = _mem(ops[0], lineno)
        op = ST | MODE_MEM | SUFFIX_SIZE[mnem[2:]]
        return make(slot, op, dst, 0, off, _int(ops[1], lineno)), None
    if mnem in ("atomicw", "atomicdw"):
        _expect(ops, 3, mnem, lineno)
        dst, off = _mem(ops[0], lineno)
        if ops[2] not in ATOMIC_CODES:
            raise ParseError(f"unknown atomic op {ops[2]!r}", lineno)
        op = STX | MODE_ATOMIC | SUFFIX_SIZE[mnem[6:]]
        return make(slot, op, dst, _reg(ops[1], lineno), off, ATOMIC_CODES[ops[2]]), None
    m = re.match(r"^(le|be|bswap)(16|32|64)$", mnem)
    if m:
        _expect(ops, 1, mnem, lineno)
        op = {"le": ALU | K, "be": ALU | X, "bswap": ALU64 | K}[m.group(1)]
        return make(slot, op | ALU_CODES["end"], _reg(ops[0], lineno), imm=int(m.group(2))), None
    m = re.match(r"^alu(32)?(\w+)$", mnem)
    if m:
        cls = ALU if m.group(1) else ALU64
        name = m.group(2)
        if name == "neg":
            _expect(ops, 1, mnem, lineno)
            return make(slot, cls | ALU_CODES["neg"], _reg(ops[0], lineno)), None
        signed = name in ("sdiv", "smod")
        if signed:
            name = name[1:]
        if name not in BINARY_ALU:
            raise ParseError(f"unknown mnemonic {mnem!r}", lineno)
        _expect(ops, 2, mnem, lineno)
        return _binop(slot, cls, ALU_CODES[name], ops, lineno, 1 if signed else 0), None
    m = re.match(r"^j(32)?(\w+)$", mnem)
    if m and m.group(2) in COND_OPS:
        _expect(ops, 3, mnem, lineno)
        cls = JMP32 if m.group(1) else JMP
        dst = _reg(ops[0], lineno)
        off = _jump_off(ops[2], lineno)
        code = cls | JMP_CODES[m.group(2)]
        if _REG.match(ops[1]):
            return make(slot, code | X, dst, _reg(ops[1], lineno), off), None
        return make(slot, code, dst, 0, off, _int(ops[1], lineno)), None
    raise ParseError(f"unknown mnemonic {mnem!r}", lineno)


def _binop(slot, cls, code, ops, lineno, off=0):
    dst = _reg(ops[0], lineno)
    if _REG.match(ops[1]):
        return make(slot, cls | X | code, dst, _reg(ops[1], lineno), off)
    return make(slot, cls | K | code, dst, 0, off, _int(ops[1], lineno))


def _memref(reg: int, off: int) -> str:
    return f"[r{reg}{'-' if off < 0 else '+'}{abs(off)}]"


def _src(insn: Instruction) -> str:
    return f"r{insn.src_reg}" if insn.uses_reg else str(insn.imm)


def format_instruction(insn: Instruction, map_table: dict[int, str] | None = None) -> str:
    cls, op = insn.cls, insn.op
    d = f"r{insn.dst_reg}"
    if insn.opcode == LDDW:
        if insn.kind == "mov":
            text = f"lddw {d}, {insn.imm64}"
        else:
            name = (map_table or {}).get(insn.index)
            ordinal = insn.imm64 & 0xFFFFFFFF
            ref = f"map={name if name is not None else ordinal}"
            if insn.src_reg == PSEUDO_MAP_FD:
                text = f"ldmapfd {d}, {ref}"
            else:
                text = f"ldmapval {d}, {ref}, {_s32(insn.imm64 >> 32)}"
    elif cls in (ALU, ALU64):
        name = ALU_OPS[op]
        if name == "mov":
            text = f"{'mov' if cls == ALU64 else 'mov32'} {d}, {_src(insn)}"
        elif name == "end":
            prefix = "bswap" if cls == ALU64 else ("be" if insn.uses_reg else "le")
            text = f"{prefix}{insn.imm} {d}"
        else:
            width = "" if cls == ALU64 else "32"
            if name == "neg":
                text = f"alu{width}neg {d}"
            else:
                sign = "s" if insn.offset == 1 else ""
                text = f"alu{width}{sign}{name} {d}, {_src(insn)}"
    elif cls in (JMP, JMP32):
        name = JMP_OPS[op]
        if name == "exit":
            text = "exit"
        elif name == "call":
            text = f"call {insn.imm}"
        elif name == "ja":
            text = f"jmp {insn.offset:+d}"
        else:
            width = "32" if cls == JMP32 else ""
            text = f"j{width}{name} {d}, {_src(insn)}, {insn.offset:+d}"
    elif cls == LDX:
        text = f"ldx{SIZE_SUFFIX[insn.opcode & 0x18]} {d}, {_memref(insn.src_reg, insn.offset)}"
    elif cls == ST:
        text = f"st{SIZE_SUFFIX[insn.opcode & 0x18]} {_memref(insn.dst_reg, insn.offset)}, {insn.imm}"
    elif insn.is_atomic:
        text = (f"atomic{SIZE_SUFFIX[insn.opcode & 0x18]} {_memref(insn.dst_reg, insn.offset)}, "
                f"r{insn.src_reg}, {ATOMIC_OPS[insn.imm]}")
    else:
        text = f"stx{SIZE_SUFFIX[insn.opcode & 0x18]} {_memref(insn.dst_reg, insn.offset)}, r{insn.src_reg}"
    return f"{insn.index}: {text}"


def format_program(insns: Iterable[Instruction], map_table: dict[int, str] | None = None,
                   nf_id: str | None = None, hook: str | None = None) -> str:
    lines = []
    if nf_id:
        lines.append(f".nf {nf_id}")
    if hook:
        lines.append(f".hook {hook}")
    lines.extend(format_instruction(i, map_table) for i in insns)
    return "\n".join(lines) + "\n"
