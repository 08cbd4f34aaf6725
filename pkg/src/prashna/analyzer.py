"""Path-sensitive extraction of network context from an NF.

Every entry-to-exit path is interpreted over an abstract state of tagged
registers and stack bytes.  Paths share work up to the point where they fork,
so a block is interpreted once per distinct path prefix.  Context items
emitted along the way are attributed to the block that produced them and
unioned per block; every exit records its return action together with the
per-path context.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

from . import isa
from .cfg import Cfg, build_cfg, path_budget
from .errors import AnalysisError, PathBudgetExceeded, StackOutOfRange
from .isa import Instruction
from .loader import NfObject
from .netspec import NetSpec

STACK_SIZE = 512

PKT_BUFF = "pkt_buff"
PKT_DATA_START = "pkt_data_start"
PKT_DATA_END = "pkt_data_end"
CONST = "const"
REF_MAP = "ref_map"
STACK_FRAME = "stack_frame"
UNKNOWN = "unknown"
TAGS = (PKT_BUFF, PKT_DATA_START, PKT_DATA_END, CONST, REF_MAP, STACK_FRAME, UNKNOWN)

HELPER_LOOKUP, HELPER_UPDATE, HELPER_DELETE, HELPER_REDIRECT_MAP = 1, 2, 3, 51
CORRELATING_HELPERS = (HELPER_LOOKUP, HELPER_UPDATE, HELPER_DELETE, HELPER_REDIRECT_MAP)

U64 = (1 << 64) - 1
U32 = (1 << 32) - 1


class TaggedCell(NamedTuple):
    tag: str
    value: int | None = None
    field: str | None = None


TOP = TaggedCell(UNKNOWN)


class ContextItem(NamedTuple):
    kind: str
    payload: tuple


@dataclass(frozen=True)
class AbstractState:
    R: tuple
    M: dict = field(hash=False)
    curr_proto: str
    next_proto: tuple | None       # (proto, dispatch field) awaiting a commit
    proto_base: int
    layers: tuple                  # ((proto, base), ...) committed so far
    root_confirmed: bool
    path_ctx: tuple

    def with_(self, **changes) -> "AbstractState":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return AbstractState(**values)

    def set_reg(self, reg: int, cell: TaggedCell) -> "AbstractState":
        regs = list(self.R)
        regs[reg] = cell
        return self.with_(R=tuple(regs))


def init_state(nf: NfObject, spec: NetSpec) -> AbstractState:
    root = spec.hook(nf.hook).root
    regs = [TOP] * 11
    regs[1] = TaggedCell(PKT_BUFF)
    regs[10] = TaggedCell(STACK_FRAME, 0)
    return AbstractState(tuple(regs), {}, root, None, 0, ((root, 0),), False, ())


# -- arithmetic ---------------------------------------------------------------

def _signed(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


def _bswap(value: int, width: int) -> int:
    return int.from_bytes((value & ((1 << width) - 1)).to_bytes(width // 8, "little"), "big")


def alu_value(name: str, a: int, b: int, is64: bool, signed_div: bool = False) -> int:
    """Concrete result of ``a <op> b`` with eBPF wrap-around semantics."""
    bits = 64 if is64 else 32
    mask = U64 if is64 else U32
    ua, ub = a & mask, b & mask
    if name == "add":
        r = ua + ub
    elif name == "sub":
        r = ua - ub
    elif name == "mul":
        r = ua * ub
    elif name == "div":
        if ub == 0:
            r = 0
        elif signed_div:
            sa, sb = _signed(ua, bits), _signed(ub, bits)
            q = abs(sa) // abs(sb)
            r = q if (sa < 0) == (sb < 0) else -q
        else:
            r = ua // ub
    elif name == "mod":
        if ub == 0:
            r = ua
        elif signed_div:
            sa, sb = _signed(ua, bits), _signed(ub, bits)
            r = abs(sa) % abs(sb)
            r = -r if sa < 0 else r
        else:
            r = ua % ub
    elif name == "or":
        r = ua | ub
    elif name == "and":
        r = ua & ub
    elif name == "xor":
        r = ua ^ ub
    elif name == "lsh":
        r = ua << (ub & (bits - 1))
    elif name == "rsh":
        r = ua >> (ub & (bits - 1))
    elif name == "arsh":
        r = _signed(ua, bits) >> (ub & (bits - 1))
    else:
        raise ValueError(name)
    r &= mask
    return _signed(r, 64) if is64 else r


def _unary_value(insn: Instruction, a: int) -> int:
    name = isa.ALU_OPS[insn.op]
    if name == "neg":
        if insn.is64:
            return _signed(-a, 64)
        return -a & U32
    width = insn.imm
    if insn.cls == isa.ALU64 or insn.uses_reg:
        r = _bswap(a, width)
    else:
        r = a & ((1 << width) - 1)
    return _signed(r, 64) if width == 64 else r


def _truncate(cell: TaggedCell) -> TaggedCell:
    if cell.tag == CONST and cell.value is not None:
        return TaggedCell(CONST, cell.value & U32, cell.field)
    return cell


# -- transfer functions -------------------------------------------------------

class _Ctx:
    """Per-NF lookups shared by all steps."""

    __slots__ = ("nf", "spec", "hook", "buffer", "data_off", "end_off", "data_field")

    def __init__(self, nf: NfObject, spec: NetSpec):
        self.nf = nf
        self.spec = spec
        self.hook = nf.hook
        self.buffer = spec.hook(nf.hook).buffer
        self.data_off = spec.buff_offset(self.buffer, "data")
        self.end_off = spec.buff_offset(self.buffer, "data_end")
        self.data_field = f"{self.buffer}.{spec.buffer(self.buffer).data}"


def _confirm_root(state: AbstractState, ctx: _Ctx, items: list) -> AbstractState:
    if state.root_confirmed:
        return state
    root = state.layers[0][0]
    items.append(ContextItem("proto_accessed", (ctx.data_field, root)))
    return state.with_(root_confirmed=True, path_ctx=state.path_ctx + (("proto", root),))


def _commit(state: AbstractState, ctx: _Ctx, items: list) -> AbstractState:
    proto, via = state.next_proto
    base = state.proto_base + ctx.spec.header_len(state.curr_proto)
    items.append(ContextItem("proto_accessed", (via, proto)))
    return state.with_(curr_proto=proto, next_proto=None, proto_base=base,
                       layers=state.layers + ((proto, base),),
                       path_ctx=state.path_ctx + (("proto", proto),))


def _header_field(state: AbstractState, abs_off: int, ctx: _Ctx, items: list):
    """Name the header byte at ``abs_off`` from packet start, committing lazily."""
    spec = ctx.spec
    state = _confirm_root(state, ctx, items)
    end = state.proto_base + spec.header_len(state.curr_proto)
    if abs_off >= end and state.next_proto is not None:
        state = _commit(state, ctx, items)
    for proto, base in reversed(state.layers):
        if base <= abs_off < base + spec.header_len(proto):
            return state, spec.hdr_field_name(proto, abs_off - base)
    if abs_off >= state.proto_base:
        return state, spec.hdr_field_name(state.curr_proto, abs_off - state.proto_base)
    root = state.layers[0][0]
    return state, spec.hdr_field_name(root, abs_off)


def _stack_index(cell: TaggedCell, off: int, width: int, insn: Instruction) -> int:
    idx = STACK_SIZE + cell.value + off
    if idx < 0 or idx + width > STACK_SIZE:
        raise StackOutOfRange(
            f"stack access at frame offset {cell.value + off} (width {width})", index=insn.index)
    return idx


def _stack_store(M: dict, idx: int, width: int, cell: TaggedCell) -> dict:
    out = {b: (c, w) for b, (c, w) in M.items() if b + w <= idx or idx + width <= b}
    out[idx] = (cell, width)
    return out


def _stack_load(M: dict, idx: int, width: int) -> TaggedCell:
    hit = M.get(idx)
    if hit is not None and hit[1] == width:
        return hit[0]
    return TOP


def _deref(state: AbstractState, reg: int) -> TaggedCell:
    """The cell a helper argument refers to: itself, or what it points at on the stack."""
    cell = state.R[reg]
    if cell.tag == STACK_FRAME and cell.value is not None:
        idx = STACK_SIZE + cell.value
        if 0 <= idx < STACK_SIZE and idx in state.M:
            return state.M[idx][0]
    return cell


def _alu(state: AbstractState, insn: Instruction) -> AbstractState:
    if insn.is_atomic:
        return _atomic(state, insn)
    name = isa.ALU_OPS[insn.op]
    dst = state.R[insn.dst_reg]
    if name in ("neg", "end"):
        if dst.tag == CONST and dst.value is not None:
            return state.set_reg(insn.dst_reg, TaggedCell(CONST, _unary_value(insn, dst.value)))
        if dst.tag == CONST and dst.field is not None:
            return state.set_reg(insn.dst_reg, TaggedCell(CONST, None, dst.field))
        return state.set_reg(insn.dst_reg, TOP)

    src = state.R[insn.src_reg] if insn.uses_reg else TaggedCell(CONST, insn.imm)
    known_src = src.tag == CONST and src.value is not None
    known_dst = dst.tag == CONST and dst.value is not None
    if insn.is64 and name in ("add", "sub") and dst.tag in (PKT_DATA_START, STACK_FRAME) and known_src:
        delta = src.value if name == "add" else -src.value
        off = dst.value + delta
        if dst.tag == PKT_DATA_START and off < 0:
            return state.set_reg(insn.dst_reg, TOP)
        return state.set_reg(insn.dst_reg, TaggedCell(dst.tag, off))
    if insn.is64 and name == "add" and known_dst and src.tag in (PKT_DATA_START, STACK_FRAME):
        off = src.value + dst.value
        if src.tag == PKT_DATA_START and off < 0:
            return state.set_reg(insn.dst_reg, TOP)
        return state.set_reg(insn.dst_reg, TaggedCell(src.tag, off))
    if known_dst and known_src:
        value = alu_value(name, dst.value, src.value, insn.is64, insn.offset == 1)
        return state.set_reg(insn.dst_reg, TaggedCell(CONST, value))
    if dst.tag == CONST and dst.value is None and dst.field is not None and known_src:
        return state.set_reg(insn.dst_reg, TaggedCell(CONST, None, dst.field))
    return state.set_reg(insn.dst_reg, TOP)


def _atomic(state: AbstractState, insn: Instruction) -> AbstractState:
    dst = state.R[insn.dst_reg]
    if dst.tag == STACK_FRAME:
        idx = _stack_index(dst, insn.offset, insn.width, insn)
        state = state.with_(M=_stack_store(state.M, idx, insn.width, TOP))
    if insn.imm == isa.ATOMIC_CODES["cmpxchg"]:
        state = state.set_reg(0, TOP)
    elif insn.imm & isa.ATOMIC_FETCH:
        state = state.set_reg(insn.src_reg, TOP)
    return state


def _mov(state: AbstractState, insn: Instruction) -> AbstractState:
    if insn.opcode == isa.LDDW:
        return state.set_reg(insn.dst_reg, TaggedCell(CONST, insn.imm64))
    if insn.uses_reg:
        cell = state.R[insn.src_reg]
    else:
        cell = TaggedCell(CONST, insn.imm)
    if insn.cls == isa.ALU:
        cell = _truncate(cell)
    return state.set_reg(insn.dst_reg, cell)


def _load(state: AbstractState, insn: Instruction, ctx: _Ctx, items: list) -> AbstractState:
    src = state.R[insn.src_reg]
    if src.tag == PKT_BUFF:
        name = ctx.spec.buff_field(ctx.buffer, insn.offset)
        items.append(ContextItem("read_buff", (name,)))
        if insn.offset == ctx.data_off:
            cell = TaggedCell(PKT_DATA_START, 0)
        elif insn.offset == ctx.end_off:
            cell = TaggedCell(PKT_DATA_END)
        else:
            cell = TaggedCell(CONST, None, name)
        return state.set_reg(insn.dst_reg, cell)
    if src.tag == PKT_DATA_START:
        state, name = _header_field(state, src.value + insn.offset, ctx, items)
        items.append(ContextItem("read_hdr", (name,)))
        return state.set_reg(insn.dst_reg, TaggedCell(CONST, None, name))
    if src.tag == STACK_FRAME:
        idx = _stack_index(src, insn.offset, insn.width, insn)
        return state.set_reg(insn.dst_reg, _stack_load(state.M, idx, insn.width))
    if src.tag == REF_MAP:
        return state.set_reg(insn.dst_reg, TaggedCell(REF_MAP, src.value))
    return state.set_reg(insn.dst_reg, TOP)


def _store(state: AbstractState, insn: Instruction, ctx: _Ctx, items: list) -> AbstractState:
    dst = state.R[insn.dst_reg]
    if insn.cls == isa.STX:
        value = state.R[insn.src_reg]
    else:
        value = TaggedCell(CONST, insn.imm)
    if dst.tag == PKT_BUFF:
        name = ctx.spec.buff_field(ctx.buffer, insn.offset)
        items.append(ContextItem("write_buff", (name, value.value if value.tag == CONST else None)))
    elif dst.tag == PKT_DATA_START:
        state, name = _header_field(state, dst.value + insn.offset, ctx, items)
        items.append(ContextItem("write_hdr", (name, value.value if value.tag == CONST else None)))
    elif dst.tag == STACK_FRAME:
        idx = _stack_index(dst, insn.offset, insn.width, insn)
        state = state.with_(M=_stack_store(state.M, idx, insn.width, value))
    return state


def _call(state: AbstractState, insn: Instruction, ctx: _Ctx, items: list) -> AbstractState:
    helper = insn.imm
    items.append(ContextItem("helper", (ctx.spec.helper_name(helper),)))
    r1 = state.R[1]
    result = TOP
    if r1.tag == REF_MAP:
        mapname = ctx.nf.map_name(r1.value)
        if helper == HELPER_LOOKUP:
            items.append(ContextItem("map_read", (mapname,)))
            result = TaggedCell(REF_MAP, r1.value)
        elif helper == HELPER_UPDATE:
            value = _deref(state, 3)
            fld = value.field if value.tag == CONST and value.field else "unknown"
            items.append(ContextItem("map_write", (mapname, fld)))
        if helper in CORRELATING_HELPERS:
            key = _deref(state, 2)
            if key.tag == REF_MAP:
                items.append(ContextItem("correlated_maps", (ctx.nf.map_name(key.value), mapname)))
    regs = list(state.R)
    regs[0] = result
    for r in range(1, 6):
        regs[r] = TOP
    return state.with_(R=tuple(regs))


def _exit(state: AbstractState, ctx: _Ctx, items: list) -> AbstractState:
    r0 = state.R[0]
    code = r0.value if r0.tag == CONST and r0.value is not None else None
    action = ctx.spec.action_name(ctx.hook, code)
    items.append(ContextItem("pkt_action", (ctx.hook, action, state.path_ctx)))
    return state


def _step(state: AbstractState, insn: Instruction, ctx: _Ctx) -> tuple[AbstractState, list]:
    items: list = []
    kind = insn.kind
    if kind == "alu":
        state = _alu(state, insn)
    elif kind == "mov":
        state = _mov(state, insn)
    elif kind == "load_map_fd":
        state = state.set_reg(insn.dst_reg, TaggedCell(REF_MAP, insn.index))
    elif kind == "load_mem":
        state = _load(state, insn, ctx, items)
    elif kind == "store_mem":
        state = _store(state, insn, ctx, items)
    elif kind == "call":
        state = _call(state, insn, ctx, items)
    elif kind == "exit":
        state = _exit(state, ctx, items)
    return state, items


def step(state: AbstractState, insn: Instruction, nf: NfObject, spec: NetSpec):
    """Apply the transfer function of one instruction; returns (state, items)."""
    return _step(state, insn, _Ctx(nf, spec))


# -- branch edges -------------------------------------------------------------

# (op, taken) -> relation that holds on that edge
_RELATION = {
    ("eq", True): "==", ("eq", False): "!=",
    ("ne", True): "!=", ("ne", False): "==",
    ("gt", True): ">", ("gt", False): "<=",
    ("ge", True): ">=", ("ge", False): "<",
    ("lt", True): "<", ("lt", False): ">=",
    ("le", True): "<=", ("le", False): ">",
    ("sgt", True): ">", ("sgt", False): "<=",
    ("sge", True): ">=", ("sge", False): "<",
    ("slt", True): "<", ("slt", False): ">=",
    ("sle", True): "<=", ("sle", False): ">",
    ("set", True): "&", ("set", False): "!&",
}

# ops whose taken edge means "start pointer is within bounds" when dst is the start
_IN_BOUNDS_TAKEN = {"lt", "le", "slt", "sle"}
_OUT_OF_BOUNDS_TAKEN = {"gt", "ge", "sgt", "sge"}


def _tail_match(state: AbstractState, fld: str, value: int, spec: NetSpec):
    """Next protocol selected by ``fld == value``, trying network byte order too."""
    proto = fld.split(".", 1)[0]
    if proto != state.curr_proto or not spec.is_tail_field(proto, fld):
        return None, value
    nxt = spec.next_proto(proto, fld, value)
    if nxt is not None:
        return nxt, value
    width = spec.field_width(fld)
    if width in (2, 4) and 0 <= value < (1 << (8 * width)):
        swapped = _bswap(value, 8 * width)
        nxt = spec.next_proto(proto, fld, swapped)
        if nxt is not None:
            return nxt, swapped
    return None, value


def edge(state: AbstractState, insn: Instruction, taken: bool, ctx: _Ctx):
    """State and items for one outgoing edge of a conditional jump."""
    items: list = []
    op = isa.JMP_OPS[insn.op]
    dst = state.R[insn.dst_reg]
    src = state.R[insn.src_reg] if insn.uses_reg else TaggedCell(CONST, insn.imm)

    pair = (dst.tag, src.tag)
    if pair in ((PKT_DATA_START, PKT_DATA_END), (PKT_DATA_END, PKT_DATA_START)):
        if op in _IN_BOUNDS_TAKEN or op in _OUT_OF_BOUNDS_TAKEN:
            in_bounds_taken = op in _IN_BOUNDS_TAKEN
            if pair[0] == PKT_DATA_END:
                in_bounds_taken = not in_bounds_taken
            if taken == in_bounds_taken:
                start = dst if dst.tag == PKT_DATA_START else src
                state = _bounds_ok(state, start.value, ctx, items)
        return state, items

    if dst.tag != CONST or dst.field is None or dst.value is not None:
        return state, items
    relation = _RELATION.get((op, taken))
    if relation is None:
        return state, items
    if src.tag == CONST and src.value is not None:
        value = src.value
        if relation == "==":
            nxt, value = _tail_match(state, dst.field, value, ctx.spec)
            if nxt is not None:
                state = state.with_(next_proto=(nxt, dst.field))
            recorded = value
        else:
            if relation == "!=":
                value = _tail_match(state, dst.field, value, ctx.spec)[1]
            recorded = f"{relation}{value}"
    elif src.tag == CONST and src.field is not None:
        recorded = f"{relation}{src.field}"
    else:
        return state, items
    return state.with_(path_ctx=state.path_ctx + ((dst.field, recorded),)), items


def _bounds_ok(state: AbstractState, checked: int, ctx: _Ctx, items: list) -> AbstractState:
    if not state.root_confirmed:
        return _confirm_root(state, ctx, items)
    end = state.proto_base + ctx.spec.header_len(state.curr_proto)
    if state.next_proto is not None and checked > end:
        return _commit(state, ctx, items)
    return state


# -- whole-program analysis ---------------------------------------------------

@dataclass
class PathAction:
    hook: str
    action: str
    path: tuple
    context: tuple


@dataclass
class CfgNc:
    nf_id: str
    cfg: Cfg
    block_ctx: dict[str, set]
    path_actions: list[PathAction]

    def items(self, kind: str | None = None):
        for bid in sorted(self.block_ctx, key=_block_order):
            for item in sorted(self.block_ctx[bid], key=_item_key):
                if kind is None or item.kind == kind:
                    yield bid, item

    def to_json(self) -> str:
        doc = {
            "nf_id": self.nf_id,
            "blocks": [{"id": b.id, "range": [b.first, b.last], "successors": list(b.successors)}
                       for b in self.cfg.blocks],
            "edges": [list(e) for e in self.cfg.edges],
            "block_ctx": {
                bid: [[it.kind, _jsonable(it.payload)] for it in sorted(items, key=_item_key)]
                for bid, items in sorted(self.block_ctx.items(), key=lambda kv: _block_order(kv[0]))
            },
            "path_actions": [
                {"hook": pa.hook, "action": pa.action, "path": list(pa.path),
                 "context": _jsonable(pa.context)}
                for pa in self.path_actions
            ],
        }
        return json.dumps(doc, indent=2) + "\n"


def _block_order(bid: str) -> int:
    return int(bid.rsplit("_", 1)[1])


def _atom_key(x):
    if isinstance(x, tuple):
        return (2, tuple(_atom_key(y) for y in x))
    if x is None:
        return (0, 0)
    if isinstance(x, int):
        return (0, x)
    return (1, x)


def _item_key(item: ContextItem):
    return (item.kind, _atom_key(item.payload))


def _jsonable(x):
    if isinstance(x, tuple):
        return [_jsonable(y) for y in x]
    return x


def analyze_nf(nf: NfObject, spec: NetSpec, budget: int | None = None) -> CfgNc:
    if budget is None:
        budget = path_budget()
    cfg = build_cfg(nf.instructions)
    ctx = _Ctx(nf, spec)
    block_ctx: dict[str, set] = {b.id: set() for b in cfg.blocks}
    actions: list[PathAction] = []

    # stack entries: (block id, state on entry, items from the incoming edge, path so far)
    stack = [(cfg.entry, init_state(nf, spec), (), ())]
    while stack:
        bid, state, incoming, path = stack.pop()
        block = cfg[bid]
        path = path + (bid,)
        bucket = block_ctx[bid]
        bucket.update(incoming)
        state = state.with_(path_ctx=state.path_ctx + (("bb", bid),))
        for insn in block.insns:
            try:
                state, items = _step(state, insn, ctx)
            except AnalysisError as exc:
                exc.path, exc.block = list(path), bid
                exc.args = (f"{exc} in {nf.nf_id} block {bid}",)
                raise
            bucket.update(items)
            for item in items:
                if item.kind == "pkt_action":
                    if len(actions) >= budget:
                        raise PathBudgetExceeded(budget)
                    hook, action, pctx = item.payload
                    actions.append(PathAction(hook, action, path, pctx))
        term = block.terminator
        succ = block.successors
        if term.kind == "jump_cond" and len(succ) == 2:
            taken_state, taken_items = edge(state, term, True, ctx)
            fall_state, fall_items = edge(state, term, False, ctx)
            stack.append((succ[1], fall_state, tuple(fall_items), path))
            stack.append((succ[0], taken_state, tuple(taken_items), path))
        else:
            for s in reversed(succ):
                stack.append((s, state, (), path))
    return CfgNc(nf.nf_id, cfg, block_ctx, actions)
