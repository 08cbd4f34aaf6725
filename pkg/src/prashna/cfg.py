"""Basic blocks, the control-flow graph and path enumeration."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .errors import CycleDetected, JumpOutOfRange, PathBudgetExceeded
from .isa import Instruction

DEFAULT_PATH_BUDGET = 1_000_000


def path_budget() -> int:
    value = os.environ.get("PRASHNA_PATH_BUDGET")
    return int(value) if value else DEFAULT_PATH_BUDGET


@dataclass
class BasicBlock:
    id: str
    first: int
    last: int
    insns: list[Instruction] = field(repr=False)
    successors: list[str] = field(default_factory=list)

    @property
    def range(self) -> tuple[int, int]:
        return self.first, self.last

    @property
    def terminator(self) -> Instruction:
        return self.insns[-1]


@dataclass
class Cfg:
    blocks: list[BasicBlock]
    entry: str
    exits: list[str]
    by_id: dict[str, BasicBlock] = field(init=False, repr=False)
    topo: list[str] = field(init=False, repr=False, default_factory=list)

    def __post_init__(self):
        self.by_id = {b.id: b for b in self.blocks}

    def __getitem__(self, block_id: str) -> BasicBlock:
        return self.by_id[block_id]

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(b.id, s) for b in self.blocks for s in b.successors]

    def to_dot(self) -> str:
        lines = ["digraph cfg {"]
        for b in self.blocks:
            lines.append(f'  {b.id} [label="{b.id}\\n{b.first}..{b.last}"];')
        for src, dst in self.edges:
            lines.append(f"  {src} -> {dst};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _jump_target(insn: Instruction, slots: dict[int, int]) -> int:
    target = insn.target
    if target not in slots:
        raise JumpOutOfRange(f"jump at {insn.index} lands on slot {target}, not an instruction")
    return target


def build_cfg(insns: Sequence[Instruction]) -> Cfg:
    if not insns:
        raise ValueError("empty program")
    # slot index -> position in insns
    slots = {insn.index: pos for pos, insn in enumerate(insns)}
    leaders = {insns[0].index}
    for pos, insn in enumerate(insns):
        if insn.kind in ("jump_cond", "jump_uncond"):
            leaders.add(_jump_target(insn, slots))
            if pos + 1 < len(insns):
                leaders.add(insns[pos + 1].index)
        elif insn.kind == "exit" and pos + 1 < len(insns):
            leaders.add(insns[pos + 1].index)

    blocks: list[BasicBlock] = []
    start = 0
    for pos in range(1, len(insns) + 1):
        if pos == len(insns) or insns[pos].index in leaders:
            chunk = list(insns[start:pos])
            blocks.append(BasicBlock(f"node_{len(blocks)}", chunk[0].index, chunk[-1].index, chunk))
            start = pos
    block_at = {b.first: b.id for b in blocks}

    exits = []
    for k, b in enumerate(blocks):
        last = b.terminator
        fall = blocks[k + 1].id if k + 1 < len(blocks) else None
        if last.kind == "exit":
            exits.append(b.id)
            continue
        if last.kind == "jump_uncond":
            succ = [block_at[last.target]]
        elif last.kind == "jump_cond":
            if fall is None:
                raise JumpOutOfRange(f"conditional jump at {last.index} falls off the end")
            succ = [block_at[last.target], fall]
        else:
            if fall is None:
                raise JumpOutOfRange(f"program falls off the end after {last.index}")
            succ = [fall]
        b.successors = list(dict.fromkeys(succ))

    cfg = Cfg(blocks, blocks[0].id, exits)
    cfg.topo = _topological(cfg)
    return cfg


def _topological(cfg: Cfg) -> list[str]:
    """Reverse postorder over all blocks; raises on the first back edge."""
    state: dict[str, int] = {}
    post: list[str] = []
    for root in cfg.blocks:
        if root.id in state:
            continue
        state[root.id] = 1
        stack = [(root.id, iter(root.successors))]
        while stack:
            node, it = stack[-1]
            for s in it:
                mark = state.get(s)
                if mark == 1:
                    raise CycleDetected(node, s)
                if mark is None:
                    state[s] = 1
                    stack.append((s, iter(cfg[s].successors)))
                    break
            else:
                state[node] = 2
                post.append(node)
                stack.pop()
    return post[::-1]


def enumerate_paths(cfg: Cfg, budget: int | None = None) -> Iterator[list[str]]:
    """Lazily yield every entry-to-exit path, taken branch first."""
    if budget is None:
        budget = path_budget()
    produced = 0
    stack: list[tuple[str, int]] = [(cfg.entry, 0)]
    path = [cfg.entry]
    while stack:
        node, nxt = stack[-1]
        succ = cfg[node].successors
        if not succ:
            produced += 1
            if produced > budget:
                raise PathBudgetExceeded(budget)
            yield list(path)
        if nxt < len(succ):
            stack[-1] = (node, nxt + 1)
            stack.append((succ[nxt], 0))
            path.append(succ[nxt])
        else:
            stack.pop()
            path.pop()


def count_paths(cfg: Cfg) -> int:
    """Number of entry-to-exit paths, by dynamic programming over the DAG."""
    counts: dict[str, int] = {}
    for node in reversed(cfg.topo or _topological(cfg)):
        succ = cfg[node].successors
        counts[node] = 1 if not succ else sum(counts[s] for s in succ)
    return counts[cfg.entry]
