"""Ground facts, the knowledge base and its canonical text form."""

from __future__ import annotations

import re
from collections import defaultdict
from typing import Iterable, NamedTuple, Sequence

from .analyzer import CfgNc
from .errors import DuplicateNfId, KbParseError

ARITY = {
    "read_buffer_field": 3,
    "read_header_field": 3,
    "write_buffer_field": 3,
    "write_header_field": 3,
    "read_from_map": 3,
    "write_into_map": 4,
    "correlated_maps": 4,
    "invoke_helper": 3,
    "protocol_accessed": 4,
    "return_action": 4,
    "edge": 3,
    "nf_edge": 2,
}

# context item kind -> fact predicate, and how many payload atoms it keeps
ITEM_FACT = {
    "read_buff": ("read_buffer_field", 1),
    "read_hdr": ("read_header_field", 1),
    "write_buff": ("write_buffer_field", 1),
    "write_hdr": ("write_header_field", 1),
    "map_read": ("read_from_map", 1),
    "map_write": ("write_into_map", 2),
    "correlated_maps": ("correlated_maps", 2),
    "helper": ("invoke_helper", 1),
    "proto_accessed": ("protocol_accessed", 2),
}


class Fact(NamedTuple):
    pred: str
    args: tuple

    def __str__(self) -> str:
        return f"{self.pred}({','.join(format_atom(a) for a in self.args)})."


def emit_facts(cfgnc: CfgNc, nf_id: str | None = None) -> list[Fact]:
    nf_id = nf_id or cfgnc.nf_id
    out: list[Fact] = []
    for bid, item in cfgnc.items():
        mapped = ITEM_FACT.get(item.kind)
        if mapped is None:
            continue
        pred, keep = mapped
        out.append(Fact(pred, (nf_id, bid) + tuple(item.payload[:keep])))
    for pa in cfgnc.path_actions:
        out.append(Fact("return_action", (nf_id, pa.hook, pa.action, tuple(pa.context))))
    for src, dst in cfgnc.cfg.edges:
        out.append(Fact("edge", (nf_id, src, dst)))
    return list(dict.fromkeys(out))


def emit_chain_facts(order: Sequence[str]) -> list[Fact]:
    seen = set()
    for nf in order:
        if nf in seen:
            raise DuplicateNfId(f"{nf!r} appears twice in the chain")
        seen.add(nf)
    return [Fact("nf_edge", (a, b)) for a, b in zip(order, order[1:])]


class KnowledgeBase:
    """A set of facts with lazily built argument indexes."""

    def __init__(self, facts: Iterable[Fact] = ()):
        self._facts: set[Fact] = set()
        self._by_pred: dict[str, list[Fact]] = defaultdict(list)
        self._index: dict[tuple, dict[tuple, list[Fact]]] = {}
        for f in facts:
            self.add(f)

    def add(self, fact: Fact) -> None:
        arity = ARITY.get(fact.pred)
        if arity is not None and len(fact.args) != arity:
            raise ValueError(f"{fact.pred} takes {arity} arguments, got {len(fact.args)}")
        if fact in self._facts:
            return
        self._facts.add(fact)
        self._by_pred[fact.pred].append(fact)
        self._index.clear()

    def extend(self, facts: Iterable[Fact]) -> None:
        for f in facts:
            self.add(f)

    def __len__(self) -> int:
        return len(self._facts)

    def __contains__(self, fact) -> bool:
        return fact in self._facts

    def __iter__(self):
        return iter(sorted(self._facts, key=fact_key))

    @property
    def facts(self) -> frozenset:
        return frozenset(self._facts)

    def predicates(self) -> set[str]:
        return set(self._by_pred)

    def lookup(self, pred: str, bound: dict[int, object] | None = None) -> list[Fact]:
        """Facts of ``pred`` whose argument at each bound position equals the given atom."""
        rows = self._by_pred.get(pred)
        if not rows:
            return []
        if not bound:
            return rows
        positions = tuple(sorted(bound))
        key = (pred, positions)
        index = self._index.get(key)
        if index is None:
            index = defaultdict(list)
            for f in rows:
                if len(f.args) > positions[-1]:
                    index[tuple(f.args[p] for p in positions)].append(f)
            self._index[key] = index
        return index.get(tuple(bound[p] for p in positions), [])


# -- text form ----------------------------------------------------------------

def _atom_key(atom):
    if isinstance(atom, tuple):
        return (2, tuple(_atom_key(a) for a in atom))
    if isinstance(atom, int):
        return (0, atom)
    return (1, atom)


def fact_key(fact: Fact):
    return (fact.pred, tuple(_atom_key(a) for a in fact.args))


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def format_atom(atom) -> str:
    if isinstance(atom, bool):
        raise TypeError("booleans are not atoms")
    if isinstance(atom, int):
        return str(atom)
    if isinstance(atom, str):
        return _quote(atom)
    if isinstance(atom, tuple):
        if all(isinstance(a, tuple) and len(a) == 2 for a in atom):
            return "[" + ",".join(f"({format_atom(k)},{format_atom(v)})" for k, v in atom) + "]"
    raise TypeError(f"cannot format {atom!r}")


def serialize_kb(kb: KnowledgeBase | Iterable[Fact]) -> str:
    facts = sorted(set(kb), key=fact_key)
    return "".join(str(f) + "\n" for f in facts)


_TOKEN = re.compile(r'\s*(?:(?P<str>"(?:[^"\\]|\\.)*")|(?P<int>-?\d+)|(?P<name>[a-z_][a-zA-Z0-9_]*)|(?P<sym>[(),\[\].]))')


class _Reader:
    def __init__(self, text: str, line: int):
        self.text = text
        self.pos = 0
        self.line = line

    def next(self):
        m = _TOKEN.match(self.text, self.pos)
        if not m:
            rest = self.text[self.pos:].strip()
            if not rest:
                raise KbParseError("unexpected end of line", self.line)
            raise KbParseError(f"unexpected {rest[:20]!r}", self.line)
        self.pos = m.end()
        kind = m.lastgroup
        tok = m.group(kind)
        if kind == "str":
            return "atom", _unquote(tok)
        if kind == "int":
            return "atom", int(tok)
        return kind, tok

    def expect(self, sym: str):
        kind, tok = self.next()
        if kind != "sym" or tok != sym:
            raise KbParseError(f"expected {sym!r}, got {tok!r}", self.line)

    def atom(self):
        kind, tok = self.next()
        if kind == "atom":
            return tok
        if kind == "sym" and tok == "[":
            pairs = []
            kind, tok = self.next()
            if (kind, tok) == ("sym", "]"):
                return ()
            while True:
                if (kind, tok) != ("sym", "("):
                    raise KbParseError(f"expected '(' in pair list, got {tok!r}", self.line)
                k = self.atom()
                self.expect(",")
                v = self.atom()
                self.expect(")")
                pairs.append((k, v))
                kind, tok = self.next()
                if (kind, tok) == ("sym", "]"):
                    return tuple(pairs)
                if (kind, tok) != ("sym", ","):
                    raise KbParseError(f"expected ',' or ']', got {tok!r}", self.line)
                kind, tok = self.next()
        raise KbParseError(f"expected an atom, got {tok!r}", self.line)


def _unquote(tok: str) -> str:
    body = tok[1:-1]
    return re.sub(r"\\(.)", lambda m: "\n" if m.group(1) == "n" else m.group(1), body)


def parse_fact(line: str, lineno: int | None = None) -> Fact:
    r = _Reader(line, lineno)
    kind, pred = r.next()
    if kind != "name":
        raise KbParseError(f"expected a predicate name, got {pred!r}", lineno)
    r.expect("(")
    args = [r.atom()]
    while True:
        kind, tok = r.next()
        if (kind, tok) == ("sym", ")"):
            break
        if (kind, tok) != ("sym", ","):
            raise KbParseError(f"expected ',' or ')', got {tok!r}", lineno)
        args.append(r.atom())
    r.expect(".")
    if line[r.pos:].strip():
        raise KbParseError("trailing text after '.'", lineno)
    arity = ARITY.get(pred)
    if arity is not None and arity != len(args):
        raise KbParseError(f"{pred} takes {arity} arguments, got {len(args)}", lineno)
    return Fact(pred, tuple(args))


def parse_kb(text: str) -> KnowledgeBase:
    kb = KnowledgeBase()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("%"):
            continue
        kb.add(parse_fact(line, lineno))
    return kb
