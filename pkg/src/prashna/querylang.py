"""Parser, printer and classifier for the query language.

A query is a list of predicates joined by ``,`` (and) and ``;`` (or), ended
by ``.``.  ``,`` binds tighter than ``;``; parentheses group, and ``!``
negates the predicate or group right after it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

from .errors import ArityError, QuerySyntaxError, UnknownPredicate

# built-in predicate -> accepted arities
BUILTINS: dict[str, frozenset[int]] = {
    "readsField": frozenset({2}),
    "updatesField": frozenset({2}),
    "passes": frozenset({3}),
    "drops": frozenset({3}),
    "aborts": frozenset({3}),
    "redirects": frozenset({3}),
    "tx": frozenset({3}),
    "all": frozenset({3}),
    "mapLookup": frozenset({2}),
    "mapWrite": frozenset({3}),
    "correlatedMaps": frozenset({2, 3}),
    "successorNF": frozenset({2}),
    "predecessorNF": frozenset({2}),
    "accessesProtocol": frozenset({3}),
    "callsHelper": frozenset({2}),
}

PACKET_ACTIONS = ("passes", "drops", "aborts", "redirects", "tx", "all")

ANONYMOUS_NAMES = ("_", "var", "val")

CMP_OPS = (">=", "<=", ">", "<")


# -- AST ----------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: Union[str, int]


@dataclass(frozen=True)
class Var:
    name: str
    anonymous: bool = False


@dataclass(frozen=True)
class Wildcard:
    pass


@dataclass(frozen=True)
class NegConst:
    value: Union[str, int]


@dataclass(frozen=True)
class Cmp:
    op: str
    value: Union[str, int]


@dataclass(frozen=True)
class PairList:
    """Pairs grouped as an OR of AND-groups."""
    groups: tuple


Term = Union[Const, Var, Wildcard, NegConst, Cmp, PairList]


@dataclass(frozen=True)
class Literal:
    pred: str
    args: tuple
    negated: bool = False


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    expr: object


Expr = Union[Literal, And, Or, Not]


@dataclass(frozen=True)
class Query:
    body: Expr

    def __str__(self) -> str:
        return format_query(self)


# -- tokens -------------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+|\#[^\n]*)
  | (?P<str>"(?:[^"\\]|\\.)*"|“[^”]*”|‘[^’]*’)
  | (?P<ip>\d+\.\d+\.\d+\.\d+(?:/\d+)?)
  | (?P<num>-?0[xX][0-9a-fA-F]+|-?\d+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.(?:[A-Za-z_][A-Za-z0-9_@]*|\*))*)
  | (?P<op>>=|<=|>|<)
  | (?P<sym>[!()\[\],;.*])
""", re.VERBOSE)


@dataclass(frozen=True)
class Tok:
    kind: str
    text: str
    pos: int


def tokenize(text: str) -> list[Tok]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append(Tok(kind, m.group(kind), pos))
        pos = m.end()
    out.append(Tok("eof", "", len(text)))
    return out


def _unquote(tok: str) -> str:
    if tok[0] == '"':
        return re.sub(r"\\(.)", lambda m: m.group(1), tok[1:-1])
    return tok[1:-1]


# -- parser -------------------------------------------------------------------

class _Parser:
    def __init__(self, toks: list[Tok], predicates: Mapping[str, frozenset[int]],
                 extra: Mapping[str, frozenset[int]] | None = None):
        self.toks = toks
        self.i = 0
        self.predicates = predicates
        self.extra = extra or {}
        self.anon = 0

    @property
    def tok(self) -> Tok:
        return self.toks[self.i]

    def advance(self) -> Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.tok
        return tok.kind == kind and (text is None or tok.text == text)

    def expect(self, kind: str, text: str | None = None) -> Tok:
        if not self.at(kind, text):
            want = repr(text) if text else kind
            got = self.tok.text or "end of input"
            raise QuerySyntaxError(f"unexpected {got!r}", self.tok.pos, [want])
        return self.advance()

    # query := expr '.'
    def query(self) -> Query:
        body = self.disjunction()
        if not self.at("sym", "."):
            got = self.tok.text or "end of input"
            raise QuerySyntaxError(f"unexpected {got!r}", self.tok.pos, ["'.'", "','", "';'"])
        self.advance()
        return Query(body)

    def disjunction(self) -> Expr:
        items = [self.conjunction()]
        while self.at("sym", ";"):
            self.advance()
            items.append(self.conjunction())
        return items[0] if len(items) == 1 else Or(tuple(items))

    def conjunction(self) -> Expr:
        items = [self.unit()]
        while self.at("sym", ","):
            self.advance()
            items.append(self.unit())
        return items[0] if len(items) == 1 else And(tuple(items))

    def unit(self) -> Expr:
        if self.at("sym", "!"):
            self.advance()
            inner = self.unit()
            if isinstance(inner, Literal):
                return Literal(inner.pred, inner.args, not inner.negated)
            return Not(inner)
        if self.at("sym", "("):
            self.advance()
            inner = self.disjunction()
            self.expect("sym", ")")
            return inner
        return self.literal()

    def literal(self) -> Literal:
        tok = self.tok
        if tok.kind != "name" or "." in tok.text:
            raise QuerySyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.pos,
                                   ["predicate", "'!'", "'('"])
        self.advance()
        name = tok.text
        self.expect("sym", "(")
        args = [self.term()]
        while self.at("sym", ","):
            self.advance()
            args.append(self.term())
        self.expect("sym", ")")
        arities = self.predicates.get(name)
        if arities is None:
            arities = self.extra.get(name)
        if arities is None:
            raise UnknownPredicate(f"unknown predicate {name!r} at offset {tok.pos}")
        if len(args) not in arities:
            want = " or ".join(str(a) for a in sorted(arities))
            raise ArityError(f"{name} takes {want} arguments, got {len(args)}")
        self._check_pairlists(name, args, tok.pos)
        return Literal(name, tuple(args))

    def _check_pairlists(self, name: str, args: list, pos: int) -> None:
        for k, arg in enumerate(args):
            if not isinstance(arg, PairList):
                continue
            ok = ((name in PACKET_ACTIONS and k == 2)
                  or (name == "correlatedMaps" and len(args) == 2 and k == 1)
                  or name not in BUILTINS)
            if not ok:
                raise QuerySyntaxError(f"a pair list is not allowed as argument {k + 1} of {name}", pos)

    def term(self):
        tok = self.tok
        if tok.kind == "sym" and tok.text == "*":
            self.advance()
            return Wildcard()
        if tok.kind == "sym" and tok.text == "!":
            self.advance()
            return NegConst(self.constant())
        if tok.kind == "op":
            self.advance()
            return Cmp(tok.text, self.constant())
        if tok.kind == "sym" and tok.text == "[":
            return self.pairlist()
        if tok.kind == "name" and "." not in tok.text:
            if tok.text in ANONYMOUS_NAMES:
                self.advance()
                self.anon += 1
                return Var(f"_{self.anon}", True)
            if tok.text[0].isupper() or tok.text[0] == "_":
                self.advance()
                return Var(tok.text)
        return Const(self.constant())

    def constant(self):
        tok = self.tok
        if tok.kind == "str":
            self.advance()
            return _unquote(tok.text)
        if tok.kind == "num":
            self.advance()
            return int(tok.text, 0)
        if tok.kind in ("name", "ip"):
            self.advance()
            return tok.text
        raise QuerySyntaxError(f"unexpected {tok.text or 'end of input'!r}", tok.pos, ["constant"])

    def pairlist(self) -> PairList:
        self.expect("sym", "[")
        if not self.at("sym", "("):
            # shorthand: [a, b] is the single pair (a, b)
            a = self.term()
            self.expect("sym", ",")
            b = self.term()
            self.expect("sym", "]")
            return PairList((((a, b),),))
        groups = [[self.pair()]]
        while self.at("sym", ",") or self.at("sym", ";"):
            if self.advance().text == ";":
                groups.append([])
            groups[-1].append(self.pair())
        self.expect("sym", "]")
        return PairList(tuple(tuple(g) for g in groups))

    def pair(self):
        self.expect("sym", "(")
        a = self.term()
        self.expect("sym", ",")
        b = self.term()
        self.expect("sym", ")")
        return a, b


def parse_query(text: str, predicates: Mapping[str, frozenset[int]] | None = None,
                extra: Mapping[str, frozenset[int]] | None = None) -> Query:
    p = _Parser(tokenize(text), predicates if predicates is not None else BUILTINS, extra)
    q = p.query()
    if not p.at("eof"):
        raise QuerySyntaxError(f"unexpected {p.tok.text!r} after the query", p.tok.pos, ["end of input"])
    return q


def split_queries(text: str) -> list[str]:
    """Split a file into '.'-terminated query texts (comments dropped)."""
    toks = tokenize(text)
    out, start = [], None
    depth = 0
    for tok in toks:
        if tok.kind == "eof":
            break
        if start is None:
            start = tok.pos
        if tok.kind == "sym" and tok.text in "([":
            depth += 1
        elif tok.kind == "sym" and tok.text in ")]":
            depth -= 1
        elif tok.kind == "sym" and tok.text == "." and depth == 0:
            out.append(text[start:tok.pos + 1])
            start = None
    if start is not None:
        raise QuerySyntaxError("query is missing its terminating '.'", len(text), ["'.'"])
    return [re.sub(r"#[^\n]*", "", q).strip() for q in out]


def parse_queries(text: str, predicates=None) -> list[Query]:
    return [parse_query(q, predicates) for q in split_queries(text)]


# -- analysis -----------------------------------------------------------------

def iter_terms(expr: Expr, negated: bool = False) -> Iterator[tuple[object, bool]]:
    """Yield (term, under_negation) for every argument term, flattening pair lists."""
    if isinstance(expr, Literal):
        neg = negated or expr.negated
        for arg in expr.args:
            if isinstance(arg, PairList):
                for group in arg.groups:
                    for a, b in group:
                        yield a, neg
                        yield b, neg
            else:
                yield arg, neg
    elif isinstance(expr, (And, Or)):
        for item in expr.items:
            yield from iter_terms(item, negated)
    elif isinstance(expr, Not):
        yield from iter_terms(expr.expr, True)


def answer_vars(q: Query | Expr) -> list[str]:
    """Named variables reported by a retrieval, in order of first appearance."""
    body = q.body if isinstance(q, Query) else q
    seen: dict[str, None] = {}
    for term, neg in iter_terms(body):
        if isinstance(term, Var) and not term.anonymous and not neg:
            seen.setdefault(term.name)
    return list(seen)


def classify(q: Query) -> str:
    return "retrieval" if answer_vars(q) else "assertion"


# -- printer ------------------------------------------------------------------

def _fmt_const(value) -> str:
    if isinstance(value, int):
        return str(value)
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_term(term) -> str:
    if isinstance(term, Const):
        return _fmt_const(term.value)
    if isinstance(term, Var):
        return "_" if term.anonymous else term.name
    if isinstance(term, Wildcard):
        return "*"
    if isinstance(term, NegConst):
        return "!" + _fmt_const(term.value)
    if isinstance(term, Cmp):
        return f"{term.op} {_fmt_const(term.value)}"
    if isinstance(term, PairList):
        groups = [", ".join(f"({format_term(a)}, {format_term(b)})" for a, b in g)
                  for g in term.groups]
        return "[" + "; ".join(groups) + "]"
    raise TypeError(term)


def format_expr(expr: Expr, parent: str = "or") -> str:
    if isinstance(expr, Literal):
        text = f"{expr.pred}({', '.join(format_term(a) for a in expr.args)})"
        return "!" + text if expr.negated else text
    if isinstance(expr, Not):
        return "!(" + format_expr(expr.expr, "or") + ")"
    if isinstance(expr, And):
        return ", ".join(format_expr(i, "and") for i in expr.items)
    if isinstance(expr, Or):
        text = "; ".join(format_expr(i, "or") for i in expr.items)
        return f"({text})" if parent == "and" else text
    raise TypeError(expr)


def format_query(q: Query) -> str:
    return format_expr(q.body) + "."
