"""Top-down evaluation of queries against a knowledge base."""

from __future__ import annotations

import operator
import re
import sys
from collections import Counter, defaultdict
from dataclasses import dataclass
from itertools import count
from typing import Iterator

from .errors import (
    ArityError,
    DepthExceeded,
    QuerySyntaxError,
    ShadowsBuiltin,
    UnboundNegation,
    UnknownPredicate,
    UnstratifiedNegation,
)
from .facts import ARITY, KnowledgeBase, _atom_key
from .querylang import (
    BUILTINS,
    And,
    Cmp,
    Const,
    Literal,
    NegConst,
    Not,
    Or,
    PairList,
    Query,
    Var,
    Wildcard,
    answer_vars,
    parse_query,
)

MAX_DEPTH = 200
FRAMES_PER_LEVEL = 12

ACTION_CLASSES = {
    "passes": ("XDP_PASS", "TC_ACT_OK"),
    "drops": ("XDP_DROP", "TC_ACT_SHOT"),
    "aborts": ("XDP_ABORTED",),
    "redirects": ("XDP_REDIRECT", "TC_ACT_REDIRECT"),
    "tx": ("XDP_TX",),
}

# primitives callable from rule bodies: name -> arity
PRIMITIVES = {"path_match": 2, "maps_match": 2, "action_in": 2}

_FACT_ARITIES = {name: frozenset({n}) for name, n in ARITY.items()}
_PRIM_ARITIES = {name: frozenset({n}) for name, n in PRIMITIVES.items()}


@dataclass(frozen=True)
class RuleDef:
    head: str
    params: tuple
    body: object

    @classmethod
    def parse(cls, text: str, predicates=None) -> "RuleDef":
        """Parse ``head(A, B) :- body.``; ``predicates`` lists callable heads."""
        head_text, sep, body_text = text.partition(":-")
        if not sep:
            raise QuerySyntaxError("rule needs ':-'", 0, ["':-'"])
        m = re.fullmatch(r"\s*([a-z][A-Za-z0-9_]*)\s*\(([^)]*)\)\s*", head_text)
        if not m:
            raise QuerySyntaxError("malformed rule head", 0, ["head(Var, ...)"])
        params = tuple(p.strip() for p in m.group(2).split(","))
        for p in params:
            if not re.fullmatch(r"[A-Z][A-Za-z0-9_]*", p):
                raise QuerySyntaxError(f"rule parameter {p!r} is not a variable", 0)
        table = dict(predicates or BUILTINS)
        table.setdefault(m.group(1), frozenset({len(params)}))
        body = parse_query(body_text.strip(), table, {**_FACT_ARITIES, **_PRIM_ARITIES}).body
        return cls(m.group(1), params, body)


def _builtin_rules() -> dict[str, list[RuleDef]]:
    table = dict(BUILTINS)
    src = [
        "readsField(Nf, Fld) :- read_header_field(Nf, _, Fld); read_buffer_field(Nf, _, Fld).",
        "updatesField(Nf, Fld) :- write_header_field(Nf, _, Fld); write_buffer_field(Nf, _, Fld).",
        "successorNF(Nf, SNf) :- nf_edge(Nf, SNf); nf_edge(Nf, IntNf), successorNF(IntNf, SNf).",
        "predecessorNF(Nf, PNf) :- nf_edge(PNf, Nf); nf_edge(PNf, IntNf), predecessorNF(Nf, IntNf).",
        "mapLookup(Nf, Map) :- read_from_map(Nf, _, Map).",
        "mapWrite(Nf, Map, Fld) :- write_into_map(Nf, _, Map, Fld).",
        "correlatedMaps(Nf, Map1, Map2) :- correlated_maps(Nf, _, Map1, Map2).",
        "correlatedMaps(Nf, Pairs) :- maps_match(Nf, Pairs).",
        "accessesProtocol(Nf, Fld, Val) :- protocol_accessed(Nf, _, Fld, Val).",
        "callsHelper(Nf, Helper) :- invoke_helper(Nf, _, Helper).",
        "all(Nf, Hook, Pairs) :- return_action(Nf, Hook, _, P), path_match(P, Pairs).",
    ]
    for name in ACTION_CLASSES:
        src.append(f"{name}(Nf, Hook, Pairs) :- return_action(Nf, Hook, Act, P), "
                   f"action_in(Act, {name}), path_match(P, Pairs).")
    rules: dict[str, list[RuleDef]] = {}
    for text in src:
        r = RuleDef.parse(text, table)
        rules.setdefault(r.head, []).append(r)
    return rules


_CMP = {">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt}


def _atom_matches(pattern, atom) -> bool:
    """Match a ground atom against a filter term (already substituted)."""
    if isinstance(pattern, Wildcard):
        return True
    if isinstance(pattern, Const):
        v = pattern.value
        if isinstance(v, str) and v.endswith(".*") and isinstance(atom, str):
            return atom.startswith(v[:-1])
        return atom == v
    if isinstance(pattern, NegConst):
        return atom != pattern.value
    if isinstance(pattern, Cmp):
        if isinstance(pattern.value, int) and isinstance(atom, int) and not isinstance(atom, bool):
            return _CMP[pattern.op](atom, pattern.value)
        return atom == f"{pattern.op}{pattern.value}"
    raise TypeError(pattern)


def _is_filter(term) -> bool:
    if isinstance(term, (Wildcard, NegConst, Cmp)):
        return True
    return isinstance(term, Const) and isinstance(term.value, str) and term.value.endswith(".*")


class Engine:
    """Evaluates parsed queries; holds the built-in and registered rules."""

    def __init__(self, kb: KnowledgeBase | None = None, max_depth: int = MAX_DEPTH):
        self.kb = kb if kb is not None else KnowledgeBase()
        self.max_depth = max_depth
        self.rules: dict[str, list[RuleDef]] = _builtin_rules()
        self._builtin_heads = frozenset(self.rules)
        self._fact_only: dict[tuple[str, int], bool] = {}

    # -- rule registry --------------------------------------------------------

    def predicates(self) -> dict[str, frozenset[int]]:
        out = dict(BUILTINS)
        for head, defs in self.rules.items():
            if head not in out:
                out[head] = frozenset(len(d.params) for d in defs)
        return out

    def parse(self, text: str) -> Query:
        return parse_query(text, self.predicates())

    def parse_rule(self, text: str) -> RuleDef:
        return RuleDef.parse(text, self.predicates())

    def register_rule(self, rule: RuleDef | str) -> None:
        if isinstance(rule, str):
            rule = self.parse_rule(rule)
        head = rule.head
        if head in self._builtin_heads or head in ARITY or head in PRIMITIVES:
            raise ShadowsBuiltin(f"{head} is a built-in predicate")
        existing = self.rules.get(head, [])
        if existing and len(existing[0].params) != len(rule.params):
            raise ArityError(f"{head} already has {len(existing[0].params)} parameters")
        arities = self.predicates()
        for lit in _literals(rule.body):
            if lit.pred == head:
                n = len(rule.params)
            elif lit.pred in arities:
                n = None if len(lit.args) in arities[lit.pred] else -1
            elif lit.pred in ARITY:
                n = ARITY[lit.pred]
            elif lit.pred in PRIMITIVES:
                n = PRIMITIVES[lit.pred]
            else:
                raise UnknownPredicate(f"rule {head} uses unknown predicate {lit.pred!r}")
            if n == -1 or (n is not None and n != len(lit.args)):
                raise ArityError(f"{lit.pred} called with {len(lit.args)} arguments in rule {head}")
        trial = dict(self.rules)
        trial[head] = existing + [rule]
        _check_stratified(trial)
        self.rules = trial
        self._fact_only.clear()

    def fact_only(self, pred: str, arity: int) -> bool:
        """True when every clause of pred/arity is a positive combination of facts."""
        key = (pred, arity)
        if key not in self._fact_only:
            defs = [d for d in self.rules.get(pred, ()) if len(d.params) == arity]
            self._fact_only[key] = bool(defs) and all(
                p in ARITY and not neg for d in defs for p, neg in _signed_literals(d.body))
        return self._fact_only[key]

    # -- solving --------------------------------------------------------------

    def solve(self, query: Query | str, kb: KnowledgeBase | None = None):
        if isinstance(query, str):
            query = self.parse(query)
        run = _Run(self, kb if kb is not None else self.kb)
        outputs = answer_vars(query)
        # each rule level costs a handful of generator frames
        limit = sys.getrecursionlimit()
        sys.setrecursionlimit(max(limit, FRAMES_PER_LEVEL * self.max_depth + 1000))
        try:
            solutions = run.solve_top(query.body)
            if not outputs:
                return next(iter(solutions), None) is not None
            seen = {}
            for theta in solutions:
                row = tuple(theta.get(v) for v in outputs)
                seen.setdefault(row, None)
        except RecursionError:
            raise DepthExceeded(f"recursion deeper than {self.max_depth}") from None
        finally:
            sys.setrecursionlimit(limit)
        rows = sorted(seen, key=lambda r: tuple((-1,) if a is None else _atom_key(a) for a in r))
        return [{k: v for k, v in zip(outputs, row) if v is not None} for row in rows]


def _literals(expr):
    if isinstance(expr, Literal):
        yield expr
    elif isinstance(expr, (And, Or)):
        for item in expr.items:
            yield from _literals(item)
    elif isinstance(expr, Not):
        yield from _literals(expr.expr)


def _signed_literals(expr, neg=False):
    if isinstance(expr, Literal):
        yield expr.pred, neg or expr.negated
    elif isinstance(expr, (And, Or)):
        for item in expr.items:
            yield from _signed_literals(item, neg)
    elif isinstance(expr, Not):
        yield from _signed_literals(expr.expr, True)


def _check_stratified(rules: dict[str, list[RuleDef]]) -> None:
    graph: dict[str, set[tuple[str, bool]]] = {}
    for head, defs in rules.items():
        deps = graph.setdefault(head, set())
        for d in defs:
            deps.update((p, n) for p, n in _signed_literals(d.body) if p in rules)

    def reaches(src: str, dst: str) -> bool:
        todo, seen = [src], set()
        while todo:
            node = todo.pop()
            if node == dst:
                return True
            if node in seen:
                continue
            seen.add(node)
            todo.extend(p for p, _ in graph.get(node, ()))
        return False

    for head, deps in graph.items():
        for pred, negative in deps:
            if negative and reaches(pred, head):
                raise UnstratifiedNegation(f"{head} depends negatively on {pred} inside a cycle")


def _vars_in(expr) -> Counter:
    out: Counter = Counter()
    for lit in _literals(expr):
        for arg in lit.args:
            for t in _flat_terms(arg):
                if isinstance(t, Var):
                    out[t.name] += 1
    return out


def _flat_terms(arg):
    if isinstance(arg, PairList):
        for group in arg.groups:
            for a, b in group:
                yield a
                yield b
    else:
        yield arg


def _arg_vars(args) -> list[str]:
    return list(dict.fromkeys(t.name for a in args for t in _flat_terms(a) if isinstance(t, Var)))


def _is_negative(expr) -> bool:
    return isinstance(expr, Not) or (isinstance(expr, Literal) and expr.negated)


Theta = dict
_UNBOUND = object()


class _Run:
    """State for one solve call: fresh-name counter, memo table, depth."""

    def __init__(self, engine: Engine, kb: KnowledgeBase):
        self.engine = engine
        self.kb = kb
        self.fresh = count()
        self.memo: dict = {}
        self.tables: dict = {}
        self.depth = 0

    def solve_top(self, body) -> Iterator[Theta]:
        return self.solve(body, {}, frozenset(), body)

    # ``outside`` are variable names that also occur beyond ``expr``;
    # ``scope`` is the enclosing expression used to find shared variables.
    def solve(self, expr, theta: Theta, outside: frozenset, scope) -> Iterator[Theta]:
        if isinstance(expr, Literal):
            if expr.negated:
                yield from self._negate(Literal(expr.pred, expr.args), expr, theta, outside, scope)
            else:
                yield from self._literal(expr, theta)
        elif isinstance(expr, Not):
            yield from self._negate(expr.expr, expr, theta, outside, scope)
        elif isinstance(expr, Or):
            for item in expr.items:
                yield from self.solve(item, dict(theta), outside, scope)
        elif isinstance(expr, And):
            # positive goals first so negations see their shared variables bound
            items = [i for i in expr.items if not _is_negative(i)]
            items += [i for i in expr.items if _is_negative(i)]
            yield from self._conj(items, 0, theta, outside, scope)
        else:
            raise TypeError(expr)

    def _conj(self, items, k, theta, outside, scope):
        if k == len(items):
            yield theta
            return
        for t in self.solve(items[k], theta, outside, scope):
            yield from self._conj(items, k + 1, t, outside, scope)

    def _negate(self, inner, node, theta, outside, scope):
        inside = _vars_in(inner)
        total = _vars_in(scope)
        for name in inside:
            if name in theta:
                continue
            if name in outside or total[name] > inside[name]:
                raise UnboundNegation(f"variable {name} is unbound inside a negation")
        for _ in self.solve(inner, dict(theta), outside, inner):
            return
        yield theta

    # -- literals -------------------------------------------------------------

    def _subst(self, term, theta):
        if isinstance(term, Var) and term.name in theta:
            return Const(theta[term.name])
        if isinstance(term, PairList):
            return PairList(tuple(tuple((self._subst(a, theta), self._subst(b, theta)) for a, b in g)
                                  for g in term.groups))
        return term

    def _literal(self, lit: Literal, theta: Theta) -> Iterator[Theta]:
        args = [self._subst(a, theta) for a in lit.args]
        filters = []
        for k, a in enumerate(args):
            if _is_filter(a):
                v = Var(f"?f{next(self.fresh)}")
                filters.append((v.name, a))
                args[k] = v
        own = {name for name, _ in filters}
        for result in self._call(lit.pred, tuple(args)):
            if any(not _atom_matches(pat, result[name]) for name, pat in filters):
                continue
            out = dict(theta)
            ok = True
            for name, value in result.items():
                if name in own:
                    continue
                if out.get(name, value) != value:
                    ok = False
                    break
                out[name] = value
            if ok:
                yield out

    def _call(self, pred: str, args: tuple) -> list[Theta]:
        """Solutions of pred(args) as bindings of the variables in args."""
        names = _arg_vars(args)
        index = {n: k for k, n in enumerate(names)}

        def shape(t):
            if isinstance(t, Var):
                return ("?", index[t.name])
            if isinstance(t, PairList):
                return tuple(tuple((shape(a), shape(b)) for a, b in g) for g in t.groups)
            return t

        # calls are pure, so answers depend only on the argument shape
        memo_key = (pred, tuple(shape(a) for a in args))
        hit = self.memo.get(memo_key)
        if hit is not None:
            return [{n: v for n, v in zip(names, row) if v is not _UNBOUND} for row in hit]
        if pred in ARITY:
            rows = self._facts(pred, args)
        elif (len(names) < len(args) and not any(isinstance(a, PairList) for a in args)
              and self.engine.fact_only(pred, len(args))):
            rows = self._tabled(pred, args)
        elif pred in PRIMITIVES:
            rows = list(self._primitive(pred, args))
        else:
            rows = self._rule(pred, args)
        self.memo[memo_key] = [tuple(r.get(n, _UNBOUND) for n in names) for r in rows]
        return rows

    def _facts(self, pred: str, args: tuple) -> list[Theta]:
        bound = {k: a.value for k, a in enumerate(args) if isinstance(a, Const)}
        out = []
        for fact in self.kb.lookup(pred, bound):
            theta: Theta = {}
            for a, atom in zip(args, fact.args):
                if isinstance(a, Var):
                    if theta.setdefault(a.name, atom) != atom:
                        break
            else:
                out.append(theta)
        return out

    def _tabled(self, pred: str, args: tuple) -> list[Theta]:
        # solve once with every argument open, then answer bound calls from an index
        positions = tuple(k for k, a in enumerate(args) if isinstance(a, Const))
        key = (pred, len(args), positions)
        index = self.tables.get(key)
        if index is None:
            open_args = tuple(Var(f"?t{k}") for k in range(len(args)))
            index = defaultdict(list)
            for row in self._call(pred, open_args):
                values = tuple(row[a.name] for a in open_args)
                index[tuple(values[p] for p in positions)].append(values)
            self.tables[key] = index
        out = []
        for values in index.get(tuple(args[p].value for p in positions), ()):
            theta: Theta = {}
            for a, v in zip(args, values):
                if isinstance(a, Var) and theta.setdefault(a.name, v) != v:
                    break
            else:
                out.append(theta)
        return out

    def _rule(self, pred: str, args: tuple) -> list[Theta]:
        defs = self.engine.rules.get(pred)
        if defs is None:
            raise UnknownPredicate(f"unknown predicate {pred!r}")
        self.depth += 1
        if self.depth > self.engine.max_depth:
            self.depth = 0
            raise DepthExceeded(f"recursion deeper than {self.engine.max_depth} in {pred}")
        try:
            caller = frozenset(t.name for a in args for t in _flat_terms(a) if isinstance(t, Var))
            names = _arg_vars(args)
            seen: dict = {}
            for d in defs:
                if len(d.params) != len(args):
                    continue
                body = self._rename(d, args)
                for theta in self.solve(body, {}, caller, body):
                    # a branch may leave some head variables unbound, as at top level
                    seen.setdefault(tuple(theta.get(n, _UNBOUND) for n in names), None)
            return [{n: v for n, v in zip(names, row) if v is not _UNBOUND} for row in seen]
        finally:
            self.depth = max(0, self.depth - 1)

    def _rename(self, rule: RuleDef, args: tuple):
        tag = next(self.fresh)
        mapping = dict(zip(rule.params, args))

        def term(t):
            if isinstance(t, Var):
                if t.name in mapping:
                    return mapping[t.name]
                return Var(f"{t.name}#{tag}", t.anonymous)
            if isinstance(t, PairList):
                return PairList(tuple(tuple((term(a), term(b)) for a, b in g) for g in t.groups))
            return t

        def expr(e):
            if isinstance(e, Literal):
                return Literal(e.pred, tuple(term(a) for a in e.args), e.negated)
            if isinstance(e, And):
                return And(tuple(expr(i) for i in e.items))
            if isinstance(e, Or):
                return Or(tuple(expr(i) for i in e.items))
            return Not(expr(e.expr))

        return expr(rule.body)

    # -- primitives -----------------------------------------------------------

    def _primitive(self, pred: str, args: tuple) -> Iterator[Theta]:
        if pred == "action_in":
            act, cls = args
            allowed = ACTION_CLASSES[cls.value]
            if isinstance(act, Const):
                if act.value in allowed:
                    yield {}
            else:
                for a in allowed:
                    yield {act.name: a}
        elif pred == "path_match":
            ctx, pairs = args
            if not isinstance(ctx, Const):
                raise UnboundNegation("path context must be bound before matching")
            yield from _match_pairs(ctx.value, pairs)
        elif pred == "maps_match":
            nf, pairs = args
            yield from self._maps_match(nf, pairs)

    def _maps_match(self, nf, pairs) -> Iterator[Theta]:
        if isinstance(pairs, Var):
            raise UnboundNegation("correlatedMaps needs a pair list or two map arguments")
        groups = pairs.groups if isinstance(pairs, PairList) else ()
        for group in groups:
            goals = tuple(Literal("correlated_maps", (nf, Var(f"?b{next(self.fresh)}", True), a, b))
                          for a, b in group)
            body = goals[0] if len(goals) == 1 else And(goals)
            yield from self.solve(body, {}, frozenset(), body)


def _match_pairs(ctx: tuple, pairs) -> Iterator[Theta]:
    if isinstance(pairs, Var):
        yield {pairs.name: ctx}
        return
    if isinstance(pairs, Wildcard):
        yield {}
        return
    if isinstance(pairs, Const):
        if pairs.value == ctx:
            yield {}
        return
    ints = {}
    for k, v in ctx:
        if isinstance(v, int):
            ints.setdefault(k, []).append(v)
    for group in pairs.groups:
        yield from _match_group(ctx, ints, group, 0, {})


def _match_group(ctx, ints, group, k, theta) -> Iterator[Theta]:
    if k == len(group):
        yield theta
        return
    kt, vt = group[k]
    for key, value in ctx:
        t = _bind(kt, key, theta)
        if t is None:
            continue
        t = _bind_value(vt, value, t, ints)
        if t is None:
            continue
        yield from _match_group(ctx, ints, group, k + 1, t)


def _bind(term, atom, theta):
    if isinstance(term, Var):
        if term.name in theta:
            return theta if theta[term.name] == atom else None
        out = dict(theta)
        out[term.name] = atom
        return out
    return theta if _atom_matches(term, atom) else None


def _bind_value(term, value, theta, ints):
    if isinstance(term, Cmp) and isinstance(term.value, str) and not term.value.endswith(".*"):
        # compare against another field's recorded value on the same path
        if value == f"{term.op}{term.value}":
            return theta
        if isinstance(value, int) and any(_CMP[term.op](value, w) for w in ints.get(term.value, ())):
            return theta
        return None
    return _bind(term, value, theta)


def solve(query: Query | str, kb: KnowledgeBase, engine: Engine | None = None):
    """Evaluate ``query``: a bool for assertions, sorted bindings for retrievals."""
    return (engine or Engine()).solve(query, kb)


def format_result(result) -> str:
    if isinstance(result, bool):
        return "true\n" if result else "false\n"
    if not result:
        return "false\n"
    lines = []
    for row in result:
        lines.append(", ".join(f"{k} = {_show(v)}" for k, v in row.items()))
    return "\n".join(lines) + "\n"


def _show(atom) -> str:
    if isinstance(atom, tuple):
        return "[" + ", ".join(f"({_show(k)}, {_show(v)})" for k, v in atom) + "]"
    return str(atom)
