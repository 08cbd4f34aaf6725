"""Command-line front end: analyze, query, assert, disasm."""

from __future__ import annotations

import argparse
import os
import re
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .analyzer import analyze_nf
from .cfg import count_paths
from .engine import Engine, format_result
from .errors import PrashnaError, QuerySyntaxError
from .facts import KnowledgeBase, emit_chain_facts, emit_facts, parse_kb, serialize_kb
from .isa import format_program
from .loader import load_any
from .netspec import default_spec, load_netspec
from .querylang import split_queries

EXIT_OK, EXIT_MISMATCH, EXIT_ERROR = 0, 1, 2


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    query: str
    expected: str


_SUITE_LINE = re.compile(r"expect\s+(pass|fail)\s+([^:]+?)\s*:\s*(.+)")


def read_suite(path: str | Path) -> list[SuiteEntry]:
    entries: list[SuiteEntry] = []
    names = set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SUITE_LINE.fullmatch(line)
        if not m:
            raise QuerySyntaxError(f"{path}:{lineno}: expected 'expect pass|fail <name>: <query>'", 0)
        expected, name, query = m.groups()
        if name in names:
            raise QuerySyntaxError(f"{path}:{lineno}: duplicate suite entry {name!r}", 0)
        names.add(name)
        entries.append(SuiteEntry(name, query, expected))
    return entries


def read_manifest(path: str | Path) -> list[tuple[Path, str | None]]:
    path = Path(path)
    out = []
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        obj = Path(parts[0])
        if not obj.is_absolute():
            obj = path.parent / obj
        out.append((obj, parts[1] if len(parts) > 1 else None))
    return out


def analyze_inputs(inputs, spec, hook=None, chain=False, out=None) -> KnowledgeBase:
    """Analyze (path, section) inputs into one KB; chain order adds nf_edge facts."""
    kb = KnowledgeBase()
    order = []
    for path, section in inputs:
        nf = load_any(path, section, hook)
        cfgnc = analyze_nf(nf, spec)
        facts = emit_facts(cfgnc)
        kb.extend(facts)
        order.append(nf.nf_id)
        if out is not None:
            print(f"{nf.nf_id}: blocks={len(cfgnc.cfg.blocks)} paths={count_paths(cfgnc.cfg)} "
                  f"facts={len(facts)}", file=out)
    edges = emit_chain_facts(order)  # also rejects repeated NF ids
    if chain:
        kb.extend(edges)
    return kb


def _write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def cmd_analyze(args) -> int:
    spec = load_netspec(args.netspec) if args.netspec else default_spec()
    inputs = []
    if args.chain:
        inputs.extend(read_manifest(args.chain))
    inputs.extend((Path(p), args.section) for p in args.objects)
    if not inputs:
        raise PrashnaError("nothing to analyze: give object files or --chain")
    for path, _ in inputs:
        if not path.exists():
            raise FileNotFoundError(f"{path}: no such file")
    kb = analyze_inputs(inputs, spec, args.hook, chain=bool(args.chain), out=sys.stdout)
    _write_atomic(Path(args.output), serialize_kb(kb))
    print(f"wrote {len(kb)} facts to {args.output}")
    return EXIT_OK


def _load_kb(path) -> KnowledgeBase:
    return parse_kb(Path(path).read_text(encoding="utf-8"))


def cmd_query(args) -> int:
    engine = Engine(_load_kb(args.kb))
    texts = []
    if args.expr:
        texts.extend(split_queries(args.expr))
    if args.file:
        texts.extend(split_queries(Path(args.file).read_text(encoding="utf-8")))
    queries = [engine.parse(t) for t in texts]
    for text, q in zip(texts, queries):
        if len(queries) > 1:
            print(f"?- {text}")
        sys.stdout.write(format_result(engine.solve(q)))
    if args.repl:
        _repl(engine)
    return EXIT_OK


def _repl(engine: Engine) -> None:
    buf = ""
    interactive = sys.stdin.isatty()
    while True:
        if interactive:
            sys.stdout.write("?- " if not buf else "|  ")
            sys.stdout.flush()
        line = sys.stdin.readline()
        if not line:
            break
        buf += line
        try:
            texts = split_queries(buf)
        except QuerySyntaxError:
            continue  # query not terminated yet
        buf = ""
        for text in texts:
            try:
                sys.stdout.write(format_result(engine.solve(engine.parse(text))))
            except PrashnaError as exc:
                print(f"error: {exc}", file=sys.stderr)


def cmd_assert(args) -> int:
    engine = Engine(_load_kb(args.kb))
    entries = read_suite(args.suite)
    parsed = [(e, engine.parse(e.query)) for e in entries]
    mismatches = 0
    width = max((len(e.name) for e in entries), default=4)
    for entry, q in parsed:
        result = engine.solve(q)
        got = "pass" if result else "fail"
        ok = got == entry.expected
        mismatches += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {entry.name:<{width}}  expected={entry.expected} got={got}")
    print(f"{len(entries) - mismatches}/{len(entries)} entries match")
    return EXIT_OK if mismatches == 0 else EXIT_MISMATCH


def cmd_disasm(args) -> int:
    nf = load_any(args.object, args.section, args.hook)
    sys.stdout.write(format_program(nf.instructions, nf.map_table, nf.nf_id, nf.hook))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prashna", description="Network-context analysis of eBPF programs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze programs into a knowledge base")
    p.add_argument("objects", nargs="*", help="ELF objects or text-assembly files")
    p.add_argument("-s", "--netspec", help="network spec file (default: built-in)")
    p.add_argument("-o", "--output", required=True, help="knowledge base to write")
    p.add_argument("--chain", help="manifest of NFs in execution order")
    p.add_argument("--section", help="program section or function name")
    p.add_argument("--hook", help="override the hook (xdp or tc)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("query", help="run queries against a knowledge base")
    p.add_argument("-k", "--kb", required=True)
    p.add_argument("-e", "--expr", help="query text")
    p.add_argument("-f", "--file", help="file of '.'-terminated queries")
    p.add_argument("--repl", action="store_true", help="read queries from stdin")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("assert", help="check an assertion suite")
    p.add_argument("-k", "--kb", required=True)
    p.add_argument("-f", "--suite", required=True)
    p.set_defaults(func=cmd_assert)

    p = sub.add_parser("disasm", help="print a program in text form")
    p.add_argument("object")
    p.add_argument("--section")
    p.add_argument("--hook")
    p.set_defaults(func=cmd_disasm)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PrashnaError, OSError) as exc:
        print(f"prashna: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
