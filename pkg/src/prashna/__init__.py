"""Static network-context analysis of eBPF programs and a query language over the results."""

from .analyzer import CfgNc, analyze_nf
from .engine import Engine, RuleDef, solve
from .facts import KnowledgeBase, emit_chain_facts, emit_facts, parse_kb, serialize_kb
from .loader import NfObject, load_any, load_bundle, load_object
from .netspec import NetSpec, default_spec, load_netspec
from .querylang import classify, parse_query

__all__ = [
    "CfgNc", "Engine", "KnowledgeBase", "NetSpec", "NfObject", "RuleDef",
    "analyze_nf", "classify", "default_spec", "emit_chain_facts", "emit_facts",
    "load_any", "load_bundle", "load_netspec", "load_object", "parse_kb",
    "parse_query", "serialize_kb", "solve",
]
