import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
FIXTURES = TESTS / "fixtures"
NF_DIR = FIXTURES / "nf"
ELF_DIR = FIXTURES / "elf"
sys.path.insert(0, str(TESTS))

from prashna.analyzer import analyze_nf  # noqa: E402
from prashna.facts import KnowledgeBase, emit_chain_facts, emit_facts  # noqa: E402
from prashna.loader import load_any  # noqa: E402
from prashna.netspec import default_spec  # noqa: E402


def nf_path(name: str) -> Path:
    return NF_DIR / f"{name}.s"


def analyze_file(path):
    return analyze_nf(load_any(path), default_spec())


def kb_from(*names: str, chain: bool = False) -> KnowledgeBase:
    kb = KnowledgeBase()
    order = []
    for name in names:
        cfgnc = analyze_file(nf_path(name))
        kb.extend(emit_facts(cfgnc))
        order.append(cfgnc.nf_id)
    if chain:
        kb.extend(emit_chain_facts(order))
    return kb


@pytest.fixture(scope="session")
def spec():
    return default_spec()


@pytest.fixture(scope="session")
def firewall_kb():
    return kb_from("firewall")


@pytest.fixture(scope="session")
def chain_kb():
    return kb_from("nf1", "nf2", "nf3", chain=True)
