"""The property-query corpus and the subset evaluated on purpose-built NFs."""

from conftest import FIXTURES

PROPERTIES = FIXTURES / "queries" / "properties.txt"


def load_properties() -> list[tuple[str, str]]:
    out = []
    for line in PROPERTIES.read_text(encoding="utf-8").splitlines():
        if line.strip() and not line.startswith("#"):
            slug, query = line.split(": ", 1)
            out.append((slug, query))
    return out


# (slug, fixtures to load, chained?, query on those fixtures, expected result)
EVALUATED = [
    ("content_preserved", ("firewall",), False, '!updatesField("xdp_fw", *).', False),
    ("content_preserved", ("passthrough",), False, '!updatesField("passthrough", *).', True),
    ("drop_fragments", ("katran",), False,
     'passes("katran", xdp, [(var, var)]), readsField("katran", "ipv4.frag").', True),
    ("echo_reply", ("katran",), False,
     'passes("katran", xdp, [(var, var)]), readsField("katran", "icmp.type"), '
     'updatesField("katran", "icmp.*"), updatesField("katran", "ipv4.*"), '
     'updatesField("katran", "eth.*").', True),
    ("syn_only", ("crab",), False,
     'passes("crab", xdp, [(var, var)]), readsField("crab", "tcp.flags").', True),
    ("syn_only", ("crab",), False, 'passes("crab", xdp, [("tcp.flags", P)]).',
     [{"P": "!&16"}, {"P": "&2"}]),
    ("correlated", ("firewall",), False,
     'correlatedMaps("xdp_fw", [("flow_ctx_table", "tx_port")]).', True),
    ("correlated", ("firewall",), False,
     'correlatedMaps("xdp_fw", [("tx_port", "flow_ctx_table")]).', False),
    ("dependency_raw", ("nf1", "nf2", "nf3"), True,
     'updatesField("NF2", *), successorNF("NF2", "NF3"), readsField("NF3", *).', True),
    ("dependency_war", ("nf1", "nf2", "nf3"), True,
     'readsField("NF1", *), successorNF("NF1", "NF2"), updatesField("NF2", *).', True),
    ("dependency_waw", ("nf1", "nf2", "nf3"), True,
     'updatesField("NF1", *), successorNF("NF1", "NF2"), updatesField("NF2", *).', True),
    ("dependency_war", ("nf1", "nf2", "nf3"), True,
     'readsField("NF2", *), successorNF("NF2", "NF3"), updatesField("NF3", *).', False),
    ("fields_updated", ("firewall",), False, 'updatesField("xdp_fw", Fld).', [{"Fld": "tcp.sport"}]),
    ("raw_fields", ("nf1", "nf2", "nf3"), True,
     'updatesField("NF2", Fld), successorNF("NF2", "NF3"), readsField("NF3", Fld).',
     [{"Fld": "sk_buff.mark"}]),
]
