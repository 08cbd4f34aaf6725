"""A naive per-path interpreter used as a test oracle for the analyzer.

It reads the indexed text format directly, explores every path one
instruction at a time with plain mutable state, and produces the same fact
tuples the analyzer's fact emitter does.  It only understands the mnemonic
subset that progen emits plus the hand-written fixtures.
"""

from __future__ import annotations

import copy
import re

LINE = re.compile(r"^(\d+):\s*(\w+)\s*(.*)$")
MEM = re.compile(r"^\[r(\d+)([+-]\d+)?\]$")
WIDTH = {"b": 1, "h": 2, "w": 4, "dw": 8}
M64 = (1 << 64) - 1
M32 = (1 << 32) - 1
CORRELATING = (1, 2, 3, 51)

IN_BOUNDS_TAKEN = ("lt", "le", "slt", "sle")
OUT_BOUNDS_TAKEN = ("gt", "ge", "sgt", "sge")
RELATION = {"eq": ("==", "!="), "ne": ("!=", "=="), "gt": (">", "<="), "ge": (">=", "<"),
            "lt": ("<", ">="), "le": ("<=", ">"), "set": ("&", "!&")}


def s64(v):
    v &= M64
    return v - (1 << 64) if v >> 63 else v


def s32(v):
    v &= M32
    return v - (1 << 32) if v >> 31 else v


def swap(v, bits):
    v &= (1 << bits) - 1
    return int.from_bytes(v.to_bytes(bits // 8, "big"), "little")


def parse(text):
    nf, hook, prog = None, "xdp", []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line.startswith(".nf"):
            nf = line.split()[1]
        elif line.startswith(".hook"):
            hook = line.split()[1]
        elif line:
            m = LINE.match(line)
            ops = [o.strip() for o in m.group(3).split(",")] if m.group(3) else []
            prog.append((int(m.group(1)), m.group(2), ops))
    return nf, hook, prog


def num(tok):
    return int(tok, 0)


def mem(tok):
    m = MEM.match(tok.replace(" ", ""))
    return int(m.group(1)), int(m.group(2) or 0)


def is_cond(mnem):
    return mnem.startswith("j") and mnem != "jmp"


class Oracle:
    def __init__(self, text, spec):
        self.nf, self.hook, self.prog = parse(text)
        self.spec = spec
        self.pos_of = {slot: i for i, (slot, _, _) in enumerate(self.prog)}
        hk = spec.hook(self.hook)
        self.buffer, self.root = hk.buffer, hk.root
        buf = spec.buffer(self.buffer)
        self.fields = {off: name for off, name in buf.fields.items()}
        self.data_name = buf.data
        self.end_name = buf.data_end
        self._blocks()

    # -- blocks, computed straight from the slot list ---------------------------
    def _target(self, i):
        slot, _, ops = self.prog[i]
        return self.pos_of[slot + 1 + num(ops[-1])]

    def _blocks(self):
        lead = {0}
        for i, (_, mnem, _) in enumerate(self.prog):
            if mnem == "jmp" or is_cond(mnem):
                lead.add(self._target(i))
                lead.add(i + 1)
            elif mnem == "exit":
                lead.add(i + 1)
        lead = sorted(x for x in lead if x < len(self.prog))
        self.leaders = set(lead)
        self.block = {}
        for i in range(len(self.prog)):
            self.block[i] = "node_" + str(sum(1 for x in lead if x <= i) - 1)
        self.edges = set()
        for i, (_, mnem, _) in enumerate(self.prog):
            last_of_block = i + 1 == len(self.prog) or i + 1 in self.leaders
            if not last_of_block or mnem == "exit":
                continue
            here = self.block[i]
            if mnem == "jmp":
                succ = [self._target(i)]
            elif is_cond(mnem):
                succ = [self._target(i), i + 1]
            else:
                succ = [i + 1]
            for s in succ:
                self.edges.add((here, self.block[s]))

    # -- interpretation -------------------------------------------------------
    def run(self):
        self.facts = set()
        for a, b in self.edges:
            self.facts.add(("edge", (self.nf, a, b)))
        st = {
            "R": {r: ("top",) for r in range(11)},
            "M": {},
            "curr": self.root, "nxt": None, "base": 0, "layers": [(self.root, 0)],
            "rooted": False, "ctx": [],
        }
        st["R"][1] = ("pkt",)
        st["R"][10] = ("stk", 0)
        self._walk(0, st, True)
        return self.facts

    def emit(self, i, pred, *args):
        self.facts.add((pred, (self.nf, self.block[i]) + args))

    def _walk(self, i, st, entering):
        while True:
            if entering or i in self.leaders:
                st["ctx"].append(("bb", self.block[i]))
            entering = False
            slot, mnem, ops = self.prog[i]
            if mnem == "exit":
                r0 = st["R"][0]
                code = r0[1] if r0[0] == "k" and r0[1] is not None else None
                action = self.spec.action_name(self.hook, code)
                self.facts.add(("return_action", (self.nf, self.hook, action, tuple(st["ctx"]))))
                return
            if mnem == "jmp":
                i = self._target(i)
                entering = True
                continue
            if is_cond(mnem):
                t, f = self._target(i), i + 1
                if t == f:
                    i = f
                    continue
                for nxt, taken in ((t, True), (f, False)):
                    branch = copy.deepcopy(st)
                    self._edge(branch, mnem, ops, taken, nxt)
                    self._walk(nxt, branch, True)
                return
            self._insn(i, st, mnem, ops)
            i += 1

    # -- header naming ----------------------------------------------------------
    def _root(self, st, i):
        if not st["rooted"]:
            st["rooted"] = True
            self.emit(i, "protocol_accessed", f"{self.buffer}.{self.data_name}", self.root)
            st["ctx"].append(("proto", self.root))

    def _commit(self, st, i):
        proto, via = st["nxt"]
        st["base"] += self.spec.header_len(st["curr"])
        st["curr"], st["nxt"] = proto, None
        st["layers"].append((proto, st["base"]))
        st["ctx"].append(("proto", proto))
        self.emit(i, "protocol_accessed", via, proto)

    def _hdr(self, st, off, i):
        self._root(st, i)
        if st["nxt"] and off >= st["base"] + self.spec.header_len(st["curr"]):
            self._commit(st, i)
        for proto, base in reversed(st["layers"]):
            if base <= off < base + self.spec.header_len(proto):
                return self.spec.hdr_field_name(proto, off - base)
        if off >= st["base"]:
            return self.spec.hdr_field_name(st["curr"], off - st["base"])
        return self.spec.hdr_field_name(self.root, off)

    def _buff(self, off):
        return f"{self.buffer}." + self.fields.get(off, f"unknown@{off}")

    # -- edges ---------------------------------------------------------------------
    def _edge(self, st, mnem, ops, taken, target):
        op = mnem[1:]
        R = st["R"]
        a = R[int(ops[0][1:])]
        b = R[int(ops[1][1:])] if ops[1].startswith("r") else ("k", s32(num(ops[1])), None)
        kinds = (a[0], b[0])
        if kinds in (("data", "end"), ("end", "data")):
            if op in IN_BOUNDS_TAKEN + OUT_BOUNDS_TAKEN:
                good_when_taken = (op in IN_BOUNDS_TAKEN) != (a[0] == "end")
                if taken == good_when_taken:
                    checked = a[1] if a[0] == "data" else b[1]
                    if not st["rooted"]:
                        self._root(st, target)
                    elif st["nxt"] and checked > st["base"] + self.spec.header_len(st["curr"]):
                        self._commit(st, target)
            return
        if a[0] != "k" or a[1] is not None or a[2] is None or op not in RELATION:
            return
        rel = RELATION[op][0 if taken else 1]
        fld = a[2]
        if b[0] == "k" and b[1] is not None:
            val = b[1]
            proto = fld.split(".")[0]
            nxt = None
            if proto == st["curr"] and self.spec.is_tail_field(proto, fld) and rel in ("==", "!="):
                nxt = self.spec.next_proto(proto, fld, val)
                width = self.spec.field_width(fld)
                if nxt is None and width in (2, 4) and 0 <= val < 1 << (8 * width):
                    other = swap(val, 8 * width)
                    nxt = self.spec.next_proto(proto, fld, other)
                    if nxt is not None:
                        val = other
            if rel == "==":
                if nxt is not None:
                    st["nxt"] = (nxt, fld)
                st["ctx"].append((fld, val))
            else:
                st["ctx"].append((fld, rel + str(val)))
        elif b[0] == "k" and b[2] is not None:
            st["ctx"].append((fld, rel + b[2]))

    # -- straight-line instructions -----------------------------------------------
    def _insn(self, i, st, mnem, ops):
        R = st["R"]
        if mnem.startswith("ldx"):
            dst = int(ops[0][1:])
            base, off = mem(ops[1])
            w = WIDTH[mnem[3:]]
            src = R[base]
            if src[0] == "pkt":
                name = self._buff(off)
                self.emit(i, "read_buffer_field", name)
                if name.endswith("." + self.data_name):
                    R[dst] = ("data", 0)
                elif name.endswith("." + self.end_name):
                    R[dst] = ("end",)
                else:
                    R[dst] = ("k", None, name)
            elif src[0] == "data":
                name = self._hdr(st, src[1] + off, i)
                self.emit(i, "read_header_field", name)
                R[dst] = ("k", None, name)
            elif src[0] == "stk":
                at = src[1] + off
                hit = st["M"].get(at)
                R[dst] = hit[0] if hit and hit[1] == w else ("top",)
            elif src[0] == "map":
                R[dst] = src
            else:
                R[dst] = ("top",)
        elif mnem.startswith("st"):
            base, off = mem(ops[0])
            if mnem.startswith("stx"):
                w, val = WIDTH[mnem[3:]], R[int(ops[1][1:])]
            else:
                w, val = WIDTH[mnem[2:]], ("k", s32(num(ops[1])), None)
            self._put(i, st, base, off, w, val, "write")
        elif mnem.startswith("atomic"):
            base, off = mem(ops[0])
            w = WIDTH[mnem[6:]]
            self._put(i, st, base, off, w, ("top",), "atomic")
            if ops[2] == "cmpxchg":
                R[0] = ("top",)
            elif ops[2].startswith("fetch") or ops[2] == "xchg":
                R[int(ops[1][1:])] = ("top",)
        elif mnem == "ldmapfd":
            R[int(ops[0][1:])] = ("map", ops[1].split("=", 1)[1])
        elif mnem == "call":
            self._call(i, st, num(ops[0]))
        elif mnem in ("mov", "mov32"):
            dst = int(ops[0][1:])
            v = R[int(ops[1][1:])] if ops[1].startswith("r") else ("k", s32(num(ops[1])), None)
            if mnem == "mov32" and v[0] == "k" and v[1] is not None:
                v = ("k", v[1] & M32, v[2])
            R[dst] = v
        elif mnem == "lddw":
            R[int(ops[0][1:])] = ("k", s64(num(ops[1])), None)
        else:
            self._arith(R, mnem, ops)

    def _put(self, i, st, base, off, w, val, how):
        dst = st["R"][base]
        if dst[0] == "pkt" and how == "write":
            self.emit(i, "write_buffer_field", self._buff(off))
        elif dst[0] == "data" and how == "write":
            name = self._hdr(st, dst[1] + off, i)
            self.emit(i, "write_header_field", name)
        elif dst[0] == "stk":
            at = dst[1] + off
            assert -512 <= at and at + w <= 0, "stack access out of frame"
            st["M"] = {b: (c, bw) for b, (c, bw) in st["M"].items() if b + bw <= at or at + w <= b}
            st["M"][at] = (val, w)

    def _call(self, i, st, helper):
        R = st["R"]
        self.emit(i, "invoke_helper", self.spec.helper_name(helper))

        def pointee(r):
            c = R[r]
            if c[0] == "stk" and c[1] in st["M"]:
                return st["M"][c[1]][0]
            return c

        ret = ("top",)
        if R[1][0] == "map":
            name = R[1][1]
            if helper == 1:
                self.emit(i, "read_from_map", name)
                ret = R[1]
            elif helper == 2:
                v = pointee(3)
                self.emit(i, "write_into_map", name, v[2] if v[0] == "k" and v[2] else "unknown")
            if helper in CORRELATING:
                key = pointee(2)
                if key[0] == "map":
                    self.emit(i, "correlated_maps", key[1], name)
        R[0] = ret
        for r in range(1, 6):
            R[r] = ("top",)

    def _arith(self, R, mnem, ops):
        dst = int(ops[0][1:])
        d = R[dst]
        m = re.match(r"^(le|be|bswap)(16|32|64)$", mnem)
        if m or mnem in ("aluneg", "alu32neg"):
            if d[0] == "k" and d[1] is not None:
                if mnem == "aluneg":
                    v = s64(-d[1])
                elif mnem == "alu32neg":
                    v = -d[1] & M32
                else:
                    bits = int(m.group(2))
                    v = swap(d[1], bits) if m.group(1) != "le" else d[1] & ((1 << bits) - 1)
                    v = s64(v) if bits == 64 else v
                R[dst] = ("k", v, None)
            elif d[0] == "k" and d[2] is not None:
                R[dst] = ("k", None, d[2])
            else:
                R[dst] = ("top",)
            return
        m = re.match(r"^alu(32)?(\w+)$", mnem)
        wide, op = m.group(1) is None, m.group(2)
        s = R[int(ops[1][1:])] if ops[1].startswith("r") else ("k", s32(num(ops[1])), None)
        sk = s[0] == "k" and s[1] is not None
        dk = d[0] == "k" and d[1] is not None
        if wide and op in ("add", "sub") and d[0] in ("data", "stk") and sk:
            off = d[1] + (s[1] if op == "add" else -s[1])
            R[dst] = ("top",) if d[0] == "data" and off < 0 else (d[0], off)
        elif wide and op == "add" and dk and s[0] in ("data", "stk"):
            off = s[1] + d[1]
            R[dst] = ("top",) if s[0] == "data" and off < 0 else (s[0], off)
        elif dk and sk:
            R[dst] = ("k", self._binop(op, d[1], s[1], wide), None)
        elif d[0] == "k" and d[1] is None and d[2] is not None and sk:
            R[dst] = ("k", None, d[2])
        else:
            R[dst] = ("top",)

    @staticmethod
    def _binop(op, a, b, wide):
        bits = 64 if wide else 32
        mask = (1 << bits) - 1
        a, b = a & mask, b & mask
        r = {
            "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b,
            "and": lambda: a & b, "or": lambda: a | b, "xor": lambda: a ^ b,
            "lsh": lambda: a << (b % bits), "rsh": lambda: a >> (b % bits),
        }[op]() & mask
        return s64(r) if wide else r


def oracle_facts(text, spec):
    """Fact tuples (pred, args) the analyzer should emit for ``text``."""
    return Oracle(text, spec).run()
