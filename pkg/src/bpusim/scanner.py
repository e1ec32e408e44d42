"""Static gadget scanner over normalized disassembly text.

Input format, one instruction per line::

    ADDR: MNEMONIC OPERANDS

Hex address (with or without 0x), a colon, then whitespace-separated
mnemonic and comma-separated operands. Addresses must be strictly
increasing. `#` starts a comment. The format is produced from any
disassembler with `objdump -d --no-show-raw-insn | sed 's/^\\s*//'`-style
normalization.

Scanning rules (documented approximations):

* Taint is intra-straight-line and copy-only: the tracked registers are
  tainted at the start of every straight-line run (any control-flow
  instruction ends a run), MOV/MOVZX/MOVSX/LEA propagate taint from a
  tainted register or a memory operand addressed through a tainted
  register, and any other write to a register clears its taint. Taint is
  tracked at full-register granularity.
* A TEST of a tainted operand followed by a conditional jump forms a v2
  site; any flag-writing (or unknown) instruction between them
  invalidates the pair. TEST with a one-or-more-bit immediate leaks those
  bit positions (shifted by the sub-register offset, e.g. DH -> +8);
  TEST reg,reg is a whole-operand zero-test and stays out of the
  bit-offset histogram.
* The port-contention subset uses a small mnemonic -> port-set table
  modeled on public Skylake scheduling tables (an acknowledged
  approximation). A v2 site qualifies when the first B instructions of
  the taken and fall-through paths are both complete (terminated by
  control flow or reaching B) and their dominant (argmax-count) port
  sets are non-empty and disjoint. Control-flow instructions do not
  count toward ports; unknown mnemonics count as no-port and are
  reported as diagnostics.
* The v1 scan is a heuristic: a CMP-shaped bounds check, then within a
  window on the taken or fall-through path a load indexed by the
  compared register, then a conditional branch whose flags derive from
  the loaded register.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field


class DisasmParseError(ValueError):
    def __init__(self, lineno: int, reason: str):
        super().__init__(f"line {lineno}: {reason}")
        self.lineno = lineno
        self.reason = reason


# canonical 64-bit name -> aliases with sub-register bit offsets
def _build_registers() -> dict[str, tuple[str, int]]:
    table: dict[str, tuple[str, int]] = {}
    legacy = {
        "rax": ("eax", "ax", "al", "ah"),
        "rbx": ("ebx", "bx", "bl", "bh"),
        "rcx": ("ecx", "cx", "cl", "ch"),
        "rdx": ("edx", "dx", "dl", "dh"),
        "rsi": ("esi", "si", "sil", None),
        "rdi": ("edi", "di", "dil", None),
        "rbp": ("ebp", "bp", "bpl", None),
        "rsp": ("esp", "sp", "spl", None),
    }
    for canon, (e, w, lo, hi) in legacy.items():
        table[canon] = (canon.upper(), 0)
        table[e] = (canon.upper(), 0)
        table[w] = (canon.upper(), 0)
        table[lo] = (canon.upper(), 0)
        if hi:
            table[hi] = (canon.upper(), 8)
    for i in range(8, 16):
        canon = f"r{i}"
        for alias in (canon, f"r{i}d", f"r{i}w", f"r{i}b"):
            table[alias] = (canon.upper(), 0)
    return table


REGISTERS = _build_registers()

JCC = {
    "ja", "jae", "jb", "jbe", "jc", "jnc", "je", "jne", "jg", "jge", "jl",
    "jle", "jo", "jno", "jp", "jnp", "js", "jns", "jz", "jnz", "jecxz", "jrcxz",
}
CONTROL_FLOW = JCC | {"jmp", "call", "ret"}
FLAG_WRITERS = {
    "add", "sub", "and", "or", "xor", "test", "cmp", "inc", "dec", "neg",
    "shl", "shr", "sar", "rol", "ror", "imul", "mul", "div", "idiv", "adc",
    "sbb", "popcnt", "lzcnt", "tzcnt", "bsf", "bsr", "xadd", "cmc",
}
NON_FLAG_WRITERS = {"mov", "movzx", "movsx", "lea", "nop", "push", "pop", "xchg"}
# instructions whose first register operand is (over)written
WRITES_DEST = {
    "mov", "movzx", "movsx", "lea", "add", "sub", "and", "or", "xor", "imul",
    "inc", "dec", "neg", "not", "shl", "shr", "sar", "rol", "ror", "pop",
    "adc", "sbb", "popcnt", "lzcnt", "tzcnt", "bsf", "bsr",
}
COPY_MNEMONICS = {"mov", "movzx", "movsx"}

PORT_TABLE: dict[str, frozenset[int]] = {}
for _m in ("add", "sub", "and", "or", "xor", "test", "cmp", "mov", "lea",
           "nop", "inc", "dec", "neg", "not", "movzx", "movsx"):
    PORT_TABLE[_m] = frozenset({0, 1, 5, 6})
for _m in ("imul", "mul", "popcnt", "lzcnt", "tzcnt", "bsf", "bsr", "crc32"):
    PORT_TABLE[_m] = frozenset({1})
for _m in ("div", "idiv", "aesenc", "aesdec"):
    PORT_TABLE[_m] = frozenset({0})
for _m in ("shl", "shr", "sar", "rol", "ror", "shld", "shrd"):
    PORT_TABLE[_m] = frozenset({0, 6})
for _m in ("mulps", "mulpd", "mulss", "mulsd", "addps", "addpd", "addss", "addsd"):
    PORT_TABLE[_m] = frozenset({0, 1})
for _m in CONTROL_FLOW:
    PORT_TABLE[_m] = frozenset({6})

DEFAULT_TRACKED = ("RDI", "RSI", "RDX", "RCX")


@dataclass(frozen=True)
class Memory:
    base: str | None = None
    index: str | None = None
    scale: int = 1
    displacement: int = 0


@dataclass(frozen=True)
class Operand:
    register: str | None = None
    immediate: int | None = None
    memory: Memory | None = None


@dataclass(frozen=True)
class DisasmRecord:
    addr: int
    mnemonic: str
    operands: tuple[Operand, ...]


_LINE = re.compile(r"^\s*(?:0x)?([0-9a-fA-F]+)\s*:\s*(\S+)(?:\s+(.*))?$")
_SIZE_PREFIX = re.compile(r"^(byte|word|dword|qword)\s+ptr\s+", re.IGNORECASE)


def _parse_int(tok: str, lineno: int) -> int:
    try:
        neg = tok.startswith("-")
        body = tok[1:] if neg else tok
        val = int(body, 16) if body.lower().startswith("0x") else int(body)
        return -val if neg else val
    except ValueError:
        raise DisasmParseError(lineno, f"bad numeric token {tok!r}") from None


def _parse_memory(text: str, lineno: int) -> Memory:
    inner = text.strip()[1:-1].strip()
    if not inner:
        raise DisasmParseError(lineno, "empty memory operand")
    base = index = None
    scale = 1
    disp = 0
    for term in inner.replace("-", "+-").split("+"):
        term = term.strip()
        if not term:
            continue
        if "*" in term:
            reg, _, s = term.partition("*")
            reg = reg.strip().lower()
            if reg not in REGISTERS:
                raise DisasmParseError(lineno, f"unknown index register {reg!r}")
            index = REGISTERS[reg][0]
            scale = _parse_int(s.strip(), lineno)
        elif term.lower() in REGISTERS:
            canon = REGISTERS[term.lower()][0]
            if base is None:
                base = canon
            elif index is None:
                index = canon
            else:
                raise DisasmParseError(lineno, f"too many registers in {text!r}")
        else:
            disp += _parse_int(term, lineno)
    return Memory(base, index, scale, disp)


def _parse_operand(text: str, lineno: int) -> Operand:
    text = text.strip()
    stripped = _SIZE_PREFIX.sub("", text)
    if stripped.startswith("["):
        if not stripped.endswith("]"):
            raise DisasmParseError(lineno, f"unterminated memory operand {text!r}")
        return Operand(memory=_parse_memory(stripped, lineno))
    low = stripped.lower()
    if low in REGISTERS:
        return Operand(register=low)
    return Operand(immediate=_parse_int(stripped, lineno))


def parse_disasm(stream) -> list[DisasmRecord]:
    """Parse normalized disassembly text (string or file-like)."""
    text = stream if isinstance(stream, str) else stream.read()
    records: list[DisasmRecord] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _LINE.match(line)
        if m is None:
            raise DisasmParseError(lineno, f"unrecognized line {line!r}")
        addr = int(m.group(1), 16)
        mnemonic = m.group(2).lower()
        ops = []
        rest = m.group(3)
        if rest:
            for part in rest.split(","):
                ops.append(_parse_operand(part, lineno))
        if records and addr <= records[-1].addr:
            raise DisasmParseError(lineno, f"address {addr:#x} not increasing")
        records.append(DisasmRecord(addr, mnemonic, tuple(ops)))
    return records


# ---------------------------------------------------------------------------
# sites and taint

@dataclass(frozen=True)
class GadgetSite:
    addr: int
    classification: str
    register: str | None
    bit_positions: tuple[int, ...]


def _canon(name: str) -> str:
    return REGISTERS[name][0]


def _sub_offset(name: str) -> int:
    return REGISTERS[name][1]


def _writes_flags(rec: DisasmRecord) -> bool:
    if rec.mnemonic in FLAG_WRITERS:
        return True
    if rec.mnemonic in NON_FLAG_WRITERS or rec.mnemonic in CONTROL_FLOW:
        return False
    return True  # unknown mnemonic: conservative


def _mem_taint_origin(mem: Memory, taint: dict[str, str]) -> str | None:
    for reg in (mem.base, mem.index):
        if reg is not None and reg in taint:
            return taint[reg]
    return None


def _bits_of(imm: int, offset: int) -> tuple[int, ...]:
    return tuple(offset + i for i in range(64) if (imm >> i) & 1)


def scan_v2(records: list[DisasmRecord],
            tracked=DEFAULT_TRACKED) -> list[GadgetSite]:
    """Tainted TEST -> Jcc transmitter sites."""
    tracked = tuple(r.upper() for r in tracked)
    sites: list[GadgetSite] = []
    taint: dict[str, str] = {r: r for r in tracked}
    for i, rec in enumerate(records):
        if rec.mnemonic in CONTROL_FLOW:
            taint = {r: r for r in tracked}
            continue
        if rec.mnemonic == "test" and len(rec.operands) == 2:
            site = _classify_test(rec, taint)
            if site is not None and _followed_by_jcc(records, i):
                sites.append(site)
        _propagate_taint(rec, taint)
    return sites


def _classify_test(rec: DisasmRecord, taint: dict[str, str]) -> GadgetSite | None:
    a, b = rec.operands
    if a.memory is not None and b.immediate is not None:
        origin = _mem_taint_origin(a.memory, taint)
        if origin is None:
            return None
        return GadgetSite(rec.addr, "v2", origin, _bits_of(b.immediate, 0))
    if a.register is not None and b.immediate is not None:
        origin = taint.get(_canon(a.register))
        if origin is None:
            return None
        return GadgetSite(rec.addr, "v2", origin,
                          _bits_of(b.immediate, _sub_offset(a.register)))
    if a.register is not None and b.register is not None:
        origin = taint.get(_canon(a.register)) or taint.get(_canon(b.register))
        if origin is None:
            return None
        return GadgetSite(rec.addr, "v2-zero-test", origin, ())
    return None


def _followed_by_jcc(records: list[DisasmRecord], i: int) -> bool:
    for rec in records[i + 1:]:
        if rec.mnemonic in JCC:
            return True
        if rec.mnemonic in CONTROL_FLOW or _writes_flags(rec):
            return False
    return False


def _propagate_taint(rec: DisasmRecord, taint: dict[str, str]) -> None:
    ops = rec.operands
    if not ops or ops[0].register is None:
        return
    dst = _canon(ops[0].register)
    if rec.mnemonic in COPY_MNEMONICS and len(ops) == 2:
        src = ops[1]
        origin = None
        if src.register is not None:
            origin = taint.get(_canon(src.register))
        elif src.memory is not None:
            origin = _mem_taint_origin(src.memory, taint)
        if origin is not None:
            taint[dst] = origin
        else:
            taint.pop(dst, None)
    elif rec.mnemonic == "lea" and len(ops) == 2 and ops[1].memory is not None:
        origin = _mem_taint_origin(ops[1].memory, taint)
        if origin is not None:
            taint[dst] = origin
        else:
            taint.pop(dst, None)
    elif rec.mnemonic in WRITES_DEST:
        taint.pop(dst, None)


# ---------------------------------------------------------------------------
# v1 heuristic

def scan_v1(records: list[DisasmRecord], window: int = 16) -> list[GadgetSite]:
    """Bounds-check branch followed by a dependent load + conditional branch."""
    by_addr = {r.addr: i for i, r in enumerate(records)}
    sites: list[GadgetSite] = []
    for i, rec in enumerate(records):
        if rec.mnemonic != "cmp" or len(rec.operands) != 2:
            continue
        if rec.operands[0].register is None:
            continue
        compared = _canon(rec.operands[0].register)
        j = _next_jcc(records, i)
        if j is None:
            continue
        jcc = records[j]
        paths = [j + 1]
        if jcc.operands and jcc.operands[0].immediate is not None:
            tgt = by_addr.get(jcc.operands[0].immediate)
            if tgt is not None:
                paths.append(tgt)
        if any(_path_has_dependent_branch(records, start, compared, window)
               for start in paths):
            sites.append(GadgetSite(rec.addr, "v1", compared, ()))
    return sites


def _next_jcc(records: list[DisasmRecord], i: int) -> int | None:
    for j in range(i + 1, len(records)):
        rec = records[j]
        if rec.mnemonic in JCC:
            return j
        if rec.mnemonic in CONTROL_FLOW or _writes_flags(rec):
            return None
    return None


def _path_has_dependent_branch(records, start: int, compared: str, window: int) -> bool:
    loaded: str | None = None
    armed = False
    for rec in records[start:start + window]:
        if rec.mnemonic in JCC:
            if armed:
                return True
            continue
        if rec.mnemonic in CONTROL_FLOW:
            return False
        if (rec.mnemonic in COPY_MNEMONICS and len(rec.operands) == 2
                and rec.operands[0].register is not None
                and rec.operands[1].memory is not None):
            mem = rec.operands[1].memory
            if compared in (mem.base, mem.index):
                loaded = _canon(rec.operands[0].register)
                armed = False
                continue
        if _writes_flags(rec):
            armed = loaded is not None and any(
                op.register is not None and _canon(op.register) == loaded
                for op in rec.operands
            )
    return False


# ---------------------------------------------------------------------------
# port-contention subset

def scan_smotherspectre(
    records: list[DisasmRecord],
    tracked=DEFAULT_TRACKED,
    path_length: int = 8,
    diagnostics: set | None = None,
) -> list[GadgetSite]:
    """v2 sites whose taken / fall-through paths show disjoint dominant ports."""
    by_addr = {r.addr: i for i, r in enumerate(records)}
    out = []
    for site in scan_v2(records, tracked):
        i = by_addr[site.addr]
        j = _find_site_jcc(records, i)
        if j is None:
            continue
        jcc = records[j]
        fall = _path_ports(records, j + 1, path_length, diagnostics)
        taken = None
        if jcc.operands and jcc.operands[0].immediate is not None:
            tgt = by_addr.get(jcc.operands[0].immediate)
            if tgt is not None:
                taken = _path_ports(records, tgt, path_length, diagnostics)
        if fall is None or taken is None:
            continue
        if fall and taken and not (fall & taken):
            out.append(site)
    return out


def _find_site_jcc(records: list[DisasmRecord], i: int) -> int | None:
    for j in range(i + 1, len(records)):
        if records[j].mnemonic in JCC:
            return j
        if records[j].mnemonic in CONTROL_FLOW:
            return None
    return None


def _path_ports(records, start: int, length: int, diagnostics) -> frozenset[int] | None:
    """Dominant port set of a path's first instructions; None when the path
    runs off the end of the input (incomplete)."""
    counts: dict[int, int] = {}
    seen = 0
    complete = False
    for rec in records[start:start + length]:
        seen += 1
        if rec.mnemonic in CONTROL_FLOW:
            complete = True
            break
        ports = PORT_TABLE.get(rec.mnemonic)
        if ports is None:
            if diagnostics is not None:
                diagnostics.add(rec.mnemonic)
            continue
        for p in ports:
            counts[p] = counts.get(p, 0) + 1
    if seen == length:
        complete = True
    if not complete or not counts:
        return None if not complete else frozenset()
    best = max(counts.values())
    return frozenset(p for p, c in counts.items() if c == best)


# ---------------------------------------------------------------------------
# report

@dataclass
class GadgetReport:
    binary_name: str
    v2_count: int
    smotherspectre_count: int
    v1_count: int
    bit_offsets: dict[str, set[int]]
    gadget_sites: list[tuple[int, str, str | None, tuple[int, ...], bool]]
    unknown_mnemonics: set[str] = field(default_factory=set)

    def to_json(self) -> str:
        doc = {
            "binary_name": self.binary_name,
            "v2_count": self.v2_count,
            "smotherspectre_count": self.smotherspectre_count,
            "v1_count": self.v1_count,
            "bit_offsets": {r: sorted(b) for r, b in self.bit_offsets.items()},
            "gadget_sites": [
                {
                    "addr": f"{addr:#x}",
                    "classification": cls,
                    "register": reg,
                    "bit_positions": list(bits),
                    "smotherspectre": ss,
                }
                for addr, cls, reg, bits, ss in self.gadget_sites
            ],
            "unknown_mnemonics": sorted(self.unknown_mnemonics),
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["addr", "classification", "register", "bit_positions",
                    "smotherspectre"])
        for addr, cls, reg, bits, ss in self.gadget_sites:
            w.writerow([f"{addr:#x}", cls, reg or "",
                        ";".join(str(b) for b in bits), str(ss).lower()])
        return buf.getvalue()


def build_report(
    binary_name: str,
    records: list[DisasmRecord],
    tracked=DEFAULT_TRACKED,
    window: int = 16,
    mode: str = "all",
) -> GadgetReport:
    """Run the selected scans and aggregate counts + bit-offset histogram."""
    if mode not in {"v1", "v2", "ss", "all"}:
        raise ValueError(f"unknown scan mode {mode!r}")
    diagnostics: set[str] = set()
    v2 = scan_v2(records, tracked) if mode in {"v2", "ss", "all"} else []
    ss = (scan_smotherspectre(records, tracked, diagnostics=diagnostics)
          if mode in {"ss", "all"} else [])
    v1 = scan_v1(records, window) if mode in {"v1", "all"} else []
    ss_addrs = {s.addr for s in ss}
    bit_offsets: dict[str, set[int]] = {}
    rows = []
    for site in v2 + v1:
        if site.classification == "v2" and site.register is not None:
            bit_offsets.setdefault(site.register, set()).update(site.bit_positions)
        rows.append((site.addr, site.classification, site.register,
                     site.bit_positions, site.addr in ss_addrs))
    rows.sort(key=lambda r: (r[0], r[1]))
    return GadgetReport(
        binary_name=binary_name,
        v2_count=sum(1 for s in v2),
        smotherspectre_count=len(ss),
        v1_count=len(v1),
        bit_offsets=bit_offsets,
        gadget_sites=rows,
        unknown_mnemonics=diagnostics,
    )
