"""Instruction model and the line-oriented program text format.

One instruction per line::

    pid seq kind addr [target] [cond=<operand>] [delay=<ticks>]

Addresses accept hex (0x-prefixed) or decimal. Kinds: CondBranch,
IndirectBranch, Load, Store, Alu, TimerRead, Halt.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass


class Kind(enum.Enum):
    COND_BRANCH = "CondBranch"
    INDIRECT_BRANCH = "IndirectBranch"
    LOAD = "Load"
    STORE = "Store"
    ALU = "Alu"
    TIMER_READ = "TimerRead"
    HALT = "Halt"


class ProgramError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    process_id: int
    seq: int
    kind: Kind
    addr: int
    static_target: int | None = None
    condition_source: str | None = None
    resolve_delay: int = 1

    def __post_init__(self):
        if self.kind is Kind.COND_BRANCH:
            if self.condition_source is None:
                raise ProgramError(f"CondBranch at {self.addr:#x} needs cond=")
            if self.static_target is None:
                raise ProgramError(f"CondBranch at {self.addr:#x} needs a target")
        if self.kind is Kind.INDIRECT_BRANCH and self.static_target is None:
            raise ProgramError(f"IndirectBranch at {self.addr:#x} needs a target")

    @property
    def uid(self) -> tuple[int, int]:
        return (self.process_id, self.seq)


def _parse_int(tok: str) -> int:
    return int(tok, 16) if tok.lower().startswith("0x") else int(tok)


def parse_program_line(line: str, lineno: int = 0) -> Instruction:
    toks = line.split()
    if len(toks) < 4:
        raise ProgramError(f"line {lineno}: expected 'pid seq kind addr ...'")
    try:
        pid, seq = int(toks[0]), int(toks[1])
        kind = Kind(toks[2])
        addr = _parse_int(toks[3])
    except ValueError as exc:
        raise ProgramError(f"line {lineno}: {exc}") from exc
    target = None
    cond = None
    delay = 1
    for tok in toks[4:]:
        if tok.startswith("cond="):
            cond = tok[len("cond="):]
        elif tok.startswith("delay="):
            try:
                delay = int(tok[len("delay="):])
            except ValueError as exc:
                raise ProgramError(f"line {lineno}: bad delay {tok!r}") from exc
        elif target is None:
            try:
                target = _parse_int(tok)
            except ValueError as exc:
                raise ProgramError(f"line {lineno}: bad target {tok!r}") from exc
        else:
            raise ProgramError(f"line {lineno}: unexpected token {tok!r}")
    try:
        return Instruction(pid, seq, kind, addr, target, cond, delay)
    except ProgramError as exc:
        raise ProgramError(f"line {lineno}: {exc}") from exc


def parse_program(text: str) -> dict[int, list[Instruction]]:
    """Parse program text into per-process instruction lists (program order)."""
    programs: dict[int, list[Instruction]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        instr = parse_program_line(line, lineno)
        programs.setdefault(instr.process_id, []).append(instr)
    for pid, instrs in programs.items():
        instrs.sort(key=lambda i: i.seq)
        seen = set()
        for i in instrs:
            if i.addr in seen:
                raise ProgramError(f"pid {pid}: duplicate address {i.addr:#x}")
            seen.add(i.addr)
    return programs


def format_instruction(instr: Instruction) -> str:
    parts = [str(instr.process_id), str(instr.seq), instr.kind.value, f"{instr.addr:#x}"]
    if instr.static_target is not None:
        parts.append(f"{instr.static_target:#x}")
    if instr.condition_source is not None:
        parts.append(f"cond={instr.condition_source}")
    parts.append(f"delay={instr.resolve_delay}")
    return " ".join(parts)


def format_program(programs: dict[int, list[Instruction]]) -> str:
    lines = []
    for pid in sorted(programs):
        for instr in programs[pid]:
            lines.append(format_instruction(instr))
    return "\n".join(lines) + "\n"
