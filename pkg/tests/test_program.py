from __future__ import annotations

import pytest

from bpusim.program import (
    Instruction,
    Kind,
    ProgramError,
    format_program,
    parse_program,
    parse_program_line,
)


def test_parse_line_full():
    i = parse_program_line("0 3 CondBranch 0x2002 0x2040 cond=oob delay=60")
    assert i.process_id == 0 and i.seq == 3
    assert i.kind is Kind.COND_BRANCH
    assert i.addr == 0x2002 and i.static_target == 0x2040
    assert i.condition_source == "oob" and i.resolve_delay == 60


def test_parse_line_defaults_and_decimal():
    i = parse_program_line("1 0 Alu 4096")
    assert i.addr == 4096 and i.resolve_delay == 1
    assert i.static_target is None and i.condition_source is None


@pytest.mark.parametrize("line", [
    "0 0 CondBranch 0x100",                 # missing cond and target
    "0 0 CondBranch 0x100 0x200",           # missing cond
    "0 0 CondBranch 0x100 cond=c",          # missing target
    "0 0 IndirectBranch 0x100",             # missing target
    "0 0 Bogus 0x100",                      # unknown kind
    "0 0 Alu",                              # too short
    "0 0 Alu 0x100 0x200 0x300",            # extra token
])
def test_parse_line_errors(line):
    with pytest.raises(ProgramError):
        parse_program_line(line)


def test_parse_program_sorts_and_groups():
    text = """
    # two processes, out-of-order seq
    1 1 Halt 0x210
    0 0 CondBranch 0x100 0x200 cond=c delay=2
    1 0 Alu 0x200
    0 1 Halt 0x110
    """
    programs = parse_program(text)
    assert sorted(programs) == [0, 1]
    assert [i.seq for i in programs[0]] == [0, 1]
    assert [i.seq for i in programs[1]] == [0, 1]


def test_parse_program_duplicate_address():
    with pytest.raises(ProgramError):
        parse_program("0 0 Alu 0x100\n0 1 Alu 0x100\n")


def test_format_roundtrip():
    text = "0 0 CondBranch 0x100 0x200 cond=c delay=2\n0 1 Halt 0x110 delay=1\n"
    assert format_program(parse_program(text)) == text


def test_instruction_uid():
    i = Instruction(2, 5, Kind.ALU, 0x100)
    assert i.uid == (2, 5)
