from __future__ import annotations

import pytest

from bpusim import engine as eng
from bpusim.engine import (
    ConfigError,
    DEFAULT_POLICY,
    PolicyVariant,
    SimulationError,
    UpdatePolicy,
    obfuscate_entries,
)
from bpusim.attacks import speculative_update_scenario
from bpusim.predictor import (
    Direction,
    Mode,
    PredictorConfig,
    PredictorState,
    index_one_level,
)
from bpusim.program import Instruction, Kind, parse_program

ALL_POLICIES = [UpdatePolicy(v, obfuscation_seed=7) for v in PolicyVariant]


def _frozen_state(config=None):
    p = PredictorState(config)
    p.selector.frozen = True
    return p


def test_straight_line_commit_and_arch_effects():
    programs = parse_program(
        """
        0 0 Store 0x100 delay=1
        0 1 Load 0x108 delay=1
        0 2 Alu 0x110 delay=1
        0 3 TimerRead 0x118 delay=1
        0 4 Halt 0x120
        """
    )
    res, _ = eng.run(programs, [0], DEFAULT_POLICY, _frozen_state())
    arch = res.arch[0]
    assert arch["mem"] == {0x100: 1}
    assert arch["regs"]["last_load"] == 0  # nothing stored at the load's slot
    assert arch["regs"]["acc"] == 1
    assert arch["regs"]["timer_reads"] == 1
    assert res.summary["0"]["commits"] == 5
    assert res.summary["0"]["squashes"] == 0


def test_taken_branch_redirects_fetch():
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x200 cond=c delay=2
        0 1 Alu 0x108
        0 2 Alu 0x200
        0 3 Halt 0x210
        """
    )
    res, pred = eng.run(programs, [0], DEFAULT_POLICY, _frozen_state(), env={"c": 1})
    # fresh weak-not-taken entry predicts NotTaken, branch is actually taken
    assert res.summary["0"]["mispredictions"] == 1
    assert res.summary["0"]["squashes"] == 1
    # wrong-path Alu at 0x108 never commits
    assert res.arch[0]["regs"]["acc"] == 1
    # resolution trained the entry toward taken and pushed the target's bits
    assert pred.pht_one_level[index_one_level(0x100, pred.config)] == 1
    assert pred.ghr.entries[-1] == 0x200 & 3


def test_wrong_path_store_never_commits():
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x200 cond=c delay=8
        0 1 Store 0x108 delay=1
        0 2 Alu 0x200
        0 3 Halt 0x210
        """
    )
    res, _ = eng.run(programs, [0], DEFAULT_POLICY, _frozen_state(), env={"c": 1})
    assert res.arch[0]["mem"] == {}


def test_architectural_state_identical_across_policies():
    text = """
    0 0 CondBranch 0x100 0x300 cond=a delay=10
    0 1 Store 0x108 delay=1
    0 2 CondBranch 0x110 0x200 cond=b delay=2
    0 3 Alu 0x118
    0 4 Alu 0x200
    0 5 Alu 0x300
    0 6 TimerRead 0x308
    0 7 Halt 0x310
    """
    envs = [{"a": 1, "b": 0}, {"a": 0, "b": 1}, {"a": 1, "b": 1}]
    for env in envs:
        outcomes = []
        for policy in ALL_POLICIES:
            res, _ = eng.run(parse_program(text), [0], policy, _frozen_state(), env=env)
            outcomes.append((res.arch, res.summary["0"]["commits"]))
        assert all(o == outcomes[0] for o in outcomes), env


def test_env_list_condition_indexed_per_execution():
    programs = parse_program(
        """
        0 0 Alu 0x100
        0 1 CondBranch 0x108 0x100 cond=loop delay=2
        0 2 Halt 0x110
        """
    )
    res, _ = eng.run(programs, [0], DEFAULT_POLICY, _frozen_state(),
                     env={"loop": [1, 1, 1, 0]})
    # three taken iterations + final not-taken: Alu commits 4 times
    assert res.arch[0]["regs"]["acc"] == 4


def test_round_robin_schedule_interleaves_processes():
    text = """
    0 0 Alu 0x100
    0 1 Halt 0x108
    1 0 Alu 0x100
    1 1 Halt 0x108
    """
    res, _ = eng.run(parse_program(text), [0, 1], DEFAULT_POLICY, _frozen_state())
    assert res.summary["0"]["commits"] == 2
    assert res.summary["1"]["commits"] == 2


def test_schedule_validation():
    with pytest.raises(ConfigError):
        eng.run({0: []}, [], DEFAULT_POLICY, _frozen_state())
    with pytest.raises(ConfigError):
        eng.run({0: []}, [1], DEFAULT_POLICY, _frozen_state())


def test_unresolved_branch_hits_tick_limit():
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x200 cond=c delay=500
        0 1 Alu 0x200
        0 2 Halt 0x210
        """
    )
    with pytest.raises(SimulationError, match="unresolved branch"):
        eng.run(programs, [0], DEFAULT_POLICY, _frozen_state(), env={"c": 1},
                max_ticks=50)


def test_indirect_branch_btb_miss_stalls_without_mispredict():
    programs = parse_program(
        """
        0 0 IndirectBranch 0x100 0x200 delay=5
        0 1 Alu 0x108
        0 2 Alu 0x200
        0 3 Halt 0x210
        """
    )
    res, pred = eng.run(programs, [0], DEFAULT_POLICY, _frozen_state())
    assert res.summary["0"]["mispredictions"] == 0
    assert res.summary["0"]["squashes"] == 0
    # wrong-path Alu at 0x108 was never fetched; BTB learned the target
    assert res.arch[0]["regs"]["acc"] == 1
    assert pred.btb.lookup(0x100) == 0x200
    assert any("stall" in e for e in res.events)


def test_indirect_branch_poisoned_btb_mispredicts_and_squashes():
    pred = _frozen_state()
    pred.btb.update(0x100, 0x300)  # poisoned toward the gadget block
    programs = parse_program(
        """
        0 0 IndirectBranch 0x100 0x200 delay=5
        0 1 Alu 0x200
        0 2 Halt 0x210
        0 3 Alu 0x300
        0 4 Alu 0x308
        """
    )
    res, pred = eng.run(programs, [0], DEFAULT_POLICY, pred)
    assert res.summary["0"]["mispredictions"] == 1
    assert res.summary["0"]["squashes"] >= 1
    assert res.arch[0]["regs"]["acc"] == 1  # only the real target's Alu commits
    assert pred.btb.lookup(0x100) == 0x200  # resolution corrected the entry


# ---------------------------------------------------------------------------
# update policies

def test_speculative_update_persists_by_default():
    doc = speculative_update_scenario(DEFAULT_POLICY)
    assert doc["persisted"] and doc["verdict"] == "persisted"
    assert doc["entry_after"] == doc["entry_before"] - 1  # moved toward taken


@pytest.mark.parametrize("variant", [
    PolicyVariant.COMMIT_TIME,
    PolicyVariant.RESTORE_ON_SQUASH,
    PolicyVariant.SHADOW_PHT,
])
def test_mitigations_leave_entry_bit_identical(variant):
    doc = speculative_update_scenario(UpdatePolicy(variant))
    assert not doc["persisted"] and doc["verdict"] == "not persisted"
    assert doc["state_unchanged"]


def test_obfuscate_on_squash_scrambles_deterministically():
    a = speculative_update_scenario(UpdatePolicy(PolicyVariant.OBFUSCATE_ON_SQUASH,
                                                 obfuscation_seed=9))
    b = speculative_update_scenario(UpdatePolicy(PolicyVariant.OBFUSCATE_ON_SQUASH,
                                                 obfuscation_seed=9))
    assert a["entry_after"] == b["entry_after"]
    probe = PredictorState()
    idx = index_one_level(0x300, probe.config)
    obfuscate_entries(probe, [(Mode.ONE_LEVEL, idx)], 9)
    assert a["entry_after"] == probe.pht_one_level[idx]


def test_commit_time_matches_resolve_time_without_speculation():
    # distinct entries, no mispredictions: deferring updates to commit must
    # not change the final predictor state
    pred_a = _frozen_state()
    pred_b = _frozen_state()
    for p in (pred_a, pred_b):
        p.pht_one_level[index_one_level(0x100, p.config)] = 0  # strong taken
        p.pht_one_level[index_one_level(0x110, p.config)] = 3  # strong not-taken
    text = """
    0 0 CondBranch 0x100 0x110 cond=t delay=1
    0 1 CondBranch 0x110 0x200 cond=n delay=1
    0 2 Alu 0x118
    0 3 Halt 0x120
    """
    _, pred_a = eng.run(parse_program(text), [0], DEFAULT_POLICY, pred_a,
                        env={"t": 1, "n": 0})
    _, pred_b = eng.run(parse_program(text), [0],
                        UpdatePolicy(PolicyVariant.COMMIT_TIME), pred_b,
                        env={"t": 1, "n": 0})
    assert pred_a.state_fingerprint() == pred_b.state_fingerprint()


def test_shadow_pht_merges_on_commit():
    # child branch resolves under a correctly-predicted long-latency parent,
    # so nothing is squashed and the shadow update merges into the main PHT
    pred = _frozen_state()
    outer_idx = index_one_level(0x100, pred.config)
    pred.pht_one_level[outer_idx] = 0  # strong taken: predicts the actual path
    child_idx = index_one_level(0x300, pred.config)
    before = pred.pht_one_level[child_idx]
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x300 cond=outer delay=40
        0 1 CondBranch 0x300 0x310 cond=sec delay=2
        0 2 Alu 0x310
        0 3 Halt 0x318
        """
    )
    res, pred = eng.run(programs, [0], UpdatePolicy(PolicyVariant.SHADOW_PHT),
                        pred, env={"outer": 1, "sec": 1})
    assert res.summary["0"]["speculative_resolutions"] == 1
    child = next(b for b in res.branches if b.instr.addr == 0x300)
    assert child.committed and not child.squashed
    assert pred.pht_one_level[child_idx] == before - 1


def test_shadow_pht_serves_own_process_speculatively():
    # within one speculative window the second execution of the child sees
    # the first execution's shadow update
    pred = _frozen_state()
    pred.pht_one_level[index_one_level(0x100, pred.config)] = 0
    child_idx = index_one_level(0x300, pred.config)
    pred.pht_one_level[child_idx] = 2  # weak not-taken
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x300 cond=outer delay=60
        0 1 CondBranch 0x300 0x300 cond=sec delay=2
        0 2 Halt 0x308
        """
    )
    res, pred = eng.run(programs, [0], UpdatePolicy(PolicyVariant.SHADOW_PHT),
                        pred, env={"outer": 1, "sec": [1, 1, 0]})
    child = [b for b in res.branches if b.instr.addr == 0x300]
    # first execution mispredicts (weak NT vs taken); after two taken shadow
    # updates the third prediction must be taken
    assert child[0].mispredicted
    assert child[2].predicted_dir is Direction.TAKEN


def test_restore_on_squash_rolls_back_nested_updates_in_order():
    # two wrong-path branches sharing one entry: rollback must restore the
    # original value, not an intermediate one
    pred = _frozen_state()
    entry_idx = index_one_level(0x300, pred.config)
    start = pred.pht_one_level[entry_idx]
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x400 cond=outer delay=50
        0 1 CondBranch 0x300 0x310 cond=a delay=2
        0 2 Alu 0x310
        0 3 Alu 0x400
        0 4 Halt 0x410
        """
    )
    res, pred = eng.run(programs, [0],
                        UpdatePolicy(PolicyVariant.RESTORE_ON_SQUASH), pred,
                        env={"outer": 1, "a": 1})
    assert pred.pht_one_level[entry_idx] == start


def test_speculative_ghr_insertions_survive_squash():
    # design decision: squash restores no GHR state under the default policy
    pred = _frozen_state()
    programs = parse_program(
        """
        0 0 CondBranch 0x100 0x400 cond=outer delay=50
        0 1 CondBranch 0x300 0x313 cond=a delay=2
        0 2 Alu 0x313
        0 3 Alu 0x400
        0 4 Halt 0x410
        """
    )
    res, pred = eng.run(programs, [0], DEFAULT_POLICY, pred,
                        env={"outer": 1, "a": 1})
    assert 0x313 & 3 in pred.ghr.entries
