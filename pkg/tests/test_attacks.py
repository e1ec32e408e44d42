from __future__ import annotations

import random

import pytest

from bpusim import engine as eng
from bpusim.attacks import (
    AttackError,
    BranchHarness,
    ProbeError,
    activate_history_mode,
    build_victim_v1,
    build_victim_v2,
    covert_send_receive,
    defense_eval,
    defense_workload,
    probe_ghr_depth,
    probe_mode,
    side_channel_v1,
    side_channel_v2,
)
from bpusim.engine import DEFAULT_POLICY, PolicyVariant, UpdatePolicy
from bpusim.predictor import Direction, Mode, PredictorConfig, PredictorState
from bpusim.timing import LatencyModel, NoiseKind

REFERENCE_SECRET = [1, 1, 0, 1, 1, 1, 0, 0, 0, 1]


def test_activate_history_mode():
    p = PredictorState()
    activate_history_mode(p)
    assert p.selector.mode is Mode.HISTORY


def test_probe_mode_detects_both_modes_without_mutating_state():
    p = PredictorState()
    fp = p.state_fingerprint()
    assert probe_mode(p) is Mode.ONE_LEVEL
    assert p.state_fingerprint() == fp
    activate_history_mode(p)
    fp = p.state_fingerprint()
    assert probe_mode(p) is Mode.HISTORY
    assert p.state_fingerprint() == fp


def test_probe_mode_on_randomized_states():
    for seed in range(8):
        p = PredictorState()
        p.randomize_reset(seed)
        assert probe_mode(p) is Mode.ONE_LEVEL


def test_probe_ghr_depth_requires_history_mode():
    with pytest.raises(ProbeError):
        probe_ghr_depth(PredictorState(), 16)


def test_probe_ghr_depth_error_when_max_too_small():
    p = PredictorState(PredictorConfig(ghr_depth=12))
    activate_history_mode(p)
    with pytest.raises(ProbeError):
        probe_ghr_depth(p, 8)


@pytest.mark.parametrize("depth", [4, 8, 12, 16])
def test_probe_ghr_depth_exact(depth):
    p = PredictorState(PredictorConfig(ghr_depth=depth))
    activate_history_mode(p)
    assert probe_ghr_depth(p, depth + 8) == depth


def test_harness_latency_sampling():
    p = PredictorState()
    p.selector.frozen = True
    h = BranchHarness(p, LatencyModel().sampler())
    rec = h.execute(0x4000, Direction.NOT_TAKEN)  # weak NT entry: correct
    assert rec.latency == 10 and not rec.mispredicted
    p.pht_one_level[p.index_for(0x4000, Mode.ONE_LEVEL)] = 0
    rec = h.execute(0x4000, Direction.NOT_TAKEN)
    assert rec.latency == 50 and rec.mispredicted


def test_victim_layouts_are_valid_programs():
    cfg = PredictorConfig()
    for layout in (build_victim_v1(cfg), build_victim_v2(cfg)):
        instrs = layout.programs[layout.pid]
        assert [i.seq for i in instrs] == list(range(len(instrs)))
        assert len({i.addr for i in instrs}) == len(instrs)
        assert len(layout.preamble_targets) == cfg.ghr_depth


def test_covert_short_messages_both_modes():
    for mode in (Mode.ONE_LEVEL, Mode.HISTORY):
        r = covert_send_receive("1011000111", mode)
        assert r.errors == 0
        assert r.decoded == "1011000111"
        assert len(r.trace.samples) == 10


def test_covert_one_level_survives_periodic_reset():
    msg = "10" * 40
    r = covert_send_receive(msg, Mode.ONE_LEVEL, reset_interval=16)
    assert r.errors == 0


def test_covert_under_mitigation_policy_breaks_transmission():
    msg = "0110100110010110"
    r = covert_send_receive(msg, Mode.ONE_LEVEL,
                            policy=UpdatePolicy(PolicyVariant.COMMIT_TIME))
    assert r.errors > 0


def test_side_channel_v1_recovers_reference_secret_both_modes():
    for mode in (Mode.ONE_LEVEL, Mode.HISTORY):
        r = side_channel_v1(REFERENCE_SECRET, mode)
        assert r.recovered == REFERENCE_SECRET
        assert r.accuracy == 1.0


def test_side_channel_v1_corrupted_history_context_misses():
    # attacker replays the wrong preamble target: the PHT collision is lost,
    # so recovery degrades or the protocol detects the broken trigger
    try:
        r = side_channel_v1(REFERENCE_SECRET, Mode.HISTORY, corrupt_preamble_entry=3)
    except AttackError:
        return
    assert r.accuracy < 1.0


def test_side_channel_v2_recovers_reference_secret_both_modes():
    for mode in (Mode.ONE_LEVEL, Mode.HISTORY):
        r = side_channel_v2(REFERENCE_SECRET, mode)
        assert r.recovered == REFERENCE_SECRET


def test_side_channel_v2_without_poisoning_is_chance():
    rng = random.Random(0)
    secret = [1] * 50 + [0] * 50
    rng.shuffle(secret)
    r = side_channel_v2(secret, Mode.ONE_LEVEL, poison=False)
    assert 0.35 <= r.accuracy <= 0.65


def test_side_channel_mitigations_near_chance():
    secret = [1] * 30 + [0] * 30
    random.Random(2).shuffle(secret)
    for variant in (PolicyVariant.COMMIT_TIME, PolicyVariant.RESTORE_ON_SQUASH,
                    PolicyVariant.SHADOW_PHT, PolicyVariant.OBFUSCATE_ON_SQUASH):
        r = side_channel_v1(secret, Mode.ONE_LEVEL,
                            policy=UpdatePolicy(variant, obfuscation_seed=5))
        assert 0.3 <= r.accuracy <= 0.7, variant


def test_noise_degrades_covert_channel_monotonically():
    msg = "".join(random.Random(9).choice("01") for _ in range(256))
    errors = []
    for sigma in (10, 20, 40):
        model = LatencyModel(noise=NoiseKind.GAUSSIAN, noise_param=sigma, seed=13)
        errors.append(covert_send_receive(msg, Mode.HISTORY,
                                          latency_model=model).errors)
    assert errors[0] > 0
    assert errors == sorted(errors)


def test_defense_workload_runs_and_resolve_time_wins():
    programs, env = defense_workload()
    assert env["loop"][-1] == 0
    counts = defense_eval([UpdatePolicy(PolicyVariant.SPECULATIVE_RESOLVE_TIME),
                           UpdatePolicy(PolicyVariant.COMMIT_TIME)])
    assert counts["speculative-resolve-time"] < counts["commit-time"]


def test_transient_gadget_only_reachable_through_poisoned_btb():
    cfg = PredictorConfig()
    layout = build_victim_v2(cfg)
    p = PredictorState(cfg)
    p.selector.frozen = True
    res, p = eng.run(layout.programs, layout.schedule, DEFAULT_POLICY, p,
                     env={"pre": 1, "sec": 1})
    assert not any(b.instr.addr == layout.bv_addr for b in res.branches)
    p.btb.update(layout.trigger_addr, layout.bv_addr)
    res, _ = eng.run(layout.programs, layout.schedule, DEFAULT_POLICY, p,
                     env={"pre": 1, "sec": 1})
    bv = [b for b in res.branches if b.instr.addr == layout.bv_addr]
    assert bv and bv[0].resolved and bv[0].squashed and bv[0].speculative
