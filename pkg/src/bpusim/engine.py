"""Nested-speculation execution engine with pluggable PHT update policies.

Processes share one PredictorState (the per-core BPU). Fetch proceeds down
predicted paths; branches resolve after their resolve_delay; a misprediction
squashes everything younger in the same process. What happens to predictor
state touched by squashed branches is decided by the update policy.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

from .predictor import Direction, Mode, PredictorState, Prediction, counter_predict
from .program import Instruction, Kind


class ConfigError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class PolicyVariant(enum.Enum):
    SPECULATIVE_RESOLVE_TIME = "speculative-resolve-time"
    COMMIT_TIME = "commit-time"
    RESTORE_ON_SQUASH = "restore-on-squash"
    SHADOW_PHT = "shadow-pht"
    OBFUSCATE_ON_SQUASH = "obfuscate-on-squash"


@dataclass(frozen=True)
class UpdatePolicy:
    variant: PolicyVariant = PolicyVariant.SPECULATIVE_RESOLVE_TIME
    obfuscation_seed: int = 0


DEFAULT_POLICY = UpdatePolicy()


@dataclass
class ShadowPhtEntry:
    mode: Mode
    index: int
    owner_process: int
    value: int
    last_writer: int  # dynamic seq of the branch that last wrote it


@dataclass
class DynamicBranch:
    """One dynamic execution of an instruction (branch fields unused for ops)."""

    instr: Instruction
    dseq: int
    fetch_tick: int
    env_index: int
    parent: "DynamicBranch | None" = None
    squashed: bool = False
    committed: bool = False
    complete_tick: int = 0
    # branch-only fields
    predicted_dir: Direction | None = None
    predicted_target: int | None = None
    pred_mode: Mode | None = None
    pred_index: int | None = None
    resolve_tick: int = 0
    resolved: bool = False
    actual_dir: Direction | None = None
    actual_target: int | None = None
    mispredicted: bool = False
    speculative: bool = False
    stalled: bool = False
    pending_update: tuple | None = None
    journal: list = field(default_factory=list)
    marked: list = field(default_factory=list)
    shadow_keys: list = field(default_factory=list)

    @property
    def is_branch(self) -> bool:
        return self.instr.kind in (Kind.COND_BRANCH, Kind.INDIRECT_BRANCH)

    def in_speculation(self) -> bool:
        node = self.parent
        while node is not None:
            if not node.resolved:
                return True
            node = node.parent
        return False


@dataclass
class RunResult:
    events: list[str]
    summary: dict
    branches: list[DynamicBranch]
    arch: dict
    ticks: int


def snapshot_entries(predictor: PredictorState, touched) -> dict:
    """Record the current values of the given (mode, index) entries."""
    return {(mode, index): predictor.table(mode)[index] for mode, index in touched}

def restore_entries(predictor: PredictorState, snapshot: dict) -> None:
    for (mode, index), value in snapshot.items():
        predictor.table(mode)[index] = value


def obfuscate_entries(predictor: PredictorState, marked, seed: int) -> None:
    """Set each marked entry to a seed-derived pseudorandom counter value."""
    for mode, index in sorted(set(marked), key=lambda k: (k[0].value, k[1])):
        width = predictor.config.counter_width(mode)
        rng = random.Random(f"{seed}:{mode.value}:{index}")
        predictor.table(mode)[index] = rng.randrange(1 << width)


class _Process:
    def __init__(self, pid: int, instrs: list[Instruction]):
        self.pid = pid
        self.instrs = instrs
        self.addr_map = {i.addr: i for i in instrs}
        self.addr_order = sorted(self.addr_map)
        self.fetch_addr: int | None = instrs[0].addr if instrs else None
        self.fetch_active = bool(instrs)
        self.stall: DynamicBranch | None = None
        self.rob: list[DynamicBranch] = []
        self.all_dyn: list[DynamicBranch] = []
        self.exec_counts: dict[tuple[int, int], int] = {}
        self.mem: dict[int, int] = {}
        self.regs = {"acc": 0, "last_load": 0, "timer_reads": 0}
        self.done = False

    def fallthrough(self, addr: int) -> int | None:
        import bisect

        i = bisect.bisect_right(self.addr_order, addr)
        return self.addr_order[i] if i < len(self.addr_order) else None


class Engine:
    def __init__(
        self,
        programs: dict[int, list[Instruction]],
        schedule: list[int],
        policy: UpdatePolicy,
        predictor: PredictorState,
        env: dict | None = None,
        inflight_cap: int = 48,
        max_ticks: int = 100_000,
    ):
        if not schedule:
            raise ConfigError("empty schedule")
        for pid in schedule:
            if pid not in programs:
                raise ConfigError(f"schedule references undeclared process {pid}")
        self.procs = {pid: _Process(pid, instrs) for pid, instrs in programs.items()}
        self.schedule = list(schedule)
        self.policy = policy
        self.predictor = predictor
        self.env = env or {}
        self.inflight_cap = inflight_cap
        self.max_ticks = max_ticks
        self.shadow: dict[tuple[Mode, int, int], ShadowPhtEntry] = {}
        self.events: list[str] = []
        self.tick = 0
        self._dseq = 0
        self._journal_order = 0

    # -- env -------------------------------------------------------------

    def _cond_value(self, instr: Instruction, env_index: int) -> int:
        raw = self.env.get(instr.condition_source, 0)
        if isinstance(raw, (list, tuple)):
            if not raw:
                return 0
            return raw[env_index] if env_index < len(raw) else raw[-1]
        return raw

    # -- prediction with shadow overlay ----------------------------------

    def _predict(self, pid: int, addr: int) -> Prediction:
        pred = self.predictor.predict(addr)
        if self.policy.variant is PolicyVariant.SHADOW_PHT:
            entry = self.shadow.get((pred.mode, pred.index, pid))
            if entry is not None:
                width = self.predictor.config.counter_width(pred.mode)
                return Prediction(counter_predict(entry.value, width), pred.mode, pred.index)
        return pred

    # -- main loop --------------------------------------------------------

    def run(self) -> RunResult:
        while not all(p.done for p in self.procs.values()):
            if self.tick >= self.max_ticks:
                dangling = [
                    d for p in self.procs.values() for d in p.rob
                    if d.is_branch and not d.resolved and not d.squashed
                ]
                if dangling:
                    b = dangling[0]
                    raise SimulationError(
                        f"unresolved branch pid={b.instr.process_id} "
                        f"seq={b.instr.seq} addr={b.instr.addr:#x} at tick limit"
                    )
                raise SimulationError("tick limit exceeded")
            self._resolve_phase()
            self._commit_phase()
            self._fetch_phase()
            self.tick += 1
        return RunResult(self.events, self._summary(), self._all_branches(),
                         self._arch(), self.tick)

    def _all_branches(self) -> list[DynamicBranch]:
        out = [d for p in self.procs.values() for d in p.all_dyn if d.is_branch]
        out.sort(key=lambda d: d.dseq)
        return out

    def _arch(self) -> dict:
        return {
            pid: {"mem": dict(sorted(p.mem.items())), "regs": dict(p.regs)}
            for pid, p in sorted(self.procs.items())
        }

    def _summary(self) -> dict:
        per = {}
        for pid, p in sorted(self.procs.items()):
            resolved = [d for d in p.all_dyn if d.is_branch and d.resolved]
            per[str(pid)] = {
                "predictions": len([d for d in p.all_dyn if d.is_branch and not d.stalled]),
                "mispredictions": len([d for d in resolved if d.mispredicted]),
                "speculative_resolutions": len([d for d in resolved if d.speculative]),
                "squashes": len([d for d in p.all_dyn if d.squashed]),
                "commits": len([d for d in p.all_dyn if d.committed]),
            }
        return per

    # -- phases -----------------------------------------------------------

    def _resolve_phase(self) -> None:
        due = [
            d for p in self.procs.values() for d in p.rob
            if d.is_branch and not d.resolved and not d.squashed
            and d.resolve_tick <= self.tick
        ]
        due.sort(key=lambda d: (d.resolve_tick, d.dseq))
        for b in due:
            if b.squashed:
                continue
            self._resolve(b)

    def _resolve(self, b: DynamicBranch) -> None:
        proc = self.procs[b.instr.process_id]
        b.resolved = True
        b.speculative = b.in_speculation()
        if b.instr.kind is Kind.COND_BRANCH:
            taken = self._cond_value(b.instr, b.env_index) != 0
            b.actual_dir = Direction.TAKEN if taken else Direction.NOT_TAKEN
            b.mispredicted = b.predicted_dir is not b.actual_dir
            self._apply_direction_update(b)
            detail = (f"pred={b.predicted_dir.value} actual={b.actual_dir.value}")
        else:
            b.actual_target = b.instr.static_target
            if b.stalled:
                b.mispredicted = False
                proc.stall = None
                proc.fetch_active = True
                proc.fetch_addr = b.actual_target
            else:
                b.mispredicted = b.predicted_target != b.actual_target
            self.predictor.btb.update(b.instr.addr, b.actual_target)
            if self.policy.variant is PolicyVariant.COMMIT_TIME:
                b.pending_update = ("ghr", b.actual_target)
            else:
                self.predictor.ghr_insert(b.actual_target)
            detail = (f"pred_target={b.predicted_target:#x} " if b.predicted_target is not None
                      else "pred_target=none ") + f"actual_target={b.actual_target:#x}"
        self.events.append(
            f"{self.tick} resolve {b.dseq} pid={proc.pid} addr={b.instr.addr:#x} "
            f"{detail} mispredict={int(b.mispredicted)} speculative={int(b.speculative)}"
        )
        if b.mispredicted and not b.stalled:
            self._squash_after(b)

    def _apply_direction_update(self, b: DynamicBranch) -> None:
        predictor = self.predictor
        mode, index = b.pred_mode, b.pred_index
        outcome = b.actual_dir
        addr = b.instr.addr
        variant = self.policy.variant
        predictor.note_resolution(addr, mode, b.mispredicted)
        target = b.instr.static_target if b.instr.static_target is not None else addr
        if variant is PolicyVariant.COMMIT_TIME:
            b.pending_update = ("pht", mode, index, outcome, target)
            return
        if variant is PolicyVariant.SHADOW_PHT and b.speculative:
            key = (mode, index, b.instr.process_id)
            entry = self.shadow.get(key)
            base = entry.value if entry is not None else predictor.table(mode)[index]
            width = predictor.config.counter_width(mode)
            from .predictor import counter_update

            self.shadow[key] = ShadowPhtEntry(
                mode, index, b.instr.process_id,
                counter_update(base, width, outcome), b.dseq,
            )
            b.shadow_keys.append(key)
        else:
            prev = predictor.table(mode)[index]
            predictor.apply_counter_update(mode, index, outcome)
            if variant is PolicyVariant.RESTORE_ON_SQUASH:
                b.journal.append((self._journal_order, mode, index, prev))
                self._journal_order += 1
            elif variant is PolicyVariant.OBFUSCATE_ON_SQUASH:
                b.marked.append((mode, index))
        if outcome is Direction.TAKEN:
            predictor.ghr_insert(target)

    def _squash_after(self, b: DynamicBranch) -> None:
        proc = self.procs[b.instr.process_id]
        victims = [d for d in proc.rob if d.dseq > b.dseq and not d.committed]
        journal_rollback = []
        obf_marked = []
        for d in victims:
            d.squashed = True
            proc.exec_counts[d.instr.uid] -= 1
            self.events.append(f"{self.tick} squash {d.dseq} pid={proc.pid}")
            journal_rollback.extend(d.journal)
            obf_marked.extend(d.marked)
            for key in d.shadow_keys:
                entry = self.shadow.get(key)
                if entry is not None and entry.last_writer == d.dseq:
                    del self.shadow[key]
        if self.policy.variant is PolicyVariant.RESTORE_ON_SQUASH:
            for _, mode, index, prev in sorted(journal_rollback, reverse=True):
                self.predictor.table(mode)[index] = prev
        elif self.policy.variant is PolicyVariant.OBFUSCATE_ON_SQUASH and obf_marked:
            obfuscate_entries(self.predictor, obf_marked, self.policy.obfuscation_seed)
        proc.rob = [d for d in proc.rob if not d.squashed]
        # redirect fetch down the correct path
        if b.instr.kind is Kind.COND_BRANCH:
            if b.actual_dir is Direction.TAKEN:
                proc.fetch_addr = b.instr.static_target
            else:
                proc.fetch_addr = proc.fallthrough(b.instr.addr)
        else:
            proc.fetch_addr = b.actual_target
        proc.fetch_active = proc.fetch_addr is not None
        proc.stall = None

    def _commit_phase(self) -> None:
        for proc in self.procs.values():
            while proc.rob:
                d = proc.rob[0]
                if d.squashed:
                    proc.rob.pop(0)
                    continue
                ready = d.resolved if d.is_branch else d.complete_tick <= self.tick
                if not ready:
                    break
                proc.rob.pop(0)
                self._commit(proc, d)

    def _commit(self, proc: _Process, d: DynamicBranch) -> None:
        d.committed = True
        if d.pending_update is not None:
            upd = d.pending_update
            if upd[0] == "pht":
                _, mode, index, outcome, target = upd
                self.predictor.apply_counter_update(mode, index, outcome)
                if outcome is Direction.TAKEN:
                    self.predictor.ghr_insert(target)
            else:
                self.predictor.ghr_insert(upd[1])
        for key in d.shadow_keys:
            entry = self.shadow.get(key)
            if entry is not None:
                self.predictor.table(entry.mode)[entry.index] = entry.value
                del self.shadow[key]
        kind = d.instr.kind
        if kind is Kind.STORE:
            proc.mem[d.instr.addr] = d.env_index + 1
        elif kind is Kind.LOAD:
            proc.regs["last_load"] = proc.mem.get(d.instr.addr, 0)
        elif kind is Kind.ALU:
            proc.regs["acc"] += 1
        elif kind is Kind.TIMER_READ:
            proc.regs["timer_reads"] += 1
            self.events.append(f"{self.tick} timer {d.dseq} pid={proc.pid}")
        elif kind is Kind.HALT:
            proc.done = True
            proc.fetch_active = False
        self.events.append(f"{self.tick} commit {d.dseq} pid={proc.pid}")

    def _fetch_phase(self) -> None:
        pid = self.schedule[self.tick % len(self.schedule)]
        proc = self.procs[pid]
        if proc.done or not proc.fetch_active or proc.stall is not None:
            return
        inflight = len([d for d in proc.rob if not d.committed])
        if inflight >= self.inflight_cap:
            return
        addr = proc.fetch_addr
        if addr is None or addr not in proc.addr_map:
            proc.fetch_active = False
            return
        instr = proc.addr_map[addr]
        env_index = proc.exec_counts.get(instr.uid, 0)
        proc.exec_counts[instr.uid] = env_index + 1
        parent = next(
            (d for d in reversed(proc.rob)
             if d.is_branch and not d.resolved and not d.squashed),
            None,
        )
        d = DynamicBranch(instr, self._dseq, self.tick, env_index, parent=parent)
        self._dseq += 1
        proc.rob.append(d)
        proc.all_dyn.append(d)
        delay = max(instr.resolve_delay, 1)
        detail = ""
        if instr.kind is Kind.COND_BRANCH:
            pred = self._predict(pid, addr)
            d.predicted_dir, d.pred_mode, d.pred_index = pred.direction, pred.mode, pred.index
            d.resolve_tick = self.tick + delay
            if pred.direction is Direction.TAKEN:
                proc.fetch_addr = instr.static_target
            else:
                proc.fetch_addr = proc.fallthrough(addr)
            detail = f" pred={pred.direction.value} mode={pred.mode.value}"
        elif instr.kind is Kind.INDIRECT_BRANCH:
            d.resolve_tick = self.tick + delay
            target = self.predictor.btb.lookup(addr)
            if target is None:
                d.stalled = True
                proc.stall = d
                self.events.append(f"{self.tick} stall {d.dseq} pid={pid} btb-miss")
            else:
                d.predicted_target = target
                proc.fetch_addr = target
                detail = f" pred_target={target:#x}"
        else:
            d.complete_tick = self.tick + (0 if instr.kind is Kind.HALT else delay)
            if instr.kind is Kind.HALT:
                proc.fetch_active = False
            else:
                proc.fetch_addr = proc.fallthrough(addr)
        if proc.fetch_addr is None and instr.kind is not Kind.HALT:
            proc.fetch_active = False
        self.events.append(
            f"{self.tick} fetch {d.dseq} pid={pid} addr={addr:#x} kind={instr.kind.value}{detail}"
        )


def run(
    programs: dict[int, list[Instruction]],
    schedule: list[int],
    policy: UpdatePolicy = DEFAULT_POLICY,
    predictor: PredictorState | None = None,
    env: dict | None = None,
    inflight_cap: int = 48,
    max_ticks: int = 100_000,
) -> tuple[RunResult, PredictorState]:
    predictor = predictor if predictor is not None else PredictorState()
    eng = Engine(programs, schedule, policy, predictor, env, inflight_cap, max_ticks)
    result = eng.run()
    return result, predictor
