"""Hybrid branch predictor model: saturating counters, two PHTs, GHR, BTB,
and tournament mode selection."""

from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass, field, replace


class Direction(enum.Enum):
    TAKEN = "T"
    NOT_TAKEN = "N"

    def opposite(self) -> "Direction":
        return Direction.NOT_TAKEN if self is Direction.TAKEN else Direction.TAKEN

    def __repr__(self):
        return self.value


def parse_outcomes(s: str) -> list[Direction]:
    """Parse a "TNTNTN"-style outcome string."""
    out = []
    for ch in s.upper():
        if ch == "T":
            out.append(Direction.TAKEN)
        elif ch == "N":
            out.append(Direction.NOT_TAKEN)
        else:
            raise ValueError(f"bad outcome char {ch!r}")
    return out


class Mode(enum.Enum):
    ONE_LEVEL = "one-level"
    HISTORY = "history"


def counter_predict(value: int, width: int) -> Direction:
    """Low half of the counter range predicts taken."""
    return Direction.TAKEN if value < (1 << (width - 1)) else Direction.NOT_TAKEN


def counter_update(value: int, width: int, outcome: Direction) -> int:
    """Step toward 0 on taken, toward 2^width-1 on not-taken, saturating."""
    if outcome is Direction.TAKEN:
        return max(value - 1, 0)
    return min(value + 1, (1 << width) - 1)


@dataclass
class SaturatingCounter:
    width: int
    value: int

    def __post_init__(self):
        if self.width < 2:
            raise ValueError("counter width must be >= 2")
        if not 0 <= self.value < (1 << self.width):
            raise ValueError("counter value out of range")

    def predict(self) -> Direction:
        return counter_predict(self.value, self.width)

    def update(self, outcome: Direction) -> "SaturatingCounter":
        return replace(self, value=counter_update(self.value, self.width, outcome))


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class PredictorConfig:
    one_level_bits: int = 2
    history_bits: int = 3
    pht_entries_one_level: int = 1024
    pht_entries_history: int = 4096
    ghr_depth: int = 12
    target_bits_per_entry: int = 2
    btb_entries: int = 512
    transition_threshold: int = 3
    index_salt: int = 0
    # None = mispredictions of every branch feed the selector; otherwise only
    # the listed branch addresses do.
    monitored_branches: frozenset[int] | None = None

    def __post_init__(self):
        if not _is_pow2(self.pht_entries_one_level):
            raise ValueError("pht_entries_one_level must be a power of two")
        if not _is_pow2(self.pht_entries_history):
            raise ValueError("pht_entries_history must be a power of two")
        if not _is_pow2(self.btb_entries):
            raise ValueError("btb_entries must be a power of two")
        if self.transition_threshold < 1:
            raise ValueError("transition_threshold must be >= 1")
        if self.one_level_bits < 2 or self.history_bits < 2:
            raise ValueError("counter widths must be >= 2")

    @property
    def ghr_width_bits(self) -> int:
        return self.ghr_depth * self.target_bits_per_entry

    def counter_width(self, mode: Mode) -> int:
        return self.one_level_bits if mode is Mode.ONE_LEVEL else self.history_bits


def index_one_level(addr: int, config: PredictorConfig) -> int:
    """Address bits above the 4-byte alignment field, modulo table size."""
    return (addr >> 2) & (config.pht_entries_one_level - 1)


class GlobalHistoryRegister:
    """Fixed-depth queue of partial target-address bits of taken branches."""

    def __init__(self, config: PredictorConfig, entries=None):
        self._depth = config.ghr_depth
        self._bits = config.target_bits_per_entry
        init = entries if entries is not None else [0] * self._depth
        if len(init) != self._depth:
            raise ValueError("GHR entry count must equal ghr_depth")
        self._q = deque(init, maxlen=self._depth)

    @property
    def entries(self) -> list[int]:
        return list(self._q)

    def insert_taken(self, target: int) -> None:
        self._q.append(target & ((1 << self._bits) - 1))

    def folded(self, width: int) -> int:
        """Xor-fold the concatenated history word down to `width` bits."""
        word = 0
        for e in self._q:
            word = (word << self._bits) | e
        mask = (1 << width) - 1
        out = 0
        while word:
            out ^= word & mask
            word >>= width
        return out

    def clone(self) -> "GlobalHistoryRegister":
        c = object.__new__(GlobalHistoryRegister)
        c._depth = self._depth
        c._bits = self._bits
        c._q = deque(self._q, maxlen=self._depth)
        return c


def index_history(addr: int, ghr: GlobalHistoryRegister, config: PredictorConfig) -> int:
    width = (config.pht_entries_history - 1).bit_length()
    return (ghr.folded(width) ^ (addr >> 2) ^ config.index_salt) & (
        config.pht_entries_history - 1
    )


def ghr_insert_taken(
    ghr: GlobalHistoryRegister, target: int, config: PredictorConfig
) -> GlobalHistoryRegister:
    out = ghr.clone()
    out.insert_taken(target)
    return out


class BranchTargetBuffer:
    """Direct-mapped, per-core (process-agnostic) target buffer."""

    def __init__(self, entries: int):
        if not _is_pow2(entries):
            raise ValueError("btb_entries must be a power of two")
        self._n = entries
        self._idx_bits = (entries - 1).bit_length()
        self.slots: list[tuple[int, int] | None] = [None] * entries

    def _index(self, addr: int) -> int:
        return (addr >> 2) & (self._n - 1)

    def _tag(self, addr: int) -> int:
        return addr >> (2 + self._idx_bits)

    def lookup(self, addr: int) -> int | None:
        slot = self.slots[self._index(addr)]
        if slot is not None and slot[0] == self._tag(addr):
            return slot[1]
        return None

    def update(self, addr: int, target: int) -> None:
        self.slots[self._index(addr)] = (self._tag(addr), target)

    def clone(self) -> "BranchTargetBuffer":
        c = BranchTargetBuffer(self._n)
        c.slots = list(self.slots)
        return c


@dataclass
class TournamentSelector:
    mode: Mode = Mode.ONE_LEVEL
    mispredict_accumulator: int = 0
    # Frozen selectors never transition; attack harnesses use this to model
    # the re-enforcement procedures that keep one prediction mode active.
    frozen: bool = False


@dataclass
class Prediction:
    direction: Direction
    mode: Mode
    index: int


class PredictorState:
    """Complete per-core predictor state shared by all simulated processes."""

    def __init__(self, config: PredictorConfig | None = None):
        self.config = config or PredictorConfig()
        weak_one = 1 << (self.config.one_level_bits - 1)
        weak_hist = 1 << (self.config.history_bits - 1)
        self.pht_one_level = [weak_one] * self.config.pht_entries_one_level
        self.pht_history = [weak_hist] * self.config.pht_entries_history
        self.ghr = GlobalHistoryRegister(self.config)
        self.btb = BranchTargetBuffer(self.config.btb_entries)
        self.selector = TournamentSelector()

    # -- tables ----------------------------------------------------------

    def table(self, mode: Mode) -> list[int]:
        return self.pht_one_level if mode is Mode.ONE_LEVEL else self.pht_history

    def index_for(self, addr: int, mode: Mode) -> int:
        if mode is Mode.ONE_LEVEL:
            return index_one_level(addr, self.config)
        return index_history(addr, self.ghr, self.config)

    def counter(self, mode: Mode, index: int) -> int:
        return self.table(mode)[index]

    # -- prediction / resolution ----------------------------------------

    def predict(self, addr: int) -> Prediction:
        mode = self.selector.mode
        index = self.index_for(addr, mode)
        value = self.table(mode)[index]
        return Prediction(counter_predict(value, self.config.counter_width(mode)), mode, index)

    def apply_counter_update(self, mode: Mode, index: int, outcome: Direction) -> None:
        tbl = self.table(mode)
        tbl[index] = counter_update(tbl[index], self.config.counter_width(mode), outcome)

    def note_resolution(self, addr: int, mode_used: Mode, mispredicted: bool) -> None:
        sel = self.selector
        if sel.frozen or mode_used is not Mode.ONE_LEVEL or not mispredicted:
            return
        monitored = self.config.monitored_branches
        if monitored is not None and addr not in monitored:
            return
        sel.mispredict_accumulator += 1
        if sel.mispredict_accumulator >= self.config.transition_threshold:
            sel.mode = Mode.HISTORY

    def ghr_insert(self, target: int) -> None:
        self.ghr.insert_taken(target)

    def record_resolution(
        self,
        addr: int,
        outcome: Direction,
        mode_used: Mode | None = None,
        mispredicted: bool | None = None,
        target: int | None = None,
        index: int | None = None,
    ) -> None:
        """Committed-path resolution: update the active-mode counter, feed the
        selector, and record taken targets into the GHR."""
        if mode_used is None or mispredicted is None or index is None:
            pred = self.predict(addr)
            mode_used = mode_used if mode_used is not None else pred.mode
            index = index if index is not None else pred.index
            if mispredicted is None:
                mispredicted = pred.direction is not outcome
        self.apply_counter_update(mode_used, index, outcome)
        self.note_resolution(addr, mode_used, mispredicted)
        if outcome is Direction.TAKEN:
            self.ghr_insert(target if target is not None else addr)

    def randomize_reset(self, seed: int) -> None:
        """Model the effect of a long random-outcome branch storm: scrambled
        PHTs and GHR, one-level mode selected, accumulator cleared."""
        rng = random.Random(seed)
        self.pht_one_level = [
            rng.randrange(1 << self.config.one_level_bits)
            for _ in range(self.config.pht_entries_one_level)
        ]
        self.pht_history = [
            rng.randrange(1 << self.config.history_bits)
            for _ in range(self.config.pht_entries_history)
        ]
        self.ghr = GlobalHistoryRegister(
            self.config,
            [rng.randrange(1 << self.config.target_bits_per_entry)
             for _ in range((self.config.ghr_depth))],
        )
        self.selector.mode = Mode.ONE_LEVEL
        self.selector.mispredict_accumulator = 0

    def clone(self) -> "PredictorState":
        c = object.__new__(PredictorState)
        c.config = self.config
        c.pht_one_level = list(self.pht_one_level)
        c.pht_history = list(self.pht_history)
        c.ghr = self.ghr.clone()
        c.btb = self.btb.clone()
        c.selector = TournamentSelector(
            self.selector.mode, self.selector.mispredict_accumulator, self.selector.frozen
        )
        return c

    def state_fingerprint(self) -> tuple:
        return (
            tuple(self.pht_one_level),
            tuple(self.pht_history),
            tuple(self.ghr.entries),
            tuple(self.btb.slots),
            self.selector.mode,
            self.selector.mispredict_accumulator,
        )
