"""Attacker-visible probe latency model and trace decoding."""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass


class NoiseKind(enum.Enum):
    NONE = "none"
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class LatencyModel:
    base_latency: int = 10
    mispredict_penalty: int = 40
    noise: NoiseKind = NoiseKind.NONE
    noise_param: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mispredict_penalty <= 0:
            raise ValueError("mispredict_penalty must be > 0")

    @property
    def threshold(self) -> float:
        return self.base_latency + self.mispredict_penalty / 2

    def sampler(self) -> "LatencySampler":
        return LatencySampler(self)


class LatencySampler:
    """Owns the seeded noise stream for one simulation run.

    Gaussian noise is drawn as a standard normal scaled by sigma, so runs
    that share a seed see error counts monotone in sigma.
    """

    def __init__(self, model: LatencyModel):
        self.model = model
        self._rng = random.Random(model.seed)

    def measure(self, mispredict: bool) -> int:
        m = self.model
        lat = m.base_latency + (m.mispredict_penalty if mispredict else 0)
        if m.noise is NoiseKind.UNIFORM:
            lat += self._rng.randint(-int(m.noise_param), int(m.noise_param))
        elif m.noise is NoiseKind.GAUSSIAN:
            lat += round(self._rng.gauss(0.0, 1.0) * m.noise_param)
        return lat


def measure(mispredict: bool, model: LatencyModel, sampler: LatencySampler | None = None) -> int:
    return (sampler or model.sampler()).measure(mispredict)


@dataclass
class LatencyTrace:
    samples: list[tuple[int, int]]

    def __post_init__(self):
        last = None
        for idx, _ in self.samples:
            if last is not None and idx <= last:
                raise ValueError("probe indices must be strictly increasing")
            last = idx

    def append(self, probe_index: int, latency: int) -> None:
        if self.samples and probe_index <= self.samples[-1][0]:
            raise ValueError("probe indices must be strictly increasing")
        self.samples.append((probe_index, latency))

    def csv_lines(self) -> list[str]:
        return ["probe_index,latency"] + [f"{i},{lat}" for i, lat in self.samples]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")


def classify(trace: LatencyTrace, model: LatencyModel) -> list[bool]:
    """Threshold each sample; True means the probe looked like a mispredict."""
    thr = model.threshold
    return [lat > thr for _, lat in trace.samples]
