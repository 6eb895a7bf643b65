"""Posterior statistics, iteration-count comparisons and error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

COV_MAX_DIM = 64


@dataclass(frozen=True)
class PosteriorSamples:
    """Draws ``(m, N_x)`` with statistics recomputed from them on access."""
    draws: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.draws, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] < 2:
            raise ConfigError("need an (m, N_x) array of draws with m >= 2")
        object.__setattr__(self, "draws", d)

    def _shifted(self):
        # centring on the first draw keeps identical draws exactly zero-spread
        return self.draws - self.draws[0]

    @property
    def mean(self) -> np.ndarray:
        return self.draws[0] + self._shifted().mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self._shifted().std(axis=0, ddof=1)

    @property
    def cov(self) -> np.ndarray | None:
        if self.draws.shape[1] > COV_MAX_DIM:
            return None
        return np.atleast_2d(np.cov(self._shifted(), rowvar=False))


def posterior_stats(draws) -> PosteriorSamples:
    return PosteriorSamples(draws)


def smoothed(values, window: int) -> np.ndarray:
    """Trailing window means; entry ``k`` averages ``values[k : k + window]``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ConfigError(f"trace of length {v.size} is shorter than the smoothing window {window}")
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window


def iters_to_threshold(values, threshold: float, window: int = 100) -> int | None:
    """Iterations run until the trailing window mean first reaches ``threshold``
    (the window's last index + 1), or ``None`` if it never does."""
    hit = np.flatnonzero(smoothed(values, window) <= threshold)
    return int(hit[0]) + window if hit.size else None


@dataclass(frozen=True)
class SpeedupRow:
    mode: str
    seed: int
    iters_to_threshold: int | None
    ratio: float
    initial_loss: float
    final_loss: float


def compare_speedup(traces: dict, window: int = 100):
    """Rows and per-mode median ratios from ``{(mode, seed): values}``.

    The threshold for each seed is the scratch run's final window mean;
    ``ratio`` is the mode's iterations-to-threshold over scratch's (``inf``
    if the mode never reaches it).
    """
    seeds = sorted({s for (_, s) in traces})
    modes = sorted({m for (m, _) in traces}, key=lambda m: (m != "scratch", m))
    rows = []
    for seed in seeds:
        if ("scratch", seed) not in traces:
            raise ConfigError(f"seed {seed} has no scratch trace")
        if len([m for m in modes if (m, seed) in traces]) < 2:
            raise ConfigError(f"seed {seed} needs a scratch trace and at least one other mode")
        ref = smoothed(traces[("scratch", seed)], window)
        threshold = ref[-1]
        base = iters_to_threshold(traces[("scratch", seed)], threshold, window)
        for mode in modes:
            if (mode, seed) not in traces:
                continue
            vals = traces[(mode, seed)]
            sm = smoothed(vals, window)
            its = iters_to_threshold(vals, threshold, window)
            ratio = float("inf") if its is None else its / base
            rows.append(SpeedupRow(mode, seed, its, ratio, float(sm[0]), float(sm[-1])))
    medians = {m: float(np.median([r.ratio for r in rows if r.mode == m])) for m in modes}
    return rows, medians


def relative_l2(estimate, reference) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    return float(np.linalg.norm(np.asarray(estimate) - reference) / np.linalg.norm(reference))


def psnr(estimate, truth) -> float:
    """Peak signal-to-noise ratio in dB, peak taken as ``max |truth|``."""
    truth = np.asarray(truth, dtype=np.float64)
    mse = np.mean((np.asarray(estimate, dtype=np.float64) - truth) ** 2)
    return float(10.0 * np.log10(np.max(np.abs(truth)) ** 2 / mse))
