"""Scoring model trajectories against hypnograms and summarizing clusters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "EvaluationError",
    "STAGE_CODES",
    "Hypnogram",
    "AlignedTrajectories",
    "alpha_band_indices",
    "reorder_by_alpha",
    "spearman_rho",
    "rho_distribution",
    "modal_trajectory",
    "stage_cluster_heatmap",
    "transition_rate_per_minute",
    "transition_rates",
]

STAGE_CODES = {"WAKE": 5, "REM": 4, "NREM1": 3, "NREM2": 2, "NREM3": 1}


class EvaluationError(ValueError):
    pass


@dataclass
class Hypnogram:
    labels: np.ndarray
    epoch_seconds: float = 30.0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if np.any((self.labels < 1) | (self.labels > 5)):
            raise EvaluationError("hypnogram labels must lie in 1..5")

    def per_window(self, window_seconds: float, T: int) -> np.ndarray:
        """One label per model window; 0 where the hypnogram does not reach."""
        ratio = self.epoch_seconds / window_seconds
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise EvaluationError("epoch length must be a whole multiple of the window length")
        rep = np.repeat(self.labels, int(round(ratio)))[:T]
        out = np.zeros(T, dtype=np.int64)
        out[: len(rep)] = rep
        return out


@dataclass
class AlignedTrajectories:
    hypnogram: np.ndarray  # per window, 0 = unscored
    labels: np.ndarray  # per window state or cluster id
    window_seconds: float = 15.0

    def __post_init__(self):
        self.hypnogram = np.asarray(self.hypnogram, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.hypnogram.shape != self.labels.shape:
            raise EvaluationError("hypnogram and trajectory differ in length")
        if self.hypnogram.size == 0:
            raise EvaluationError("empty trajectories")


def alpha_band_indices(bands, alpha_band=(10.5, 12.5)) -> np.ndarray:
    lo, hi = alpha_band
    idx = [i for i, (b_lo, b_hi) in enumerate(bands) if b_lo >= lo - 1e-9 and b_hi <= hi + 1e-9]
    if not idx:
        raise EvaluationError(f"alpha band {alpha_band} covers no retained band")
    return np.asarray(idx)


def reorder_by_alpha(spectra, bands, alpha_band=(10.5, 12.5), state_ids=None) -> dict:
    """Map state id -> rank (1 = most normalized alpha power).

    Ties fall back to total power (descending), then state id (ascending).
    """
    spectra = np.atleast_2d(np.asarray(spectra, dtype=float))
    if state_ids is None:
        state_ids = list(range(len(spectra)))
    idx = alpha_band_indices(bands, alpha_band)
    total = spectra.sum(axis=1)
    alpha = spectra[:, idx].sum(axis=1) / total
    order = sorted(range(len(spectra)), key=lambda i: (-alpha[i], -total[i], state_ids[i]))
    return {int(state_ids[i]): rank + 1 for rank, i in enumerate(order)}


def spearman_rho(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise EvaluationError("need two equal-length sequences of length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise EvaluationError("rho undefined for a constant sequence")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    return float(np.clip(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


def rho_distribution(samples, hypnogram_windows, bands, alpha_band=(10.5, 12.5)) -> dict:
    """Spearman rho of every retained trajectory against the hypnogram.

    Each sample's states are ranked by its own alpha power; the arousal
    score of a window is minus that rank so that higher means more alert,
    matching the hypnogram coding.  Unscored windows (0) are skipped.
    """
    if not samples:
        raise EvaluationError("need at least one posterior sample")
    hyp = np.asarray(hypnogram_windows)
    keep = hyp > 0
    rhos = []
    for smp in samples:
        ranks = reorder_by_alpha(smp.f, bands, alpha_band, smp.states)
        score = -np.array([ranks[k] for k in np.asarray(smp.s)[keep]], dtype=float)
        rhos.append(spearman_rho(score, hyp[keep]))
    return {"rhos": rhos, "median": float(np.median(rhos))}


def modal_trajectory(samples) -> np.ndarray:
    """Per-window most frequent state across samples (smallest label on ties)."""
    S = np.array([smp.s for smp in samples])
    K = S.max() + 1
    counts = np.zeros((S.shape[1], K), dtype=np.int64)
    for row in S:
        counts[np.arange(S.shape[1]), row] += 1
    return counts.argmax(axis=1)


def stage_cluster_heatmap(aligned: AlignedTrajectories, clusters, stages=(1, 2, 3, 4, 5)):
    """Proportion of each stage's windows falling in each cluster.

    ``clusters`` lists cluster ids in display order (ascending alpha power).
    Returns (matrix of shape (len(clusters), len(stages)), list of stages
    with no windows, whose columns are left at zero).
    """
    clusters = list(clusters)
    pos = {c: i for i, c in enumerate(clusters)}
    H = np.zeros((len(clusters), len(stages)))
    empty = []
    for j, stage in enumerate(stages):
        lab = aligned.labels[aligned.hypnogram == stage]
        if lab.size == 0:
            empty.append(stage)
            continue
        for c in lab:
            H[pos[int(c)], j] += 1
        H[:, j] /= lab.size
    return H, empty


def transition_rate_per_minute(aligned: AlignedTrajectories, stage: int) -> float:
    """Label changes between consecutive windows both in ``stage`` per stage-minute."""
    in_stage = aligned.hypnogram == stage
    n = int(in_stage.sum())
    if n == 0:
        raise EvaluationError(f"stage {stage} occupies no windows")
    both = in_stage[1:] & in_stage[:-1]
    changes = int(np.sum(both & (aligned.labels[1:] != aligned.labels[:-1])))
    return changes / (n * aligned.window_seconds / 60.0)


def transition_rates(aligned: AlignedTrajectories, stages=(1, 2, 3, 4, 5)) -> dict:
    return {
        int(s): transition_rate_per_minute(aligned, s) for s in stages if np.any(aligned.hypnogram == s)
    }
