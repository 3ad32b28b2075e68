"""Cross-subject grouping of discovered states.

States are compared by the symmetric KL divergence between the zero-mean
Gaussian models their spectra define, weighted by how often each state
occurs, with closed-form centroids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ClusteringError",
    "SubjectState",
    "ClusterModel",
    "map_spectrum",
    "normalize_spectrum",
    "symmetric_kl",
    "pairwise_symmetric_kl",
    "weighted_centroid",
    "weighted_kmeans",
    "representative_occurrences",
    "pooled_spectra",
    "subject_states",
    "distortion_sweep",
]


class ClusteringError(ValueError):
    pass


@dataclass
class SubjectState:
    subject: str
    state: int
    spectrum: np.ndarray
    occurrences: int
    normalized: np.ndarray = field(default=None)

    def __post_init__(self):
        self.spectrum = np.asarray(self.spectrum, dtype=float)
        if self.normalized is None:
            self.normalized = normalize_spectrum(self.spectrum)


@dataclass
class ClusterModel:
    """Fitted clusters.

    ``raw_centroids`` are the exact distortion minimizers used for
    assignment; ``centroids`` are the same rows renormalized to sum 1.
    """

    raw_centroids: np.ndarray  # (C, B)
    labels: np.ndarray  # (n_states,)
    weights: np.ndarray  # (n_states,)
    distortion: float
    history: list = field(default_factory=list)  # distortion per iteration, best restart
    n_iter: int = 0

    @property
    def C(self) -> int:
        return len(self.raw_centroids)

    @property
    def centroids(self) -> np.ndarray:
        return self.raw_centroids / self.raw_centroids.sum(axis=1, keepdims=True)

    def predict(self, spectra) -> np.ndarray:
        spectra = np.atleast_2d([normalize_spectrum(f) for f in np.atleast_2d(spectra)])
        return np.argmin(pairwise_symmetric_kl(spectra, self.raw_centroids), axis=1)


def _positive(f, what="spectrum") -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if np.any(~(f > 0)):
        raise ClusteringError(f"{what} entries must be positive")
    return f


def map_spectrum(shape, rate):
    """Mode of IG(shape, rate)."""
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(~(shape > 0)) or np.any(~(rate > 0)):
        raise ClusteringError("IG parameters must be positive")
    return rate / (shape + 1.0)


def normalize_spectrum(f) -> np.ndarray:
    f = _positive(f)
    return f / f.sum()


def symmetric_kl(f1, f2) -> float:
    """sum_j f1/f2 + f2/f1 - 2; zero iff f1 == f2."""
    f1 = _positive(f1)
    f2 = _positive(f2)
    if f1.shape != f2.shape:
        raise ClusteringError("spectra differ in length")
    r = f1 / f2
    return float(np.sum(r + 1.0 / r - 2.0))


def pairwise_symmetric_kl(A, Bm) -> np.ndarray:
    """(n, m) matrix of symmetric KL between rows of A and rows of Bm."""
    A = _positive(A)
    Bm = _positive(Bm)
    return A @ (1.0 / Bm).T + (1.0 / A) @ Bm.T - 2.0 * A.shape[1]


def weighted_centroid(members, weights, normalize: bool = True) -> np.ndarray:
    """Per band sqrt(sum n f / sum n/f), renormalized to sum 1 by default.

    The unnormalized value is the unique minimizer of sum_i n_i J(f_i; c),
    band by band.
    """
    members = _positive(np.atleast_2d(members), "member spectrum")
    w = np.asarray(weights, dtype=float)
    if len(members) == 0 or len(w) != len(members) or np.any(~(w > 0)):
        raise ClusteringError("need a nonempty member list with positive weights")
    c = np.sqrt((w @ members) / (w @ (1.0 / members)))
    return c / c.sum() if normalize else c


def _distortion(D, labels, w) -> float:
    return float(np.sum(w * D[np.arange(len(labels)), labels]))


def _seed(X, w, C, rng):
    """k-means++ seeding under the symmetric KL, weighted by occurrences."""
    n = len(X)
    first = rng.choice(n, p=w / w.sum())
    centers = [X[first]]
    d = pairwise_symmetric_kl(X, X[first][None])[:, 0]
    for _ in range(1, C):
        p = w * np.maximum(d, 0)
        if p.sum() <= 0:
            idx = rng.choice(n)
        else:
            idx = rng.choice(n, p=p / p.sum())
        centers.append(X[idx])
        d = np.minimum(d, pairwise_symmetric_kl(X, X[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(X, w, centers, max_iter):
    history = []
    labels = None
    for it in range(max_iter):
        D = pairwise_symmetric_kl(X, centers)
        new = np.argmin(D, axis=1)
        history.append(_distortion(D, new, w))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centers)):
            mask = labels == c
            if not mask.any():
                # re-seed from the state farthest from its centroid
                far = int(np.argmax(w * D[np.arange(len(X)), labels]))
                labels[far] = c
                mask = labels == c
            centers[c] = weighted_centroid(X[mask], w[mask], normalize=False)
    D = pairwise_symmetric_kl(X, centers)
    return labels, centers, _distortion(D, labels, w), history, it + 1


def weighted_kmeans(spectra, weights, C: int, seed=0, restarts: int = 20, max_iter: int = 500) -> ClusterModel:
    """Occurrence-weighted k-means under the symmetric KL; best of ``restarts``.

    ``spectra`` are rows of positive values (normalized here); distortion
    is sum_i n_i J(f_i; f_c(i)).
    """
    X = np.atleast_2d([normalize_spectrum(f) for f in np.atleast_2d(spectra)])
    w = np.asarray(weights, dtype=float)
    if C < 1 or C > len(X):
        raise ClusteringError(f"cannot form {C} clusters from {len(X)} states")
    if np.any(~(w > 0)):
        raise ClusteringError("weights must be positive")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        centers = _seed(X, w, C, rng)
        labels, centers, dist, hist, n_iter = _lloyd(X, w, centers.copy(), max_iter)
        if best is None or dist < best.distortion:
            best = ClusterModel(centers, labels, w, dist, hist, n_iter)
    return best


def representative_occurrences(counts) -> int:
    """Lower median of per-sample occurrence counts."""
    counts = np.sort(np.asarray(counts))
    if counts.size == 0:
        raise ClusteringError("need at least one posterior sample")
    return int(counts[(len(counts) - 1) // 2])


def pooled_spectra(samples) -> dict:
    """State -> IG mode with the data statistics of every visiting sample pooled.

    The data parts of each sample's posterior parameters are summed on top
    of the prior averaged over those samples.
    """
    acc = {}
    for smp in samples:
        for i, k in enumerate(smp.states):
            a = acc.setdefault(k, [[], [], []])
            a[0].append(np.asarray(smp.ig_shape[i]) - smp.prior_shape)
            a[1].append(np.asarray(smp.ig_rate[i]) - np.asarray(smp.prior_rate[i]))
            a[2].append(smp.prior_rate[i])
    prior_shape = samples[0].prior_shape if samples else 0.0
    return {
        k: map_spectrum(prior_shape + np.sum(a[0], axis=0), np.mean(a[2], axis=0) + np.sum(a[1], axis=0))
        for k, a in acc.items()
    }


def subject_states(subject: str, samples) -> list:
    """One SubjectState per state visited in the retained samples.

    Occurrences are the lower median over samples (0 where a sample does not
    visit the state); the spectrum comes from :func:`pooled_spectra`.
    States whose median occurrence is zero are dropped.
    """
    if not samples:
        raise ClusteringError("need at least one posterior sample")
    spectra = pooled_spectra(samples)
    out = []
    for k in sorted(spectra):
        counts = [smp.counts[smp.states.index(k)] if k in smp.states else 0 for smp in samples]
        n = representative_occurrences(counts)
        if n > 0:
            out.append(SubjectState(subject, int(k), spectra[k], n))
    return out


def distortion_sweep(spectra, weights, Cs, seed=0, restarts: int = 20) -> dict:
    """Best weighted distortion for each candidate cluster count."""
    return {int(C): weighted_kmeans(spectra, weights, C, seed, restarts).distortion for C in Cs}
