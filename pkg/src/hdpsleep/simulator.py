"""Sleep-inspired ground truth: an HMM over stages, each a sum of damped oscillators.

Each oscillator is a 2-D state rotated by 2*pi*f/Fs and damped by a per
step, driven by isotropic noise of variance q; the observation adds the
first coordinate of every oscillator plus white noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import lfilter

__all__ = [
    "SimulationError",
    "OscillatorSpec",
    "SimStage",
    "SimGroundTruth",
    "build_block_rotation",
    "observation_row",
    "noise_covariance",
    "theoretical_psd",
    "stationary_variance",
    "stationary_distribution",
    "sample_stage_chain",
    "simulate",
    "default_stages",
    "default_transition",
]


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class OscillatorSpec:
    freq: float  # Hz
    damping: float  # a_i in (0, 1)
    q: float  # per-coordinate process noise variance

    def check(self, fs: float) -> None:
        if not 0 < self.damping < 1:
            raise SimulationError(f"damping must lie in (0, 1), got {self.damping}")
        if not 0 <= self.freq < fs / 2:
            raise SimulationError(f"oscillator frequency {self.freq} outside [0, Fs/2)")
        if not self.q > 0:
            raise SimulationError("process noise variance must be positive")

    def time_constant(self) -> float:
        return -1.0 / np.log(self.damping)


@dataclass(frozen=True)
class SimStage:
    stage_id: int
    oscillators: tuple
    noise_var: float
    name: str = ""

    def check(self, fs: float) -> None:
        if not self.noise_var > 0:
            raise SimulationError("observation noise variance must be positive")
        for osc in self.oscillators:
            osc.check(fs)


@dataclass
class SimGroundTruth:
    stages: np.ndarray  # (T,) index into the stage list
    stage_ids: np.ndarray  # (T,) stage_id of each window
    transition: np.ndarray
    samples: np.ndarray  # (T*J,)
    fs: float
    J: int
    freqs: np.ndarray  # one-sided grid, Hz
    psd: np.ndarray = field(default=None)  # (n_stages, J//2) theoretical PSD

    @property
    def T(self) -> int:
        return len(self.stages)


def build_block_rotation(specs, fs: float) -> np.ndarray:
    """Block-diagonal 2D x 2D matrix of damped proper rotations."""
    D = len(specs)
    R = np.zeros((2 * D, 2 * D))
    for i, osc in enumerate(specs):
        if not 0 < osc.damping < 1:
            raise SimulationError(f"damping must lie in (0, 1), got {osc.damping}")
        th = 2 * np.pi * osc.freq / fs
        c, s = np.cos(th), np.sin(th)
        R[2 * i : 2 * i + 2, 2 * i : 2 * i + 2] = osc.damping * np.array([[c, -s], [s, c]])
    return R


def observation_row(D: int) -> np.ndarray:
    C = np.zeros(2 * D)
    C[::2] = 1.0
    return C


def noise_covariance(specs) -> np.ndarray:
    return np.diag(np.repeat([o.q for o in specs], 2))


def theoretical_psd(stage: SimStage, fs: float, freqs, J: int | None = None) -> np.ndarray:
    """Stationary PSD of the stage's observation at ``freqs`` (Hz).

    S(w) = H Q H* + noise_var with H = C (I - R e^{-iw})^{-1}, w = 2*pi*f/Fs.
    With ``J`` given the result is divided by J, the expected squared
    modulus of a 1/J-normalized DFT coefficient of a J-sample window.
    """
    specs = stage.oscillators
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    S = np.full(freqs.shape, float(stage.noise_var))
    if specs:
        R = build_block_rotation(specs, fs)
        C = observation_row(len(specs))
        Q = noise_covariance(specs)
        I = np.eye(len(C))
        for n, f in enumerate(freqs):
            H = np.linalg.solve((I - R * np.exp(-2j * np.pi * f / fs)).T, C)
            S[n] += float(np.real(H @ Q @ H.conj()))
    if J is not None:
        S = S / J
    return S


def stationary_variance(stage: SimStage, fs: float, n_grid: int = 20001) -> float:
    """Variance of y as the integral of the PSD over one period (trapezoid)."""
    f = np.linspace(-fs / 2, fs / 2, n_grid)
    return float(trapezoid(theoretical_psd(stage, fs, f), f) / fs)


def stationary_distribution(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    w, v = np.linalg.eig(P.T)
    p = np.real(v[:, np.argmin(np.abs(w - 1))])
    return p / p.sum()


def _check_transition(P, n: int) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.shape != (n, n):
        raise SimulationError(f"transition matrix must be {n}x{n}")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
        raise SimulationError("transition rows must be nonnegative and sum to 1")
    return P


def sample_stage_chain(P, T: int, rng: np.random.Generator, initial=None) -> np.ndarray:
    P = _check_transition(P, len(P))
    p0 = stationary_distribution(P) if initial is None else np.asarray(initial, dtype=float)
    cum = np.cumsum(P, axis=1)
    r = rng.random(T)
    s = np.empty(T, dtype=np.int64)
    s[0] = min(np.searchsorted(np.cumsum(p0), r[0] * p0.sum(), side="right"), len(P) - 1)
    for t in range(1, T):
        s[t] = min(np.searchsorted(cum[s[t - 1]], r[t] * cum[s[t - 1], -1], side="right"), len(P) - 1)
    return s


def _run(stage: SimStage, n: int, fs: float, rng: np.random.Generator) -> np.ndarray:
    """n samples of one stage after re-equilibrating for 100 time constants."""
    y = np.sqrt(stage.noise_var) * rng.standard_normal(n)
    if not stage.oscillators:
        return y
    warm = int(np.ceil(100 * max(o.time_constant() for o in stage.oscillators)))
    for osc in stage.oscillators:
        pole = osc.damping * np.exp(2j * np.pi * osc.freq / fs)
        sd = np.sqrt(osc.q)
        e = sd * rng.standard_normal(warm + n) + 1j * sd * rng.standard_normal(warm + n)
        # x_{l+1} = R x_l + v_l  <=>  z_{l+1} = pole * z_l + e_l with z = x_1 + i x_2
        z = lfilter([0.0, 1.0], [1.0, -pole], e)
        y += z[warm:].real
    return y


def simulate(stages, transition, T: int, J: int, fs: float, seed=None, initial=None) -> SimGroundTruth:
    """Sample a stage chain (one stage per window) and the observed series."""
    if T < 1 or J < 1:
        raise SimulationError("T and J must be positive")
    stages = list(stages)
    for st in stages:
        st.check(fs)
    P = _check_transition(transition, len(stages))
    rng = np.random.default_rng(seed)
    path = sample_stage_chain(P, T, rng, initial)
    samples = np.empty(T * J)
    start = 0
    while start < T:
        stop = start
        while stop < T and path[stop] == path[start]:
            stop += 1
        stage = stages[path[start]]
        samples[start * J : stop * J] = _run(stage, (stop - start) * J, fs, rng)
        start = stop
    freqs = np.arange(J // 2) * fs / J
    psd = np.vstack([theoretical_psd(st, fs, freqs, J) for st in stages])
    ids = np.array([st.stage_id for st in stages])[path]
    return SimGroundTruth(path, ids, P, samples, float(fs), int(J), freqs, psd)


def default_stages() -> list:
    """Five-stage fixture; stage_id doubles as the hypnogram code (5 = wake).

    Values are repository test data chosen so that normalized power in the
    10.5-12.5 Hz band rises with the stage code.
    """
    O = OscillatorSpec
    return [
        SimStage(1, (O(1.0, 0.99, 6.0), O(3.0, 0.97, 1.0)), 1.0, "NREM3"),
        SimStage(2, (O(1.5, 0.98, 2.5), O(13.5, 0.97, 1.2), O(5.0, 0.96, 0.6)), 1.0, "NREM2"),
        SimStage(3, (O(6.0, 0.97, 1.5), O(2.0, 0.97, 0.5), O(11.0, 0.96, 0.5)), 1.0, "NREM1"),
        SimStage(4, (O(7.5, 0.96, 1.2), O(11.5, 0.96, 1.0), O(20.0, 0.9, 0.8)), 1.0, "REM"),
        SimStage(5, (O(11.0, 0.98, 2.5), O(20.0, 0.9, 1.0)), 1.0, "WAKE"),
    ]


def default_transition() -> np.ndarray:
    P = np.array(
        [
            [0.90, 0.05, 0.02, 0.02, 0.01],
            [0.04, 0.90, 0.04, 0.01, 0.01],
            [0.01, 0.04, 0.90, 0.04, 0.01],
            [0.01, 0.01, 0.04, 0.90, 0.04],
            [0.01, 0.02, 0.02, 0.05, 0.90],
        ]
    )
    return P
