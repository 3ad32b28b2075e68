"""Windowing, DPSS tapers and band-wise spectral observations.

All DFT coefficients follow the 1/J convention

    y(w_j) = (1/J) * sum_l y_l * exp(-2i*pi*(j-1)*(l-1)/J),   w_j = (j-1)/J,

kept on the one-sided grid j = 1..J/2 (the Nyquist bin is dropped).  Under
this convention E|y(w_j)|^2 ~= S(2*pi*w_j)/J for a process with spectral
density S, which is the scale every PSD in this package is reported in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

__all__ = [
    "SignalError",
    "WindowedSeries",
    "TaperBank",
    "BandSpec",
    "SpectralObservation",
    "DEFAULT_BANDS",
    "segment_windows",
    "compute_dpss",
    "dpss_concentration",
    "dft",
    "tapered_dft",
    "multitaper_psd",
    "window_power",
    "reject_artifacts",
    "band_bins",
    "extract_band_observations",
    "observe",
]

DEFAULT_BANDS = (
    (0.5, 2.5),
    (2.5, 4.5),
    (4.5, 6.5),
    (6.5, 8.5),
    (10.5, 12.5),
    (12.5, 35.0),
)


class SignalError(ValueError):
    """Invalid signal-processing input or configuration."""


@dataclass(frozen=True)
class WindowedSeries:
    samples: np.ndarray
    fs: float
    J: int
    valid_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid_mask is None:
            object.__setattr__(self, "valid_mask", np.ones(self.T, dtype=bool))

    @property
    def T(self) -> int:
        return len(self.samples) // self.J

    @property
    def windows(self) -> np.ndarray:
        """(T, J) view of the retained samples."""
        return self.samples[: self.T * self.J].reshape(self.T, self.J)

    @property
    def window_seconds(self) -> float:
        return self.J / self.fs


@dataclass(frozen=True)
class TaperBank:
    J: int
    M: int
    TW: float
    tapers: np.ndarray  # (M, J), unit energy rows
    concentrations: np.ndarray  # (M,)


@dataclass(frozen=True)
class BandSpec:
    bands: tuple
    fs: float
    J: int

    def __post_init__(self):
        prev_hi = -np.inf
        for lo, hi in self.bands:
            if not lo < hi:
                raise SignalError(f"band ({lo}, {hi}) is empty")
            if lo < prev_hi:
                raise SignalError("bands must be ascending and non-overlapping")
            prev_hi = hi

    def bins(self) -> list:
        return [band_bins(lo, hi, self.fs, self.J) for lo, hi in self.bands]


@dataclass
class SpectralObservation:
    """Band-wise tapered DFT coefficients for a run of windows.

    ``coeffs`` has shape (T, B, M) and is complex; ``indices`` holds the
    selected 0-based frequency bin per window and band; ``valid`` marks
    windows that survived artifact rejection.
    """

    coeffs: np.ndarray
    indices: np.ndarray
    valid: np.ndarray
    fs: float
    J: int
    bands: tuple

    @property
    def T(self) -> int:
        return self.coeffs.shape[0]

    @property
    def B(self) -> int:
        return self.coeffs.shape[1]

    @property
    def M(self) -> int:
        return self.coeffs.shape[2]

    def power_sums(self) -> np.ndarray:
        """Per window and band, sum over tapers of Re^2 + Im^2, shape (T, B)."""
        return np.sum(self.coeffs.real**2 + self.coeffs.imag**2, axis=2)

    def subset(self, sl) -> "SpectralObservation":
        return SpectralObservation(
            self.coeffs[sl], self.indices[sl], self.valid[sl], self.fs, self.J, self.bands
        )


def segment_windows(series, fs: float, window_seconds: float) -> WindowedSeries:
    """Split a series into floor(N/J) contiguous windows of J samples."""
    series = np.asarray(series, dtype=float)
    J_float = window_seconds * fs
    J = int(round(J_float))
    if J < 1 or abs(J - J_float) > 1e-9 * max(1.0, J_float):
        raise SignalError(f"window_seconds*fs = {J_float} is not a positive integer")
    if series.ndim != 1:
        raise SignalError("expected a single-channel series")
    if len(series) < J:
        raise SignalError("insufficient data: series shorter than one window")
    return WindowedSeries(series, float(fs), J)


def _odd_sign_index(h: np.ndarray) -> int:
    thresh = max(1e-7, 1.0 / len(h))
    return int(np.flatnonzero(h * h > thresh)[0])


def dpss_concentration(tapers: np.ndarray, W: float) -> np.ndarray:
    """Fraction of each taper's energy inside |f| <= W (cycles/sample).

    Uses the autocorrelation form lambda = sum_k r_k * sin(2*pi*W*k)/(pi*k).
    """
    tapers = np.atleast_2d(tapers)
    J = tapers.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * J)))
    spec = np.fft.rfft(tapers, nfft, axis=1)
    r = np.fft.irfft(np.abs(spec) ** 2, nfft, axis=1)[:, :J]
    k = np.arange(1, J)
    kernel = np.concatenate(([2 * W], 2 * np.sin(2 * np.pi * W * k) / (np.pi * k)))
    return r @ kernel


def compute_dpss(J: int, TW: float, M: int) -> TaperBank:
    """First M Slepian sequences of length J with half-bandwidth W = TW/J.

    Solved as the symmetric tridiagonal eigenproblem that commutes with the
    sinc concentration kernel.  Even tapers have nonnegative mean; odd tapers
    start with a positive lobe.
    """
    if M < 1:
        raise SignalError("need at least one taper")
    if M > 2 * TW - 1:
        raise SignalError("taper count exceeds concentration budget (M > 2*TW - 1)")
    if J < 2 * M:
        raise SignalError("window too short for the requested taper count")
    W = TW / J
    l = np.arange(J)
    diag = ((J - 1 - 2 * l) / 2.0) ** 2 * np.cos(2 * np.pi * W)
    off = l[1:] * (J - l[1:]) / 2.0
    _, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(J - M, J - 1))
    tapers = vecs[:, ::-1].T.copy()
    tapers /= np.linalg.norm(tapers, axis=1, keepdims=True)
    for m in range(M):
        if m % 2 == 0:
            if tapers[m].sum() < 0:
                tapers[m] *= -1
        elif tapers[m, _odd_sign_index(tapers[m])] < 0:
            tapers[m] *= -1
    conc = dpss_concentration(tapers, W)
    tapers.setflags(write=False)
    conc.setflags(write=False)
    return TaperBank(J=J, M=M, TW=float(TW), tapers=tapers, concentrations=conc)


def dft(window, one_sided: bool = True) -> np.ndarray:
    """Untapered DFT with the 1/J normalization.

    Returns bins j = 1..J/2 when ``one_sided`` else all J bins.  Works along
    the last axis.
    """
    window = np.asarray(window, dtype=float)
    J = window.shape[-1]
    Y = np.fft.fft(window, axis=-1) / J
    if one_sided:
        return Y[..., : J // 2]
    return Y


def tapered_dft(window, tapers: TaperBank) -> np.ndarray:
    """Tapered coefficients for one window (J,) or a stack (..., J).

    Returns shape (..., M, J//2).  Tapers are rescaled by sqrt(J) so that
    their energy equals the rectangular window's, which keeps tapered and
    untapered coefficients on the same 1/J power scale.
    """
    window = np.asarray(window, dtype=float)
    J = window.shape[-1]
    if J != tapers.J:
        raise SignalError(f"window length {J} does not match taper length {tapers.J}")
    x = window[..., None, :] * (np.sqrt(J) * tapers.tapers)
    return np.fft.rfft(x, axis=-1)[..., : J // 2] / J


def multitaper_psd(coeffs) -> np.ndarray:
    """Average of the M tapered periodograms; taper axis is -2."""
    coeffs = np.asarray(coeffs)
    if coeffs.ndim < 2 or coeffs.shape[-2] < 1:
        raise SignalError("expected coefficients shaped (..., M, n_freq)")
    return np.mean(coeffs.real**2 + coeffs.imag**2, axis=-2)


def window_power(ws: WindowedSeries) -> np.ndarray:
    return np.sum(ws.windows**2, axis=1)


def reject_artifacts(ws: WindowedSeries, percentile: float = 95.0) -> np.ndarray:
    """Validity mask: False where a window's total power exceeds the percentile.

    The percentile is taken over per-window total power with linear
    interpolation; windows strictly above it are rejected.
    """
    if not 0 < percentile <= 100:
        raise SignalError("percentile must lie in (0, 100]")
    power = window_power(ws)
    cutoff = np.percentile(power, percentile)
    return ~(power > cutoff)


def band_bins(lo: float, hi: float, fs: float, J: int) -> np.ndarray:
    """0-based one-sided bins k (k < J/2) with lo <= k*fs/J < hi."""
    k = np.arange(J // 2)
    f = k * fs / J
    return k[(f >= lo) & (f < hi)]


def _lower_median_index(values: np.ndarray) -> np.ndarray:
    """Column position of the lower median along the last axis."""
    n = values.shape[-1]
    order = np.argsort(values, axis=-1, kind="stable")
    return order[..., (n - 1) // 2]


def extract_band_observations(coeffs, psd, bands, fs: float, valid=None) -> SpectralObservation:
    """Select, per window and band, the bin whose multitaper power is the band median.

    Parameters
    ----------
    coeffs : complex array (T, M, J//2)
    psd : real array (T, J//2)
    bands : sequence of (lo_Hz, hi_Hz)
    fs : sampling rate
    valid : optional boolean mask (T,)
    """
    coeffs = np.asarray(coeffs)
    psd = np.asarray(psd, dtype=float)
    if coeffs.ndim == 2:
        coeffs = coeffs[None]
        psd = psd[None]
    T, M, half = coeffs.shape
    J = 2 * half
    spec = BandSpec(tuple(tuple(map(float, b)) for b in bands), float(fs), J)
    out = np.empty((T, len(spec.bands), M), dtype=complex)
    idx = np.empty((T, len(spec.bands)), dtype=np.int64)
    rows = np.arange(T)
    for b, bins in enumerate(spec.bins()):
        if bins.size == 0:
            lo, hi = spec.bands[b]
            raise SignalError(f"band [{lo}, {hi}) Hz contains no frequency bins")
        pick = bins[_lower_median_index(psd[:, bins])]
        idx[:, b] = pick
        out[:, b, :] = coeffs[rows, :, pick]
    if valid is None:
        valid = np.ones(T, dtype=bool)
    return SpectralObservation(out, idx, np.asarray(valid, dtype=bool), spec.fs, J, spec.bands)


def observe(
    series,
    fs: float,
    window_seconds: float = 15.0,
    bands=DEFAULT_BANDS,
    TW: float = 4.0,
    M: int = 5,
    percentile: float | None = 95.0,
    chunk: int = 256,
) -> SpectralObservation:
    """Series -> band observations: segment, demean, taper, select, reject."""
    ws = segment_windows(series, fs, window_seconds)
    bank = compute_dpss(ws.J, TW, M)
    valid = reject_artifacts(ws, percentile) if percentile is not None else np.ones(ws.T, bool)
    windows = ws.windows
    parts = []
    for start in range(0, ws.T, chunk):
        block = windows[start : start + chunk]
        block = block - block.mean(axis=1, keepdims=True)
        c = tapered_dft(block, bank)
        parts.append(extract_band_observations(c, multitaper_psd(c), bands, fs))
    return SpectralObservation(
        np.concatenate([p.coeffs for p in parts]),
        np.concatenate([p.indices for p in parts]),
        valid,
        float(fs),
        ws.J,
        parts[0].bands,
    )
