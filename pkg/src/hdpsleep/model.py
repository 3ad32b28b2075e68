"""Spectral emission model, Inverse-Gamma conjugacy and HDP prior draws.

An observation for one window is an array of complex coefficients of shape
(B, M): B frequency bands, M tapers.  Under a state with band PSDs f_j each
real and imaginary part is N(0, f_j / 2), independently across tapers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

__all__ = [
    "ModelError",
    "HyperPriors",
    "StateSpectrum",
    "HDPParams",
    "emission_log_likelihood",
    "emission_log_likelihood_matrix",
    "psd_posterior",
    "sample_psd",
    "sample_b_posterior",
    "stick_breaking",
    "sticks_from_weights",
    "weights_from_sticks",
    "tail_masses",
    "dirichlet",
    "sample_transition_row",
    "inverse_gamma_logpdf",
    "gamma_logpdf",
]


class ModelError(ValueError):
    """Invalid model parameters."""


@dataclass(frozen=True)
class HyperPriors:
    """Gamma (shape, rate) hyperpriors plus the Inverse-Gamma shape ``a``."""

    gamma_shape: float = 1.0
    gamma_rate: float = 1.0
    alpha_shape: float = 1.0
    alpha_rate: float = 1.0
    b_shape: float = 1.0
    b_rate: float = 1.0
    ig_shape: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ModelError(f"hyperprior {name} must be positive, got {value}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StateSpectrum:
    f: np.ndarray
    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        if np.any(self.f <= 0):
            raise ModelError("PSD values must be positive")

    def map(self) -> np.ndarray:
        return np.asarray(self.rate) / (np.asarray(self.shape) + 1.0)


@dataclass
class HDPParams:
    """Global weights and transition rows over K instantiated states.

    ``beta`` has K+1 entries and ``pi`` has shape (K+1, K+1): row 0 is the
    initial-state distribution, rows 1..K belong to states 0..K-1, and the
    last column of each row is the mass of all not-yet-instantiated states.
    """

    gamma: float
    alpha: float
    K_max: int
    beta: np.ndarray
    pi: np.ndarray = field(default=None)

    @property
    def K(self) -> int:
        return len(self.beta) - 1

    def check(self, atol: float = 1e-12) -> None:
        if abs(self.beta.sum() - 1) > atol or np.any(self.beta < 0):
            raise ModelError("beta is not a probability vector")
        if self.pi is not None:
            if np.any(np.abs(self.pi.sum(axis=1) - 1) > atol) or np.any(self.pi < 0):
                raise ModelError("transition rows are not probability vectors")


def _check_f(f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if np.any(~(f > 0)):
        raise ModelError("PSD values must be positive")
    return f


def emission_log_likelihood(obs, f) -> float:
    """log p(obs | f) for one window's (B, M) complex coefficients."""
    obs = np.asarray(obs)
    f = _check_f(f)
    if obs.shape[0] != f.shape[0]:
        raise ModelError(f"observation has {obs.shape[0]} bands, spectrum has {f.shape[0]}")
    M = obs.shape[1]
    power = np.sum(obs.real**2 + obs.imag**2, axis=1)
    return float(np.sum(-M * np.log(np.pi * f) - power / f))


def emission_log_likelihood_matrix(power_sums, M: int, f) -> np.ndarray:
    """Log-likelihood of every window under every state.

    Parameters
    ----------
    power_sums : (T, B) sums over tapers of Re^2 + Im^2
    M : number of tapers
    f : (K, B) state PSDs

    Returns
    -------
    (T, K) array
    """
    f = _check_f(f)
    return -M * np.sum(np.log(np.pi * f), axis=1)[None, :] - np.asarray(power_sums) @ (1.0 / f).T


def psd_posterior(shape, rate, coeffs=None, *, n_windows=None, power_sum=None):
    """Conjugate Inverse-Gamma update for one band.

    Either pass ``coeffs`` (n, M) complex coefficients for the n windows in
    the state, or the sufficient statistics ``n_windows`` (times M) and
    ``power_sum``.  Each real scalar with variance f/2 adds 1/2 to the shape
    and its square to the rate, so a window with M tapers adds M and
    sum_m Re^2 + Im^2.
    """
    if coeffs is not None:
        coeffs = np.atleast_2d(np.asarray(coeffs))
        n_obs = coeffs.size
        power_sum = float(np.sum(coeffs.real**2 + coeffs.imag**2))
    else:
        n_obs = 0 if n_windows is None else n_windows
        power_sum = 0.0 if power_sum is None else power_sum
    return shape + n_obs, rate + power_sum


def sample_psd(shape, rate, rng: np.random.Generator):
    """Draw f ~ IG(shape, rate) as rate / Gamma(shape, 1), one draw per broadcast element."""
    shape, rate = np.broadcast_arrays(np.asarray(shape, dtype=float), np.asarray(rate, dtype=float))
    return rate / rng.gamma(shape)


def sample_b_posterior(b_shape, b_rate, fs, ig_shape, rng: np.random.Generator):
    """Gamma conjugate update of the IG rate given the f values it governs."""
    fs = np.atleast_1d(np.asarray(fs, dtype=float))
    return rng.gamma(b_shape + fs.size * ig_shape, 1.0 / (b_rate + np.sum(1.0 / fs)))


def weights_from_sticks(w, closed: bool = False) -> np.ndarray:
    """Weights plus remainder from the complements w_k = 1 - nu_k.

    Working with the complements keeps the remainder exact when a fraction
    is numerically indistinguishable from one.  With ``closed=True`` the
    last stick takes everything that is left.
    """
    w = np.asarray(w, dtype=float).copy()
    if closed:
        w[-1] = 0.0
    left = np.concatenate(([1.0], np.cumprod(w)))
    beta = np.append((1.0 - w) * left[:-1], left[-1])
    return beta / beta.sum()


def stick_breaking(gamma: float, K: int, rng: np.random.Generator, closed: bool = False) -> np.ndarray:
    """K stick-breaking weights plus the remainder mass (length K+1).

    With ``closed=True`` the K-th stick takes everything that is left, so
    the remainder is exactly zero (finite truncation at K states).
    """
    if not gamma > 0 or K < 1:
        raise ModelError("need gamma > 0 and K >= 1")
    return weights_from_sticks(rng.beta(gamma, 1.0, size=K), closed)


def tail_masses(beta) -> np.ndarray:
    """tail[k] = sum of beta[k:], the mass left before stick k."""
    return np.cumsum(np.asarray(beta, dtype=float)[::-1])[::-1]


def sticks_from_weights(beta) -> np.ndarray:
    """Recover stick fractions nu_k from weights (last entry = remainder)."""
    beta = np.asarray(beta, dtype=float)
    left = tail_masses(beta)[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(left > 0, beta[:-1] / left, 1.0)
    return np.clip(nu, 0.0, 1.0)


def dirichlet(params, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet draw tolerating zero (and underflowing) parameters."""
    params = np.asarray(params, dtype=float)
    g = np.zeros_like(params)
    pos = params > 0
    g[pos] = rng.gamma(params[pos])
    total = g.sum()
    if total > 0:
        return g / total
    # every gamma draw underflowed: the draw is a vertex, chosen with
    # probability proportional to the parameters
    out = np.zeros_like(params)
    out[rng.choice(len(params), p=params / params.sum())] = 1.0
    return out


def sample_transition_row(alpha: float, beta, counts, rng: np.random.Generator) -> np.ndarray:
    """pi_k ~ Dirichlet(alpha * beta + counts)."""
    beta = np.asarray(beta, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if beta.shape != counts.shape:
        raise ModelError("counts and beta differ in length")
    return dirichlet(alpha * beta + counts, rng)


def inverse_gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


def gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) - gammaln(shape) + (shape - 1) * np.log(x) - rate * x
