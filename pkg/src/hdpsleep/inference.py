"""Beam sampling for the HDP-HMM with Inverse-Gamma spectral emissions.

The chain represents K instantiated states lazily.  ``beta`` carries K
weights plus the aggregated mass of every state not yet instantiated, and
each transition row carries the matching aggregated column.  The K_max-th
stick takes all remaining mass, so the chain samples an exact finite model
with K_max states; states are revealed only when a slice variable could
reach them.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.cluster.vq import kmeans2

from . import model
from .model import HyperPriors
from .signal import SpectralObservation

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

__all__ = [
    "InferenceConfig",
    "ChainState",
    "PosteriorSample",
    "NumericalError",
    "InvariantError",
    "TruncationWarning",
    "sample_slices",
    "extend_states",
    "forward_filter_backward_sample",
    "transition_counts",
    "sample_tables",
    "resample_beta",
    "resample_alpha",
    "resample_gamma",
    "resample_concentrations",
    "BeamSampler",
    "run_chain",
    "simulate_prior",
]


class NumericalError(RuntimeError):
    pass


class InvariantError(RuntimeError):
    pass


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class InferenceConfig:
    K_max: int = 30
    burn_in: int = 2000
    n_samples: int = 100
    thin: int = 50
    seed: int = 0
    hyperpriors: HyperPriors = field(default_factory=HyperPriors)
    standardize: bool = True
    init: str = "kmeans"  # "kmeans", "random" or "single"
    init_states: int = 5

    def __post_init__(self):
        if self.init not in ("kmeans", "random", "single"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.K_max < 1:
            raise ValueError("K_max must be at least 1")
        if self.init_states < 1:
            raise ValueError("init_states must be at least 1")
        if self.burn_in < 0 or self.n_samples < 0 or self.thin < 1:
            raise ValueError("burn_in, n_samples must be >= 0 and thin >= 1")
        if isinstance(self.hyperpriors, dict):
            object.__setattr__(self, "hyperpriors", HyperPriors(**self.hyperpriors))

    @property
    def n_iterations(self) -> int:
        return self.burn_in + self.n_samples * self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyperpriors"] = self.hyperpriors.to_dict()
        return d


@dataclass
class ChainState:
    """Full sampler state.

    Shapes: ``s`` (T,), ``u`` (T,), ``beta`` (K+1,), ``pi`` (K+1, K+1) with
    row 0 the initial distribution, ``f`` and ``b`` (K, B).  ``f`` and ``b``
    live in standardized units when the sampler standardizes.
    """

    s: np.ndarray
    u: np.ndarray
    beta: np.ndarray
    pi: np.ndarray
    f: np.ndarray
    b: np.ndarray
    gamma: float
    alpha: float
    K_max: int
    iteration: int = 0

    @property
    def K(self) -> int:
        return len(self.beta) - 1

    def occupied(self) -> np.ndarray:
        return np.unique(self.s)

    def to_dict(self) -> dict:
        return {
            "s": self.s.tolist(),
            "u": self.u.tolist(),
            "beta": self.beta.tolist(),
            "pi": self.pi.tolist(),
            "f": self.f.tolist(),
            "b": self.b.tolist(),
            "gamma": float(self.gamma),
            "alpha": float(self.alpha),
            "K_max": int(self.K_max),
            "iteration": int(self.iteration),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainState":
        B = len(d["f"][0]) if d["f"] else 0
        return cls(
            s=np.asarray(d["s"], dtype=np.int64),
            u=np.asarray(d["u"], dtype=float),
            beta=np.asarray(d["beta"], dtype=float),
            pi=np.asarray(d["pi"], dtype=float),
            f=np.asarray(d["f"], dtype=float).reshape(-1, B),
            b=np.asarray(d["b"], dtype=float).reshape(-1, B),
            gamma=float(d["gamma"]),
            alpha=float(d["alpha"]),
            K_max=int(d["K_max"]),
            iteration=int(d["iteration"]),
        )


@dataclass
class PosteriorSample:
    """One retained draw, restricted to occupied states.

    ``states`` lists the occupied labels; every per-state array follows that
    order.  Spectra and IG parameters are in original (unstandardized) units.
    """

    iteration: int
    s: list
    states: list
    counts: list
    f: list
    ig_shape: list
    ig_rate: list
    prior_shape: float
    prior_rate: list
    transition_counts: list
    pi: list
    gamma: float
    alpha: float
    n_instantiated: int
    log_joint: float

    @property
    def n_occupied(self) -> int:
        return len(self.states)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorSample":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


# ---------------------------------------------------------------------------
# single-step operations


def _path_bounds(s, pi) -> np.ndarray:
    bounds = np.empty(len(s))
    bounds[0] = pi[0, s[0]]
    bounds[1:] = pi[s[:-1] + 1, s[1:]]
    return bounds


def sample_slices(s, pi, rng: np.random.Generator) -> np.ndarray:
    """u_t ~ U(0, pi[s_{t-1}, s_t]) with pi[initial, s_1] bounding u_1."""
    bounds = _path_bounds(np.asarray(s), pi)
    if np.any(bounds <= 0):
        t = int(np.flatnonzero(bounds <= 0)[0])
        raise InvariantError(f"zero transition probability on the current path at t={t}")
    return bounds * rng.random(len(bounds))


def _split_remainder(chain: ChainState, priors: HyperPriors, rng: np.random.Generator) -> None:
    K = chain.K
    rem = chain.beta[K]
    w = 0.0 if K + 1 >= chain.K_max else rng.beta(chain.gamma, 1.0)
    new_w, rest = rem * (1.0 - w), rem * w
    beta = np.concatenate((chain.beta[:K], [new_w, rest]))

    pi = np.zeros((K + 2, K + 2))
    pi[: K + 1, :K] = chain.pi[:, :K]
    a1, a2 = chain.alpha * new_w, chain.alpha * rest
    for r in range(K + 1):
        zeta = model.dirichlet(np.array([a1, a2]), rng)[0] if a2 > 0 else 1.0
        pi[r, K] = chain.pi[r, K] * zeta
        pi[r, K + 1] = chain.pi[r, K] - pi[r, K]
    pi[K + 1] = model.dirichlet(chain.alpha * beta, rng)

    B = chain.f.shape[1]
    b_new = rng.gamma(priors.b_shape, 1.0 / priors.b_rate, size=B)
    f_new = model.sample_psd(priors.ig_shape, b_new, rng)
    chain.beta = beta
    chain.pi = pi
    chain.b = np.vstack((chain.b, b_new))
    chain.f = np.vstack((chain.f, f_new))


def extend_states(chain: ChainState, u_min: float, priors: HyperPriors, rng: np.random.Generator) -> ChainState:
    """Instantiate states until no row can move more than u_min into the remainder."""
    if not u_min > 0:
        raise InvariantError("u_min must be positive")
    grew = False
    while chain.K < chain.K_max and chain.pi[:, chain.K].max() >= u_min:
        _split_remainder(chain, priors, rng)
        grew = True
    if grew and chain.K == chain.K_max:
        warnings.warn(
            f"all K_max={chain.K_max} states instantiated; increase K_max if occupancy stays near it",
            TruncationWarning,
            stacklevel=2,
        )
    return chain


def forward_filter_backward_sample(pi, u, loglik, rng: np.random.Generator) -> np.ndarray:
    """Sample a trajectory under the slice constraints.

    Parameters
    ----------
    pi : (K+1, K+1) transition rows, row 0 initial, last column remainder
    u : (T,) slice variables
    loglik : (T, K) emission log-likelihoods; rows of zeros encode missing windows
    """
    T, K = loglik.shape
    P = pi[1:, :K]
    msgs = np.empty((T, K))
    w = (pi[0, :K] > u[0]).astype(float)
    for t in range(T):
        if t:
            w = msgs[t - 1] @ (P > u[t])
        # rescale by the best reachable state so its likelihood cannot underflow
        reach = w > 0
        if not reach.any():
            raise NumericalError(f"forward message vanished at t={t}")
        ll = loglik[t]
        a = w * np.exp(np.minimum(ll - ll[reach].max(), 0.0))
        msgs[t] = a / a.sum()

    s = np.empty(T, dtype=np.int64)
    draws = rng.random(T)
    s[T - 1] = _categorical(msgs[T - 1], draws[T - 1])
    for t in range(T - 2, -1, -1):
        w = msgs[t] * (P[:, s[t + 1]] > u[t + 1])
        s[t] = _categorical(w, draws[t])
    return s


def _categorical(w, r) -> int:
    c = np.cumsum(w)
    return min(int(np.searchsorted(c, r * c[-1], side="right")), len(w) - 1)


def transition_counts(s, K: int) -> np.ndarray:
    """(K+1, K+1) counts; row 0 counts the initial state, last column stays 0."""
    c = np.zeros((K + 1, K + 1))
    c[0, s[0]] += 1
    np.add.at(c, (s[:-1] + 1, s[1:]), 1)
    return c


def sample_tables(counts, alpha: float, beta, rng: np.random.Generator) -> np.ndarray:
    """Chinese-restaurant-franchise table counts for each (row, column) cell.

    m = sum_{i=1..c} Bernoulli(alpha*beta_k / (alpha*beta_k + i - 1)).
    """
    counts = np.asarray(counts, dtype=np.int64)
    ab = alpha * np.asarray(beta, dtype=float)
    rows, cols = np.nonzero(counts)
    n = counts[rows, cols]
    cell = np.repeat(np.arange(len(n)), n)
    start = np.repeat(np.cumsum(n) - n, n)
    i = np.arange(n.sum()) - start
    weight = ab[cols[cell]]
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(i == 0, 1.0, weight / (weight + i))
    hit = rng.random(len(p)) < p
    m = np.zeros_like(counts)
    np.add.at(m, (rows[cell], cols[cell]), hit.astype(np.int64))
    return m


def resample_beta(tables, gamma: float, K_max: int, rng: np.random.Generator) -> np.ndarray:
    """Stick-breaking conditional of beta given column table totals."""
    tables = np.asarray(tables)
    K = tables.shape[1] - 1
    mk = tables.sum(axis=0)[:K].astype(float)
    tail = np.concatenate((np.cumsum(mk[::-1])[::-1][1:], [0.0]))
    # complements 1 - nu, drawn directly to keep tiny remainders exact
    w = rng.beta(gamma + tail, 1.0 + mk)
    return model.weights_from_sticks(w, closed=K == K_max)


def resample_alpha(tables, counts, alpha: float, priors: HyperPriors, rng: np.random.Generator) -> float:
    """Row concentration via beta/Bernoulli auxiliaries over rows with transitions."""
    n = np.asarray(counts).sum(axis=1)
    n = n[n > 0]
    shape = priors.alpha_shape + float(np.asarray(tables).sum())
    rate = priors.alpha_rate
    if len(n):
        w = rng.beta(alpha + 1.0, n)
        z = rng.random(len(n)) < n / (n + alpha)
        shape -= z.sum()
        rate -= np.log(w).sum()
    return max(rng.gamma(shape, 1.0 / rate), 1e-300)


def resample_gamma(beta, K_max: int, priors: HyperPriors, rng: np.random.Generator) -> float:
    """Top-level concentration given the instantiated stick fractions.

    Each fraction is Beta(1, gamma) a priori, so the conditional is
    Gamma(shape + K', rate - sum log(1 - nu)); the closing stick at K_max
    is fixed at 1 and excluded.
    """
    beta = np.asarray(beta, dtype=float)
    n_sticks = len(beta) - 1 - (len(beta) - 1 == K_max)
    # sum_k log(1 - nu_k) telescopes to the log of the mass left after the sticks
    left = model.tail_masses(beta)[n_sticks] / beta.sum()
    shape = priors.gamma_shape + n_sticks
    rate = priors.gamma_rate - np.log(max(left, np.finfo(float).tiny))
    return max(rng.gamma(shape, 1.0 / rate), 1e-300)


def resample_concentrations(beta, tables, counts, alpha: float, K_max: int, priors: HyperPriors,
                            rng: np.random.Generator):
    """Return (gamma, alpha); alpha is drawn first, as in a sweep."""
    alpha_new = resample_alpha(tables, counts, alpha, priors, rng)
    return resample_gamma(beta, K_max, priors, rng), alpha_new


# ---------------------------------------------------------------------------
# sampler


class BeamSampler:
    """Gibbs sweeps over (u, s, f, b, alpha, beta, gamma, pi).

    Sweep order: slices, extension, trajectory, emission PSDs, IG rates,
    table counts, alpha, beta, trailing-state pruning, gamma, transition
    rows.  The beta and alpha updates integrate the rows out, so rows are
    drawn last.
    """

    def __init__(self, obs: SpectralObservation, config: InferenceConfig, state: ChainState | None = None,
                 rng_state: dict | None = None):
        self.config = config
        self.priors = config.hyperpriors
        self.M = obs.M
        self.valid = np.asarray(obs.valid, dtype=bool).copy()
        if not self.valid.any():
            raise ValueError("no valid windows to fit")
        power = obs.power_sums()
        if config.standardize:
            self.scale = np.median(power[self.valid] / self.M, axis=0)
            self.scale[~(self.scale > 0)] = 1.0
        else:
            self.scale = np.ones(power.shape[1])
        self.power = power / self.scale
        self.T, self.B = self.power.shape
        self.rng = np.random.default_rng(config.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.state = state if state is not None else self._initial_state()

    def replace_power(self, power_sums) -> None:
        """Swap in new observations (sufficient statistics), keeping the chain."""
        self.power = np.asarray(power_sums, dtype=float) / self.scale

    # -- initialization -------------------------------------------------
    def _initial_state(self) -> ChainState:
        """Starting labels, hyperparameters at their prior means.

        ``kmeans`` clusters standardized log band powers into ``init_states``
        groups (surplus groups empty out during burn-in), ``random`` draws
        labels uniformly over ``init_states`` states and ``single`` puts every
        window in one state.  Sticks start at their prior mean 1/(1+gamma);
        emission parameters and rows are then drawn from their conditionals.
        """
        p = self.priors
        gamma = p.gamma_shape / p.gamma_rate
        alpha = p.alpha_shape / p.alpha_rate
        labels = self._initial_labels()
        K = int(labels.max()) + 1
        nu = np.full(K, 1.0 / (1.0 + gamma))
        if K == self.config.K_max:
            nu[-1] = 1.0
        left = np.concatenate(([1.0], np.cumprod(1.0 - nu)))
        beta = np.append(nu * left[:K], 0.0 if K == self.config.K_max else left[K])
        st = ChainState(
            s=labels,
            u=np.zeros(self.T),
            beta=beta / beta.sum(),
            pi=np.zeros((K + 1, K + 1)),
            f=np.ones((K, self.B)),
            b=np.full((K, self.B), p.b_shape / p.b_rate),
            gamma=gamma,
            alpha=alpha,
            K_max=self.config.K_max,
        )
        self._update_emissions(st)
        self._update_rows(st)
        return st

    def _initial_labels(self) -> np.ndarray:
        cfg = self.config
        K = min(cfg.init_states, cfg.K_max, self.T)
        if cfg.init == "single" or K == 1:
            return np.zeros(self.T, dtype=np.int64)
        if cfg.init == "random":
            return self.rng.integers(K, size=self.T)
        labels = self.rng.integers(K, size=self.T)
        X = np.log(self.power[self.valid] / self.M)
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        K = min(K, len(np.unique(X, axis=0)))
        if K > 1:
            _, labels[self.valid] = kmeans2(X, K, minit="++", rng=self.rng)
        # drop empty groups so labels are contiguous
        return np.unique(labels, return_inverse=True)[1].astype(np.int64)

    # -- pieces of a sweep ----------------------------------------------
    def loglik(self, st: ChainState) -> np.ndarray:
        ll = model.emission_log_likelihood_matrix(self.power, self.M, st.f)
        ll = np.maximum(ll, -1e300)
        ll[~self.valid] = 0.0
        return ll

    def _emission_stats(self, st: ChainState):
        K = st.K
        v = self.valid
        n = np.bincount(st.s[v], minlength=K)[:K].astype(float)
        q = np.zeros((K, self.B))
        np.add.at(q, st.s[v], self.power[v])
        return n, q

    def _update_emissions(self, st: ChainState) -> None:
        p = self.priors
        n, q = self._emission_stats(st)
        shape = p.ig_shape + self.M * n[:, None]
        rate = st.b + q
        st.f = model.sample_psd(np.broadcast_to(shape, rate.shape), rate, self.rng)
        st.f = np.maximum(st.f, 1e-300)
        st.b = self.rng.gamma(p.b_shape + p.ig_shape, 1.0 / (p.b_rate + 1.0 / st.f))

    def _update_rows(self, st: ChainState) -> None:
        c = transition_counts(st.s, st.K)
        st.pi = np.vstack([model.sample_transition_row(st.alpha, st.beta, c[r], self.rng) for r in range(st.K + 1)])

    def _prune_trailing(self, st: ChainState) -> None:
        occ = np.zeros(st.K, dtype=bool)
        occ[st.s] = True
        K = st.K
        while K > 1 and not occ[K - 1]:
            K -= 1
        if K < st.K:
            rem = st.beta[K:].sum()
            st.beta = np.concatenate((st.beta[:K], [rem]))
            st.f = st.f[:K]
            st.b = st.b[:K]

    def sweep(self) -> None:
        st = self.state
        rng = self.rng
        p = self.priors
        st.u = sample_slices(st.s, st.pi, rng)
        extend_states(st, float(st.u.min()), p, rng)
        st.s = forward_filter_backward_sample(st.pi, st.u, self.loglik(st), rng)
        self._update_emissions(st)

        c = transition_counts(st.s, st.K)
        m = sample_tables(c, st.alpha, st.beta, rng)
        # alpha first (conditional on the tables), then beta, then gamma
        st.alpha = resample_alpha(m, c, st.alpha, p, rng)
        st.beta = resample_beta(m, st.gamma, st.K_max, rng)
        self._prune_trailing(st)
        st.gamma = resample_gamma(st.beta, st.K_max, p, rng)
        self._update_rows(st)
        st.iteration += 1

    # -- reporting ------------------------------------------------------
    def log_joint(self) -> float:
        st = self.state
        p = self.priors
        ll = float(np.sum(self.loglik(st)[np.arange(self.T), st.s]))
        path = _path_bounds(st.s, st.pi)
        lp = ll + float(np.sum(np.log(path)))
        lp += float(np.sum(model.inverse_gamma_logpdf(st.f, p.ig_shape, st.b)))
        lp += float(np.sum(model.gamma_logpdf(st.b, p.b_shape, p.b_rate)))
        lp += float(model.gamma_logpdf(st.gamma, p.gamma_shape, p.gamma_rate))
        lp += float(model.gamma_logpdf(st.alpha, p.alpha_shape, p.alpha_rate))
        return lp

    def posterior_sample(self) -> PosteriorSample:
        st = self.state
        p = self.priors
        states = np.unique(st.s)
        n, q = self._emission_stats(st)
        counts_all = np.bincount(st.s, minlength=st.K)
        shape = p.ig_shape + self.M * n[states, None] * np.ones((1, self.B))
        rate = (st.b[states] + q[states]) * self.scale
        c = transition_counts(st.s, st.K)[1:, :-1]
        return PosteriorSample(
            iteration=int(st.iteration),
            s=st.s.tolist(),
            states=states.tolist(),
            counts=counts_all[states].tolist(),
            f=(st.f[states] * self.scale).tolist(),
            ig_shape=shape.tolist(),
            ig_rate=rate.tolist(),
            prior_shape=float(p.ig_shape),
            prior_rate=(st.b[states] * self.scale).tolist(),
            transition_counts=c[np.ix_(states, states)].tolist(),
            pi=st.pi[np.ix_(states + 1, states)].tolist(),
            gamma=float(st.gamma),
            alpha=float(st.alpha),
            n_instantiated=int(st.K),
            log_joint=self.log_joint(),
        )

    def is_recorded(self, iteration: int) -> bool:
        cfg = self.config
        k = iteration - cfg.burn_in
        return k > 0 and k % cfg.thin == 0 and k // cfg.thin <= cfg.n_samples

    def checkpoint(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "state": self.state.to_dict(),
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_checkpoint(cls, obs: SpectralObservation, config: InferenceConfig, ckpt: dict) -> "BeamSampler":
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
        if ckpt["config"] != config.to_dict():
            raise ValueError("checkpoint was written with a different inference config")
        return cls(obs, config, state=ChainState.from_dict(ckpt["state"]), rng_state=ckpt["rng"])

    def run(self, on_sample=None, on_iteration=None, stop_at: int | None = None) -> list:
        """Advance to the configured iteration count (or ``stop_at``)."""
        end = self.config.n_iterations if stop_at is None else min(stop_at, self.config.n_iterations)
        out = []
        while self.state.iteration < end:
            self.sweep()
            it = self.state.iteration
            if on_iteration is not None:
                on_iteration(self)
            if self.is_recorded(it):
                sample = self.posterior_sample()
                out.append(sample)
                if on_sample is not None:
                    on_sample(sample)
            if self.state.K == self.state.K_max and len(np.unique(self.state.s)) == self.state.K_max:
                log.warning("iteration %d: every one of K_max=%d states is occupied", it, self.state.K_max)
        return out


def run_chain(obs: SpectralObservation, config: InferenceConfig, **kwargs) -> list:
    """Run one chain from the default initialization; returns retained samples."""
    return BeamSampler(obs, config).run(**kwargs)


# ---------------------------------------------------------------------------
# forward simulation from the truncated prior


def simulate_prior(T: int, B: int, M: int, K_max: int, priors: HyperPriors, rng: np.random.Generator):
    """Draw (ChainState, coefficients) from the generative model.

    All K_max states are instantiated; the returned coefficients have shape
    (T, B, M) and are complex.
    """
    gamma = rng.gamma(priors.gamma_shape, 1.0 / priors.gamma_rate)
    alpha = rng.gamma(priors.alpha_shape, 1.0 / priors.alpha_rate)
    beta = model.stick_breaking(gamma, K_max, rng, closed=True)
    pi = np.vstack([model.dirichlet(alpha * beta, rng) for _ in range(K_max + 1)])
    b = rng.gamma(priors.b_shape, 1.0 / priors.b_rate, size=(K_max, B))
    f = np.maximum(model.sample_psd(priors.ig_shape, b, rng), 1e-300)
    s = np.empty(T, dtype=np.int64)
    s[0] = rng.choice(K_max + 1, p=pi[0])
    for t in range(1, T):
        s[t] = rng.choice(K_max + 1, p=pi[s[t - 1] + 1])
    st = ChainState(s=s, u=np.zeros(T), beta=beta, pi=pi, f=f, b=b, gamma=gamma, alpha=alpha, K_max=K_max)
    return st, simulate_coefficients(s, f, M, rng)


def simulate_coefficients(s, f, M: int, rng: np.random.Generator) -> np.ndarray:
    """Complex coefficients with Re, Im ~ N(0, f/2) given a trajectory."""
    sd = np.sqrt(f[s] / 2.0)[:, :, None]
    T, B = sd.shape[:2]
    return sd * rng.standard_normal((T, B, M)) + 1j * sd * rng.standard_normal((T, B, M))
