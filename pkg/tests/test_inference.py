import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln

from hdpsleep.inference import (
    BeamSampler,
    ChainState,
    InferenceConfig,
    InvariantError,
    NumericalError,
    PosteriorSample,
    TruncationWarning,
    extend_states,
    forward_filter_backward_sample,
    resample_alpha,
    resample_beta,
    resample_gamma,
    run_chain,
    sample_slices,
    sample_tables,
    simulate_coefficients,
    transition_counts,
)
from hdpsleep.model import HyperPriors, stick_breaking
from hdpsleep.signal import SpectralObservation


def make_obs(coeffs, valid=None):
    T, B, _ = coeffs.shape
    valid = np.ones(T, bool) if valid is None else valid
    return SpectralObservation(coeffs, np.zeros((T, B), np.int64), valid, 1.0, 2, tuple((b, b + 1) for b in range(B)))


def random_chain(rng, K, K_max, T=30, B=2):
    beta = stick_breaking(1.0, K, rng, closed=K == K_max)
    pi = np.vstack([rng.dirichlet(np.maximum(beta, 1e-3)) for _ in range(K + 1)])
    if K == K_max:
        pi[:, -1] = 0.0
        pi /= pi.sum(axis=1, keepdims=True)
    return ChainState(
        s=rng.integers(K, size=T), u=np.zeros(T), beta=beta, pi=pi, f=np.ones((K, B)), b=np.ones((K, B)),
        gamma=1.0, alpha=2.0, K_max=K_max,
    )


def three_state_data(seed, T=300, M=5):
    rng = np.random.default_rng(seed)
    f = np.array([[8.0, 1.0, 0.5], [1.0, 6.0, 1.0], [0.4, 1.0, 9.0]])
    P = np.array([[0.9, 0.05, 0.05], [0.05, 0.9, 0.05], [0.05, 0.05, 0.9]])
    s = np.empty(T, np.int64)
    s[0] = 0
    for t in range(1, T):
        s[t] = rng.choice(3, p=P[s[t - 1]])
    return s, simulate_coefficients(s, f, M, rng)


def permutation_accuracy(truth, est):
    K1, K2 = truth.max() + 1, est.max() + 1
    C = np.zeros((K1, K2))
    np.add.at(C, (truth, est), 1)
    r, c = linear_sum_assignment(-C)
    return C[r, c].sum() / len(truth)


class TestSlices:
    def test_unit_bound(self):
        pi = np.array([[1.0, 0.0], [1.0, 0.0]])
        u = sample_slices(np.zeros(20000, np.int64), pi, np.random.default_rng(0))
        assert stats.kstest(u, "uniform").pvalue > 0.01

    def test_support_and_mean(self):
        rng = np.random.default_rng(1)
        ch = random_chain(rng, 4, 10, T=5000)
        u = sample_slices(ch.s, ch.pi, rng)
        bound = np.concatenate(([ch.pi[0, ch.s[0]]], ch.pi[ch.s[:-1] + 1, ch.s[1:]]))
        assert np.all((u > 0) & (u < bound))
        assert np.mean(u / bound) == pytest.approx(0.5, abs=0.02)

    def test_zero_probability_path(self):
        pi = np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
        with pytest.raises(InvariantError):
            sample_slices(np.array([0, 1]), pi, np.random.default_rng(0))


class TestExtendStates:
    def test_unchanged(self):
        rng = np.random.default_rng(0)
        ch = random_chain(rng, 3, 10)
        ch.pi[:, -1] = 1e-6
        before = ch.pi.copy()
        extend_states(ch, 1e-3, HyperPriors(), rng)
        np.testing.assert_array_equal(ch.pi, before)
        assert ch.K == 3

    def test_tiny_slice_hits_cap(self):
        rng = np.random.default_rng(1)
        ch = random_chain(rng, 2, 8)
        ch.alpha = 100.0
        with pytest.warns(TruncationWarning):
            extend_states(ch, 1e-300, HyperPriors(), rng)
        assert ch.K == 8
        assert np.all(ch.pi[:, -1] == 0) and ch.beta[-1] == 0

    def test_warning_only_at_cap(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            ch = random_chain(rng, 2, 6)
            with warnings.catch_warnings(record=True) as w:
                warnings.simplefilter("always")
                extend_states(ch, 1e-4, HyperPriors(), rng)
            assert any(issubclass(x.category, TruncationWarning) for x in w) == (ch.K == 6)

    def test_postcondition(self):
        rng = np.random.default_rng(2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TruncationWarning)
            for _ in range(100):
                K_max = int(rng.integers(2, 15))
                ch = random_chain(rng, int(rng.integers(1, K_max)), K_max)
                u_min = 10 ** rng.uniform(-6, -0.5)
                extend_states(ch, u_min, HyperPriors(), rng)
                assert ch.pi[:, ch.K].max() < u_min or ch.K == K_max
                np.testing.assert_allclose(ch.pi.sum(axis=1), 1.0, atol=1e-12)
                assert abs(ch.beta.sum() - 1) < 1e-12
                assert ch.f.shape == (ch.K, 2) and np.all(ch.f > 0)

    def test_nonpositive_u(self):
        rng = np.random.default_rng(3)
        with pytest.raises(InvariantError):
            extend_states(random_chain(rng, 2, 5), 0.0, HyperPriors(), rng)


class TestFFBS:
    def test_one_state(self):
        rng = np.random.default_rng(0)
        pi = np.array([[1.0, 0.0], [1.0, 0.0]])
        s = forward_filter_backward_sample(pi, np.full(10, 0.5), rng.standard_normal((10, 1)), rng)
        assert np.all(s == 0)

    def test_degenerate_mask(self):
        # only the 0 -> 1 -> 0 -> 1 path survives the slices
        pi = np.array([[0.9, 0.1, 0.0], [0.05, 0.95, 0.0], [0.95, 0.05, 0.0]])
        u = np.array([0.5, 0.9, 0.9, 0.9])
        s = forward_filter_backward_sample(pi, u, np.zeros((4, 2)), np.random.default_rng(0))
        np.testing.assert_array_equal(s, [0, 1, 0, 1])

    def test_exact_enumeration(self):
        # the (u, s) Gibbs pair leaves the exact trajectory posterior invariant
        rng = np.random.default_rng(4)
        T, K = 4, 3
        pi = rng.dirichlet(np.ones(K + 1), size=K + 1)
        pi[:, K] = 0
        pi /= pi.sum(axis=1, keepdims=True)
        ll = rng.normal(0, 1, (T, K))
        exact = {}
        for s in itertools.product(range(K), repeat=T):
            lp = np.log(pi[0, s[0]]) + ll[0, s[0]]
            for t in range(1, T):
                lp += np.log(pi[s[t - 1] + 1, s[t]]) + ll[t, s[t]]
            exact[s] = np.exp(lp)
        Z = sum(exact.values())
        s = np.zeros(T, np.int64)
        counts = dict.fromkeys(exact, 0)
        N = 60000
        for _ in range(N):
            s = forward_filter_backward_sample(pi, sample_slices(s, pi, rng), ll, rng)
            counts[tuple(s)] += 1
        chi2 = sum((counts[k] - N * v / Z) ** 2 / (N * v / Z) for k, v in exact.items())
        assert stats.chi2.sf(chi2, len(exact) - 1) > 0.001

    def test_vanishing_message(self):
        pi = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
        with pytest.raises(NumericalError):
            forward_filter_backward_sample(pi, np.array([0.6, 0.1]), np.zeros((2, 2)), np.random.default_rng(0))

    def test_label_permutation(self):
        # permuting state labels permutes the trajectory posterior
        rng = np.random.default_rng(5)
        T, K = 3, 3
        pi = rng.dirichlet(np.ones(K), size=K + 1)
        pi = np.hstack((pi, np.zeros((K + 1, 1))))
        ll = rng.normal(0, 1, (T, K))
        perm = np.array([2, 0, 1])
        inv = np.argsort(perm)
        pi_p = np.zeros_like(pi)
        pi_p[0, :K] = pi[0, perm]
        pi_p[1:, :K] = pi[1:, :K][perm][:, perm]
        runs = []
        for P_, L_, back in ((pi, ll, None), (pi_p, ll[:, perm], perm)):
            s = np.zeros(T, np.int64)
            c = {}
            for _ in range(20000):
                s = forward_filter_backward_sample(P_, sample_slices(s, P_, rng), L_, rng)
                key = tuple(back[s]) if back is not None else tuple(s)
                c[key] = c.get(key, 0) + 1
            runs.append(c)
        keys = sorted(set(runs[0]) | set(runs[1]))
        table = np.array([[r.get(k, 0) for k in keys] for r in runs]) + 0.5
        assert stats.chi2_contingency(table).pvalue > 0.001
        del inv


class TestTables:
    def test_single_customer(self):
        rng = np.random.default_rng(0)
        m = sample_tables(np.array([[1, 0], [0, 1]]), 0.3, np.array([0.5, 0.5]), rng)
        np.testing.assert_array_equal(m, [[1, 0], [0, 1]])

    def test_harmonic_expectation(self):
        rng = np.random.default_rng(1)
        m = [sample_tables(np.array([[100]]), 1.0, np.array([1.0]), rng)[0, 0] for _ in range(4000)]
        assert np.mean(m) == pytest.approx(np.sum(1 / np.arange(1, 101)), rel=0.05)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.integers(0, 20, (4, 4))
        m = sample_tables(c, rng.uniform(0.1, 10), rng.dirichlet(np.ones(4)), rng)
        assert np.all(m <= c) and np.all((m >= 1) == (c >= 1))

    def test_counts(self):
        c = transition_counts(np.array([1, 1, 0, 2]), 3)
        assert c[0, 1] == 1 and c[2, 1] == 1 and c[2, 0] == 1 and c[1, 2] == 1
        assert c.sum() == 4 and c[:, -1].sum() == 0


class TestBeta:
    def test_no_tables_is_prior(self):
        rng = np.random.default_rng(0)
        g = 2.0
        b1 = [resample_beta(np.zeros((4, 4)), g, 10, rng)[0] for _ in range(10000)]
        assert stats.kstest(b1, stats.beta(1, g).cdf).pvalue > 0.01

    def test_stick_conditional(self):
        rng = np.random.default_rng(1)
        m = np.array([[3, 0, 1, 0], [1, 2, 0, 0]])
        g = 1.5
        draws = np.array([resample_beta(m, g, 10, rng) for _ in range(10000)])
        # first stick: Beta(1 + 4, g + 3)
        assert stats.kstest(draws[:, 0], stats.beta(5, g + 3).cdf).pvalue > 0.01
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)

    def test_closed_at_cap(self):
        b = resample_beta(np.array([[2, 1, 0], [0, 3, 0]]), 1.0, 2, np.random.default_rng(2))
        assert b[-1] == 0.0


def alpha_marginal_logpdf(a, counts, beta, priors):
    """log p(alpha | counts, beta) up to a constant, rows integrated out."""
    out = (priors.alpha_shape - 1) * np.log(a) - priors.alpha_rate * a
    for row in counts:
        n = row.sum()
        if n == 0:
            continue
        out = out + gammaln(a) - gammaln(a + n)
        for k in np.flatnonzero(row):
            out = out + gammaln(a * beta[k] + row[k]) - gammaln(a * beta[k])
    return out


class TestConcentrations:
    def test_alpha_prior_without_data(self):
        rng = np.random.default_rng(0)
        p = HyperPriors()
        z = np.zeros((3, 3))
        a = [resample_alpha(z, z, 1.0, p, rng) for _ in range(10000)]
        assert stats.kstest(a, stats.gamma(1.0).cdf).pvalue > 0.01

    def test_gamma_prior_without_data(self):
        # alternating sticks | gamma and gamma | sticks reproduces the prior
        rng = np.random.default_rng(1)
        p = HyperPriors()
        g, out = 1.0, []
        for _ in range(20000):
            beta = stick_breaking(g, 4, rng)
            g = resample_gamma(beta, 30, p, rng)
            out.append(g)
        assert stats.kstest(out[::5], stats.gamma(1.0).cdf).pvalue > 0.01

    def test_alpha_matches_marginal(self):
        rng = np.random.default_rng(2)
        p = HyperPriors()
        beta = np.array([0.5, 0.3, 0.2, 0.0])
        counts = np.array([[1, 0, 0, 0], [6, 2, 1, 0], [1, 5, 0, 0], [0, 1, 4, 0]])
        grid = np.linspace(1e-4, 30, 30000)
        lp = alpha_marginal_logpdf(grid, counts, beta, p)
        cdf = np.cumsum(np.exp(lp - lp.max()))
        cdf /= cdf[-1]
        a, out = 1.0, []
        for _ in range(30000):
            m = sample_tables(counts, a, beta, rng)
            a = resample_alpha(m, counts, a, p, rng)
            out.append(a)
        out = np.array(out[::10])
        assert stats.kstest(out, lambda x: np.interp(x, grid, cdf)).pvalue > 0.001

    def test_more_states_larger_gamma(self):
        rng = np.random.default_rng(3)
        p = HyperPriors()
        few = np.array([0.6, 0.39, 0.01])
        many = np.append(np.full(10, 0.099), 0.01)
        g_few = [resample_gamma(few, 30, p, rng) for _ in range(1000)]
        g_many = [resample_gamma(many, 30, p, rng) for _ in range(1000)]
        assert np.median(g_many) > np.median(g_few)
        assert min(g_few + g_many) > 0


class TestSampler:
    def test_sample_count_and_thinning(self):
        _, c = three_state_data(0, T=60)
        cfg = InferenceConfig(K_max=10, burn_in=20, n_samples=7, thin=3, seed=1)
        samples = run_chain(make_obs(c), cfg)
        assert len(samples) == 7
        assert [s.iteration for s in samples] == [23, 26, 29, 32, 35, 38, 41]

    def test_default_counts(self):
        cfg = InferenceConfig(burn_in=2000, n_samples=100, thin=50)
        assert cfg.n_iterations == 7000
        sampler = BeamSampler.__new__(BeamSampler)
        sampler.config = cfg
        assert sum(sampler.is_recorded(i) for i in range(1, 7001)) == 100
        cfg = InferenceConfig(burn_in=2000, n_samples=1000, thin=50)
        sampler.config = cfg
        assert sum(sampler.is_recorded(i) for i in range(1, cfg.n_iterations + 1)) == 1000

    def test_deterministic(self):
        _, c = three_state_data(1, T=50)
        cfg = InferenceConfig(K_max=10, burn_in=10, n_samples=3, thin=2, seed=5)
        a = [s.to_dict() for s in run_chain(make_obs(c), cfg)]
        b = [s.to_dict() for s in run_chain(make_obs(c), cfg)]
        assert a == b
        other = [s.to_dict() for s in run_chain(make_obs(c), InferenceConfig(K_max=10, burn_in=10, n_samples=3, thin=2, seed=6))]
        assert other != a
        assert [sorted(d) for d in other] == [sorted(d) for d in a]

    def test_invariants_each_sweep(self):
        _, c = three_state_data(2, T=80)
        sm = BeamSampler(make_obs(c), InferenceConfig(K_max=12, seed=0))
        for _ in range(40):
            sm.sweep()
            stt = sm.state
            assert stt.s.max() < stt.K <= stt.K_max
            np.testing.assert_allclose(stt.pi.sum(axis=1), 1.0, atol=1e-12)
            assert abs(stt.beta.sum() - 1) < 1e-12
            assert stt.gamma > 0 and stt.alpha > 0 and np.all(stt.f > 0)
            u = sample_slices(stt.s, stt.pi, np.random.default_rng(0))
            bound = np.concatenate(([stt.pi[0, stt.s[0]]], stt.pi[stt.s[:-1] + 1, stt.s[1:]]))
            assert np.all((u > 0) & (u < bound))

    def test_recovery(self):
        # small spurious states can linger; the dominant ones must match the truth
        s, c = three_state_data(3)
        samples = run_chain(make_obs(c), InferenceConfig(K_max=15, burn_in=600, n_samples=3, thin=5, seed=1))
        for smp in samples:
            occ = np.bincount(smp.s)
            assert np.sum(occ >= 0.05 * len(s)) == 3
            assert permutation_accuracy(s, np.asarray(smp.s)) >= 0.95

    def test_rejected_windows_are_missing(self):
        _, c = three_state_data(4, T=40)
        valid = np.ones(40, bool)
        valid[[5, 17]] = False
        c2 = c.copy()
        c2[[5, 17]] *= 1e6  # artifacts carry no weight
        sm = BeamSampler(make_obs(c2, valid), InferenceConfig(K_max=10, seed=0))
        ll = sm.loglik(sm.state)
        assert np.all(ll[[5, 17]] == 0)
        ref = BeamSampler(make_obs(c, valid), InferenceConfig(K_max=10, seed=0))
        np.testing.assert_array_equal(sm.scale, ref.scale)

    def test_checkpoint_resume(self):
        _, c = three_state_data(5, T=60)
        obs = make_obs(c)
        cfg = InferenceConfig(K_max=10, burn_in=10, n_samples=4, thin=5, seed=3)
        full = [s.to_dict() for s in run_chain(obs, cfg)]
        sm = BeamSampler(obs, cfg)
        first = sm.run(stop_at=17)
        ck = sm.checkpoint()
        import json

        ck = json.loads(json.dumps(ck))
        rest = BeamSampler.from_checkpoint(obs, cfg, ck).run()
        assert [s.to_dict() for s in first + rest] == full

    def test_checkpoint_config_mismatch(self):
        _, c = three_state_data(6, T=30)
        obs = make_obs(c)
        sm = BeamSampler(obs, InferenceConfig(K_max=10, seed=0))
        with pytest.raises(ValueError):
            BeamSampler.from_checkpoint(obs, InferenceConfig(K_max=10, seed=1), sm.checkpoint())

    def test_state_roundtrip(self):
        _, c = three_state_data(7, T=30)
        sm = BeamSampler(make_obs(c), InferenceConfig(K_max=10, seed=0))
        sm.sweep()
        d = sm.state.to_dict()
        assert ChainState.from_dict(d).to_dict() == d
        p = sm.posterior_sample()
        assert PosteriorSample.from_dict(p.to_dict()) == p

    def test_config_validation(self):
        with pytest.raises(ValueError):
            InferenceConfig(thin=0)
        with pytest.raises(ValueError):
            InferenceConfig(K_max=0)
