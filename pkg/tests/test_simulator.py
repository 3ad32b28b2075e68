import numpy as np
import pytest
from scipy.signal import fftconvolve, lfilter

from hdpsleep.signal import DEFAULT_BANDS, band_bins, compute_dpss, multitaper_psd, tapered_dft
from hdpsleep.simulator import (
    OscillatorSpec,
    SimStage,
    SimulationError,
    build_block_rotation,
    default_stages,
    default_transition,
    sample_stage_chain,
    simulate,
    stationary_distribution,
    stationary_variance,
    theoretical_psd,
)

O = OscillatorSpec


def autocovariance(stage, lags, fs):
    """Closed-form autocovariance of y: sum_i q_i a_i^|k| cos(theta_i k) / (1 - a_i^2) plus noise at lag 0."""
    k = np.abs(lags)
    r = np.where(k == 0, stage.noise_var, 0.0)
    for o in stage.oscillators:
        r = r + o.q * o.damping**k * np.cos(2 * np.pi * o.freq / fs * k) / (1 - o.damping**2)
    return r


def expected_multitaper(stage, fs, J, bank, bins):
    """Exact mean of the multitaper estimate: the PSD seen through each taper's spectral window."""
    lags = np.arange(-(J - 1), J)
    r = autocovariance(stage, lags, fs)
    rho = np.mean([fftconvolve(h, h[::-1]) for h in bank.tapers], axis=0)  # taper autocorrelation
    w = 2 * np.pi * np.asarray(bins) / J
    return np.array([np.sum(r * rho * np.cos(wj * lags)) for wj in w])


def median_bins(fs, J):
    out = []
    for lo, hi in DEFAULT_BANDS:
        if hi < fs / 2:
            b = band_bins(lo, hi, fs, J)
            out.append(b[(len(b) - 1) // 2])
    return np.array(out)


class TestRotation:
    def test_zero_angle(self):
        np.testing.assert_allclose(build_block_rotation([O(0.0, 0.5, 1.0)], 100.0), [[0.5, 0], [0, 0.5]])

    def test_quarter_cycle(self):
        R = build_block_rotation([O(25.0, 1 - 1e-12, 1.0)], 100.0)
        np.testing.assert_allclose(R, [[0, -1], [1, 0]], atol=1e-9)

    def test_eigenvalues_and_orientation(self):
        specs = [O(3.0, 0.9, 1.0), O(11.0, 0.97, 1.0), O(40.0, 0.5, 1.0)]
        R = build_block_rotation(specs, 200.0)
        moduli = np.sort(np.abs(np.linalg.eigvals(R)))
        np.testing.assert_allclose(moduli, np.sort(np.repeat([0.9, 0.97, 0.5], 2)), rtol=1e-12)
        for i, o in enumerate(specs):
            assert np.linalg.det(R[2 * i : 2 * i + 2, 2 * i : 2 * i + 2]) == pytest.approx(o.damping**2)

    def test_invalid_damping(self):
        with pytest.raises(SimulationError):
            build_block_rotation([O(1.0, 1.0, 1.0)], 100.0)


class TestTheoreticalPSD:
    def test_memoryless_is_flat(self):
        stage = SimStage(1, (O(5.0, 1e-12, 2.0),), 0.5)
        S = theoretical_psd(stage, 100.0, np.linspace(0, 50, 101))
        np.testing.assert_allclose(S, 2.0 + 0.5, rtol=1e-9)

    def test_peak_location(self):
        fs, J = 200.0, 3000
        stage = SimStage(1, (O(10.0, 0.98, 1.0),), 0.1)
        freqs = np.arange(J // 2) * fs / J
        S = theoretical_psd(stage, fs, freqs, J)
        assert abs(freqs[np.argmax(S)] - 10.0) <= fs / J
        assert np.all(S > 0)

    def test_matches_autocovariance(self):
        stage = default_stages()[1]
        lags = np.arange(-4000, 4001)
        r = autocovariance(stage, lags, 200.0)
        for f in (1.0, 7.3, 13.5):
            S = np.sum(r * np.cos(2 * np.pi * f / 200.0 * lags))
            assert theoretical_psd(stage, 200.0, [f])[0] == pytest.approx(S, rel=1e-6)

    def test_stationary_variance(self):
        rng = np.random.default_rng(0)
        for stage in default_stages():
            y = simulate([stage], [[1.0]], 1, 10**6, 200.0, seed=rng.integers(2**32)).samples
            assert y.var() == pytest.approx(stationary_variance(stage, 200.0), rel=0.03)

    @pytest.mark.slow
    def test_multitaper_average(self):
        fs, J, n = 200.0, 3000, 5000
        bank = compute_dpss(J, 4, 5)
        bins = median_bins(fs, J)
        for i, stage in enumerate(default_stages()):
            y = simulate([stage], [[1.0]], n, J, fs, seed=100 + i).samples.reshape(n, J)
            y = y - y.mean(axis=1, keepdims=True)
            mt = multitaper_psd(tapered_dft(y, bank)).mean(axis=0)[bins]
            expected = expected_multitaper(stage, fs, J, bank, bins) / J
            S = theoretical_psd(stage, fs, bins * fs / J, J)
            np.testing.assert_allclose(mt, expected, rtol=0.05)
            # against the PSD itself wherever taper smoothing moves the mean by under 2%
            smooth = np.abs(expected / S - 1) < 0.02
            assert smooth.sum() >= len(bins) - 1
            np.testing.assert_allclose(mt[smooth], S[smooth], rtol=0.05)


class TestSimulate:
    def test_full_scale_shape(self):
        gt = simulate(default_stages(), default_transition(), 2000, 3000, 200.0, seed=1)
        assert gt.T == 2000 and gt.samples.shape == (2000 * 3000,)
        assert gt.psd.shape == (5, 1500)
        np.testing.assert_allclose(gt.transition.sum(axis=1), 1.0)
        # empirical window-level transitions
        C = np.zeros((5, 5))
        np.add.at(C, (gt.stages[:-1], gt.stages[1:]), 1)
        np.testing.assert_allclose(C / C.sum(axis=1, keepdims=True), default_transition(), atol=0.05)

    def test_deterministic(self):
        a = simulate(default_stages(), default_transition(), 20, 100, 200.0, seed=3)
        b = simulate(default_stages(), default_transition(), 20, 100, 200.0, seed=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.stages, b.stages)
        c = simulate(default_stages(), default_transition(), 20, 100, 200.0, seed=4)
        assert not np.array_equal(a.samples, c.samples)

    def test_state_carries_across_windows(self):
        # a slow oscillator stays correlated across window boundaries within a stage
        stage = SimStage(1, (O(0.2, 0.999, 1.0),), 1e-3)
        y = simulate([stage], [[1.0]], 400, 50, 200.0, seed=5).samples.reshape(400, 50)
        boundary = np.corrcoef(y[:-1, -1], y[1:, 0])[0, 1]
        assert boundary > 0.95

    def test_stage_ids(self):
        gt = simulate(default_stages(), default_transition(), 50, 40, 200.0, seed=6)
        np.testing.assert_array_equal(gt.stage_ids, gt.stages + 1)

    def test_invalid(self):
        with pytest.raises(SimulationError):
            simulate(default_stages(), np.eye(5) * 0.5, 10, 10, 200.0)
        with pytest.raises(SimulationError):
            simulate(default_stages(), default_transition(), 0, 10, 200.0)
        with pytest.raises(SimulationError):
            simulate([SimStage(1, (O(150.0, 0.9, 1.0),), 1.0)], [[1.0]], 1, 10, 200.0)
        with pytest.raises(SimulationError):
            simulate([SimStage(1, (), 0.0)], [[1.0]], 1, 10, 200.0)

    def test_stationary_distribution(self):
        P = default_transition()
        p = stationary_distribution(P)
        np.testing.assert_allclose(p @ P, p, atol=1e-12)
        s = sample_stage_chain(P, 100000, np.random.default_rng(7))
        np.testing.assert_allclose(np.bincount(s) / len(s), p, atol=0.02)

    @pytest.mark.slow
    def test_stability(self):
        # 10^7 steps of every fixture oscillator stay within a Gaussian-tail bound
        rng = np.random.default_rng(8)
        n, chunk = 10**7, 10**6
        for stage in default_stages():
            for o in stage.oscillators:
                pole = o.damping * np.exp(2j * np.pi * o.freq / 200.0)
                sd = np.sqrt(o.q / (1 - o.damping**2))
                last, peak = 0j, 0.0
                for _ in range(n // chunk):
                    e = np.sqrt(o.q) * (rng.standard_normal(chunk) + 1j * rng.standard_normal(chunk))
                    z = lfilter([1.0], [1.0, -pole], e, zi=[pole * last])[0]
                    last = z[-1]
                    peak = max(peak, np.abs(z).max())
                assert peak < 8 * np.sqrt(2) * sd
