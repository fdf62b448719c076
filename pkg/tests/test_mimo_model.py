"""Constellations, channel statistics, noise injection, and the real embedding."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from mimo_resample.mimo_model import (
    ClosureError,
    SimConfig,
    complex_to_real,
    make_constellation,
    problem_for_trial,
    sample_channel,
    snr_to_noise_var,
    stream_rng,
    transmit,
)

from conftest import problems_from


class TestConstellation:
    def test_bpsk_points_and_labels(self):
        c = make_constellation("pam", 2)
        np.testing.assert_array_equal(np.sort(c.points.real), [-1.0, 1.0])
        assert sorted("".join(str(b) for b in row) for row in c.bit_labels) == ["0", "1"]

    def test_8pam_matches_reference_alphabet(self):
        c = make_constellation("pam", 8)
        np.testing.assert_array_equal(np.sort(c.points.real), [-7, -5, -3, -1, 1, 3, 5, 7])
        assert c.avg_energy == pytest.approx(21.0, abs=1e-12)

    def test_normalized_16qam(self):
        c = make_constellation("qam", 16, normalized=True)
        assert c.avg_energy == pytest.approx(1.0, abs=1e-12)
        raw = make_constellation("qam", 16)
        np.testing.assert_allclose(c.points, raw.points / np.sqrt(10.0), atol=1e-12)

    def test_rejects_bad_orders(self):
        with pytest.raises(ValueError):
            make_constellation("pam", 6)
        with pytest.raises(ValueError):
            make_constellation("qam", 32)
        with pytest.raises(ValueError):
            make_constellation("psk", 8)

    @pytest.mark.parametrize(
        "kind,order", [("pam", 2), ("pam", 4), ("pam", 8), ("qam", 4), ("qam", 16), ("qam", 64)]
    )
    def test_invariants(self, kind, order):
        c = make_constellation(kind, order)
        assert len(c.points) == order == len(np.unique(c.points))
        labels = ["".join(map(str, row)) for row in c.bit_labels]
        assert len(set(labels)) == order
        assert c.avg_energy == pytest.approx(float(np.mean(np.abs(c.points) ** 2)), abs=1e-12)
        # closed under negation and conjugation
        c.closed_index_map(-c.points)
        c.closed_index_map(np.conj(c.points))

    @pytest.mark.parametrize("order", [2, 4, 8, 16])
    def test_pam_gray_adjacency(self, order):
        c = make_constellation("pam", order)
        idx = np.argsort(c.points.real)
        for a, b in zip(idx[:-1], idx[1:]):
            assert int((c.bit_labels[a] != c.bit_labels[b]).sum()) == 1

    def test_qam_gray_adjacency(self):
        c = make_constellation("qam", 16)
        for i, p in enumerate(c.points):
            for j, q in enumerate(c.points):
                if abs(p - q) == pytest.approx(2.0):  # axis neighbors
                    assert int((c.bit_labels[i] != c.bit_labels[j]).sum()) == 1

    def test_closure_rejects_scaling(self):
        c = make_constellation("qam", 16)
        with pytest.raises(ClosureError):
            c.closed_index_map(2.0 * c.points)

    @given(st.sampled_from([2, 4, 8, 16, 32]), st.booleans())
    @settings(max_examples=20, deadline=None)
    def test_pam_energy_property(self, order, normalized):
        c = make_constellation("pam", order, normalized)
        expected = 1.0 if normalized else (order**2 - 1) / 3.0
        assert c.avg_energy == pytest.approx(expected, rel=1e-12)


class TestChannel:
    def test_moments(self):
        rng = stream_rng(1, "test.channel")
        h = sample_channel(100, 1000, rng)
        assert abs(h.mean()) < 0.02
        assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, abs=0.02)

    def test_magnitude_is_rayleigh(self):
        rng = stream_rng(2, "test.channel")
        h = sample_channel(100, 1000, rng)
        res = stats.kstest(np.abs(h).ravel(), stats.rayleigh(scale=1 / np.sqrt(2)).cdf)
        assert res.pvalue > 0.01


class TestTransmit:
    def test_noiseless_is_exact(self, qam16):
        rng = stream_rng(3, "t")
        h = sample_channel(4, 4, rng)
        p = transmit(h, np.array([0, 5, 10, 15]), qam16, 0.0, rng)
        np.testing.assert_allclose(p.y, h @ qam16.points[[0, 5, 10, 15]], atol=1e-12)

    def test_scalar_bpsk_identity(self):
        c = make_constellation("pam", 2)
        p = transmit(np.eye(1, dtype=complex), np.array([1]), c, 0.0, stream_rng(0, "t"))
        assert p.y[0] == pytest.approx(1.0)

    def test_noise_variance(self, qam16):
        rng = stream_rng(4, "t")
        h = sample_channel(2, 2, rng)
        idx = np.array([1, 2])
        resid = []
        for i in range(20000):
            p = transmit(h, idx, qam16, 0.5, stream_rng(4, "noise", i))
            resid.append(p.y - h @ qam16.points[idx])
        var = np.mean(np.abs(np.concatenate(resid)) ** 2)
        assert var == pytest.approx(0.5, rel=0.02)

    def test_bad_index_rejected(self, qam16):
        h = sample_channel(2, 2, stream_rng(0, "t"))
        with pytest.raises(ValueError):
            transmit(h, np.array([0, 16]), qam16, 0.1, stream_rng(0, "n"))


class TestSnr:
    def test_reference_points(self):
        unit = make_constellation("qam", 4, normalized=True)
        assert snr_to_noise_var(0.0, unit, 1) == pytest.approx(1.0)
        assert snr_to_noise_var(10.0, unit, 1) == pytest.approx(0.1)
        pam8 = make_constellation("pam", 8)
        assert snr_to_noise_var(26.0, pam8, 4) == pytest.approx(84 / 10**2.6, rel=1e-12)
        assert snr_to_noise_var(26.0, pam8, 4) == pytest.approx(0.211, abs=5e-4)

    def test_rejects_nonfinite(self, qam16):
        with pytest.raises(ValueError):
            snr_to_noise_var(float("inf"), qam16, 2)


class TestRealEmbedding:
    def test_shapes_double(self, qam16_44_config):
        p = problem_for_trial(qam16_44_config, 0)
        r = complex_to_real(p)
        assert r.h.shape == (8, 8)
        assert r.y.shape == (8,)
        assert not r.is_complex
        assert r.noise_var == pytest.approx(p.noise_var / 2)

    def test_scalar_reproduces_parts(self):
        c = make_constellation("pam", 2)
        h = np.array([[0.8 + 0.6j]])
        p = transmit(h, np.array([1]), c, 0.0, stream_rng(0, "n"))
        r = complex_to_real(p)
        hs = h[0, 0] * c.points[1]
        np.testing.assert_allclose(r.y, [hs.real, hs.imag], atol=1e-12)
        np.testing.assert_allclose(r.h, [[0.8, -0.6], [0.6, 0.8]], atol=1e-12)

    def test_residual_norm_preserved(self, qam16_44_config):
        for p in problems_from(qam16_44_config, 20):
            r = complex_to_real(p)
            n_c = np.linalg.norm(p.y - p.h @ p.true_values()) ** 2
            n_r = np.linalg.norm(r.y - r.h @ r.true_values()) ** 2
            assert n_c == pytest.approx(n_r, abs=1e-10)

    def test_noiseless_roundtrip_recovers_symbols(self, qam16_44_config):
        from mimo_resample.detectors import detect_ml

        p = problem_for_trial(qam16_44_config, 3, snr_db=300.0)
        p0 = transmit(p.h, p.s_true, p.constellation, 0.0, stream_rng(0, "n"))
        r = complex_to_real(p0)
        hard = detect_ml(r).hard
        side = p.constellation.axis.order
        recovered = hard[:4] * side + hard[4:]
        np.testing.assert_array_equal(recovered, p.s_true)


class TestDeterminism:
    def test_problems_bit_identical(self, qam16_44_config):
        a = problem_for_trial(qam16_44_config, 7)
        b = problem_for_trial(qam16_44_config, 7)
        assert np.array_equal(a.h, b.h) and np.array_equal(a.y, b.y)
        assert np.array_equal(a.s_true, b.s_true)

    def test_streams_disjoint(self):
        a = stream_rng(9, "channel", 0).standard_normal(4)
        b = stream_rng(9, "noise", 0).standard_normal(4)
        assert not np.allclose(a, b)

    def test_noiseless_ml_recovers_truth(self, qam16_44_config):
        from mimo_resample.detectors import detect_ml

        const = qam16_44_config.constellation()
        for i in range(50):
            h = sample_channel(4, 4, stream_rng(5, "channel", i))
            idx = stream_rng(5, "symbols", i).integers(0, 16, 4)
            p = transmit(h, idx, const, 0.0, stream_rng(5, "noise", i))
            np.testing.assert_array_equal(detect_ml(p).hard, idx)

    def test_sim_config_validation(self):
        with pytest.raises(ValueError):
            SimConfig(n_rx=2, n_tx=4, order=4, snr_db=10, master_seed=0, n_trials=10)
        with pytest.raises(ValueError):
            SimConfig(n_rx=4, n_tx=4, order=4, snr_db=10, master_seed=0, n_trials=0)
