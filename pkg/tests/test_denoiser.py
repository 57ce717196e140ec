import numpy as np
import pytest

from decode import tensor as T
from decode.denoiser import (
    DenoiserConfig,
    DenoiserModel,
    ada_layer_norm,
    denoise,
    fourier_synthesis,
    poly_basis,
    trend_synthesis,
)
from decode.nn import AdaLayerNorm, TimestepEmbedding
from decode.tensor import DiffTensor


def direct_dft(x):
    n = len(x)
    k = np.arange(n)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


def inverse_dft_of_bins(spec, n, bins):
    """Real signal built from the listed non-negative bins of a full DFT."""
    t = np.arange(n)
    out = np.zeros(n)
    for k in bins:
        term = spec[k] * np.exp(2j * np.pi * k * t / n)
        weight = 1 if k == 0 or (n % 2 == 0 and k == n // 2) else 2
        out += weight * term.real / n
    return out


def small_model(d=2, seed=0, zero_heads=False, **kw):
    cfg = DenoiserConfig(d=d, n_enc=kw.pop("n_enc", 1), n_dec=kw.pop("n_dec", 2),
                         h_dim=kw.pop("h_dim", 16), n_heads=kw.pop("n_heads", 2), **kw)
    return DenoiserModel(cfg, np.random.default_rng(seed), zero_heads=zero_heads)


class TestTrend:
    def test_constant(self):
        coeff = np.zeros((4, 2))
        coeff[0] = [1.5, -2.0]
        out = trend_synthesis(coeff, 10).data
        np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (10, 1)))

    def test_linear_ramp(self):
        out = trend_synthesis(np.array([[0.0], [1.0], [0.0], [0.0]]), 5).data
        np.testing.assert_allclose(out[:, 0], [0, 0.2, 0.4, 0.6, 0.8], atol=1e-15)

    def test_cubic_least_squares_recovery(self):
        T_win = 50
        true = np.array([[0.3], [-1.0], [2.0], [0.7]])
        y = trend_synthesis(true, T_win).data
        C = poly_basis(T_win, 3)
        fit = np.linalg.solve(C.T @ C, C.T @ y)  # normal equations
        np.testing.assert_allclose(fit, true, atol=1e-8)

    def test_degree_zero_rejected(self):
        with pytest.raises(ValueError):
            trend_synthesis(np.zeros((1, 2)), 8)


class TestFourier:
    def test_pure_cosine_passes(self):
        n = 64
        x = np.cos(2 * np.pi * 3 * np.arange(n) / n)[:, None]
        out = fourier_synthesis(DiffTensor(x), 1).data
        spec = direct_dft(x[:, 0])
        oracle = inverse_dft_of_bins(spec, n, [0, 3])
        np.testing.assert_allclose(out[:, 0], oracle, atol=1e-9)
        np.testing.assert_allclose(out, x, atol=1e-6)

    def test_two_tone_keeps_dominant(self):
        n = 64
        t = np.arange(n)
        x = (3 * np.cos(2 * np.pi * 2 * t / n) + np.cos(2 * np.pi * 5 * t / n))[:, None]
        out = fourier_synthesis(DiffTensor(x), 1).data[:, 0]
        oracle = inverse_dft_of_bins(direct_dft(x[:, 0]), n, [0, 2])
        np.testing.assert_allclose(out, oracle, atol=1e-6)
        np.testing.assert_allclose(out, 3 * np.cos(2 * np.pi * 2 * t / n), atol=1e-6)

    @pytest.mark.parametrize("n", [8, 9, 64, 75])
    def test_keep_all_is_identity(self, n):
        x = np.random.default_rng(n).standard_normal((2, n, 3))
        out = fourier_synthesis(DiffTensor(x), n // 2).data
        np.testing.assert_allclose(out, x, atol=1e-9)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            fourier_synthesis(DiffTensor(np.zeros((8, 1))), 5)
        with pytest.raises(ValueError):
            fourier_synthesis(DiffTensor(np.zeros((8, 1))), 0)

    def test_per_channel_selection(self):
        n = 32
        t = np.arange(n)
        x = np.stack([np.cos(2 * np.pi * 4 * t / n) + 0.1 * np.cos(2 * np.pi * 7 * t / n),
                      0.2 * np.cos(2 * np.pi * 4 * t / n) + np.sin(2 * np.pi * 7 * t / n)], axis=1)
        out = fourier_synthesis(DiffTensor(x), 1).data
        np.testing.assert_allclose(out[:, 0], np.cos(2 * np.pi * 4 * t / n), atol=1e-9)
        np.testing.assert_allclose(out[:, 1], np.sin(2 * np.pi * 7 * t / n), atol=1e-9)

    def test_gradient_through_selected_bins(self):
        n = 16
        x0 = np.random.default_rng(3).standard_normal((n, 2))
        w = np.random.default_rng(4).standard_normal((n, 2))
        # selection is piecewise constant, so central differences see a fixed mask
        err = T.grad_check(lambda v: (fourier_synthesis(v, 3) * w).sum(), x0, eps=1e-6)
        assert err < 1e-6


class TestAdaLayerNorm:
    def test_identity_modulation_is_layer_norm(self):
        rng = np.random.default_rng(0)
        norm = AdaLayerNorm(8, rng)
        norm.proj.weight.data[:] = 0
        norm.proj.bias.data[:] = 0
        h = DiffTensor(rng.standard_normal((2, 5, 8)) * 3 + 1)
        out = ada_layer_norm(h, DiffTensor(rng.standard_normal((2, 8))), norm).data
        np.testing.assert_allclose(out.mean(-1), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(-1), 1, atol=1e-4)  # eps=1e-5 shrinks var slightly
        mu = h.data.mean(-1, keepdims=True)
        ref = (h.data - mu) / np.sqrt(h.data.var(-1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_constant_token_gives_shift(self):
        rng = np.random.default_rng(1)
        norm = AdaLayerNorm(6, rng)
        emb = DiffTensor(rng.standard_normal((1, 6)))
        h = DiffTensor(np.full((1, 3, 6), 4.2))
        out = ada_layer_norm(h, emb, norm).data
        _, shift = norm.modulation(emb)
        np.testing.assert_allclose(out, np.broadcast_to(shift.data, out.shape), atol=1e-12)

    def test_timestep_changes_output(self):
        rng = np.random.default_rng(2)
        norm = AdaLayerNorm(16, rng)
        temb = TimestepEmbedding(16, rng)
        h = DiffTensor(rng.standard_normal((1, 4, 16)))
        a = ada_layer_norm(h, temb(1), norm).data
        b = ada_layer_norm(h, temb(500), norm).data
        assert np.abs(a - b).max() > 1e-3

    def test_timestep_embeddings_distinct(self):
        temb = TimestepEmbedding(32, np.random.default_rng(3))
        e = temb(np.arange(1, 501)).data
        dists = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() > 0
        np.testing.assert_array_equal(temb(7).data, temb(7).data)


class TestDenoise:
    def test_zero_heads_give_zero(self):
        m = small_model(zero_heads=True)
        x = np.random.default_rng(0).standard_normal((16, 2))
        out, parts = denoise(x, 5, m)
        assert np.all(out.data == 0)
        assert np.all(parts["trend"].data == 0) and np.all(parts["residual"].data == 0)
        assert all(np.all(s.data == 0) for s in parts["seasonal"])

    def test_parts_sum_bitwise(self):
        m = small_model()
        x = np.random.default_rng(1).standard_normal((3, 24, 2))
        out, parts = denoise(x, np.array([1, 10, 50]), m)
        total = parts["trend"].data.copy()
        for s in parts["seasonal"]:
            total = total + s.data
        total = total + parts["residual"].data
        assert np.array_equal(out.data - total, np.zeros_like(total))

    def test_batch_permutation(self):
        m = small_model()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 16, 2))
        t = np.array([3, 40, 7, 99])
        perm = np.array([2, 0, 3, 1])
        out = denoise(x, t, m)[0].data
        out_p = denoise(x[perm], t[perm], m)[0].data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)
        single = denoise(x[1], t[1], m)[0].data
        np.testing.assert_allclose(single, out[1], atol=1e-12)

    def test_channel_mismatch(self):
        m = small_model(d=2)
        with pytest.raises(ValueError, match="channels"):
            denoise(np.zeros((16, 3)), 1, m)

    def test_short_window_rejected(self):
        with pytest.raises(ValueError):
            denoise(np.zeros((7, 2)), 1, small_model())

    @pytest.mark.parametrize("T_win", [8, 64, 256, 1075])
    @pytest.mark.parametrize("d", [1, 4, 14, 59])
    def test_shape_preservation(self, T_win, d):
        m = small_model(d=d, n_enc=1, n_dec=1, h_dim=8, n_heads=2, k_freq=2)
        x = np.random.default_rng(T_win + d).standard_normal((T_win, d))
        with T.no_grad():
            out, parts = denoise(x, 3, m)
        assert out.shape == (T_win, d)
        assert np.all(np.isfinite(out.data))
        assert parts["trend"].shape == (T_win, d)

    def test_deterministic(self):
        x = np.random.default_rng(3).standard_normal((16, 2))
        a = denoise(x, 4, small_model(seed=9))[0].data
        b = denoise(x, 4, small_model(seed=9))[0].data
        np.testing.assert_array_equal(a, b)

    def test_every_parameter_gets_gradient(self):
        m = small_model()
        rng = np.random.default_rng(4)
        x0 = rng.standard_normal((4, 16, 2))
        out, _ = denoise(x0 + rng.standard_normal(x0.shape), np.array([2, 9, 30, 77]), m)
        T.backward(T.abs(out - x0).mean())
        dead = [name for name, p in m.named_parameters()
                if p.grad is None or np.linalg.norm(p.grad) == 0]
        assert not dead, dead

    def test_gradient_check_small_model(self):
        m = small_model(d=1, n_enc=1, n_dec=1, h_dim=4, n_heads=1, k_freq=1)
        x0 = np.random.default_rng(5).standard_normal((8, 1))
        err = T.grad_check(lambda v: (denoise(v, 3, m)[0] ** 2).sum(), x0, eps=1e-6)
        assert err < 1e-4
