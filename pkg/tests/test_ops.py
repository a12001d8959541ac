import math

import numpy as np
import pytest
from scipy.signal import correlate2d

from oct_layertrace import ops
from oct_layertrace.exceptions import ContractError, DimensionError
from oct_layertrace.gradcheck import check_function
from oct_layertrace.tensor import Tensor


def conv_oracle(x, k, b):
    """Zero-padded 'same' cross-correlation with the centre at (kH//2, kW//2)."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((n, c, h + kh - 1, w + kw - 1))
    padded[:, :, ph:ph + h, pw:pw + w] = x
    out = np.zeros((n, o, h, w))
    for ni in range(n):
        for oi in range(o):
            acc = np.full((h, w), b[oi])
            for ci in range(c):
                acc += correlate2d(padded[ni, ci], k[oi, ci], mode="valid")
            out[ni, oi] = acc
    return out


class TestConv2d:
    @pytest.mark.parametrize("kshape", [(1, 1), (3, 3), (2, 5), (5, 2), (7, 4)])
    def test_matches_direct_correlation(self, rng, kshape):
        x = rng.standard_normal((2, 3, 9, 11))
        k = rng.standard_normal((4, 3) + kshape)
        b = rng.standard_normal(4)
        out = ops.conv2d(x, k, b).data
        np.testing.assert_allclose(out, conv_oracle(x, k, b), atol=1e-12)

    def test_impulse_kernel_is_identity(self, rng):
        x = rng.standard_normal((1, 1, 6, 7))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_allclose(ops.conv2d(x, k).data, x, atol=1e-13)

    def test_unbatched_and_hwnc_layouts_agree(self, rng):
        x = rng.standard_normal((3, 8, 5))
        k = rng.standard_normal((2, 3, 3, 2))
        a = ops.conv2d(x, k).data
        hwnc = ops.conv2d(np.transpose(x, (1, 2, 0))[:, :, None, :], k, layout="HWNC").data
        np.testing.assert_allclose(a, np.transpose(hwnc[:, :, 0, :], (2, 0, 1)), atol=1e-12)

    def test_float32_stays_float32(self, rng):
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        k = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        out = ops.conv2d(x, k).data
        assert out.dtype == np.float32
        np.testing.assert_allclose(out, conv_oracle(x, k, np.zeros(2)), atol=1e-4)

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            ops.conv2d(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)))

    def test_gradients_large_kernel(self, rng):
        fn = lambda x, k, b: ops.conv2d(x, k, b)  # noqa: E731
        err = check_function(fn, [rng.standard_normal((1, 2, 6, 9)), rng.standard_normal((3, 2, 6, 9)),
                                  rng.standard_normal(3)])
        assert err < 1e-6


class TestDenseAndActivations:
    def test_dense_oracle(self, rng):
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((5, 4))
        b = rng.standard_normal(5)
        expected = np.einsum("ntd,od->nto", x, w) + b
        np.testing.assert_allclose(ops.dense(x, w, b).data, expected, atol=1e-12)

    def test_dense_shape_error(self, rng):
        with pytest.raises(DimensionError):
            ops.dense(rng.standard_normal((2, 3)), rng.standard_normal((4, 5)))

    def test_relu_subgradient_at_zero_is_zero(self):
        t = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        ops.relu(t).sum().backward()
        np.testing.assert_array_equal(t.grad, [0.0, 0.0, 1.0])

    def test_sigmoid_is_stable_for_large_inputs(self):
        out = ops.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_tanh_values(self):
        np.testing.assert_allclose(ops.tanh(np.array([0.0, 1.0])).data, [0.0, math.tanh(1.0)])


def lstm_scalar_oracle(x, h, c, w, u, b):
    hidden = u.shape[1]
    z = w @ x + u @ h + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f = sig(z[:hidden]), sig(z[hidden:2 * hidden])
    g, o = np.tanh(z[2 * hidden:3 * hidden]), sig(z[3 * hidden:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


class TestLstm:
    def test_cell_matches_textbook_equations(self, rng):
        d, hdim = 3, 2
        x, h, c = rng.standard_normal(d), rng.standard_normal(hdim), rng.standard_normal(hdim)
        w, u, b = rng.standard_normal((4 * hdim, d)), rng.standard_normal((4 * hdim, hdim)), rng.standard_normal(8)
        out = ops.lstm_cell(x, h, c, w, u, b).data
        eh, ec = lstm_scalar_oracle(x, h, c, w, u, b)
        np.testing.assert_allclose(out, np.concatenate([eh, ec]), atol=1e-12)

    @pytest.mark.parametrize("reverse", [False, True])
    def test_sequence_equals_stepped_cells(self, rng, reverse):
        d, hdim, steps = 3, 4, 5
        x = rng.standard_normal((2, steps, d))
        w, u, b = rng.standard_normal((4 * hdim, d)), rng.standard_normal((4 * hdim, hdim)), rng.standard_normal(16)
        seq = ops.lstm_sequence(x, w, u, b, reverse=reverse).data
        h = np.zeros((2, hdim))
        c = np.zeros((2, hdim))
        expected = np.zeros((2, steps, hdim))
        for t in (range(steps - 1, -1, -1) if reverse else range(steps)):
            hc = ops.lstm_cell(x[:, t], h, c, w, u, b).data
            h, c = hc[:, :hdim], hc[:, hdim:]
            expected[:, t] = h
        np.testing.assert_allclose(seq, expected, atol=1e-12)

    def test_empty_sequence_rejected(self, rng):
        with pytest.raises(ContractError):
            ops.lstm_sequence(np.zeros((1, 0, 3)), np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))

    def test_sequence_gradient_long(self, rng):
        fn = lambda s, w, u, b: ops.lstm_sequence(s, w, u, b, reverse=True)  # noqa: E731
        err = check_function(fn, [rng.standard_normal((1, 6, 3)), rng.standard_normal((8, 3)) * 0.5,
                                  rng.standard_normal((8, 2)) * 0.5, rng.standard_normal(8)])
        assert err < 1e-6


class TestLosses:
    def test_bce_perfect_prediction_near_zero(self):
        assert ops.bce_loss(np.ones((3, 3)), np.ones((3, 3))).item() <= 1e-6

    def test_bce_half_is_log_two(self, rng):
        t = (rng.random((4, 5)) > 0.5).astype(float)
        assert ops.bce_loss(np.full((4, 5), 0.5), t).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_matches_scalar_oracle(self, rng):
        p = rng.random((6, 7))
        t = (rng.random((6, 7)) > 0.5).astype(float)
        m = rng.random((6, 7)) > 0.3
        terms = []
        for pi, ti, mi in zip(p.ravel(), t.ravel(), m.ravel()):
            if mi:
                q = min(max(float(pi), 1e-7), 1 - 1e-7)
                terms.append(-(ti * math.log(q) + (1 - ti) * math.log(1 - q)))
        assert ops.bce_loss(p, t, m).item() == pytest.approx(math.fsum(terms) / len(terms), abs=1e-10)

    def test_bce_clamps_extremes(self):
        loss = ops.bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item()
        assert np.isfinite(loss)
        assert loss == pytest.approx(-math.log(1e-7), rel=1e-6)

    def test_bce_gradient_zero_outside_clamp(self):
        p = Tensor(np.array([0.0, 0.5]), requires_grad=True)
        ops.bce_loss(p, np.array([1.0, 1.0])).backward()
        assert p.grad[0] == 0.0 and p.grad[1] != 0.0

    def test_mse_examples(self, rng):
        a = rng.random((3, 5))
        assert ops.mse_loss(a, a).item() == 0.0
        assert ops.mse_loss(a + 0.1, a).item() == pytest.approx(0.01, abs=1e-12)

    def test_mse_matches_oracle(self, rng):
        a, b = rng.random((4, 6)), rng.random((4, 6))
        m = rng.random((4, 6)) > 0.4
        expected = math.fsum(float((x - y) ** 2) for x, y, k in zip(a.ravel(), b.ravel(), m.ravel()) if k) / m.sum()
        assert ops.mse_loss(a, b, m).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("loss", [ops.bce_loss, ops.mse_loss])
    def test_empty_mask_is_contract_error(self, loss):
        with pytest.raises(ContractError):
            loss(np.full(3, 0.5), np.ones(3), np.zeros(3, bool))

    @pytest.mark.parametrize("loss", [ops.bce_loss, ops.mse_loss])
    def test_shape_mismatch(self, loss):
        with pytest.raises(DimensionError):
            loss(np.full(3, 0.5), np.ones(4))


class TestStripes:
    def test_impulse_layout(self):
        h, w = 4, 7
        edge = np.zeros((1, 1, h, w))
        edge[0, 0, 2, 3] = 1.0
        stripes = ops.extract_stripes(edge).data[0]  # (W, 5*H)
        expected = np.zeros((w, 5 * h))
        for block, k in enumerate((-2, -1, 0, 1, 2)):
            x = 3 - k  # column x sees column x+k
            if 0 <= x < w:
                expected[x, block * h + 2] = 1.0
        np.testing.assert_array_equal(stripes, expected)

    def test_out_of_image_columns_are_zero(self):
        edge = np.ones((1, 3, 5))
        s = ops.extract_stripes(edge).data
        assert s[0, :3].sum() == 0  # k=-2 at x=0
        assert s[0, 3:6].sum() == 0  # k=-1 at x=0
        assert s[4, 12:].sum() == 0  # k=+2 at x=4

    def test_rejects_multichannel(self):
        with pytest.raises(DimensionError):
            ops.extract_stripes(np.zeros((1, 2, 3, 3)))
