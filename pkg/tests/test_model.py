import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artinv.ema import design_windowed_sinc
from artinv.errors import PersistenceError, ShapeError
from artinv.model import (FORMAT_VERSION, MAGIC, BiLstmLayer, LstmCellParams, ModelConfig, bilstm_forward,
                          compute_gradients, forward_batch, init_model, load_model, loss_and_gradients,
                          masked_loss, model_forward, model_from_bytes, model_to_bytes, parameter_count,
                          save_model, smooth)

TINY = ModelConfig(input_dim=429, dense_units=8, lstm_hidden=8)
SMALL = ModelConfig(input_dim=7, dense_units=6, lstm_hidden=3, output_dim=16, kernel_taps=5)


def random_cell(rng, hidden, n_in, scale=0.5):
    ws = [rng.uniform(-scale, scale, (hidden, hidden + n_in)) for _ in range(4)]
    bs = [rng.uniform(-scale, scale, hidden) for _ in range(4)]
    return LstmCellParams(*ws, *bs)


def scalar_step(cell, h, c, x):
    """Element-by-element LSTM update with explicit loops."""
    H = len(h)
    v = list(h) + list(x)

    def pre(W, b, k):
        return sum(W[k][j] * v[j] for j in range(len(v))) + b[k]

    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    h_new, c_new = [], []
    for k in range(H):
        f = sig(pre(cell.w_f, cell.b_f, k))
        i = sig(pre(cell.w_i, cell.b_i, k))
        g = math.tanh(pre(cell.w_c, cell.b_c, k))
        o = sig(pre(cell.w_o, cell.b_o, k))
        ck = f * c[k] + i * g
        c_new.append(ck)
        h_new.append(o * math.tanh(ck))
    return np.array(h_new), np.array(c_new)


def scalar_bilstm(layer, seq):
    T = seq.shape[0]
    H = layer.hidden_per_direction
    fwd, bwd = [None] * T, [None] * T
    h, c = np.zeros(H), np.zeros(H)
    for t in range(T):
        h, c = scalar_step(layer.forward_cell, h, c, seq[t])
        fwd[t] = h
    h, c = np.zeros(H), np.zeros(H)
    for t in reversed(range(T)):
        h, c = scalar_step(layer.backward_cell, h, c, seq[t])
        bwd[t] = h
    return np.array([np.concatenate([f, b]) for f, b in zip(fwd, bwd)])


class TestLstmStep:
    def test_all_zero(self):
        from artinv.model import lstm_step

        cell = LstmCellParams(*[np.zeros((3, 5))] * 4, *[np.zeros(3)] * 4)
        h, c = lstm_step(cell, np.zeros(3), np.zeros(3), np.zeros(2))
        np.testing.assert_array_equal(h, 0.0)
        np.testing.assert_array_equal(c, 0.0)

    def test_zero_weights_unit_cell(self):
        from artinv.model import lstm_step

        cell = LstmCellParams(*[np.zeros((2, 4))] * 4, *[np.zeros(2)] * 4)
        h, c = lstm_step(cell, np.zeros(2), np.ones(2), np.zeros(2))
        np.testing.assert_allclose(c, 0.5, atol=1e-15)
        np.testing.assert_allclose(h, 0.5 * math.tanh(0.5), atol=1e-15)
        assert h[0] == pytest.approx(0.23106, abs=1e-5)

    def test_scalar_oracle(self):
        from artinv.model import lstm_step

        rng = np.random.default_rng(0)
        cell = random_cell(rng, 4, 3)
        h0, c0, x = rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(3)
        h, c = lstm_step(cell, h0, c0, x)
        hr, cr = scalar_step(cell, h0, c0, x)
        np.testing.assert_allclose(h, hr, atol=1e-12)
        np.testing.assert_allclose(c, cr, atol=1e-12)

    def test_shape_error(self):
        from artinv.model import lstm_step

        cell = random_cell(np.random.default_rng(1), 4, 3)
        with pytest.raises(ShapeError):
            lstm_step(cell, np.zeros(4), np.zeros(4), np.zeros(5))


class TestBiLstm:
    def test_scalar_oracle(self):
        rng = np.random.default_rng(2)
        layer = BiLstmLayer(random_cell(rng, 3, 5), random_cell(rng, 3, 5))
        seq = rng.standard_normal((4, 5))
        np.testing.assert_allclose(bilstm_forward(layer, seq), scalar_bilstm(layer, seq), atol=1e-12)

    def test_single_frame_shared_params(self):
        rng = np.random.default_rng(3)
        cell = random_cell(rng, 4, 2)
        out = bilstm_forward(BiLstmLayer(cell, cell), rng.standard_normal((1, 2)))
        np.testing.assert_array_equal(out[0, :4], out[0, 4:])

    def test_direction_symmetry(self):
        rng = np.random.default_rng(4)
        a, b = random_cell(rng, 3, 2), random_cell(rng, 3, 2)
        seq = rng.standard_normal((6, 2))
        out = bilstm_forward(BiLstmLayer(a, b), seq)
        swapped = bilstm_forward(BiLstmLayer(b, a), seq[::-1])
        np.testing.assert_allclose(swapped[::-1], np.hstack([out[:, 3:], out[:, :3]]), atol=1e-14)

    def test_empty(self):
        rng = np.random.default_rng(5)
        layer = BiLstmLayer(random_cell(rng, 3, 2), random_cell(rng, 3, 2))
        with pytest.raises(ShapeError):
            bilstm_forward(layer, np.zeros((0, 2)))


class TestInit:
    def test_parameter_count(self):
        m = init_model(0)
        H, D = 200, 400
        want = 429 * D + D + 2 * 4 * (H * (H + D) + H) + 2 * 4 * (H * (H + 2 * H) + H) + 400 * 16 + 16 + 50
        assert want == 2_101_666
        assert parameter_count(ModelConfig()) == want
        assert m.n_parameters() == want

    def test_same_seed(self):
        a, b = init_model(3, config=SMALL), init_model(3, config=SMALL)
        assert model_to_bytes(a) == model_to_bytes(b)

    def test_fixed_taps(self):
        m = init_model(0, "fixed")
        np.testing.assert_array_equal(m.smoother_taps, design_windowed_sinc(25.0, 100.0, 50).taps)
        assert m.frozen and "smoother.taps" not in m.trainable_names()

    def test_adaptive_taps(self):
        a, b = init_model(0, "adaptive", SMALL), init_model(1, "adaptive", SMALL)
        assert not a.frozen
        assert not np.array_equal(a.smoother_taps, b.smoother_taps)
        assert np.all(np.abs(a.smoother_taps) <= math.sqrt(1 / SMALL.kernel_taps))

    def test_fan_in_bounds(self):
        m = init_model(0, config=SMALL)
        assert np.all(np.abs(m.params["input_dense.weight"]) <= math.sqrt(1 / 7))
        assert np.all(np.abs(m.params["bilstm2.bwd.w_o"]) <= math.sqrt(1 / (3 + 6)))

    def test_per_channel_kernel(self):
        cfg = ModelConfig(input_dim=7, dense_units=4, lstm_hidden=2, kernel_taps=5, per_channel_kernel=True)
        m = init_model(0, "adaptive", cfg)
        assert m.smoother_taps.shape == (5, 16)
        assert m.n_parameters() == parameter_count(cfg)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            init_model(0, "learned")


class TestForward:
    def test_shapes(self):
        m = init_model(0, config=SMALL)
        raw, smoothed = model_forward(m, np.random.default_rng(0).standard_normal((11, 7)))
        assert raw.shape == smoothed.shape == (11, 16)

    def test_zero_model_gives_bias(self):
        m = init_model(0, config=SMALL)
        for k in m.params:
            if k != "smoother.taps":
                m.params[k] = np.zeros_like(m.params[k])
        m.params["output_dense.bias"] = np.arange(16.0)
        raw, smoothed = model_forward(m, np.random.default_rng(1).standard_normal((9, 7)))
        np.testing.assert_array_equal(raw, np.tile(np.arange(16.0), (9, 1)))
        # unit-DC frozen kernel leaves constant rows unchanged
        np.testing.assert_allclose(smoothed, raw, atol=1e-12)

    def test_smoother_linear(self):
        taps = design_windowed_sinc().taps
        rng = np.random.default_rng(2)
        U, V = rng.standard_normal((2, 60, 16))
        np.testing.assert_allclose(smooth(2.5 * U - 0.7 * V, taps), 2.5 * smooth(U, taps) - 0.7 * smooth(V, taps),
                                   atol=1e-10)

    def test_batch_matches_single(self):
        m = init_model(1, "adaptive", SMALL)
        rng = np.random.default_rng(3)
        seqs = [rng.standard_normal((n, 7)) for n in (9, 4, 1)]
        X = np.zeros((3, 9, 7))
        for b, s in enumerate(seqs):
            X[b, : len(s)] = s
            X[b, len(s):] = 100.0  # padding garbage must not leak
        raw, smoothed = forward_batch(m, X, [9, 4, 1])
        for b, s in enumerate(seqs):
            r1, s1 = model_forward(m, s)
            np.testing.assert_allclose(raw[b, : len(s)], r1, atol=1e-13)
            np.testing.assert_allclose(smoothed[b, : len(s)], s1, atol=1e-13)

    def test_shape_errors(self):
        m = init_model(0, config=SMALL)
        with pytest.raises(ShapeError):
            model_forward(m, np.zeros((5, 8)))
        with pytest.raises(ShapeError):
            forward_batch(m, np.zeros((2, 5, 7)), [5, 6])


def finite_difference_check(m, X, Y, mask, eps=1e-5, floor=1e-6):
    """Max relative error of analytic vs central-difference gradients over every parameter."""
    loss, grads = loss_and_gradients(m, X, Y, mask)
    assert loss == pytest.approx(masked_loss(m, X, Y, mask), rel=1e-12)
    worst = 0.0
    for name, g in grads.items():
        p = m.params[name]
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = masked_loss(m, X, Y, mask)
            flat[k] = old - eps
            down = masked_loss(m, X, Y, mask)
            flat[k] = old
            fd = (up - down) / (2 * eps)
            # the floor stops roundoff on near-zero entries from dominating
            rel = abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), floor)
            worst = max(worst, rel)
    return worst


class TestGradients:
    def _batch(self, cfg, seed=0, lengths=(5, 3)):
        rng = np.random.default_rng(seed)
        T = max(lengths)
        X = rng.standard_normal((len(lengths), T, cfg.input_dim))
        Y = rng.standard_normal((len(lengths), T, cfg.output_dim))
        mask = np.arange(T)[None, :] < np.array(lengths)[:, None]
        return X, Y, mask

    @pytest.mark.parametrize("mode", ["fixed", "adaptive"])
    def test_small_model(self, mode):
        m = init_model(2, mode, SMALL)
        X, Y, mask = self._batch(SMALL)
        assert finite_difference_check(m, X, Y, mask) < 1e-4

    def test_per_channel_kernel(self):
        cfg = ModelConfig(input_dim=5, dense_units=4, lstm_hidden=2, kernel_taps=4, per_channel_kernel=True)
        m = init_model(0, "adaptive", cfg)
        X, Y, mask = self._batch(cfg, seed=1, lengths=(6, 2))
        assert finite_difference_check(m, X, Y, mask) < 1e-4

    def test_padding_does_not_change_gradients(self):
        m = init_model(3, "adaptive", SMALL)
        X, Y, mask = self._batch(SMALL, seed=2)
        _, g1 = loss_and_gradients(m, X, Y, mask)
        X2, Y2 = X.copy(), Y.copy()
        X2[~mask] = 50.0
        Y2[~mask] = -50.0
        _, g2 = loss_and_gradients(m, X2, Y2, mask)
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], atol=1e-13)

    def test_fully_masked(self):
        m = init_model(0, "adaptive", SMALL)
        X, Y, _ = self._batch(SMALL)
        grads = compute_gradients(m, X, Y, np.zeros((2, 5), dtype=bool))
        assert set(grads) == set(m.params)
        assert all(not np.any(g) for g in grads.values())

    def test_frozen_has_no_smoother_entry(self):
        m = init_model(0, "fixed", SMALL)
        X, Y, mask = self._batch(SMALL)
        assert "smoother.taps" not in compute_gradients(m, X, Y, mask)

    def test_mask_with_hole(self):
        m = init_model(0, config=SMALL)
        X, Y, mask = self._batch(SMALL)
        mask[0, 1] = False
        with pytest.raises(ShapeError):
            compute_gradients(m, X, Y, mask)


class TestPersistence:
    def _model(self):
        from artinv.ema import ChannelStats

        m = init_model(4, "adaptive", SMALL)
        m.target_stats = ChannelStats(np.linspace(-1, 1, 16), np.linspace(0.5, 2, 16))
        m.meta = {"note": "x"}
        return m

    def test_round_trip(self, tmp_path):
        m = self._model()
        save_model(m, tmp_path / "m.aaim")
        back = load_model(tmp_path / "m.aaim")
        assert (back.seed, back.frozen, back.smoother_mode, back.meta) == (4, False, "adaptive", {"note": "x"})
        np.testing.assert_array_equal(back.target_stats.std, m.target_stats.std)
        x = np.random.default_rng(0).standard_normal((8, 7))
        for a, b in zip(model_forward(m, x), model_forward(back, x)):
            assert a.tobytes() == b.tobytes()
        assert model_to_bytes(back) == model_to_bytes(m)

    def test_truncated(self):
        blob = model_to_bytes(self._model())
        with pytest.raises(PersistenceError):
            model_from_bytes(blob[:-8])
        with pytest.raises(PersistenceError):
            model_from_bytes(blob[: len(MAGIC) + 5])

    def test_bad_magic(self):
        with pytest.raises(PersistenceError):
            model_from_bytes(b"hello world\n")

    def test_version_mismatch(self):
        blob = model_to_bytes(self._model())
        tag = f'"format_version": {FORMAT_VERSION}'.encode()
        with pytest.raises(PersistenceError, match="version 99"):
            model_from_bytes(blob.replace(tag, b'"format_version": 99', 1))

    def test_corrupt_payload(self):
        blob = bytearray(model_to_bytes(self._model()))
        blob[-3] ^= 0xFF
        with pytest.raises(PersistenceError, match="checksum"):
            model_from_bytes(bytes(blob))

    def test_missing_file(self, tmp_path):
        with pytest.raises(PersistenceError):
            load_model(tmp_path / "absent.aaim")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12))
def test_forward_is_pure(seed, T):
    m = init_model(seed % 1000, "adaptive", SMALL)
    x = np.random.default_rng(seed).standard_normal((T, 7))
    before = model_to_bytes(m)
    a = model_forward(m, x)
    b = model_forward(m, x)
    assert a[0].tobytes() == b[0].tobytes()
    assert model_to_bytes(m) == before
