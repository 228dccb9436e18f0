import math

import numpy as np
import pytest

from htdecay.tensor_io import ModuleKind
from htdecay.train.model import (
    ModelConfig,
    build_model,
    forward,
    loss_and_grads,
    sinusoidal_table,
)

TINY = ModelConfig(hidden=16, intermediate=32, heads=2, layers=2, vocab=256, context=32)


def small_batch(cfg, seed=0, batch=2, seq=8):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, cfg.vocab, size=(batch, seq))
    y = rng.integers(0, cfg.vocab, size=(batch, seq))
    return x, y


class TestBuildModel:
    def test_scheduled_matrix_count(self):
        model = build_model(TINY, seed=0)
        assert len(model.scheduled_matrices()) == 7 * TINY.layers

    def test_all_seven_kinds_present_per_layer(self):
        model = build_model(TINY, seed=0)
        kinds = {(m.layer, m.kind) for m in model.scheduled_matrices()}
        for l in range(TINY.layers):
            for kind in ModuleKind:
                if kind is not ModuleKind.OTHER:
                    assert (l, kind) in kinds

    def test_same_seed_bit_identical(self):
        m1 = build_model(TINY, seed=42)
        m2 = build_model(TINY, seed=42)
        assert m1.params.keys() == m2.params.keys()
        for name in m1.params:
            assert m1.params[name].tobytes() == m2.params[name].tobytes()

    def test_different_seed_differs(self):
        m1 = build_model(TINY, seed=1)
        m2 = build_model(TINY, seed=2)
        assert m1.params["lm_head"].tobytes() != m2.params["lm_head"].tobytes()

    def test_head_dim(self):
        cfg = ModelConfig(hidden=64, intermediate=64, heads=4, layers=1)
        assert cfg.head_dim == 16

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden=30, intermediate=64, heads=4, layers=1)
        with pytest.raises(ValueError):
            ModelConfig(hidden=64, intermediate=32, heads=4, layers=1)
        with pytest.raises(ValueError):
            ModelConfig(hidden=64, intermediate=64, heads=4, layers=0)

    def test_shapes(self):
        model = build_model(TINY, seed=0)
        p = model.params
        assert p["embed.tokens"].shape == (TINY.vocab, TINY.hidden)
        assert p["lm_head"].shape == (TINY.hidden, TINY.vocab)
        assert p["layers.0.att.q"].shape == (TINY.hidden, TINY.hidden)
        assert p["layers.0.mlp.gate"].shape == (TINY.hidden, TINY.intermediate)
        assert p["layers.0.mlp.down"].shape == (TINY.intermediate, TINY.hidden)


class TestForward:
    def test_initial_loss_near_log_vocab(self):
        model = build_model(TINY, seed=3)
        x, y = small_batch(TINY, seed=1, batch=4, seq=16)
        loss, _ = loss_and_grads(model, x, y)
        assert abs(loss - math.log(TINY.vocab)) / math.log(TINY.vocab) < 0.05

    def test_duplicated_batch_rows_leave_loss_unchanged(self):
        model = build_model(TINY, seed=3)
        x, y = small_batch(TINY, seed=2, batch=3, seq=8)
        loss1, _ = loss_and_grads(model, x, y)
        loss2, _ = loss_and_grads(model, np.vstack([x, x]), np.vstack([y, y]))
        assert loss1 == pytest.approx(loss2, rel=1e-12)

    def test_rejects_out_of_vocab(self):
        model = build_model(TINY, seed=3)
        x = np.full((1, 4), TINY.vocab)
        with pytest.raises(ValueError):
            forward(model, x)

    def test_rejects_overlong_sequence(self):
        model = build_model(TINY, seed=3)
        x = np.zeros((1, TINY.context + 1), dtype=np.int64)
        with pytest.raises(ValueError):
            forward(model, x)

    def test_causality(self):
        # changing a later token must not affect earlier logits
        model = build_model(TINY, seed=3)
        x, _ = small_batch(TINY, seed=4, batch=1, seq=10)
        base = forward(model, x)
        x2 = x.copy()
        x2[0, -1] = (x2[0, -1] + 1) % TINY.vocab
        moved = forward(model, x2)
        np.testing.assert_allclose(base[0, :-1], moved[0, :-1], rtol=1e-12)
        assert not np.allclose(base[0, -1], moved[0, -1])

    def test_deterministic(self):
        model = build_model(TINY, seed=3)
        x, _ = small_batch(TINY, seed=5)
        np.testing.assert_array_equal(forward(model, x), forward(model, x))


class TestGradients:
    def test_finite_differences_cover_every_parameter(self):
        # central differences, step 1e-3 in f64, 2 entries per parameter
        # (the largest-|gradient| entries keep the relative check well-posed)
        model = build_model(TINY, seed=7)
        x, y = small_batch(TINY, seed=6, batch=2, seq=8)
        _, grads = loss_and_grads(model, x, y)
        h = 1e-3
        checked = 0
        for name in sorted(model.params):
            flat = model.params[name].ravel()
            gflat = grads[name].ravel()
            for i in np.argsort(-np.abs(gflat))[:2]:
                orig = flat[i]
                flat[i] = orig + h
                lp, _ = loss_and_grads(model, x, y)
                flat[i] = orig - h
                lm, _ = loss_and_grads(model, x, y)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]))
                assert rel < 1e-4, f"{name}[{i}]: fd={fd} analytic={gflat[i]} rel={rel}"
                checked += 1
        assert checked == 2 * len(model.params)

    def test_gradient_accumulates_over_batch(self):
        model = build_model(TINY, seed=7)
        x, y = small_batch(TINY, seed=9, batch=2, seq=8)
        _, g1 = loss_and_grads(model, x, y)
        _, g2 = loss_and_grads(model, np.vstack([x, x]), np.vstack([y, y]))
        # duplicating the batch leaves the mean gradient unchanged
        for name in g1:
            np.testing.assert_allclose(g1[name], g2[name], rtol=1e-9, atol=1e-14)


class TestSinusoidalTable:
    def test_shape_and_range(self):
        t = sinusoidal_table(20, 16)
        assert t.shape == (20, 16)
        assert np.all(np.abs(t) <= 1.0)

    def test_first_row(self):
        t = sinusoidal_table(4, 8)
        np.testing.assert_allclose(t[0, 0::2], 0.0)
        np.testing.assert_allclose(t[0, 1::2], 1.0)

    def test_odd_hidden_ok(self):
        t = sinusoidal_table(5, 6)
        assert np.all(np.isfinite(t))
