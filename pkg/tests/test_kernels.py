"""Backend parity: the numba kernels must match the numpy fallback."""

import numpy as np
import pytest

from htdecay import kernels

HAS_NUMBA = kernels.BACKEND == "numba"

needs_numba = pytest.mark.skipif(not HAS_NUMBA, reason="numba backend not active")


def test_backend_selected():
    assert kernels.BACKEND in ("numpy", "numba")


class TestSoftmaxCausal:
    def test_rows_sum_to_one_and_mask_holds(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal((6, 9, 9))
        a = kernels.softmax_causal(s)
        for i in range(9):
            np.testing.assert_allclose(a[:, i, : i + 1].sum(-1), 1.0, rtol=1e-12)
            assert np.all(a[:, i, i + 1 :] == 0.0)

    def test_numpy_reference_values(self):
        s = np.zeros((1, 3, 3))
        a = kernels.softmax_causal_np(s)
        np.testing.assert_allclose(a[0, 0], [1.0, 0.0, 0.0])
        np.testing.assert_allclose(a[0, 1], [0.5, 0.5, 0.0])
        np.testing.assert_allclose(a[0, 2], [1 / 3, 1 / 3, 1 / 3])

    @needs_numba
    def test_parity(self):
        rng = np.random.default_rng(1)
        s = rng.standard_normal((4, 16, 16)) * 5.0
        np.testing.assert_allclose(
            kernels.softmax_causal_nb(s), kernels.softmax_causal_np(s), rtol=1e-13, atol=1e-15
        )


class TestCrossEntropy:
    def test_uniform_logits(self):
        logits = np.zeros((5, 8))
        targets = np.arange(5) % 8
        loss, grad = kernels.cross_entropy_np(logits.copy(), targets)
        assert loss == pytest.approx(5 * np.log(8.0), rel=1e-12)
        np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((7, 11))
        targets = rng.integers(0, 11, size=7)
        _, grad = kernels.cross_entropy_np(logits.copy(), targets)
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        onehot = np.zeros_like(p)
        onehot[np.arange(7), targets] = 1.0
        np.testing.assert_allclose(grad, p - onehot, rtol=1e-12, atol=1e-14)

    @needs_numba
    def test_parity(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((64, 50)) * 7.0
        targets = rng.integers(0, 50, size=64)
        l_np, g_np = kernels.cross_entropy_np(logits.copy(), targets)
        l_nb, g_nb = kernels.cross_entropy_nb(logits.copy(), targets)
        assert l_nb == pytest.approx(l_np, rel=1e-12)
        np.testing.assert_allclose(g_nb, g_np, rtol=1e-12, atol=1e-14)


class TestAdamUpdate:
    def _run(self, fn, decay, decoupled, steps=3):
        rng = np.random.default_rng(4)
        w = rng.standard_normal(50)
        m = np.zeros(50)
        v = np.zeros(50)
        for step in range(1, steps + 1):
            g = rng.standard_normal(50)
            fn(w, g.copy(), m, v, step, 1e-2, 0.9, 0.999, 1e-8, decay, decoupled)
        return w, m, v

    @needs_numba
    @pytest.mark.parametrize("decay,decoupled", [(0.0, False), (0.1, False), (0.1, True)])
    def test_parity(self, decay, decoupled):
        w1, m1, v1 = self._run(kernels.adam_update_np, decay, decoupled)
        w2, m2, v2 = self._run(kernels.adam_update_nb, decay, decoupled)
        np.testing.assert_allclose(w2, w1, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(m2, m1, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(v2, v1, rtol=1e-12, atol=1e-15)

    def test_zero_grad_decoupled_is_pure_shrink(self):
        w = np.array([1.0])
        m = np.zeros(1)
        v = np.zeros(1)
        kernels.adam_update(w, np.zeros(1), m, v, 1, 0.01, 0.9, 0.999, 1e-8, 0.1, True)
        assert w[0] == pytest.approx(0.999, rel=1e-15)

    def test_zero_decay_modes_agree(self):
        out = {}
        for decoupled in (False, True):
            rng = np.random.default_rng(9)
            w = rng.standard_normal(20)
            m = np.zeros(20)
            v = np.zeros(20)
            for step in range(1, 4):
                kernels.adam_update(w, rng.standard_normal(20), m, v, step,
                                    1e-3, 0.9, 0.999, 1e-8, 0.0, decoupled)
            out[decoupled] = w
        np.testing.assert_array_equal(out[False], out[True])


@needs_numba
def test_backends_train_equivalently():
    """A short training run agrees across backends to float rounding."""
    import os
    import subprocess
    import sys

    script = (
        "from htdecay.train import ModelConfig, TrainConfig, train_run, synthetic_corpus\n"
        "from htdecay.schedule import SchedulerConfig, Linear\n"
        "cfg = TrainConfig(lr=2e-3, steps=8, scheduler=SchedulerConfig(eta=1e-3, interval=4),\n"
        "                  warmup_fraction=0.0, batch=2, seq_len=16, clip=1.0, seed=0,\n"
        "                  eval_windows=4)\n"
        "mc = ModelConfig(hidden=16, intermediate=24, heads=2, layers=1, vocab=256, context=16)\n"
        "_, log = train_run(mc, cfg, synthetic_corpus(20_000, seed=0), 15_000)\n"
        "print(repr(log.final_val_loss))\n"
        "print(repr([r.loss for r in log.steps]))\n"
    )
    outs = {}
    for backend in ("0", "1"):
        env = dict(os.environ, HTSR_NUMBA=backend)
        proc = subprocess.run([sys.executable, "-c", script], env=env, capture_output=True)
        assert proc.returncode == 0, proc.stderr.decode()
        val, losses = proc.stdout.decode().splitlines()
        outs[backend] = (eval(val), eval(losses))
    np.testing.assert_allclose(outs["0"][0], outs["1"][0], rtol=1e-9)
    np.testing.assert_allclose(outs["0"][1], outs["1"][1], rtol=1e-9)
