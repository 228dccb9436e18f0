"""Desk-scale decoder-only transformer in numpy (float64).

Per layer: pre-norm RMS normalization, causal multi-head attention with
separate q/k/v/o projections (hidden x hidden), and a gated MLP
``down(silu(gate(x)) * up(x))`` with gate/up of shape hidden x
intermediate and down of shape intermediate x hidden. Token embedding
and output head are unscheduled (kind=other) parameters, as are the RMS
norm gains. Position information comes from a fixed sinusoidal table
added to the token embeddings, so it contributes no parameters.

The backward pass is written by hand and checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..tensor_io import ModuleId, ModuleKind, parse_module_name

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    intermediate: int
    heads: int
    layers: int
    vocab: int = 256
    context: int = 256

    def __post_init__(self) -> None:
        for name in ("hidden", "intermediate", "heads", "layers", "vocab", "context"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.intermediate < self.hidden:
            raise ValueError(f"intermediate={self.intermediate} must be >= hidden={self.hidden}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def sinusoidal_table(context: int, hidden: int) -> np.ndarray:
    """Fixed (context, hidden) position table: sin/cos pairs per dimension."""
    pos = np.arange(context, dtype=np.float64)[:, None]
    i = np.arange(0, hidden, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, i / hidden)
    table = np.zeros((context, hidden), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : hidden // 2])
    return table


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    pos: np.ndarray = field(repr=False, default=None)

    def __post_init__(self) -> None:
        if self.pos is None:
            self.pos = sinusoidal_table(self.cfg.context, self.cfg.hidden)

    def module_ids(self) -> dict[str, ModuleId]:
        return {name: parse_module_name(name) for name in self.params}

    def scheduled_matrices(self) -> dict[ModuleId, np.ndarray]:
        """The seven projection kinds, keyed by ModuleId, in name order."""
        out: dict[ModuleId, np.ndarray] = {}
        for name in sorted(self.params):
            mid = parse_module_name(name)
            if mid.kind is not ModuleKind.OTHER:
                out[mid] = self.params[name]
        return out


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Initialize all parameters deterministically from ``seed``.

    Projections use a depth-scaled normal, std = 0.02 / sqrt(2 * layers);
    embedding and head use std 0.02; norm gains start at 1. Generation
    order is fixed so identical seeds produce bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    std_proj = 0.02 / math.sqrt(2.0 * cfg.layers)
    p: dict[str, np.ndarray] = {}
    p["embed.tokens"] = rng.normal(0.0, 0.02, size=(cfg.vocab, cfg.hidden))
    for l in range(cfg.layers):
        for kind in ("att.q", "att.k", "att.v", "att.o"):
            p[f"layers.{l}.{kind}"] = rng.normal(0.0, std_proj, size=(cfg.hidden, cfg.hidden))
        p[f"layers.{l}.mlp.gate"] = rng.normal(0.0, std_proj, size=(cfg.hidden, cfg.intermediate))
        p[f"layers.{l}.mlp.up"] = rng.normal(0.0, std_proj, size=(cfg.hidden, cfg.intermediate))
        p[f"layers.{l}.mlp.down"] = rng.normal(0.0, std_proj, size=(cfg.intermediate, cfg.hidden))
        p[f"layers.{l}.norm.att"] = np.ones(cfg.hidden)
        p[f"layers.{l}.norm.mlp"] = np.ones(cfg.hidden)
    p["norm.final"] = np.ones(cfg.hidden)
    p["lm_head"] = rng.normal(0.0, 0.02, size=(cfg.hidden, cfg.vocab))
    return Model(cfg=cfg, params=p)


def _rmsnorm_fwd(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r * gain, r


def _rmsnorm_bwd(
    dy: np.ndarray, x: np.ndarray, gain: np.ndarray, r: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    h = x.shape[-1]
    dgain = np.sum(dy * x * r, axis=tuple(range(dy.ndim - 1)))
    dyg = dy * gain
    inner = np.sum(dyg * x, axis=-1, keepdims=True)
    dx = dyg * r - x * (r ** 3 / h) * inner
    return dx, dgain


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(model: Model, tokens: np.ndarray, *, want_cache: bool = False):
    """Logits over next tokens; optionally the cache the backward needs."""
    cfg = model.cfg
    p = model.params
    B, T = tokens.shape
    if T > cfg.context:
        raise ValueError(f"sequence length {T} exceeds context {cfg.context}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token ids out of vocabulary range")
    nh, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    x = p["embed.tokens"][tokens] + model.pos[:T]
    layer_caches = []
    for l in range(cfg.layers):
        g_att = p[f"layers.{l}.norm.att"]
        wq, wk, wv, wo = (p[f"layers.{l}.att.{s}"] for s in ("q", "k", "v", "o"))
        x_in = x
        xn1, r1 = _rmsnorm_fwd(x_in, g_att)
        q = (xn1 @ wq).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        k = (xn1 @ wk).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        v = (xn1 @ wv).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        attn = kernels.softmax_causal(np.ascontiguousarray(scores.reshape(B * nh, T, T)))
        attn = attn.reshape(B, nh, T, T)
        ctx = np.matmul(attn, v)
        ctx_m = ctx.transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden)
        x = x_in + ctx_m @ wo

        g_mlp = p[f"layers.{l}.norm.mlp"]
        wg, wu, wd = (p[f"layers.{l}.mlp.{s}"] for s in ("gate", "up", "down"))
        x_mid = x
        xn2, r2 = _rmsnorm_fwd(x_mid, g_mlp)
        gate = xn2 @ wg
        up = xn2 @ wu
        sg = _sigmoid(gate)
        act = gate * sg
        prod = act * up
        x = x_mid + prod @ wd
        if want_cache:
            layer_caches.append(
                dict(x_in=x_in, xn1=xn1, r1=r1, q=q, k=k, v=v, attn=attn, ctx_m=ctx_m,
                     x_mid=x_mid, xn2=xn2, r2=r2, gate=gate, up=up, sg=sg, act=act, prod=prod)
            )

    xf, rf = _rmsnorm_fwd(x, p["norm.final"])
    logits = xf @ p["lm_head"]
    if not want_cache:
        return logits
    return logits, dict(tokens=tokens, x_final=x, xf=xf, rf=rf, layers=layer_caches)


def loss_and_grads(
    model: Model, tokens: np.ndarray, targets: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy and gradients for every parameter."""
    cfg = model.cfg
    p = model.params
    B, T = tokens.shape
    nh, dh = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    n_tok = B * T

    logits, cache = forward(model, tokens, want_cache=True)
    loss_sum, dlogits = kernels.cross_entropy(
        np.ascontiguousarray(logits.reshape(n_tok, cfg.vocab)),
        np.ascontiguousarray(targets.reshape(n_tok)),
    )
    loss = loss_sum / n_tok
    dlogits = (dlogits / n_tok).reshape(B, T, cfg.vocab)

    grads: dict[str, np.ndarray] = {}
    xf = cache["xf"]
    grads["lm_head"] = xf.reshape(n_tok, cfg.hidden).T @ dlogits.reshape(n_tok, cfg.vocab)
    dxf = dlogits @ p["lm_head"].T
    dx, grads["norm.final"] = _rmsnorm_bwd(dxf, cache["x_final"], p["norm.final"], cache["rf"])

    for l in reversed(range(cfg.layers)):
        c = cache["layers"][l]
        wq, wk, wv, wo = (p[f"layers.{l}.att.{s}"] for s in ("q", "k", "v", "o"))
        wg, wu, wd = (p[f"layers.{l}.mlp.{s}"] for s in ("gate", "up", "down"))

        # MLP block: x = x_mid + (silu(gate) * up) @ wd
        dprod = dx @ wd.T
        grads[f"layers.{l}.mlp.down"] = (
            c["prod"].reshape(n_tok, cfg.intermediate).T @ dx.reshape(n_tok, cfg.hidden)
        )
        dact = dprod * c["up"]
        dup = dprod * c["act"]
        dgate = dact * (c["sg"] * (1.0 + c["gate"] * (1.0 - c["sg"])))
        xn2f = c["xn2"].reshape(n_tok, cfg.hidden)
        grads[f"layers.{l}.mlp.gate"] = xn2f.T @ dgate.reshape(n_tok, cfg.intermediate)
        grads[f"layers.{l}.mlp.up"] = xn2f.T @ dup.reshape(n_tok, cfg.intermediate)
        dxn2 = dgate @ wg.T + dup @ wu.T
        dnorm, grads[f"layers.{l}.norm.mlp"] = _rmsnorm_bwd(
            dxn2, c["x_mid"], p[f"layers.{l}.norm.mlp"], c["r2"]
        )
        dx = dx + dnorm

        # Attention block: x_mid = x_in + (softmax(qk^T) v) @ wo
        dctx_m = dx @ wo.T
        grads[f"layers.{l}.att.o"] = (
            c["ctx_m"].reshape(n_tok, cfg.hidden).T @ dx.reshape(n_tok, cfg.hidden)
        )
        dctx = dctx_m.reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
        dattn = np.matmul(dctx, c["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(c["attn"].transpose(0, 1, 3, 2), dctx)
        attn = c["attn"]
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dscores *= scale
        dq = np.matmul(dscores, c["k"])
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), c["q"])

        def _merge(a: np.ndarray) -> np.ndarray:
            return a.transpose(0, 2, 1, 3).reshape(n_tok, cfg.hidden)

        xn1f = c["xn1"].reshape(n_tok, cfg.hidden)
        dq_m, dk_m, dv_m = _merge(dq), _merge(dk), _merge(dv)
        grads[f"layers.{l}.att.q"] = xn1f.T @ dq_m
        grads[f"layers.{l}.att.k"] = xn1f.T @ dk_m
        grads[f"layers.{l}.att.v"] = xn1f.T @ dv_m
        dxn1 = (dq_m @ wq.T + dk_m @ wk.T + dv_m @ wv.T).reshape(B, T, cfg.hidden)
        dnorm, grads[f"layers.{l}.norm.att"] = _rmsnorm_bwd(
            dxn1, c["x_in"], p[f"layers.{l}.norm.att"], c["r1"]
        )
        dx = dx + dnorm

    dembed = np.zeros_like(p["embed.tokens"])
    np.add.at(dembed, tokens, dx)
    grads["embed.tokens"] = dembed
    return loss, grads
