"""Pre-normalization encoder blocks and the classification head.

Residual order follows the model equations literally (LN before each
sublayer, residual add after), which deviates from classic post-LN BERT on
purpose. The feed-forward slot of every block is a mixture-of-experts layer
that can also run as a single chosen expert during staged training.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .moe import MoELayer


class MultiHeadAttention:
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 init_scale: float = 0.02):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        def proj():
            return ag.Tensor(rng.normal(0.0, init_scale, (d_model, d_model)), requires_grad=True)
        self.wq, self.wk, self.wv, self.wo = proj(), proj(), proj(), proj()
        self.bq = ag.Tensor(np.zeros(d_model), requires_grad=True)
        self.bk = ag.Tensor(np.zeros(d_model), requires_grad=True)
        self.bv = ag.Tensor(np.zeros(d_model), requires_grad=True)
        self.bo = ag.Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, x: ag.Tensor, capture=None) -> ag.Tensor:
        shape = x.data.shape  # [..., L, d_model]
        lead = shape[:-2]
        L = shape[-2]
        H, dh = self.n_heads, self.d_head

        def heads(t: ag.Tensor) -> ag.Tensor:
            t = ag.reshape(t, lead + (L, H, dh))
            axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
            return ag.transpose(t, axes)  # [..., H, L, dh]

        q = heads(ag.add(ag.matmul(x, self.wq), self.bq))
        k = heads(ag.add(ag.matmul(x, self.wk), self.bk))
        v = heads(ag.add(ag.matmul(x, self.wv), self.bv))

        kt_axes = tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1)
        scores = ag.matmul(q, ag.transpose(k, kt_axes)) * (1.0 / np.sqrt(dh))
        probs = ag.softmax(scores, axis=-1)  # [..., H, L, L]
        if capture is not None:
            capture.attention.append(probs.data.copy())
        ctx = ag.matmul(probs, v)  # [..., H, L, dh]
        back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        ctx = ag.reshape(ag.transpose(ctx, back), lead + (L, H * dh))
        return ag.add(ag.matmul(ctx, self.wo), self.bo)

    def params(self) -> list[ag.Tensor]:
        return [self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo]


class EncoderBlock:
    def __init__(self, layer: int, d_model: int, d_ff: int, n_heads: int,
                 expert_tags: tuple[str, ...], eps: float,
                 rng: np.random.Generator, init_scale: float = 0.02):
        self.layer = layer
        self.eps = eps
        self.attn = MultiHeadAttention(d_model, n_heads, rng, init_scale)
        self.ln1_g = ag.Tensor(np.ones(d_model), requires_grad=True)
        self.ln1_b = ag.Tensor(np.zeros(d_model), requires_grad=True)
        self.ln2_g = ag.Tensor(np.ones(d_model), requires_grad=True)
        self.ln2_b = ag.Tensor(np.zeros(d_model), requires_grad=True)
        self.moe = MoELayer(d_model, d_ff, expert_tags, rng, init_scale)

    def forward(self, x: ag.Tensor, ffn_mode="moe", capture=None,
                dropout_fn=None) -> ag.Tensor:
        a = self.attn(ag.layer_norm(x, self.ln1_g, self.ln1_b, self.eps), capture)
        if dropout_fn is not None:
            a = dropout_fn(a)
        xa = ag.add(a, x)

        h = ag.layer_norm(xa, self.ln2_g, self.ln2_b, self.eps)
        if ffn_mode == "moe":
            f = self.moe.forward(h, self.layer, capture)
        else:
            kind, idx = ffn_mode
            if kind != "single":
                raise ValueError(f"unknown ffn mode {ffn_mode!r}")
            f = self.moe.experts[idx](h)
        if dropout_fn is not None:
            f = dropout_fn(f)
        return ag.add(f, xa)

    def params(self) -> list[ag.Tensor]:
        return (self.attn.params()
                + [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]
                + self.moe.params())


class ClassificationHead:
    """First-position pooling, tanh projection, linear output."""

    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator,
                 init_scale: float = 0.02):
        self.w_pool = ag.Tensor(rng.normal(0.0, init_scale, (d_model, d_model)),
                                requires_grad=True)
        self.b_pool = ag.Tensor(np.zeros(d_model), requires_grad=True)
        self.w_out = ag.Tensor(rng.normal(0.0, init_scale, (d_model, n_classes)),
                               requires_grad=True)
        self.b_out = ag.Tensor(np.zeros(n_classes), requires_grad=True)

    def __call__(self, hidden: ag.Tensor) -> ag.Tensor:
        if hidden.data.shape[-2] < 1:
            raise ValueError("cannot classify an empty sequence")
        batched = hidden.data.ndim == 3
        first = hidden[:, 0] if batched else hidden[0:1]
        pooled = ag.tanh(ag.add(ag.matmul(first, self.w_pool), self.b_pool))
        logits = ag.add(ag.matmul(pooled, self.w_out), self.b_out)
        return logits if batched else ag.reshape(logits, (logits.data.shape[-1],))

    def params(self) -> list[ag.Tensor]:
        return [self.w_pool, self.b_pool, self.w_out, self.b_out]
