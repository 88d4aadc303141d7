"""Mixture-of-experts layer: modality-named experts, softmax router,
dense weighted combination, and the load-balancing auxiliary loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError


class Expert:
    """Position-wise feed-forward network, one per modality."""

    def __init__(self, d_model: int, d_ff: int, tag: str,
                 rng: np.random.Generator, init_scale: float = 0.02):
        self.tag = tag
        self.w1 = ag.Tensor(rng.normal(0.0, init_scale, (d_model, d_ff)), requires_grad=True)
        self.b1 = ag.Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2 = ag.Tensor(rng.normal(0.0, init_scale, (d_ff, d_model)), requires_grad=True)
        self.b2 = ag.Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, x: ag.Tensor) -> ag.Tensor:
        h = ag.gelu(ag.add(ag.matmul(x, self.w1), self.b1))
        return ag.add(ag.matmul(h, self.w2), self.b2)

    def params(self) -> list[ag.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class Router:
    """Linear map from hidden state to one logit per expert.

    Zero init gives exactly uniform gates on the first step, which is the
    neutral starting point for joint training; pass ``init="normal"`` when a
    tie-free random initialization is needed.
    """

    def __init__(self, d_model: int, n_experts: int,
                 rng: np.random.Generator | None = None, init: str = "zero",
                 init_scale: float = 0.02):
        if init == "zero":
            w = np.zeros((d_model, n_experts))
        elif init == "normal":
            w = rng.normal(0.0, init_scale, (d_model, n_experts))
        else:
            raise ConfigError(f"unknown router init {init!r}")
        self.w = ag.Tensor(w, requires_grad=True)
        self.b = ag.Tensor(np.zeros(n_experts), requires_grad=True)

    @property
    def n_experts(self) -> int:
        return self.w.data.shape[1]

    def logits(self, x: ag.Tensor) -> ag.Tensor:
        return ag.add(ag.matmul(x, self.w), self.b)

    def params(self) -> list[ag.Tensor]:
        return [self.w, self.b]


@dataclass
class GateRecord:
    """Per-token routing snapshot of one layer (probabilities detached)."""

    layer: int
    gates: np.ndarray  # [n_tokens, n_experts]
    argmax: np.ndarray  # [n_tokens]


def route(x: ag.Tensor, router: Router, layer: int = 0) -> tuple[ag.Tensor, GateRecord]:
    """Softmax gates per token position, plus a detached record."""
    gates = ag.softmax(router.logits(x), axis=-1)
    flat = gates.data.reshape(-1, router.n_experts)
    record = GateRecord(layer=layer, gates=flat.copy(), argmax=flat.argmax(axis=1))
    return gates, record


def moe_forward(experts: list[Expert], x: ag.Tensor, gates: ag.Tensor) -> ag.Tensor:
    """Dense combination: output[t] = sum_i gates[t, i] * expert_i(x)[t]."""
    n = len(experts)
    if gates.data.shape[-1] != n:
        raise ConfigError(
            f"gate width {gates.data.shape[-1]} does not match {n} experts")
    token_shape = x.data.shape[:-1]
    d_model = x.data.shape[-1]
    outs = [ag.reshape(e(x), token_shape + (1, d_model)) for e in experts]
    stacked = ag.concat(outs, axis=len(token_shape))  # [..., n_experts, d_model]
    g = ag.reshape(gates, token_shape + (1, n))
    mixed = ag.matmul(g, stacked)  # [..., 1, d_model]
    return ag.reshape(mixed, token_shape + (d_model,))


class MoELayer:
    """One encoder layer's feed-forward slot: experts plus router."""

    def __init__(self, d_model: int, d_ff: int, tags: tuple[str, ...],
                 rng: np.random.Generator, init_scale: float = 0.02):
        self.experts = [Expert(d_model, d_ff, tag, rng, init_scale) for tag in tags]
        self.router = Router(d_model, len(tags))

    def forward(self, x: ag.Tensor, layer: int = 0, capture=None) -> ag.Tensor:
        gates, record = route(x, self.router, layer)
        if capture is not None:
            capture.gates.append(record)
            capture.gate_tensors.append(gates)
        return moe_forward(self.experts, x, gates)

    def params(self) -> list[ag.Tensor]:
        out = []
        for e in self.experts:
            out.extend(e.params())
        out.extend(self.router.params())
        return out


def aux_loss(gate_tensors: list[ag.Tensor],
             p_override: list[np.ndarray] | None = None) -> ag.Tensor:
    """Load-balancing loss, mean over layers of N * sum_i p_i * f_i.

    p_i is the fraction of token positions whose argmax gate is expert i
    (a constant; ties break to the lowest index) and f_i is the mean gate
    probability of expert i (differentiable). Both are computed over every
    token of every sequence in the batch. ``p_override`` substitutes fixed
    per-layer p vectors; finite-difference checks use it to probe the loss
    at constant p, which is the function the backward pass differentiates.
    """
    if not gate_tensors:
        raise ValueError("aux_loss needs at least one layer's gates")
    total = None
    for j, gates in enumerate(gate_tensors):
        n_experts = gates.data.shape[-1]
        flat = ag.reshape(gates, (-1, n_experts))
        n_tokens = flat.data.shape[0]
        if n_tokens == 0:
            raise ValueError("aux_loss on an empty batch")
        if p_override is not None:
            p = np.asarray(p_override[j], dtype=np.float32)
        else:
            argmax = flat.data.argmax(axis=1)
            p = np.bincount(argmax, minlength=n_experts).astype(np.float32) / n_tokens
        f = ag.tmean(flat, axis=0)
        term = ag.tsum(ag.mul(f, ag.Tensor(p))) * float(n_experts)
        total = term if total is None else ag.add(total, term)
    return total / len(gate_tensors)


def total_loss(ce: ag.Tensor, aux: ag.Tensor | None, alpha: float) -> ag.Tensor:
    """Classification loss plus alpha-weighted balancing term."""
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    if aux is None or alpha == 0:
        return ce
    return ag.add(ce, aux * alpha)
