"""Finite-difference verification of the full training loss.

Builds a deliberately tiny trimodal model, assembles a two-sample batch,
and compares analytic gradients of cross-entropy plus the weighted
load-balancing term against central differences for every parameter
group. The argmax fractions inside the balancing term are locally
constant, so the comparison probes exactly the function the backward
pass differentiates (``p_override`` pins them during the sweep).
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .corpus import CorpusConfig, build_corpus, build_vocab
from .model import Capture, MMBertModel, ModelConfig
from .moe import aux_loss, total_loss
from .rng import substream

TOY_MODEL = dict(d_model=8, n_layers=2, n_heads=2, d_ff=8,
                 d_vision_feat=6, d_speech_feat=6, d_aligner_hidden=6,
                 dropout_rate=0.0)


def toy_setup(seed: int = 0, batch: int = 2):
    """Small trimodal model plus a length-matched sample batch."""
    ccfg = CorpusConfig(n_samples=24, min_len=4, max_len=5)
    vocab = build_vocab(ccfg, seed)
    corpus = build_corpus(ccfg, seed, vocab)
    by_len: dict[int, list] = {}
    for s in corpus:
        by_len.setdefault(len(s.token_ids), []).append(s)
    samples = max(by_len.values(), key=len)[:batch]
    mcfg = ModelConfig(vocab_size=vocab.size, **TOY_MODEL)
    model = MMBertModel(mcfg, vocab, seed=seed)
    return model, samples


def stage3_loss_gradcheck(seed: int = 0, *, alpha: float = 1e-2,
                          step: float = 3e-4,
                          max_coords_per_param: int | None = 6) -> float:
    """Max relative gradient error of the joint-training loss."""
    model, samples = toy_setup(seed)
    labels = np.array([s.label for s in samples])

    # Pin the argmax fractions at their unperturbed values; the step
    # size could otherwise flip an argmax and make the numeric slope
    # probe a different (discontinuous) function.
    cap0 = Capture()
    model.forward_batch(samples, ffn_mode="moe", capture=cap0)
    p_fixed = [
        np.bincount(rec.argmax, minlength=rec.gates.shape[1]) / rec.argmax.size
        for rec in cap0.gates
    ]

    def loss_fn() -> ag.Tensor:
        capture = Capture()
        logits = model.forward_batch(samples, ffn_mode="moe", capture=capture)
        ce = ag.cross_entropy(logits, labels)
        balance = aux_loss(capture.gate_tensors, p_override=p_fixed)
        return total_loss(ce, balance, alpha)

    params = list(model.params().values())
    rng = substream(seed, "gradcheck/coords")
    return ag.finite_diff_check(loss_fn, params, step=step,
                                max_coords_per_param=max_coords_per_param,
                                rng=rng)
