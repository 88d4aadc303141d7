"""Full multimodal MoE encoder: embeddings, modality assembly, encoder
stack, and classification head, with named parameter groups for staged
training and checkpointing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .corpus import MultimodalSample, SynthVocab
from .encoder import ClassificationHead, EncoderBlock
from .errors import ConfigError, SequenceLengthError, ShapeError, VocabError
from .modality import Aligner, PseudoSpeechEncoder, PseudoVisionEncoder
from .moe import GateRecord
from .rng import substream

MODALITIES = ("text", "speech", "vision")


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 200
    max_total_len: int = 64
    n_experts: int = 0  # 0 means "one per configured modality"
    d_vision_feat: int = 16
    d_speech_feat: int = 16
    d_aligner_hidden: int = 32
    n_classes: int = 2
    layer_norm_eps: float = 1e-12
    dropout_rate: float = 0.1
    modalities: tuple[str, ...] = MODALITIES
    frames_per_token: int = 2
    init_scale: float = 0.02

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        bad = set(self.modalities) - set(MODALITIES)
        if bad or not self.modalities:
            raise ConfigError(f"modalities must be a nonempty subset of {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modality")
        if "text" not in self.modalities:
            raise ConfigError("the text modality is required")
        if self.n_experts == 0:
            self.n_experts = len(self.modalities)
        elif self.n_experts != len(self.modalities):
            raise ConfigError(
                f"n_experts {self.n_experts} != {len(self.modalities)} configured modalities")


@dataclass
class Capture:
    """Per-forward diagnostics: attention probabilities and routing gates."""

    attention: list[np.ndarray] = field(default_factory=list)
    gates: list[GateRecord] = field(default_factory=list)
    gate_tensors: list[ag.Tensor] = field(default_factory=list)


class MMBertModel:
    def __init__(self, cfg: ModelConfig, vocab: SynthVocab, seed: int):
        if cfg.vocab_size != vocab.size:
            raise ConfigError(
                f"config vocab_size {cfg.vocab_size} != vocabulary size {vocab.size}")
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed

        self.vision_enc = PseudoVisionEncoder.build(vocab, cfg.d_vision_feat, seed)
        self.speech_enc = PseudoSpeechEncoder.build(
            vocab, cfg.d_speech_feat, seed, cfg.frames_per_token)

        rng = substream(seed, "init")
        s = cfg.init_scale
        self.word_emb = ag.Tensor(
            rng.normal(0.0, s, (cfg.vocab_size, cfg.d_model)), requires_grad=True)
        self.pos_emb = ag.Tensor(
            rng.normal(0.0, s, (cfg.max_total_len, cfg.d_model)), requires_grad=True)
        self.blocks = [
            EncoderBlock(i, cfg.d_model, cfg.d_ff, cfg.n_heads,
                         cfg.modalities, cfg.layer_norm_eps, rng, s)
            for i in range(cfg.n_layers)
        ]
        self.head = ClassificationHead(cfg.d_model, cfg.n_classes, rng, s)
        self.aligners: dict[str, Aligner] = {}
        if "speech" in cfg.modalities:
            self.aligners["speech"] = Aligner(
                cfg.d_speech_feat, cfg.d_aligner_hidden, cfg.d_model, rng, s)
        if "vision" in cfg.modalities:
            self.aligners["vision"] = Aligner(
                cfg.d_vision_feat, cfg.d_aligner_hidden, cfg.d_model, rng, s)

        self._dropout_rng = substream(seed, "dropout")
        self._params = self._build_registry()

    # -- parameter registry ---------------------------------------------------

    def _build_registry(self) -> dict[str, ag.Tensor]:
        reg: dict[str, ag.Tensor] = {"embed.word": self.word_emb, "embed.pos": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            p = f"block{i}"
            a = blk.attn
            reg.update({f"{p}.attn.wq": a.wq, f"{p}.attn.bq": a.bq,
                        f"{p}.attn.wk": a.wk, f"{p}.attn.bk": a.bk,
                        f"{p}.attn.wv": a.wv, f"{p}.attn.bv": a.bv,
                        f"{p}.attn.wo": a.wo, f"{p}.attn.bo": a.bo,
                        f"{p}.ln1.g": blk.ln1_g, f"{p}.ln1.b": blk.ln1_b,
                        f"{p}.ln2.g": blk.ln2_g, f"{p}.ln2.b": blk.ln2_b})
            for expert in blk.moe.experts:
                q = f"{p}.expert.{expert.tag}"
                reg.update({f"{q}.w1": expert.w1, f"{q}.b1": expert.b1,
                            f"{q}.w2": expert.w2, f"{q}.b2": expert.b2})
            reg[f"{p}.router.w"] = blk.moe.router.w
            reg[f"{p}.router.b"] = blk.moe.router.b
        reg.update({"head.pool.w": self.head.w_pool, "head.pool.b": self.head.b_pool,
                    "head.out.w": self.head.w_out, "head.out.b": self.head.b_out})
        for tag, al in self.aligners.items():
            reg.update({f"aligner.{tag}.w1": al.w1, f"aligner.{tag}.b1": al.b1,
                        f"aligner.{tag}.w2": al.w2, f"aligner.{tag}.b2": al.b2})
        return reg

    def params(self) -> dict[str, ag.Tensor]:
        return self._params

    def select(self, *prefixes: str) -> dict[str, ag.Tensor]:
        return {n: t for n, t in self._params.items()
                if any(n.startswith(p) for p in prefixes)}

    def expert_index(self, tag: str) -> int:
        return self.cfg.modalities.index(tag)

    # -- embedding and forward -------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabError(f"token id out of range for vocab of {self.cfg.vocab_size}")

    def embed_text(self, token_ids) -> ag.Tensor:
        """Word embedding plus absolute position embedding for a single
        text-only sequence (positions start at 0)."""
        ids = np.asarray(token_ids, dtype=np.int64)
        self._check_ids(ids)
        word = ag.embedding(self.word_emb, ids)
        pos = ag.take(self.pos_emb, slice(0, ids.shape[-1]))
        return ag.add(word, pos)

    def _dropout(self, t: ag.Tensor) -> ag.Tensor:
        rate = self.cfg.dropout_rate
        mask = (self._dropout_rng.random(t.data.shape) >= rate) / (1.0 - rate)
        return ag.mul(t, ag.Tensor(mask.astype(np.float32)))

    def modality_blocks(self, samples: list[MultimodalSample],
                        active: tuple[str, ...]) -> list[ag.Tensor]:
        """Embedded per-modality blocks in [text; speech; vision] order."""
        ids = np.asarray([s.token_ids for s in samples], dtype=np.int64)
        self._check_ids(ids)
        blocks = []
        if "text" in active:
            blocks.append(ag.embedding(self.word_emb, ids))
        if "speech" in active:
            feats = np.stack([self.speech_enc.encode(s.token_ids) for s in samples])
            blocks.append(self.aligners["speech"](ag.Tensor(feats)))
        if "vision" in active:
            feats = np.stack([self.vision_enc.encode(s.token_ids) for s in samples])
            blocks.append(self.aligners["vision"](ag.Tensor(feats)))
        return blocks

    def forward_batch(self, samples: list[MultimodalSample], *, ffn_mode="moe",
                      active: tuple[str, ...] | None = None, train: bool = False,
                      capture: Capture | None = None) -> ag.Tensor:
        """Logits [batch, n_classes] for a length-bucketed batch."""
        if not samples:
            raise ValueError("empty batch")
        active = tuple(active) if active is not None else self.cfg.modalities
        unknown = set(active) - set(self.cfg.modalities)
        if unknown:
            raise ConfigError(f"modalities {sorted(unknown)} not configured")
        if len({len(s.token_ids) for s in samples}) != 1:
            raise ShapeError("all samples in a batch must share one text length")

        blocks = self.modality_blocks(samples, active)
        x = blocks[0] if len(blocks) == 1 else ag.concat(blocks, axis=1)
        length = x.data.shape[1]
        if length > self.cfg.max_total_len:
            raise SequenceLengthError(
                f"assembled length {length} exceeds max_total_len {self.cfg.max_total_len}")
        x = ag.add(x, ag.take(self.pos_emb, slice(0, length)))
        dropout_fn = self._dropout if train and self.cfg.dropout_rate > 0 else None
        if dropout_fn is not None:
            x = dropout_fn(x)
        for blk in self.blocks:
            x = blk.forward(x, ffn_mode=ffn_mode, capture=capture, dropout_fn=dropout_fn)
        return self.head(x)
