"""Pseudo speech/vision encoders and the trainable modality aligners.

The pretrained feature extractors are replaced by seeded lookup tables that
keep exactly the structure the detection task exploits: homophones (and
foreign-script transliterations) share phoneme frames; visually deformed
tokens stay within cosine 0.9 of their base glyph; foreign-script glyphs are
a fixed rotation of the base glyph plus a shared script direction, so script
switching is visually salient without breaking glyph identity. Tables are
immutable after construction; encoding is a pure lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .corpus import SynthVocab
from .errors import ConfigError, SequenceLengthError, VocabError
from .rng import substream

SCRIPT_DIRECTION_WEIGHT = 1.0  # relative strength of the shared foreign-script component


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_unit(rng: np.random.Generator, d: int) -> np.ndarray:
    return _unit(rng.standard_normal(d))


@dataclass
class PseudoVisionEncoder:
    """Glyph feature table, one vector per token id."""

    table: np.ndarray  # [vocab, d_vision_feat] float32, unit rows
    similarity_graph: dict[int, list[int]]

    @property
    def d_feat(self) -> int:
        return self.table.shape[1]

    @classmethod
    def build(cls, vocab: SynthVocab, d_feat: int, seed: int) -> "PseudoVisionEncoder":
        rng = substream(seed, "modality/vision")
        script_dir = _random_unit(rng, d_feat)
        q, _ = np.linalg.qr(rng.standard_normal((d_feat, d_feat)))

        table = np.zeros((vocab.size, d_feat), dtype=np.float64)
        natives = [t for t in vocab.tokens if t.script == "native" and t.glyph_anchor == t.token_id]
        deforms = [t for t in vocab.tokens if t.script == "native" and t.glyph_anchor != t.token_id]
        foreigns = [t for t in vocab.tokens if t.script == "foreign"]

        for tok in natives:
            table[tok.token_id] = _random_unit(rng, d_feat)

        graph: dict[int, list[int]] = {}
        for tok in deforms:
            base = table[tok.glyph_anchor]
            cos = rng.uniform(0.91, 0.97)
            perp = rng.standard_normal(d_feat)
            perp -= (perp @ base) * base
            while np.linalg.norm(perp) < 1e-6:
                perp = rng.standard_normal(d_feat)
                perp -= (perp @ base) * base
            table[tok.token_id] = cos * base + np.sqrt(1.0 - cos * cos) * _unit(perp)
            graph.setdefault(tok.glyph_anchor, []).append(tok.token_id)
            graph.setdefault(tok.token_id, []).append(tok.glyph_anchor)

        for tok in foreigns:
            v = q @ table[tok.glyph_anchor] + SCRIPT_DIRECTION_WEIGHT * script_dir
            table[tok.token_id] = _unit(v)

        return cls(table=table.astype(np.float32), similarity_graph=graph)

    def encode(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise VocabError(f"token id out of range for vocab of {self.table.shape[0]}")
        return self.table[ids]


@dataclass
class PseudoSpeechEncoder:
    """Phoneme frame table; every token expands to its phoneme's frame block."""

    phoneme_table: np.ndarray  # [n_phonemes, frames_per_token, d_speech_feat] float32
    token_phonemes: np.ndarray  # [vocab] int64
    frames_per_token: int

    @property
    def d_feat(self) -> int:
        return self.phoneme_table.shape[2]

    @classmethod
    def build(cls, vocab: SynthVocab, d_feat: int, seed: int,
              frames_per_token: int = 2) -> "PseudoSpeechEncoder":
        rng = substream(seed, "modality/speech")
        n_phonemes = vocab.n_phonemes
        frames = rng.standard_normal((n_phonemes, frames_per_token, d_feat))
        frames /= np.linalg.norm(frames, axis=-1, keepdims=True)
        phonemes = np.array([t.phoneme_id for t in vocab.tokens], dtype=np.int64)
        return cls(phoneme_table=frames.astype(np.float32),
                   token_phonemes=phonemes,
                   frames_per_token=frames_per_token)

    def encode(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.token_phonemes.shape[0]):
            raise VocabError(f"token id out of range for vocab of {self.token_phonemes.shape[0]}")
        blocks = self.phoneme_table[self.token_phonemes[ids]]
        return blocks.reshape(-1, self.d_feat)


class Aligner:
    """Two-layer MLP projecting modality features into the embedding space."""

    def __init__(self, d_feat: int, d_hidden: int, d_model: int,
                 rng: np.random.Generator, init_scale: float = 0.02):
        self.d_feat = d_feat
        self.w1 = ag.Tensor(rng.normal(0.0, init_scale, (d_feat, d_hidden)), requires_grad=True)
        self.b1 = ag.Tensor(np.zeros(d_hidden), requires_grad=True)
        self.w2 = ag.Tensor(rng.normal(0.0, init_scale, (d_hidden, d_model)), requires_grad=True)
        self.b2 = ag.Tensor(np.zeros(d_model), requires_grad=True)

    def __call__(self, features) -> ag.Tensor:
        x = features if isinstance(features, ag.Tensor) else ag.Tensor(features)
        if x.data.ndim not in (2, 3) or x.data.shape[-1] != self.d_feat:
            raise ConfigError(
                f"aligner expects [*, {self.d_feat}] features, got {x.data.shape}")
        h = ag.gelu(ag.add(ag.matmul(x, self.w1), self.b1))
        return ag.add(ag.matmul(h, self.w2), self.b2)

    def params(self) -> list[ag.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def assemble_input(parts: list[ag.Tensor], max_total_len: int) -> ag.Tensor:
    """Concatenate embedded modality blocks in [text; speech; vision] order."""
    total = sum(p.data.shape[0] for p in parts)
    if total > max_total_len:
        raise SequenceLengthError(
            f"assembled length {total} exceeds max_total_len {max_total_len}")
    parts = [p for p in parts if p.data.shape[0] > 0]
    if len(parts) == 1:
        return parts[0]
    return ag.concat(parts, axis=0)
