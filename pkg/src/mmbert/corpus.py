"""Synthetic labeled corpus with cloaking perturbations.

The generated "language" encodes the structure that multimodal detection
exploits: every token carries a phoneme id (shared by homophones and by
foreign-script transliterations) and a glyph anchor (shared by visually
similar deformations). Toxicity is defined purely textually, by a lexicon of
token n-grams, so a lexicon rescan is an independent label oracle.

Cloaked variants of toxic samples replace the lexicon tokens with non-toxic
twins. Twin tokens also occur innocently (label 0) at a low rate, so their
token-level label statistics are near chance while their phoneme/glyph
classes stay dominated by the frequent undisguised toxic forms. Decoy
variants of negatives swap ordinary filler tokens for filler twins, so the
mere presence of a substituted token is not a label signal.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, PerturbSkip
from .rng import substream

PERTURB_KINDS = ("homophone", "codemix", "deform")
ALL_TAGS = ("none", "homophone", "codemix", "deform", "abbrev")


@dataclass(frozen=True)
class TokenInfo:
    token_id: int
    phoneme_id: int
    glyph_anchor: int
    script: str  # "native" | "foreign"
    toxic: bool


@dataclass
class SynthVocab:
    """Token inventory plus the relations the perturbations rely on."""

    size: int
    tokens: list[TokenInfo]
    toxic_unigrams: list[int]
    toxic_bigrams: list[tuple[int, int]]
    homophone_twins: dict[int, list[int]]
    codemix_twins: dict[int, list[int]]
    deform_twins: dict[int, list[int]]
    abbreviations: dict[tuple[int, int], int]
    common_pool: list[int]
    rare_pool: list[int]

    @property
    def n_phonemes(self) -> int:
        return 1 + max(t.phoneme_id for t in self.tokens)

    def phoneme_of(self, token_id: int) -> int:
        return self.tokens[token_id].phoneme_id

    def glyph_anchor_of(self, token_id: int) -> int:
        return self.tokens[token_id].glyph_anchor

    def lexicon(self) -> list[tuple[int, ...]]:
        return [(t,) for t in self.toxic_unigrams] + [tuple(b) for b in self.toxic_bigrams]

    def toxic_spans(self, token_ids) -> list[tuple[int, int]]:
        """All (start, end) occurrences of lexicon n-grams, longest first."""
        ids = list(token_ids)
        spans = []
        unigrams = set(self.toxic_unigrams)
        bigrams = set(self.toxic_bigrams)
        for i in range(len(ids) - 1):
            if (ids[i], ids[i + 1]) in bigrams:
                spans.append((i, i + 2))
        for i, t in enumerate(ids):
            if t in unigrams:
                spans.append((i, i + 1))
        return sorted(spans)

    def scan_label(self, token_ids) -> int:
        """Independent label oracle: 1 iff any toxic n-gram occurs textually."""
        return 1 if self.toxic_spans(token_ids) else 0


@dataclass
class MultimodalSample:
    sample_id: int
    token_ids: list[int]
    label: int
    tag: str = "none"
    base_id: int | None = None

    def __post_init__(self):
        if self.base_id is None:
            self.base_id = self.sample_id

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-9 or any(r < 0 for r in self.ratios):
            raise ValueError(f"split ratios must be nonnegative and sum to 1, got {self.ratios}")


@dataclass
class CorpusConfig:
    vocab_size: int = 200
    n_toxic_unigrams: int = 12
    n_toxic_bigrams: int = 6
    homophones_per_token: int = 2
    codemix_per_token: int = 1
    deforms_per_token: int = 1
    n_perturbable_fillers: int = 12
    n_samples: int = 1000
    class_balance: float = 0.5
    min_len: int = 6
    max_len: int = 16
    perturb_fraction: float = 0.5
    style_density: float = 0.8
    rare_token_mass: float = 0.03
    enable_abbreviation: bool = False

    def perturb_kinds(self) -> tuple[str, ...]:
        return PERTURB_KINDS + (("abbrev",) if self.enable_abbreviation else ())


# ---------------------------------------------------------------------------
# vocabulary construction


def build_vocab(cfg: CorpusConfig, seed: int) -> SynthVocab:
    if cfg.n_toxic_unigrams + cfg.n_toxic_bigrams == 0:
        raise GenerationError("toxic lexicon is empty")
    rng = substream(seed, "corpus/vocab")

    twins_per = cfg.homophones_per_token + cfg.codemix_per_token + cfg.deforms_per_token
    n_members = 2 * cfg.n_toxic_bigrams
    n_sensitive = cfg.n_toxic_unigrams + n_members
    n_abbrev = cfg.n_toxic_bigrams if cfg.enable_abbreviation else 0
    needed = (n_sensitive * (1 + twins_per)
              + cfg.n_perturbable_fillers * (1 + twins_per)
              + n_abbrev)
    n_plain = cfg.vocab_size - needed
    if n_plain < 4:
        raise GenerationError(
            f"vocab_size {cfg.vocab_size} cannot fit {needed} structured tokens plus fillers")

    ids = list(rng.permutation(cfg.vocab_size))
    cursor = iter(ids)

    def grab(k: int) -> list[int]:
        return [int(next(cursor)) for _ in range(k)]

    unigrams = grab(cfg.n_toxic_unigrams)
    members = grab(n_members)
    bigrams = [(members[2 * i], members[2 * i + 1]) for i in range(cfg.n_toxic_bigrams)]
    perturbable = grab(cfg.n_perturbable_fillers)
    plain = grab(n_plain)

    phoneme_of: dict[int, int] = {}
    anchor_of: dict[int, int] = {}
    script_of: dict[int, str] = {}
    homophone_twins: dict[int, list[int]] = {}
    codemix_twins: dict[int, list[int]] = {}
    deform_twins: dict[int, list[int]] = {}

    next_phoneme = 0

    def fresh_phoneme() -> int:
        nonlocal next_phoneme
        next_phoneme += 1
        return next_phoneme - 1

    def register(tok: int, phoneme: int, anchor: int, script: str = "native"):
        phoneme_of[tok] = phoneme
        anchor_of[tok] = anchor
        script_of[tok] = script

    for tok in unigrams + members + perturbable + plain:
        register(tok, fresh_phoneme(), tok)

    for base in unigrams + members + perturbable:
        p = phoneme_of[base]
        homs = grab(cfg.homophones_per_token)
        for h in homs:
            register(h, p, h)
        mixes = grab(cfg.codemix_per_token)
        for m in mixes:
            # transliteration keeps the sound and, through the foreign-script
            # glyph transform, stays visually recognizable as the same word
            register(m, p, base, script="foreign")
        defs = grab(cfg.deforms_per_token)
        for d in defs:
            register(d, fresh_phoneme(), base)
        homophone_twins[base] = homs
        codemix_twins[base] = mixes
        deform_twins[base] = defs

    abbreviations: dict[tuple[int, int], int] = {}
    if cfg.enable_abbreviation:
        for bg in bigrams:
            tok = grab(1)[0]
            register(tok, fresh_phoneme(), tok)
            abbreviations[bg] = tok

    toxic = set(unigrams)
    tokens = [TokenInfo(t, phoneme_of[t], anchor_of[t], script_of[t], t in toxic)
              for t in range(cfg.vocab_size)]

    rare = [t for group in (homophone_twins, codemix_twins, deform_twins)
            for twins in group.values() for t in twins]
    # Bigram members never occur as fillers: a pair's co-presence is then
    # always the sample's own toxic span, so the pair cue stays learnable as
    # a bag-of-words feature at this scale. Their twins still circulate
    # innocently through the rare pool, which is what keeps the cloaked
    # forms ambiguous for a text-only model.
    return SynthVocab(
        size=cfg.vocab_size,
        tokens=tokens,
        toxic_unigrams=unigrams,
        toxic_bigrams=bigrams,
        homophone_twins=homophone_twins,
        codemix_twins=codemix_twins,
        deform_twins=deform_twins,
        abbreviations=abbreviations,
        common_pool=sorted(perturbable + plain),
        rare_pool=sorted(rare),
    )


# ---------------------------------------------------------------------------
# sample generation


def _draw_fillers(vocab: SynthVocab, cfg: CorpusConfig, rng: np.random.Generator, n: int) -> list[int]:
    out = []
    for _ in range(n):
        pool = vocab.rare_pool if rng.random() < cfg.rare_token_mass else vocab.common_pool
        out.append(int(pool[rng.integers(len(pool))]))
    return out


def _clear_accidental_spans(tokens: list[int], keep: tuple[int, int] | None,
                            vocab: SynthVocab, cfg: CorpusConfig,
                            rng: np.random.Generator) -> list[int]:
    for _ in range(100):
        bad = [s for s in vocab.toxic_spans(tokens) if s != keep]
        if not bad:
            return tokens
        for start, end in bad:
            for i in range(start, end):
                if keep is None or not (keep[0] <= i < keep[1]):
                    tokens[i] = _draw_fillers(vocab, cfg, rng, 1)[0]
    raise GenerationError("could not avoid accidental toxic n-grams after 100 redraws")


def generate_base_corpus(cfg: CorpusConfig, seed: int, vocab: SynthVocab | None = None) -> list[MultimodalSample]:
    """Unperturbed labeled samples; exact class counts by construction."""
    if not 0 < cfg.class_balance < 1:
        raise GenerationError(f"class balance must be in (0,1), got {cfg.class_balance}")
    vocab = vocab or build_vocab(cfg, seed)
    rng = substream(seed, "corpus/base")
    lexicon = vocab.lexicon()

    n_pos = round(cfg.n_samples * cfg.class_balance)
    labels = [1] * n_pos + [0] * (cfg.n_samples - n_pos)

    samples = []
    for sid, label in enumerate(labels):
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        tokens = _draw_fillers(vocab, cfg, rng, n)
        keep = None
        if label == 1:
            gram = lexicon[rng.integers(len(lexicon))]
            start = int(rng.integers(0, n - len(gram) + 1))
            tokens[start:start + len(gram)] = list(gram)
            keep = (start, start + len(gram))
        tokens = _clear_accidental_spans(tokens, keep, vocab, cfg, rng)
        samples.append(MultimodalSample(sid, tokens, label))
    return samples


def _twin_map(vocab: SynthVocab, kind: str) -> dict[int, list[int]]:
    return {"homophone": vocab.homophone_twins,
            "codemix": vocab.codemix_twins,
            "deform": vocab.deform_twins}[kind]


def _style_fillers(tokens: list[int], skip: set[int], kind: str,
                   vocab: SynthVocab, cfg: CorpusConfig,
                   rng: np.random.Generator) -> list[int]:
    """Swap non-toxic tokens for same-kind twins at ``style_density``.

    Cloaked posts are rarely single-token edits; the writer styles the
    whole message in one register. Applying the same density to decoy
    negatives keeps twin usage label-neutral.
    """
    twins = _twin_map(vocab, kind)
    swapped = []
    for i, tok in enumerate(tokens):
        if i in skip or tok not in twins:
            continue
        if rng.random() < cfg.style_density:
            swapped.append(i)
    for i in swapped:
        options = twins[tokens[i]]
        tokens[i] = int(options[rng.integers(len(options))])
    return swapped


def perturb(sample: MultimodalSample, kind: str, vocab: SynthVocab,
            rng: np.random.Generator, cfg: CorpusConfig | None = None) -> MultimodalSample:
    """Cloak the toxic n-grams of a positive sample.

    Every token inside a toxic span is replaced by one of its non-toxic
    twins (or, for ``abbrev``, the whole bigram collapses to its
    abbreviation token), and surrounding perturbable fillers are styled
    in the same register when a config is given. Raises ``PerturbSkip``
    when the sample has no perturbable toxic token, which includes every
    negative sample.
    """
    if kind not in ALL_TAGS[1:]:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    spans = vocab.toxic_spans(sample.token_ids)
    if not spans:
        raise PerturbSkip(f"sample {sample.sample_id} has no toxic span to perturb")

    tokens = list(sample.token_ids)
    span_positions = sorted({i for s in spans for i in range(s[0], s[1])})
    if kind == "abbrev":
        bigram_spans = [s for s in spans if s[1] - s[0] == 2]
        if not bigram_spans:
            raise PerturbSkip("abbreviation requires a toxic bigram")
        for start, end in reversed(bigram_spans):
            tokens[start:end] = [vocab.abbreviations[(tokens[start], tokens[start + 1])]]
    else:
        twins = _twin_map(vocab, kind)
        for i in span_positions:
            options = twins.get(tokens[i])
            if not options:
                raise PerturbSkip(f"token {tokens[i]} has no {kind} twin")
            tokens[i] = int(options[rng.integers(len(options))])
        if cfg is not None:
            _style_fillers(tokens, set(span_positions), kind, vocab, cfg, rng)

    if vocab.scan_label(tokens) != 0 and kind != "abbrev":
        raise GenerationError("perturbation failed to remove all textual toxic n-grams")
    return MultimodalSample(-1, tokens, sample.label, tag=kind, base_id=sample.base_id)


def _decoy_perturb(sample: MultimodalSample, kind: str, vocab: SynthVocab,
                   cfg: CorpusConfig, rng: np.random.Generator) -> MultimodalSample | None:
    """Tag-matched styling of a negative: fillers swap to twins, label fixed."""
    tokens = list(sample.token_ids)
    swapped = _style_fillers(tokens, set(), kind, vocab, cfg, rng)
    if not swapped:
        twins = _twin_map(vocab, kind)
        eligible = sorted({i for i, t in enumerate(tokens) if t in twins})
        if not eligible:
            return None
        i = eligible[rng.integers(len(eligible))]
        options = twins[tokens[i]]
        tokens[i] = int(options[rng.integers(len(options))])
    if vocab.scan_label(tokens) != sample.label:
        return None
    return MultimodalSample(-1, tokens, sample.label, tag=kind, base_id=sample.base_id)


def build_corpus(cfg: CorpusConfig, seed: int,
                 vocab: SynthVocab | None = None) -> list[MultimodalSample]:
    """Base corpus plus cloaked variants of positives and decoy variants of
    negatives, each tagged with its perturbation kind."""
    vocab = vocab or build_vocab(cfg, seed)
    base = generate_base_corpus(cfg, seed, vocab)
    rng = substream(seed, "corpus/perturb")
    kinds = cfg.perturb_kinds()

    out = list(base)
    next_id = len(base)
    for sample in base:
        if rng.random() >= cfg.perturb_fraction:
            continue
        kind = kinds[rng.integers(len(kinds))]
        if sample.label == 1:
            try:
                variant = perturb(sample, kind, vocab, rng, cfg)
            except PerturbSkip:
                continue
        else:
            if kind == "abbrev":  # no benign abbreviations exist
                kind = PERTURB_KINDS[rng.integers(len(PERTURB_KINDS))]
            variant = _decoy_perturb(sample, kind, vocab, cfg, rng)
            if variant is None:
                continue
        variant.sample_id = next_id
        next_id += 1
        out.append(variant)
    return out


# ---------------------------------------------------------------------------
# splitting and serialization


def split(corpus: list[MultimodalSample], spec: SplitSpec):
    """Seeded shuffle into train/val/test keeping every base group together."""
    if len(corpus) < 10:
        raise ValueError(f"corpus of {len(corpus)} samples is too small to split")
    groups: dict[int, list[MultimodalSample]] = {}
    for s in corpus:
        groups.setdefault(s.base_id, []).append(s)
    keys = sorted(groups)
    rng = substream(spec.seed, "corpus/split")
    rng.shuffle(keys)

    total = len(corpus)
    train_target = round(spec.ratios[0] * total)
    val_target = round((spec.ratios[0] + spec.ratios[1]) * total)
    buckets: tuple[list, list, list] = ([], [], [])
    count = 0
    for key in keys:
        members = groups[key]
        if count < train_target:
            buckets[0].extend(members)
        elif count < val_target:
            buckets[1].extend(members)
        else:
            buckets[2].extend(members)
        count += len(members)
    return buckets


def save_corpus(path, corpus: list[MultimodalSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus:
            ids = " ".join(str(t) for t in s.token_ids)
            fh.write(f"{s.label}\t{s.tag}\t{s.base_id}\t{ids}\n")


def load_corpus(path) -> list[MultimodalSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            label, tag, base_id, ids = line.split("\t")
            samples.append(MultimodalSample(
                i, [int(t) for t in ids.split()], int(label), tag=tag, base_id=int(base_id)))
    return samples


def slice_by_tag(corpus: list[MultimodalSample], tag: str) -> list[MultimodalSample]:
    """``all`` keeps everything, ``perturbed`` keeps every non-``none`` tag,
    and anything else filters to that single perturbation tag."""
    if tag == "all":
        return list(corpus)
    if tag == "perturbed":
        return [s for s in corpus if s.tag != "none"]
    if tag not in ALL_TAGS:
        raise ValueError(f"unknown slice {tag!r}")
    return [s for s in corpus if s.tag == tag]


def corpus_config_to_dict(cfg: CorpusConfig) -> dict:
    return dataclasses.asdict(cfg)
