"""Progressive three-stage training with AdamW, per-group learning rates,
freeze discipline, linear decay, and early stopping.

Stage 0 (optional, on by default) trains the text backbone alone on
unperturbed data, standing in for the pretrained text encoder the full-scale
system starts from. Stage 1 fits the modality aligners by regressing aligned
speech/vision embeddings onto the unperturbed base text word embeddings.
Stage 2 runs one single-modality pass per modality through that modality's
future expert and the shared head. Stage 3 trains everything jointly with
the routed mixture and the load-balancing auxiliary loss.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .corpus import MultimodalSample
from .errors import ConfigError, StateError
from .model import Capture, MMBertModel
from .moe import aux_loss, total_loss
from .rng import substream


@dataclass
class TrainConfig:
    batch_size: int = 32
    stage0: bool = True
    stage0_epochs: int = 10
    stage0_lr: float = 5e-4
    stage1_epochs: int = 50
    stage1_lr: float = 1e-3
    stage2_epochs: int = 50
    stage2_lr_aligners: float = 1e-3
    stage2_lr_text: float = 5e-6
    stage2_lr_other: float = 5e-5
    stage3_epochs: int = 50
    stage3_lr: float = 5e-4
    alpha: float = 1e-2
    patience: int = 5
    clip_norm: float | None = 1.0
    seed: int = 0


@dataclass
class LogRecord:
    epoch: int
    stage: str
    split: str
    loss: float
    acc: float
    aux: float
    lr: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    def add(self, **kw) -> None:
        self.records.append(LogRecord(**kw))

    def stage_records(self, stage: str, split: str | None = None) -> list[LogRecord]:
        return [r for r in self.records
                if r.stage == stage and (split is None or r.split == split)]

    def final(self, stage: str, split: str) -> LogRecord:
        return self.stage_records(stage, split)[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,stage,split,loss,acc,aux,lr\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.stage},{r.split},{r.loss:.6f},"
                         f"{r.acc:.6f},{r.aux:.6f},{r.lr:.8f}\n")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class ParamGroup:
    name: str
    params: dict[str, ag.Tensor]
    lr: float


class AdamW:
    """Decoupled-weight-decay Adam with per-group learning rates."""

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        for g in groups:
            if g.lr < 0:
                raise ConfigError(f"negative learning rate {g.lr} in group {g.name}")
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {}
        self._v = {}
        for g in groups:
            for name, p in g.params.items():
                self._m[name] = np.zeros_like(p.data, dtype=np.float32)
                self._v[name] = np.zeros_like(p.data, dtype=np.float32)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g.params.values():
                p.grad = None

    def step(self, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for g in self.groups:
            lr = g.lr * lr_scale
            for name, p in g.params.items():
                grad = p.grad
                if grad is None:
                    continue
                m = self._m[name]
                v = self._v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * np.square(grad)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if self.weight_decay:
                    update = update + self.weight_decay * p.data
                p.data -= (lr * update).astype(p.data.dtype)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    grads = [p.grad for p in params if p.grad is not None]
    for g in grads:
        sq += float(np.sum(np.square(g, dtype=np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# utilities


def bucket_batches(samples: list[MultimodalSample], batch_size: int,
                   rng: np.random.Generator | None = None) -> list[list[MultimodalSample]]:
    """Batches of equal text length; shuffled within and across when rng given."""
    groups: dict[int, list[MultimodalSample]] = {}
    for s in samples:
        groups.setdefault(len(s.token_ids), []).append(s)
    batches = []
    for n in sorted(groups):
        members = groups[n]
        if rng is not None:
            rng.shuffle(members)
        for i in range(0, len(members), batch_size):
            batches.append(members[i:i + batch_size])
    if rng is not None:
        rng.shuffle(batches)
    return batches


def checksum_params(params: dict[str, ag.Tensor]) -> dict[str, bytes]:
    return {n: hashlib.sha256(p.data.tobytes()).digest() for n, p in params.items()}


class _Freezer:
    """Marks every parameter outside the trainable set as non-differentiable
    for the duration of a stage, and verifies bitwise constancy afterwards."""

    def __init__(self, model: MMBertModel, trainable: dict[str, ag.Tensor]):
        self.frozen = {n: p for n, p in model.params().items() if n not in trainable}
        self.trainable = trainable

    def __enter__(self):
        for p in self.frozen.values():
            p.requires_grad = False
            p.grad = None
        self._sums = checksum_params(self.frozen)
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for n, p in self.frozen.items():
                    if p.grad is not None:
                        raise StateError(f"frozen parameter {n} received a gradient")
                after = checksum_params(self.frozen)
                changed = [n for n in after if after[n] != self._sums[n]]
                if changed:
                    raise StateError(f"frozen parameters modified: {changed}")
        finally:
            for p in self.frozen.values():
                p.requires_grad = True
        return False


def _snapshot(params: dict[str, ag.Tensor]) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in params.items()}


def _restore(params: dict[str, ag.Tensor], snap: dict[str, np.ndarray]) -> None:
    for n, p in params.items():
        p.data[:] = snap[n]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == labels))


def _gate_dump(capture: Capture | None) -> str:
    if capture is None or not capture.gates:
        return "no gates recorded"
    lines = []
    for rec in capture.gates:
        means = rec.gates.mean(axis=0)
        lines.append(f"layer {rec.layer}: " + " ".join(f"{m:.4f}" for m in means))
    return "; ".join(lines)


# ---------------------------------------------------------------------------
# generic stage loop


def _fit(model: MMBertModel, stage: str, train: list[MultimodalSample],
         val: list[MultimodalSample], cfg: TrainConfig, log: TrainLog, *,
         groups: list[ParamGroup], headline_lr: float, epochs: int,
         batch_loss, eval_loss, lr_decay: bool = False) -> None:
    """Shared epoch loop: shuffled bucketed batches, AdamW, early stopping on
    validation loss with best-parameter restore.

    ``batch_loss(batch) -> (loss Tensor, acc, aux, capture)`` builds the
    training graph; ``eval_loss(split) -> (loss, acc, aux)`` scores a split.
    """
    trainable: dict[str, ag.Tensor] = {}
    for g in groups:
        trainable.update(g.params)
    opt = AdamW(groups)
    shuffle_rng = substream(cfg.seed, f"train/{stage}/shuffle")

    best = (math.inf, None)
    since_best = 0
    with _Freezer(model, trainable):
        for epoch in range(epochs):
            lr_scale = (1.0 - epoch / epochs) if lr_decay else 1.0
            losses, accs, auxes = [], [], []
            for batch in bucket_batches(train, cfg.batch_size, shuffle_rng):
                opt.zero_grad()
                loss, acc, aux, capture = batch_loss(batch)
                if not np.isfinite(loss.data):
                    raise RuntimeError(
                        f"non-finite loss in stage {stage} epoch {epoch}; "
                        f"last batch mean gates: {_gate_dump(capture)}")
                ag.backward(loss)
                if cfg.clip_norm is not None:
                    clip_gradients(trainable.values(), cfg.clip_norm)
                opt.step(lr_scale)
                losses.append(loss.item())
                accs.append(acc)
                auxes.append(aux)
            log.add(epoch=epoch, stage=stage, split="train",
                    loss=float(np.mean(losses)), acc=float(np.mean(accs)),
                    aux=float(np.mean(auxes)), lr=headline_lr * lr_scale)

            v_loss, v_acc, v_aux = eval_loss(val)
            log.add(epoch=epoch, stage=stage, split="val", loss=v_loss,
                    acc=v_acc, aux=v_aux, lr=headline_lr * lr_scale)
            if not math.isfinite(v_loss):
                raise RuntimeError(f"non-finite validation loss in stage {stage} epoch {epoch}")

            if v_loss < best[0]:
                best = (v_loss, _snapshot(trainable))
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    break
        if best[1] is not None:
            _restore(trainable, best[1])


# ---------------------------------------------------------------------------
# classification stages (0, 2, 3)


def _ce_batch_loss(model, cfg, *, active, ffn_mode, alpha, train_mode=True):
    def fn(batch):
        capture = Capture() if ffn_mode == "moe" else None
        labels = np.array([s.label for s in batch])
        logits = model.forward_batch(batch, active=active, ffn_mode=ffn_mode,
                                     train=train_mode, capture=capture)
        ce = ag.cross_entropy(logits, labels)
        aux = None
        if capture is not None and capture.gate_tensors:
            aux = aux_loss(capture.gate_tensors)
        loss = total_loss(ce, aux, alpha if aux is not None else 0.0)
        return (loss, _accuracy(logits.data, labels),
                aux.item() if aux is not None else 0.0, capture)
    return fn


def _ce_eval_loss(model, cfg, *, active, ffn_mode, alpha):
    def fn(split):
        losses, auxes, hits, count = [], [], 0, 0
        with ag.no_grad():
            for batch in bucket_batches(split, cfg.batch_size):
                capture = Capture() if ffn_mode == "moe" else None
                labels = np.array([s.label for s in batch])
                logits = model.forward_batch(batch, active=active, ffn_mode=ffn_mode,
                                             capture=capture)
                ce = ag.cross_entropy(logits, labels)
                aux_val = 0.0
                if capture is not None and capture.gate_tensors:
                    aux_val = aux_loss(capture.gate_tensors).item()
                losses.append(ce.item() + alpha * aux_val)
                auxes.append(aux_val)
                hits += int((logits.data.argmax(axis=1) == labels).sum())
                count += len(batch)
        return float(np.mean(losses)), hits / count, float(np.mean(auxes))
    return fn


def stage0_train(model: MMBertModel, train, val, cfg: TrainConfig, log: TrainLog) -> None:
    """Text-backbone warmup on unperturbed data (single text FFN, no MoE)."""
    idx = model.expert_index("text")
    groups = [ParamGroup("backbone", _backbone_params(model), cfg.stage0_lr),
              ParamGroup("text-expert", _expert_params(model, "text"), cfg.stage0_lr),
              ParamGroup("head", model.select("head."), cfg.stage0_lr)]
    base_train = [s for s in train if s.tag == "none"]
    base_val = [s for s in val if s.tag == "none"]
    _fit(model, "0", base_train, base_val, cfg, log, groups=groups,
         headline_lr=cfg.stage0_lr, epochs=cfg.stage0_epochs,
         batch_loss=_ce_batch_loss(model, cfg, active=("text",),
                                   ffn_mode=("single", idx), alpha=0.0),
         eval_loss=_ce_eval_loss(model, cfg, active=("text",),
                                 ffn_mode=("single", idx), alpha=0.0))


def _backbone_params(model: MMBertModel) -> dict[str, ag.Tensor]:
    prefixes = ["embed."]
    for i in range(model.cfg.n_layers):
        prefixes += [f"block{i}.attn.", f"block{i}.ln1.", f"block{i}.ln2."]
    return model.select(*prefixes)


def _expert_params(model: MMBertModel, tag: str) -> dict[str, ag.Tensor]:
    return model.select(*[f"block{i}.expert.{tag}." for i in range(model.cfg.n_layers)])


def _router_params(model: MMBertModel) -> dict[str, ag.Tensor]:
    return model.select(*[f"block{i}.router." for i in range(model.cfg.n_layers)])


# ---------------------------------------------------------------------------
# stage 1: aligners


def _stage1_targets(model: MMBertModel, batch, base_of) -> ag.Tensor:
    """Unperturbed base text word embeddings, detached (no positions)."""
    ids = np.asarray([base_of(s).token_ids for s in batch], dtype=np.int64)
    with ag.no_grad():
        emb = ag.embedding(model.word_emb, ids)
    return ag.Tensor(emb.data.copy())


def _stage1_loss(model: MMBertModel, batch, base_of, modalities) -> ag.Tensor:
    n = len(batch[0].token_ids)
    targets = _stage1_targets(model, batch, base_of)
    loss = None
    if "speech" in modalities:
        feats = np.stack([model.speech_enc.encode(s.token_ids) for s in batch])
        aligned = model.aligners["speech"](ag.Tensor(feats))  # [B, f*n, d]
        f = model.cfg.frames_per_token
        pooled = ag.tmean(ag.reshape(aligned, (len(batch), n, f, model.cfg.d_model)), axis=2)
        loss = ag.mse(pooled, targets)
    if "vision" in modalities:
        feats = np.stack([model.vision_enc.encode(s.token_ids) for s in batch])
        aligned = model.aligners["vision"](ag.Tensor(feats))
        v = ag.mse(aligned, targets)
        loss = v if loss is None else ag.add(loss, v)
    return loss


def _stage1_usable(samples, base_of):
    return [s for s in samples if len(base_of(s).token_ids) == len(s.token_ids)]


def aligner_val_mse(model: MMBertModel, samples, cfg: TrainConfig,
                    corpus_index: dict[int, MultimodalSample]) -> float:
    """Mean aligner regression loss on a split, with the current weights."""
    modalities = tuple(m for m in model.cfg.modalities if m != "text")
    if not modalities:
        raise ConfigError("model has no aligned modalities")

    def base_of(s: MultimodalSample) -> MultimodalSample:
        return corpus_index.get(s.base_id, s)

    usable = _stage1_usable(samples, base_of)
    total, count = 0.0, 0
    with ag.no_grad():
        for batch in bucket_batches(usable, cfg.batch_size):
            total += _stage1_loss(model, batch, base_of, modalities).item() * len(batch)
            count += len(batch)
    return total / count


def stage1_train(model: MMBertModel, train, val, cfg: TrainConfig, log: TrainLog,
                 corpus_index: dict[int, MultimodalSample]) -> None:
    """Aligner regression onto unperturbed base text embeddings."""
    modalities = tuple(m for m in model.cfg.modalities if m != "text")
    if not modalities:
        return

    def base_of(s: MultimodalSample) -> MultimodalSample:
        return corpus_index.get(s.base_id, s)

    usable = _stage1_usable(train, base_of)
    usable_val = _stage1_usable(val, base_of)

    def batch_loss(batch):
        loss = _stage1_loss(model, batch, base_of, modalities)
        return loss, float("nan"), 0.0, None

    def eval_loss(split):
        total, count = 0.0, 0
        with ag.no_grad():
            for batch in bucket_batches(split, cfg.batch_size):
                total += _stage1_loss(model, batch, base_of, modalities).item() * len(batch)
                count += len(batch)
        return total / count, float("nan"), 0.0

    groups = [ParamGroup("aligners", model.select("aligner."), cfg.stage1_lr)]
    _fit(model, "1", usable, usable_val, cfg, log, groups=groups,
         headline_lr=cfg.stage1_lr, epochs=cfg.stage1_epochs,
         batch_loss=batch_loss, eval_loss=eval_loss)


# ---------------------------------------------------------------------------
# stage 2: per-modality expert passes with the shared head


def stage2_train(model: MMBertModel, train, val, cfg: TrainConfig, log: TrainLog) -> None:
    for modality in model.cfg.modalities:
        idx = model.expert_index(modality)
        expert_lr = cfg.stage2_lr_text if modality == "text" else cfg.stage2_lr_other
        groups = [ParamGroup("expert", _expert_params(model, modality), expert_lr),
                  ParamGroup("head", model.select("head."), expert_lr)]
        if modality == "text":
            groups.append(ParamGroup("backbone", _backbone_params(model), cfg.stage2_lr_text))
        else:
            groups.append(ParamGroup("aligner", model.select(f"aligner.{modality}."),
                                     cfg.stage2_lr_aligners))
        _fit(model, f"2-{modality}", train, val, cfg, log, groups=groups,
             headline_lr=expert_lr, epochs=cfg.stage2_epochs,
             batch_loss=_ce_batch_loss(model, cfg, active=(modality,),
                                       ffn_mode=("single", idx), alpha=0.0),
             eval_loss=_ce_eval_loss(model, cfg, active=(modality,),
                                     ffn_mode=("single", idx), alpha=0.0))


# ---------------------------------------------------------------------------
# stage 3: joint routed fine-tune


def stage3_train(model: MMBertModel, train, val, cfg: TrainConfig, log: TrainLog) -> None:
    multi = len(model.cfg.modalities) > 1
    ffn_mode = "moe" if multi else ("single", 0)
    alpha = cfg.alpha if multi else 0.0
    groups = [ParamGroup("all", dict(model.params()), cfg.stage3_lr)]
    if not multi:
        # the single-modality baseline has no router to train
        groups = [ParamGroup("all", {n: p for n, p in model.params().items()
                                     if ".router." not in n}, cfg.stage3_lr)]
    _fit(model, "3", train, val, cfg, log, groups=groups,
         headline_lr=cfg.stage3_lr, epochs=cfg.stage3_epochs,
         batch_loss=_ce_batch_loss(model, cfg, active=model.cfg.modalities,
                                   ffn_mode=ffn_mode, alpha=alpha),
         eval_loss=_ce_eval_loss(model, cfg, active=model.cfg.modalities,
                                 ffn_mode=ffn_mode, alpha=alpha),
         lr_decay=True)


# ---------------------------------------------------------------------------
# orchestration


STAGE_NAMES = ("0", "1", "2", "3")


def train_all(model: MMBertModel, train, val, cfg: TrainConfig,
              stages: tuple[str, ...] = STAGE_NAMES,
              corpus_index: dict[int, MultimodalSample] | None = None,
              log: TrainLog | None = None) -> TrainLog:
    """Run the selected stages in order on an already-built model."""
    log = log if log is not None else TrainLog()
    if corpus_index is None:
        corpus_index = {s.sample_id: s for s in train + val}
    for stage in stages:
        if stage == "0":
            if cfg.stage0:
                stage0_train(model, train, val, cfg, log)
        elif stage == "1":
            stage1_train(model, train, val, cfg, log, corpus_index)
        elif stage == "2":
            stage2_train(model, train, val, cfg, log)
        elif stage == "3":
            stage3_train(model, train, val, cfg, log)
        else:
            raise ConfigError(f"unknown stage {stage!r}")
    return log
