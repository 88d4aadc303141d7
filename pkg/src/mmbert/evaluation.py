"""Classification metrics and routing-distribution profiles.

Macro metrics average the two per-class scores without weighting, so the
minority class counts as much as the majority one. Routing profiles are
token-weighted: every token position of every sample contributes one gate
row, and means are taken per layer per expert within a perturbation tag.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .corpus import MultimodalSample
from .errors import ConfigError, StateError
from .model import Capture, MMBertModel
from .training import bucket_batches


@dataclass
class ConfusionMatrix:
    """Binary confusion counts with class 1 as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def for_class(self, cls: int) -> tuple[int, int, int, int]:
        """(tp, fp, fn, tn) with ``cls`` treated as the positive class."""
        if cls == 1:
            return self.tp, self.fp, self.fn, self.tn
        return self.tn, self.fn, self.fp, self.tp

    def add(self, label: int, pred: int) -> None:
        if label == 1:
            if pred == 1:
                self.tp += 1
            else:
                self.fn += 1
        else:
            if pred == 1:
                self.fp += 1
            else:
                self.tn += 1


@dataclass
class EvalResult:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: ConfusionMatrix


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics_from_confusion(cm: ConfusionMatrix) -> EvalResult:
    """Macro precision/recall/F1 from explicit counts.

    Zero denominators (a class never predicted, or absent from the data)
    contribute 0 for that class rather than raising.
    """
    if cm.total == 0:
        raise ConfigError("cannot compute metrics over zero samples")
    precs, recs, f1s = [], [], []
    for cls in (0, 1):
        tp, fp, fn, _ = cm.for_class(cls)
        p = _safe_div(tp, tp + fp)
        r = _safe_div(tp, tp + fn)
        precs.append(p)
        recs.append(r)
        f1s.append(_safe_div(2 * p * r, p + r))
    return EvalResult(
        accuracy=(cm.tp + cm.tn) / cm.total,
        macro_precision=float(np.mean(precs)),
        macro_recall=float(np.mean(recs)),
        macro_f1=float(np.mean(f1s)),
        confusion=cm,
    )


def predict(model: MMBertModel, dataset: list[MultimodalSample], *,
            batch_size: int = 32, active: tuple[str, ...] | None = None,
            ffn_mode="moe") -> tuple[np.ndarray, np.ndarray]:
    """(labels, argmax predictions) over the dataset, order-aligned."""
    labels, preds = [], []
    with ag.no_grad():
        for batch in bucket_batches(dataset, batch_size):
            logits = model.forward_batch(batch, active=active, ffn_mode=ffn_mode)
            labels.extend(s.label for s in batch)
            preds.extend(logits.data.argmax(axis=1).tolist())
    return np.asarray(labels), np.asarray(preds)


def evaluate(model: MMBertModel, dataset: list[MultimodalSample], *,
             batch_size: int = 32, active: tuple[str, ...] | None = None,
             ffn_mode="moe") -> EvalResult:
    """Accuracy plus macro precision/recall/F1 over a sample list."""
    if not dataset:
        raise ConfigError("evaluate requires a non-empty dataset")
    labels, preds = predict(model, dataset, batch_size=batch_size,
                            active=active, ffn_mode=ffn_mode)
    cm = ConfusionMatrix()
    for y, p in zip(labels.tolist(), preds.tolist()):
        cm.add(y, p)
    return metrics_from_confusion(cm)


@dataclass
class RoutingProfile:
    """Per perturbation tag: [n_layers, n_experts] mean gate probabilities."""

    experts: tuple[str, ...]
    by_tag: dict[str, np.ndarray]

    def mean_gate(self, tag: str, expert: str) -> float:
        """Gate mass of one expert averaged over layers for a tag."""
        col = self.experts.index(expert)
        return float(self.by_tag[tag][:, col].mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("tag,layer,expert,mean_gate\n")
        for tag in sorted(self.by_tag):
            grid = self.by_tag[tag]
            for layer in range(grid.shape[0]):
                for col, expert in enumerate(self.experts):
                    buf.write(f"{tag},{layer},{expert},{grid[layer, col]:.6f}\n")
        return buf.getvalue()


def routing_profile(model: MMBertModel, dataset: list[MultimodalSample], *,
                    batch_size: int = 32,
                    capture_gates: bool = True) -> RoutingProfile:
    """Token-weighted mean gate probability per (tag, layer, expert).

    Runs the full mixture forward with gate capture; each token position
    (text, speech frame, or glyph) contributes one row of probabilities.
    """
    if not capture_gates:
        raise StateError("routing_profile requires gate capture enabled")
    if not dataset:
        raise ConfigError("routing_profile requires a non-empty dataset")
    n_layers = model.cfg.n_layers
    n_experts = model.cfg.n_experts
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    with ag.no_grad():
        for batch in bucket_batches(dataset, batch_size):
            tag = batch[0].tag
            if any(s.tag != tag for s in batch):
                # length bucketing can mix tags; fall back to singles
                for sample in batch:
                    _accumulate(model, [sample], sums, counts, n_layers, n_experts)
                continue
            _accumulate(model, batch, sums, counts, n_layers, n_experts)
    by_tag = {tag: sums[tag] / counts[tag] for tag in sums}
    return RoutingProfile(experts=model.cfg.modalities, by_tag=by_tag)


def _accumulate(model, batch, sums, counts, n_layers, n_experts):
    tag = batch[0].tag
    cap = Capture()
    model.forward_batch(batch, ffn_mode="moe", capture=cap)
    if tag not in sums:
        sums[tag] = np.zeros((n_layers, n_experts))
        counts[tag] = 0
    for rec in cap.gates:
        sums[tag][rec.layer] += rec.gates.sum(axis=0, dtype=np.float64)
    counts[tag] += cap.gates[0].gates.shape[0]


def metrics_csv(rows: list[dict]) -> str:
    """CSV with schema run,dataset,slice,acc,prec,rec,f1."""
    buf = io.StringIO()
    buf.write("run,dataset,slice,acc,prec,rec,f1\n")
    for row in rows:
        buf.write(f"{row['run']},{row['dataset']},{row['slice']},"
                  f"{row['acc']:.6f},{row['prec']:.6f},{row['rec']:.6f},"
                  f"{row['f1']:.6f}\n")
    return buf.getvalue()


def metrics_row(run: str, dataset: str, slice_name: str,
                result: EvalResult) -> dict:
    return {"run": run, "dataset": dataset, "slice": slice_name,
            "acc": result.accuracy, "prec": result.macro_precision,
            "rec": result.macro_recall, "f1": result.macro_f1}
