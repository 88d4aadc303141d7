"""Stage and modality ablation harnesses, plus parameter accounting.

Every run inside one harness call shares the corpus splits bitwise and
draws its model from the same seed list, so the only varying factor is
the ablated component. Stage-3 budgets are identical across variants;
early stopping may end a run sooner but never extends it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

from .corpus import MultimodalSample, SynthVocab
from .errors import ConfigError
from .model import MMBertModel, ModelConfig
from .training import TrainConfig, TrainLog, train_all, _ce_eval_loss

STAGE_VARIANTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("full", ("0", "1", "2", "3")),
    ("no-stage-1", ("0", "2", "3")),
    ("no-stage-2", ("0", "1", "3")),
    ("no-stage-1-and-2", ("0", "3")),
)

MODALITY_VARIANTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("text+speech", ("text", "speech")),
    ("text+vision", ("text", "vision")),
    ("trimodal", ("text", "speech", "vision")),
)


@dataclass
class AblationRow:
    variant: str
    seed: int
    val_acc: float
    val_loss: float


def _final_val(model: MMBertModel, val: list[MultimodalSample],
               cfg: TrainConfig) -> tuple[float, float]:
    multi = len(model.cfg.modalities) > 1
    ffn_mode = "moe" if multi else ("single", 0)
    alpha = cfg.alpha if multi else 0.0
    loss, acc, _ = _ce_eval_loss(model, cfg, active=model.cfg.modalities,
                                 ffn_mode=ffn_mode, alpha=alpha)(val)
    return acc, loss


def ablate_stages(train: list[MultimodalSample], val: list[MultimodalSample],
                  model_cfg: ModelConfig, train_cfg: TrainConfig,
                  vocab: SynthVocab, *, seeds: tuple[int, ...] = (0, 1, 2),
                  ) -> tuple[list[AblationRow], dict[tuple[str, int], TrainLog]]:
    """Train {full, no-stage-1, no-stage-2, no-stage-1-and-2} per seed.

    Returns final-validation rows and the per-run logs (loss curves).
    """
    if not seeds:
        raise ConfigError("ablate_stages needs at least one seed")
    rows, logs = [], {}
    for variant, stages in STAGE_VARIANTS:
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            model = MMBertModel(model_cfg, vocab, seed=seed)
            log = TrainLog()
            train_all(model, train, val, cfg, stages=stages, log=log)
            acc, loss = _final_val(model, val, cfg)
            rows.append(AblationRow(variant, seed, acc, loss))
            logs[(variant, seed)] = log
    return rows, logs


def ablate_modalities(train: list[MultimodalSample], val: list[MultimodalSample],
                      model_cfg: ModelConfig, train_cfg: TrainConfig,
                      vocab: SynthVocab, *, seeds: tuple[int, ...] = (0, 1, 2),
                      variants=MODALITY_VARIANTS,
                      ) -> tuple[list[AblationRow], dict[tuple[str, int], MMBertModel]]:
    """Train 2-expert and 3-expert configurations on the same splits.

    Returns final-validation rows plus the trained models keyed by
    (variant, seed) so callers can score arbitrary test slices.
    """
    if not seeds:
        raise ConfigError("ablate_modalities needs at least one seed")
    rows, models = [], {}
    for variant, modalities in variants:
        for seed in seeds:
            mcfg = replace(model_cfg, modalities=modalities, n_experts=0)
            cfg = replace(train_cfg, seed=seed)
            model = MMBertModel(mcfg, vocab, seed=seed)
            train_all(model, train, val, cfg)
            acc, loss = _final_val(model, val, cfg)
            rows.append(AblationRow(variant, seed, acc, loss))
            models[(variant, seed)] = model
    return rows, models


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    buf.write("variant,seed,val_acc,val_loss\n")
    for r in rows:
        buf.write(f"{r.variant},{r.seed},{r.val_acc:.6f},{r.val_loss:.6f}\n")
    return buf.getvalue()


def stage_budget(stages: tuple[str, ...], cfg: TrainConfig) -> int:
    """Allotted stage-3 epochs for a variant; identical across variants."""
    return cfg.stage3_epochs if "3" in stages else 0


# -- parameter accounting -----------------------------------------------------

def _count(params: dict, prefixes: tuple[str, ...]) -> int:
    return sum(t.data.size for n, t in params.items()
               if any(n.startswith(p) for p in prefixes))


def expert_param_formula(d_model: int, d_ff: int) -> int:
    """Parameters of one two-layer expert FFN."""
    return 2 * d_model * d_ff + d_model + d_ff


def param_count_report(model: MMBertModel) -> dict[str, int | float]:
    """Per-component parameter counts by registry enumeration.

    The MoE-vs-dense ratio compares the encoder backbone with all experts
    and routers against the same backbone with a single FFN slot, which is
    what a non-mixture encoder of equal width would carry.
    """
    cfg = model.cfg
    params = model.params()
    attn_ln = _count(params, tuple(f"block{i}.attn." for i in range(cfg.n_layers))
                     + tuple(f"block{i}.ln" for i in range(cfg.n_layers)))
    embeddings = _count(params, ("embed.",))
    experts = _count(params, tuple(f"block{i}.expert." for i in range(cfg.n_layers)))
    routers = _count(params, tuple(f"block{i}.router." for i in range(cfg.n_layers)))
    head = _count(params, ("head.",))
    aligners = _count(params, ("aligner.",))
    one_expert = cfg.n_layers * expert_param_formula(cfg.d_model, cfg.d_ff)
    dense_backbone = embeddings + attn_ln + one_expert
    moe_backbone = embeddings + attn_ln + experts + routers
    report = {
        "backbone": moe_backbone,
        "embeddings": embeddings,
        "attention_and_norms": attn_ln,
        "experts": experts,
        "routers": routers,
        "head": head,
        "aligners": aligners,
        "total": sum(t.data.size for t in params.values()),
        "dense_backbone": dense_backbone,
        "moe_over_dense": moe_backbone / dense_backbone,
    }
    return report


def moe_extra_param_formula(cfg: ModelConfig) -> int:
    """Closed-form parameter surplus of the mixture over a single FFN."""
    per_expert = expert_param_formula(cfg.d_model, cfg.d_ff)
    extra_experts = (cfg.n_experts - 1) * cfg.n_layers * per_expert
    routers = cfg.n_layers * (cfg.n_experts * cfg.d_model + cfg.n_experts)
    return extra_experts + routers
