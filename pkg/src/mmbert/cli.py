"""Command-line entry points.

Subcommands: gen-data, train, eval, route-analyze, ablate, gradcheck.
Thread-count pinning via MMBERT_THREADS is applied at import time, before
any submodule pulls in numpy, because BLAS pools size themselves once.
"""

from __future__ import annotations

import argparse
import os
import sys


def _configure_threads() -> None:
    requested = os.environ.get("MMBERT_THREADS")
    if not requested:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, requested)


_configure_threads()

from .errors import MMBertError, StageDependencyError  # noqa: E402


def _load_configs(args):
    from .corpus import CorpusConfig
    from .model import ModelConfig
    from .runconfig import load_run_config
    from .training import TrainConfig

    if getattr(args, "config", None):
        corpus_cfg, model_cfg, train_cfg = load_run_config(args.config)
    else:
        corpus_cfg, model_cfg, train_cfg = CorpusConfig(), ModelConfig(), TrainConfig()
    if getattr(args, "seed", None) is not None:
        train_cfg.seed = args.seed
    return corpus_cfg, model_cfg, train_cfg


def _corpus_and_splits(args, corpus_cfg, seed):
    from .corpus import SplitSpec, build_corpus, build_vocab, load_corpus, split

    vocab = build_vocab(corpus_cfg, seed)
    if getattr(args, "data", None):
        corpus = load_corpus(args.data)
    else:
        corpus = build_corpus(corpus_cfg, seed, vocab)
    train, val, test = split(corpus, SplitSpec(seed=seed))
    return vocab, corpus, train, val, test


def cmd_gen_data(args) -> int:
    from .corpus import SplitSpec, build_corpus, build_vocab, save_corpus, split

    corpus_cfg, _, train_cfg = _load_configs(args)
    if args.balance is not None:
        corpus_cfg.class_balance = args.balance
    seed = train_cfg.seed
    vocab = build_vocab(corpus_cfg, seed)
    corpus = build_corpus(corpus_cfg, seed, vocab)
    save_corpus(args.out, corpus)
    base, _ = os.path.splitext(args.out)
    splits = split(corpus, SplitSpec(seed=seed))
    for name, samples in zip(("train", "val", "test"), splits):
        with open(f"{base}.{name}.ids", "w", encoding="utf-8") as fh:
            fh.writelines(f"{s.sample_id}\n" for s in samples)
    positives = sum(s.label for s in corpus)
    print(f"wrote {len(corpus)} samples ({positives} positive) to {args.out}")
    return 0


_STAGE_FILES = {"0": "stage0.ckpt", "1": "stage1.ckpt",
                "2": "stage2.ckpt", "3": "stage3.ckpt"}


def _prerequisite(stage: str, train_cfg) -> str | None:
    order = ["1", "2", "3"]
    if stage == "0":
        return None
    if stage == "1":
        return "0" if train_cfg.stage0 else None
    return order[order.index(stage) - 1]


def cmd_train(args) -> int:
    from .checkpoint import (encoder_tables, load_checkpoint, restore_into,
                             save_checkpoint)
    from .model import MMBertModel
    from .runconfig import config_as_dict
    from .training import STAGE_NAMES, TrainLog, train_all

    corpus_cfg, model_cfg, train_cfg = _load_configs(args)
    seed = train_cfg.seed
    vocab, _, train_set, val_set, _ = _corpus_and_splits(args, corpus_cfg, seed)
    os.makedirs(args.out, exist_ok=True)

    model = MMBertModel(model_cfg, vocab, seed=seed)
    if args.stage == "all":
        stages = tuple(s for s in STAGE_NAMES
                       if s != "0" or train_cfg.stage0)
    else:
        stages = (args.stage,)
        prereq = _prerequisite(args.stage, train_cfg)
        if prereq is not None:
            path = os.path.join(args.out, _STAGE_FILES[prereq])
            if not os.path.exists(path):
                raise StageDependencyError(
                    f"stage {args.stage} requires {path} from stage {prereq}")
            restore_into(model, load_checkpoint(path))

    cfg_dict = config_as_dict(corpus_cfg, model_cfg, train_cfg)
    tables = encoder_tables(model)
    log = TrainLog()
    for stage in stages:
        train_all(model, train_set, val_set, train_cfg, stages=(stage,), log=log)
        save_checkpoint(os.path.join(args.out, _STAGE_FILES[stage]),
                        model.params(), config=cfg_dict,
                        meta={"stage": stage, "seed": seed}, tables=tables)
    log.to_csv(os.path.join(args.out, "trainlog.csv"))
    last = stages[-1]
    val_records = [r for r in log.records
                   if r.split == "val" and r.stage.startswith(last)]
    if val_records:
        final = val_records[-1]
        print(f"stage {last} done: val loss {final.loss:.4f}, "
              f"val acc {final.acc:.3f}")
    print(f"saved {os.path.join(args.out, _STAGE_FILES[last])}")
    return 0


def _model_from_checkpoint(path):
    from .checkpoint import load_checkpoint, restore_into
    from .corpus import build_vocab
    from .model import MMBertModel
    from .runconfig import configs_from_dict

    data = load_checkpoint(path)
    corpus_cfg, model_cfg, train_cfg = configs_from_dict(data.config)
    seed = int(data.meta.get("seed", train_cfg.seed))
    vocab = build_vocab(corpus_cfg, seed)
    model = MMBertModel(model_cfg, vocab, seed=seed)
    restore_into(model, data)
    return model, corpus_cfg, train_cfg, seed


def _pick_split(args, corpus_cfg, seed):
    from .corpus import SplitSpec, load_corpus, split

    corpus = load_corpus(args.data)
    train, val, test = split(corpus, SplitSpec(seed=seed))
    return {"train": train, "val": val, "test": test, "all": corpus}[args.split]


def cmd_eval(args) -> int:
    from .corpus import ALL_TAGS, slice_by_tag
    from .evaluation import evaluate, metrics_csv, metrics_row

    model, corpus_cfg, _, seed = _model_from_checkpoint(args.ckpt)
    samples = _pick_split(args, corpus_cfg, seed)
    run = os.path.splitext(os.path.basename(args.ckpt))[0]
    dataset = os.path.basename(args.data)
    rows = []
    if args.slice == "all":
        rows.append(metrics_row(run, dataset, "overall", evaluate(model, samples)))
        tags = ALL_TAGS
    else:
        tags = (args.slice,)
    for tag in tags:
        sliced = slice_by_tag(samples, tag)
        if sliced:
            rows.append(metrics_row(run, dataset, tag, evaluate(model, sliced)))
    csv = metrics_csv(rows)
    _emit(csv, args.out)
    return 0


def cmd_route_analyze(args) -> int:
    from .evaluation import routing_profile

    model, corpus_cfg, _, seed = _model_from_checkpoint(args.ckpt)
    samples = _pick_split(args, corpus_cfg, seed)
    profile = routing_profile(model, samples)
    _emit(profile.to_csv(), args.out)
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate_modalities, ablate_stages, ablation_csv

    corpus_cfg, model_cfg, train_cfg = _load_configs(args)
    seed = train_cfg.seed
    vocab, _, train_set, val_set, _ = _corpus_and_splits(args, corpus_cfg, seed)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.kind == "stages":
        rows, _ = ablate_stages(train_set, val_set, model_cfg, train_cfg,
                                vocab, seeds=seeds)
    else:
        rows, _ = ablate_modalities(train_set, val_set, model_cfg, train_cfg,
                                    vocab, seeds=seeds)
    _emit(ablation_csv(rows), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import stage3_loss_gradcheck

    err = stage3_loss_gradcheck(seed=args.seed,
                                max_coords_per_param=args.coords)
    ok = err < args.threshold
    print(f"max relative error {err:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {args.threshold:g})")
    return 0 if ok else 1


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {out_path}")
    else:
        sys.stdout.write(text)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmbert",
        description="Multimodal MoE encoder: corpus generation, staged "
                    "training, evaluation, and routing analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="run-config file (key = value lines)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--balance", type=float, default=None,
                   help="positive-class fraction override")
    p.add_argument("--out", required=True, help="corpus TSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run training stages")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data", help="corpus TSV; generated from config if omitted")
    p.add_argument("--stage", default="all", choices=["0", "1", "2", "3", "all"])
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics per slice from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test", "all"])
    p.add_argument("--slice", default="all",
                   choices=["all", "none", "homophone", "codemix", "deform",
                            "abbrev"])
    p.add_argument("--out", help="CSV path; stdout if omitted")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route-analyze", help="per-tag routing profile CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "val", "test", "all"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_route_analyze)

    p = sub.add_parser("ablate", help="stage or modality ablation table")
    p.add_argument("--kind", required=True, choices=["stages", "modalities"])
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--data")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated run seeds")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the "
                                         "full training loss on a toy model")
    p.add_argument("--size", default="tiny", choices=["tiny"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=6,
                   help="sampled coordinates per parameter")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MMBertError, OSError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
