"""Command-line entry points: gen, pretrain, train, eval, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as data_mod
from .checkpoint import CheckpointError
from .config import VARIANTS, RunConfig, apply_variant, parse_config
from .continual import (PromptPool, evaluate_stage, load_run, save_backbone,
                        save_run, train_task)
from .encoder import Backbone, pretrain_backbone


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message, status=1)


def _read(path, what: str) -> str:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-file", f"{what} file not found: {p}")
    return p.read_text()


def _load_config(path):
    if path is None:
        return RunConfig()
    try:
        return parse_config(_read(path, "config"))
    except ValueError as e:
        raise CliError("invalid-config", str(e))


def _load_dataset(path):
    try:
        return data_mod.load_dataset(path)
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise CliError("invalid-dataset", f"cannot load dataset at {path}: {e}")


def _check_dims(cfg, ds):
    b = cfg.backbone
    if ds.vocab > b.vocab:
        raise CliError("vocab-too-small",
                       f"dataset needs vocab {ds.vocab}, backbone has {b.vocab}")
    spec = ds.spec
    if (spec.n_patches, spec.patch_dim, spec.cap_len) != (b.n_patches, b.patch_dim, b.cap_len):
        raise CliError("dims-mismatch",
                       f"dataset dims (patches={spec.n_patches}, patch_dim={spec.patch_dim}, "
                       f"cap_len={spec.cap_len}) do not match backbone config")


def cmd_gen(args) -> int:
    if args.spec:
        spec = data_mod.parse_generator_spec(_read(args.spec, "generator spec"))
    else:
        spec = data_mod.GeneratorSpec()
    data_mod.generate_dataset(spec, args.out)
    print(f"wrote dataset ({spec.n_tasks} tasks) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_dataset(args.data)
    _check_dims(cfg, ds)
    backbone = Backbone(cfg.backbone, seed=cfg.seed, token_features=ds.appearance)
    pretrain_backbone(backbone, ds.pretrain.vision, ds.pretrain.captions,
                      steps=cfg.pretrain_steps, batch_size=cfg.batch_size,
                      base_lr=cfg.pretrain_lr, seed=cfg.seed,
                      tau=cfg.temps.retrieval)
    save_backbone(args.out, backbone, cfg)
    print(f"pretrained backbone ({cfg.pretrain_steps} steps) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    ds = _load_dataset(args.data)
    _check_dims(cfg, ds)
    try:
        backbone, pool, ckpt_cfg, stage = load_run(args.backbone)
    except CheckpointError as e:
        raise CliError("invalid-checkpoint", str(e))
    if ckpt_cfg.backbone != cfg.backbone:
        raise CliError("config-mismatch",
                       "backbone section of config differs from checkpoint")
    task_tokens = [t.task_token for t in ds.tasks]
    for k in range(stage, len(ds.tasks)):
        losses = train_task(backbone, pool, ds.tasks[k], cfg, task_tokens)
        save_run(f"{args.out}.stage{k + 1}", backbone, pool, cfg, k + 1)
        print(f"task {k} ({ds.tasks[k].name}): "
              f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    save_run(args.out, backbone, pool, cfg, len(ds.tasks))
    print(f"trained {len(ds.tasks) - stage} task(s) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .report import emit_report

    try:
        backbone, pool, cfg, stage = load_run(args.ckpt)
    except CheckpointError as e:
        raise CliError("invalid-checkpoint", str(e))
    if pool.count == 0:
        raise CliError("empty-prompt-pool",
                       "empty prompt pool: run `train` before `eval`")
    ds = _load_dataset(args.data)
    _check_dims(cfg, ds)
    identity = "oracle" if args.oracle_identity else cfg.identity_mode
    scope = args.gallery or cfg.gallery_scope
    records = []
    for s in range(1, pool.count + 1):
        sub = PromptPool(entries=pool.entries[:s])
        records += evaluate_stage(backbone, sub, ds.tasks, cfg,
                                  identity_mode=identity, gallery_scope=scope)
    emit_report(records, args.out, pool=pool, cfg=cfg, figures=False)
    print(f"evaluated {pool.count} stage(s) -> {args.out}")
    return 0


def cmd_report(args) -> int:
    from .report import emit_report, metrics_from_csv

    path = Path(args.metrics) / "metrics.csv"
    if not path.exists():
        raise CliError("missing-metrics", f"no metrics.csv under {args.metrics}")
    try:
        records = metrics_from_csv(path.read_text())
        emit_report(records, args.out, figures=True)
    except ValueError as e:
        raise CliError("invalid-metrics", str(e))
    print(f"report -> {args.out}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="promptcl",
                description="Continual vision-language retrieval with "
                            "low-rank factored per-task prompts")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic benchmark")
    g.add_argument("--spec", help="generator spec file (flat key = value)")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(fn=cmd_gen)

    pt = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    pt.add_argument("--config", default=None, help="run config (defaults used if omitted)")
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True, help="backbone checkpoint path")
    pt.set_defaults(fn=cmd_pretrain)

    tr = sub.add_parser("train", help="train the task sequence")
    tr.add_argument("--config", default=None, help="run config (defaults used if omitted)")
    tr.add_argument("--data", required=True)
    tr.add_argument("--backbone", required=True,
                    help="backbone checkpoint, or a run checkpoint to resume")
    tr.add_argument("--out", required=True, help="run checkpoint path")
    tr.add_argument("--variant", choices=VARIANTS,
                    help="ablation regime override (cp, dp, lpi-m, lpi-p)")
    tr.set_defaults(fn=cmd_train)

    ev = sub.add_parser("eval", help="evaluate all stages of a trained run")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--oracle-identity", action="store_true")
    ev.add_argument("--gallery", choices=("per-task", "union"))
    ev.set_defaults(fn=cmd_eval)

    rp = sub.add_parser("report", help="summaries and figures from metrics.csv")
    rp.add_argument("--metrics", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"promptcl-error[{e.code}]: {e}", file=sys.stderr)
        return e.status
    except (ValueError, CheckpointError, FileNotFoundError) as e:
        print(f"promptcl-error[invalid-input]: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"promptcl-error[runtime]: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
