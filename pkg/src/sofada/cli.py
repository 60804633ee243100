"""Command-line entry points: pretrain, adapt, eval, ablate, generate.

Every command is a pure function of (config file, input files, seed) to
(output files, exit code).  Exit codes: 0 success, 2 invalid config,
3 missing data/checkpoint, 4 checkpoint/architecture mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import (
    ConfigError,
    PairGeometry,
    RunConfig,
    build_pair,
    build_trio,
    config_from_dict,
    load_config,
)
from .evaluation import accuracy, export_features, run_ablation_suite, sample_grid
from .model_core import NonFiniteLossError
from .persistence import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    restore_classifier,
    restore_model_arrays,
    restore_state,
    save_checkpoint,
    source_checkpoint,
    state_checkpoint,
    write_metrics_csv,
)
from .trainer import adapt, init_state, pretrain_source

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4


def _outdir(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_snapshot(cfg: RunConfig, geom: PairGeometry) -> dict:
    snap = cfg.to_dict()
    snap["_geometry"] = geom.to_dict()
    return snap


def _config_from_checkpoint(ckpt: Checkpoint) -> tuple[RunConfig, PairGeometry]:
    data = dict(ckpt.config)
    geom_dict = data.pop("_geometry", None)
    if geom_dict is None:
        raise CheckpointError("checkpoint config carries no geometry record")
    return config_from_dict(data), PairGeometry.from_dict(geom_dict)


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.trainer.seed
    pair = build_pair(cfg.dataset)
    geom = PairGeometry.of(pair)
    classifier, _, _ = build_trio(geom, cfg.models, cfg.trainer.noise_dim, seed)
    anchor = pretrain_source(
        classifier, pair.source, cfg.pretrain.epochs, cfg.pretrain.lr, seed,
        cfg.pretrain.batch_size,
    )
    out = _outdir(cfg, args.out)
    ckpt_path = out / "source.ckpt"
    save_checkpoint(ckpt_path, source_checkpoint(classifier, anchor, _config_snapshot(cfg, geom)))
    source_acc = accuracy(classifier, pair.source)
    target_acc = accuracy(classifier, pair.target)
    with open(out / "pretrain_metrics.csv", "w") as f:
        f.write("source_accuracy,target_accuracy\n")
        f.write(f"{source_acc!r},{target_acc!r}\n")
    print(f"checkpoint written to {ckpt_path}")
    print(f"final source accuracy {source_acc!r}")
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.trainer.seed
    adapt_cfg = cfg.adapt_config(seed=seed)
    pair = build_pair(cfg.dataset)
    geom = PairGeometry.of(pair)
    classifier, generator, discriminator = build_trio(
        geom, cfg.models, adapt_cfg.noise_dim, seed
    )
    source_ckpt = load_checkpoint(args.source_checkpoint)
    anchor = restore_classifier(source_ckpt, classifier)
    state = init_state(classifier, generator, discriminator, anchor, adapt_cfg)
    if args.resume:
        restore_state(load_checkpoint(args.resume), state)

    out = _outdir(cfg, args.out)
    snapshot = _config_snapshot(cfg, geom)
    every = cfg.output.checkpoint_every

    def on_epoch_end(st, record) -> None:
        if every > 0 and st.epoch % every == 0:
            save_checkpoint(out / "last.ckpt", state_checkpoint(st, snapshot))

    _, history = adapt(
        state,
        pair.target.unlabeled(),
        adapt_cfg,
        eval_fn=lambda c: accuracy(c, pair.target),
        on_epoch_end=on_epoch_end,
    )
    write_metrics_csv(out / "adapt_metrics.csv", history)
    save_checkpoint(out / "adapted.ckpt", state_checkpoint(state, snapshot))
    final_acc = history[-1].target_accuracy if history else float("nan")
    print(f"metrics written to {out / 'adapt_metrics.csv'}")
    print(f"final target accuracy {final_acc!r}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ckpt_cfg, geom = _config_from_checkpoint(ckpt)
    data_cfg = load_config(args.config) if args.config else ckpt_cfg
    pair = build_pair(data_cfg.dataset)
    classifier, _, _ = build_trio(geom, ckpt_cfg.models, ckpt_cfg.trainer.noise_dim, 0)
    restore_classifier(ckpt, classifier)
    split = pair.source if args.split == "source" else pair.target
    acc = accuracy(classifier, split)
    if args.export_features:
        image = export_features(classifier, split, args.export_features)
        print(f"features written to {args.export_features} (projection {image})")
    print(f"{args.split} accuracy {acc!r}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seeds = (
        [int(s) for s in args.seeds.split(",")]
        if args.seeds
        else list(cfg.trainer.ablation_seeds)
    )
    pair = build_pair(cfg.dataset)
    rows = run_ablation_suite(
        pair,
        cfg.adapt_config(),
        seeds,
        models_cfg=cfg.models,
        pretrain_epochs=cfg.pretrain.epochs,
        pretrain_lr=cfg.pretrain.lr,
    )
    out = _outdir(cfg, args.out)
    table_path = out / "ablation.csv"
    with open(table_path, "w") as f:
        f.write("variant," + ",".join(f"seed_{s}" for s in seeds) + ",mean,sd\n")
        for row in rows:
            cells = [row.variant]
            cells += [repr(row.per_seed[s]) for s in seeds]
            cells += [repr(row.mean), repr(row.sd)]
            f.write(",".join(cells) + "\n")
    for row in rows:
        print(f"{row.variant:>20}: mean {row.mean:.4f} sd {row.sd:.4f}")
    print(f"table written to {table_path}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "adapt":
        raise CheckpointError("generate needs an adapt checkpoint (it carries G)")
    ckpt_cfg, geom = _config_from_checkpoint(ckpt)
    _, generator, _ = build_trio(geom, ckpt_cfg.models, ckpt_cfg.trainer.noise_dim, 0)
    restore_model_arrays("G", generator, ckpt.arrays)
    cols = args.cols if args.cols else geom.class_count
    path = sample_grid(
        generator, args.rows, cols, args.seed, args.out, image_shape=geom.image_shape
    )
    print(f"sample grid written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sofada",
        description="Adapt a source-trained classifier to an unlabeled target domain.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the source classifier, write source.ckpt")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt to the unlabeled target domain")
    p.add_argument("--config", required=True)
    p.add_argument("--source-checkpoint", required=True)
    p.add_argument("--resume", default=None, help="mid-run adapt checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="accuracy of a checkpointed classifier")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="dataset spec; defaults to the checkpoint's")
    p.add_argument("--split", choices=("source", "target"), default="target")
    p.add_argument("--export-features", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss-ablation table over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated, e.g. 1,2,3")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("generate", help="conditional sample grid from an adapted generator")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
