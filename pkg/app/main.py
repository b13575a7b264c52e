import argparse
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.core.config import load_run_config, settings
from app.core.exceptions import ConfigError, NeuralizerError, ShapeError
from app.models.accounting import cost_table
from app.models.episode import collate
from app.schemas.run import RunConfig
from app.schemas.sampler import Holdout, TaskKind
from app.services.augment_tree import apply_tree
from app.services.evaluation import eval_curves, holdout_compare, infer, infer_bootstrap, write_report
from app.services.sampler import build_episode
from app.services.trainer import baseline_replicates, prepare_pools, train_baseline, train_neuralizer
from app.storage.checkpoint import load_checkpoint
from app.storage.ntf import ntf_load, ntf_save
from app.utils.images import montage, write_pgm
from app.utils.logging import app_logger as logger
from app.utils.logging import setup_logging
from app.utils.rng import child_seed, make_rng

PREVIEW_CONTEXT_MAX = 8


def _parse_holdouts(specs: list[str] | None) -> list[Holdout]:
    try:
        return [Holdout.parse(spec) for spec in specs or []]
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"Bad --holdout: {e}") from e


def _with_holdout(cfg: RunConfig, holdouts: list[Holdout]) -> RunConfig:
    if not holdouts:
        return cfg
    sampler = cfg.sampler.model_validate({**cfg.sampler.model_dump(), "holdout": [h.model_dump() for h in holdouts]})
    return cfg.model_copy(update={"sampler": sampler})


def _task(value: str) -> TaskKind:
    try:
        return TaskKind(value)
    except ValueError as e:
        raise ConfigError(f"Unknown task {value!r}; expected one of {[k.value for k in TaskKind]}") from e


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _with_holdout(load_run_config(args.config), _parse_holdouts(args.holdout))
    run_dir = Path(args.run_dir) if args.run_dir else cfg.paths.run_dir
    if args.baseline:
        task_value, n_value = args.baseline
        task = _task(task_value)
        if n_value == "all":
            n_subjects = None
        elif n_value.isdigit() and int(n_value) >= 1:
            n_subjects = int(n_value)
        else:
            raise ConfigError(f"Baseline subject count must be a positive integer or 'all', got {n_value!r}")
        replicates = args.replicates or baseline_replicates(n_subjects or 0)
        for replicate in range(replicates):
            ckpt = train_baseline(cfg, task, n_subjects, replicate=replicate, run_dir=run_dir)
            logger.info(f"Baseline {task.value} replicate {replicate}: best validation loss {ckpt.meta.best_val}")
        return 0

    workers = settings.WORKERS if args.workers is None else args.workers
    ckpt = train_neuralizer(cfg, run_dir=run_dir, workers=workers, resume=args.resume)
    logger.info(f"Neuralizer training finished: best validation loss {ckpt.meta.best_val} at step {ckpt.meta.step}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    models = [(Path(path).stem, load_checkpoint(path)) for path in args.checkpoints]
    if args.holdout:
        holdouts = _parse_holdouts([args.holdout])
        if len(models) != 2:
            raise ConfigError("Holdout comparison needs exactly two checkpoints: seen, then unseen")
        task = _task(args.task) if args.task else TaskKind.SEGMENTATION
        report = holdout_compare(models[0], models[1], holdouts[0], cfg, task=task)
    else:
        report = eval_curves(models, cfg, dump_dir=Path(args.dump_dir) if args.dump_dir else None)
    write_report(report, args.out)
    return 0


def _load_stack(path: str, channels: int) -> np.ndarray:
    arr = ntf_load(path).astype(np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != channels:
        raise ShapeError(f"{path}: expected [{channels}, H, W] or [B, {channels}, H, W], got {arr.shape}")
    return arr


def cmd_infer(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.meta.model_kind != "neuralizer":
        raise ConfigError(f"{args.checkpoint} is not a Neuralizer checkpoint")
    if not args.context:
        raise ConfigError("Inference needs at least one --context file")
    x = _load_stack(args.input, ckpt.meta.model.in_channels)
    ctx = np.stack([_load_stack(path, ckpt.meta.model.ctx_pair_channels) for path in args.context])
    if ctx.shape[1] not in (1, x.shape[0]):
        raise ShapeError(f"Context batch {ctx.shape[1]} does not match input batch {x.shape[0]}")
    if ctx.shape[1] != x.shape[0]:
        ctx = np.broadcast_to(ctx[:, :1], (ctx.shape[0], x.shape[0], *ctx.shape[2:])).copy()
    loss_kind = "dice" if args.mask else "mse"

    if args.bootstrap < 1:
        raise ConfigError(f"--bootstrap must be at least 1, got {args.bootstrap}")
    if args.hole_channel is not None and not 0 <= args.hole_channel < x.shape[1]:
        raise ConfigError(f"--hole-channel must index one of {x.shape[1]} input channels, got {args.hole_channel}")
    if args.bootstrap > 1:
        result = infer_bootstrap(
            x, ctx, ckpt.params, args.bootstrap, make_rng(args.seed), loss_kind, mask_channel=args.hole_channel
        )
    else:
        result = infer(x, ctx, ckpt.params, loss_kind)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ntf_save(result.prediction, out.with_suffix(".ntf"))
    preview = result.mask if result.mask is not None else result.prediction
    write_pgm(montage([[p[0] for p in preview]]), out.with_suffix(".pgm"))
    logger.info(f"Prediction {result.prediction.shape} written to {out.with_suffix('.ntf')}")
    return 0


def cmd_preview(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    task = _task(args.task)
    seed = cfg.seed if args.seed is None else args.seed
    pools = prepare_pools(cfg)
    rng = make_rng(seed)
    ep = build_episode(task, pools.train, cfg.sampler, rng, context_size=cfg.sampler.context_size_max)
    variants = [("episode", ep)]
    if args.augmented:
        variants.append(("augmented", apply_tree(ep, cfg.augment_tree, child_seed(rng))))

    out_dir = Path(args.out_dir)
    for name, variant in variants:
        rows = [[*pair.input, pair.target[0]] for pair in variant.pairs[:PREVIEW_CONTEXT_MAX + 1]]
        path = write_pgm(montage(rows), out_dir / f"{task.value}_{seed}_{name}.pgm")
        logger.info(f"Preview of {task.value} written to {path}")
    x, ctx, y = collate([ep])
    ntf_save(x[0], out_dir / f"{task.value}_{seed}_input.ntf")
    ntf_save(y[0], out_dir / f"{task.value}_{seed}_target.ntf")
    for i, pair in enumerate(ctx[:, 0]):
        ntf_save(pair, out_dir / f"{task.value}_{seed}_context{i}.ntf")
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    n = args.context_size
    if n < 1:
        raise ConfigError(f"--context-size must be positive, got {n}")
    print(f"{'model':<22} {'N':>4} {'params':>12} {'GFLOP':>10}")
    for row in cost_table(cfg.model, cfg.baseline, n):
        size = "-" if row.context_size is None else str(row.context_size)
        print(f"{row.name:<22} {size:>4} {row.param_count:>12} {row.flops / 1e9:>10.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuralizer", description="Context-conditioned multi-task image network")
    parser.add_argument("--log-level", default=None, help="Override NEURALIZER_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train the Neuralizer or a task-specific baseline U-Net")
    p.add_argument("config", help="Run config JSON")
    p.add_argument("--baseline", nargs=2, metavar=("TASK", "N"), help="Train a baseline on N subjects (or 'all')")
    p.add_argument("--replicates", type=int, default=None, help="Baseline replicates (default 3/2/1 for N=1/2/other)")
    p.add_argument("--holdout", action="append", help="task:<kind>, modality:<id> or class:<id>; repeatable")
    p.add_argument("--workers", type=int, default=None, help="Episode worker threads (1 is deterministic)")
    p.add_argument("--resume", type=Path, default=None, help="Checkpoint to continue from")
    p.add_argument("--run-dir", default=None, help="Override paths.run_dir")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Metric curves over context size, or a holdout comparison")
    p.add_argument("config", help="Run config JSON")
    p.add_argument("checkpoints", nargs="+", help="NLZ1 checkpoints")
    p.add_argument("--out", default="report.csv", help="Output CSV")
    p.add_argument("--dump-dir", default=None, help="Write per-episode PGM montages here")
    p.add_argument("--holdout", default=None, help="Compare seen vs unseen checkpoints on this holdout")
    p.add_argument("--task", default=None, help="Task for a modality holdout comparison")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", help="Predict for an input given context pairs")
    p.add_argument("checkpoint", help="Neuralizer checkpoint")
    p.add_argument("--input", required=True, help="NTF1 input [3,H,W] or [B,3,H,W]")
    p.add_argument("--context", action="append", default=[], help="NTF1 context pair [4,H,W]; repeatable")
    p.add_argument("--bootstrap", type=int, default=1, help="Bootstrap replicates")
    p.add_argument("--seed", type=int, default=0, help="Bootstrap seed")
    p.add_argument("--mask", action="store_true", help="Binary mask task (threshold the output)")
    p.add_argument("--hole-channel", type=int, default=None, help="Input channel holding an inpainting hole mask")
    p.add_argument("--out", default="prediction", help="Output path prefix (.ntf and .pgm)")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("preview", help="Write an episode montage for a task")
    p.add_argument("config", help="Run config JSON")
    p.add_argument("--task", required=True, help="Task kind")
    p.add_argument("--seed", type=int, default=None, help="Episode seed (default: config seed)")
    p.add_argument("--augmented", action="store_true", help="Also write the augmented episode")
    p.add_argument("--out-dir", default="preview", help="Output directory")
    p.set_defaults(handler=cmd_preview)

    p = sub.add_parser("params", help="Parameter count and FLOP estimate")
    p.add_argument("config", help="Run config JSON")
    p.add_argument("--context-size", type=int, default=1, help="Context size N for the FLOP estimate")
    p.set_defaults(handler=cmd_params)
    return parser


def main(argv: list[str] | None = None) -> int:
    """
    Точка входа: разбирает аргументы и переводит исключения в коды выхода.

    Returns:
        int: 0 при успехе, 2 при ошибке конфигурации или данных, 3 при расхождении обучения
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.LOG_LEVEL, settings.LOG_DIR)
    try:
        return args.handler(args)
    except NeuralizerError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
