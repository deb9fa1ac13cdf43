import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from threadpoolctl import threadpool_limits

from analysis import (EnsembleMember, EnsembleSpec, ensemble_eval, grad_cam_all_heads, grad_cam_split,
                      image_to_unit, write_pgm)
from checkpoint import Checkpoint, load_checkpoint, restore_model, save_checkpoint
from config import DataConfig, RunConfig, load_run_config, parse_run_config, run_config_to_dict
from data import Dataset, load_idx, normalize, synthetic_gaussians
from errors import CheckpointError, ConfigError, ContractError, RangeError, SSMLabError
from network import BackboneConfig, Network, backbone_param_count, build_network
from nn_layers import BatchNorm, Conv2d, Linear, global_avg_pool, max_pool2d
from ssm_head import SSMConfig, SSMHead, parallel_fc_param_count, ssm_param_count
from tensor_autodiff import Tensor, grad_check, mul, relu, set_default_dtype, sum as tensor_sum
from training import EpochRecord, SGDState, cross_entropy, evaluate, fit, ssm_loss

logger = logging.getLogger("ssm_lab")

GRADCHECK_THRESHOLD = 1e-4
MODEL_KEYS = ("backbone.", "head.", "ssm.")


# ═══════════════════════════════════════════════════════════════════════════════
# SHARED HELPERS
# ═══════════════════════════════════════════════════════════════════════════════

def thread_limits():
    """Cap the BLAS pool when SSM_LAB_THREADS is set."""
    raw = os.environ.get("SSM_LAB_THREADS", "").strip()
    if not raw:
        return nullcontext()
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError("SSM_LAB_THREADS", f"expected an integer, got '{raw}'")
    if threads < 1:
        raise ConfigError("SSM_LAB_THREADS", f"must be >= 1, got {threads}")
    return threadpool_limits(limits=threads)


def thread_count() -> Optional[int]:
    raw = os.environ.get("SSM_LAB_THREADS", "").strip()
    return int(raw) if raw.isdigit() else None


def apply_precision(precision: int) -> None:
    set_default_dtype(np.float32 if precision == 32 else np.float64)


def config_overrides(args) -> Dict[str, str]:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if getattr(args, "precision", None) is not None:
        overrides["precision"] = str(args.precision)
    if getattr(args, "out", None) is not None:
        overrides["out_dir"] = str(args.out)
    return overrides


def load_split(data: DataConfig, num_classes: int, split: str) -> Dataset:
    """Raw (un-normalized) dataset of one split."""
    if data.source == "synthetic":
        per_class = data.synthetic_per_class if split == "train" else data.synthetic_test_per_class
        seed = [data.seed, 0 if split == "train" else 1]
        return synthetic_gaussians(num_classes, per_class, data.image_size, seed=seed, split=split)
    images = data.train_images if split == "train" else data.test_images
    labels = data.train_labels if split == "train" else data.test_labels
    return load_idx(images, labels, num_classes=num_classes, split=split)


def _to_json(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def append_records(path: Path, records: List[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, default=_to_json) + "\n")


def report_path(args, command: str, default_dir: Optional[Path] = None) -> Optional[Path]:
    """`<--out>/<command>.jsonl`, else `<default_dir>/<command>.jsonl` when a default is given."""
    folder = Path(args.out) if getattr(args, "out", None) else default_dir
    return folder / f"{command}.jsonl" if folder is not None else None


def member_name(path: str) -> str:
    """Run folder plus file name, so same-named checkpoints from different runs stay apart."""
    path = Path(path)
    return f"{path.parent.name}/{path.name}" if path.parent.name else path.name


def model_from_checkpoint(path: str, precision: Optional[int] = None) -> Tuple[Network, RunConfig, Checkpoint]:
    checkpoint = load_checkpoint(path)
    try:
        config = parse_run_config(checkpoint.config, check_paths=False)
    except ConfigError as e:
        raise CheckpointError(f"{path}: stored configuration is invalid ({e})")
    apply_precision(precision or config.precision)
    model = build_network(config.backbone, config.head, config.ssm, checkpoint.input_shape, config.train.seed)
    restore_model(model, checkpoint)
    model.eval()
    return model, config, checkpoint


def data_config_for(args, config: RunConfig) -> DataConfig:
    """Dataset section from --config when given, otherwise the one stored in the checkpoint."""
    if getattr(args, "config", None):
        return load_run_config(args.config).data
    return config.data


def format_pct(value: float) -> str:
    return f"{100.0 * value:.2f}%"


def print_report(report, label: str = "Combined") -> None:
    print(f"📊 {label} accuracy: {format_pct(report.combined_accuracy)}  (loss {report.loss:.4f}, "
          f"{report.count} samples)")
    for i, accuracy in enumerate(report.head_accuracies, start=1):
        print(f"   FC{i}: {format_pct(accuracy)}")
    if report.oracle_accuracy is not None:
        print(f"   Oracle: {format_pct(report.oracle_accuracy)}")


# ═══════════════════════════════════════════════════════════════════════════════
# TRAIN
# ═══════════════════════════════════════════════════════════════════════════════

def cmd_train(args) -> int:
    """Train a model from a config file and write checkpoints plus metrics into the run folder."""
    config = load_run_config(args.config, config_overrides(args))
    apply_precision(config.precision)
    started = time.time()

    train_raw = load_split(config.data, config.ssm.num_classes, "train")
    test_raw = load_split(config.data, config.ssm.num_classes, "test")
    train_set = normalize(train_raw)
    test_set = normalize(test_raw, train_set.stats)
    model = build_network(config.backbone, config.head, config.ssm, train_set.image_shape, config.train.seed)
    echo = run_config_to_dict(config)

    start_epoch, state, best = 0, SGDState(), None
    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        stored = {k: v for k, v in checkpoint.config.items() if k.startswith(MODEL_KEYS)}
        wanted = {k: v for k, v in echo.items() if k.startswith(MODEL_KEYS)}
        if stored != wanted:
            changed = sorted(k for k in wanted if stored.get(k) != wanted[k])
            raise CheckpointError(f"{args.resume} was written for a different model ({', '.join(changed)})")
        if checkpoint.rng.get("seed", config.train.seed) != config.train.seed:
            raise ConfigError("train.seed", f"resume checkpoint was trained with seed {checkpoint.rng['seed']}")
        restore_model(model, checkpoint)
        start_epoch, state, best = checkpoint.epoch, checkpoint.sgd_state(), checkpoint.best_metric

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    kept = []
    if start_epoch and metrics_path.exists():
        kept = [line for line in metrics_path.read_text().splitlines()
                if line.strip() and json.loads(line)["epoch"] < start_epoch]
    metrics_path.write_text("".join(line + "\n" for line in kept))

    print(f"📁 Training {config.backbone.kind} + {config.head.kind} on {len(train_set)} samples "
          f"({len(test_set)} for evaluation), {model.num_parameters():,} parameters")
    if start_epoch:
        print(f"↩️  Resuming from {args.resume} at epoch {start_epoch + 1}")
    print("=" * 60)

    def meta(epoch: int, best_metric: Optional[float]) -> dict:
        return dict(epoch=epoch, rng={"seed": config.train.seed, "next_epoch": epoch},
                    input_shape=train_set.image_shape, stats=train_set.stats, best_metric=best_metric)

    def on_epoch_end(record: EpochRecord, sgd_state: SGDState) -> None:
        nonlocal best
        append_records(metrics_path, [record.to_record()])
        metric = record.eval.combined_accuracy if record.eval else -record.train_loss
        improved = best is None or metric > best
        if improved:
            best = metric
        completed = record.epoch + 1
        save_checkpoint(out_dir / "checkpoint_last.ckpt", model, sgd_state, echo, **meta(completed, best))
        if improved:
            save_checkpoint(out_dir / "checkpoint_best.ckpt", model, sgd_state, echo, **meta(completed, best))
        eval_text = f", eval {format_pct(record.eval.combined_accuracy)}" if record.eval else ""
        print(f"✅ Epoch {completed}/{config.train.epochs}: lr {record.lr:.4g}, loss {record.train_loss:.4f}, "
              f"train {format_pct(record.train_accuracy)}{eval_text}{' 💾' if improved else ''}")

    fit(model, train_set, config.train, eval_dataset=test_set, start_epoch=start_epoch, state=state,
        on_epoch_end=on_epoch_end, parallel_data=args.parallel_data, n_jobs=thread_count(),
        progress=not args.quiet and sys.stderr.isatty())
    save_checkpoint(out_dir / "checkpoint_final.ckpt", model, state, echo,
                    **meta(max(start_epoch, config.train.epochs), best))

    print("\n" + "=" * 60)
    print_report(evaluate(model, test_set, config.train.eval_batch_size, config.train.scheme))
    print(f"💾 Artifacts in {out_dir}")
    print(f"⏱️  Training time: {time.time() - started:.2f} seconds")
    return 0


# ═══════════════════════════════════════════════════════════════════════════════
# EVAL / GRADCAM / ENSEMBLE
# ═══════════════════════════════════════════════════════════════════════════════

def cmd_eval(args) -> int:
    """Score one checkpoint on a split, per head and combined."""
    model, config, checkpoint = model_from_checkpoint(args.checkpoint, args.precision)
    raw = load_split(data_config_for(args, config), config.ssm.num_classes, args.split)
    dataset = normalize(raw, checkpoint.stats)
    report = evaluate(model, dataset, config.train.eval_batch_size, config.train.scheme)
    print(f"📁 {args.checkpoint} on the {args.split} split")
    print_report(report)
    path = report_path(args, "eval", Path(config.out_dir))
    append_records(path, [dict(report.to_record(), checkpoint=str(args.checkpoint), split=args.split)])
    print(f"💾 Report appended to {path}")
    return 0


def cmd_gradcam(args) -> int:
    """Write per-head Grad-CAM maps for a few images as PGM files."""
    model, config, checkpoint = model_from_checkpoint(args.checkpoint, args.precision)
    if not model.supports_grad_cam:
        raise ContractError("gradcam needs a model with the cnn backbone")
    raw = load_split(data_config_for(args, config), config.ssm.num_classes, args.split)
    dataset = normalize(raw, checkpoint.stats)
    if not 0 <= args.image < len(dataset):
        raise RangeError(f"--image {args.image} outside [0, {len(dataset)})")
    image = dataset.images[args.image]
    target = int(dataset.labels[args.image]) if args.target_class is None else args.target_class

    if args.head is None:
        maps = grad_cam_all_heads(model, image, target)
    else:
        maps = [grad_cam_split(model, image, target, args.head)]

    out_dir = Path(args.out) if args.out else Path(config.out_dir) / "gradcam"
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"image{args.image}_class{target}"
    write_pgm(out_dir / f"{stem}_input.pgm", image_to_unit(image, checkpoint.stats))
    for cam in maps:
        lo, hi = cam.channel_range
        write_pgm(out_dir / f"{stem}_head{cam.head_index}.pgm", cam.values)
        print(f"✅ FC{cam.head_index}: channels [{lo}, {hi}) -> {stem}_head{cam.head_index}.pgm")
    print(f"💾 {len(maps) + 1} file(s) written to {out_dir}")
    return 0


def cmd_ensemble(args) -> int:
    """Average the combined outputs of two or more checkpoints."""
    paths = args.checkpoint or []
    if len(paths) < 2:
        raise ContractError(f"ensemble needs at least 2 --checkpoint values, got {len(paths)}")
    members, first_config = [], None
    for path in paths:
        model, config, checkpoint = model_from_checkpoint(path, args.precision)
        first_config = first_config or config
        members.append(EnsembleMember(model, member_name(path), checkpoint.stats))
    spec = EnsembleSpec(members, args.rule)
    raw = load_split(data_config_for(args, first_config), first_config.ssm.num_classes, args.split)
    report = ensemble_eval(spec, raw, first_config.train.eval_batch_size)

    for name, accuracy in zip(report.member_names, report.member_accuracies):
        print(f"   {name}: {format_pct(accuracy)}")
    print(f"📊 Ensemble ({report.rule}) accuracy: {format_pct(report.accuracy)} on {report.count} samples")
    path = report_path(args, "ensemble")
    if path:
        append_records(path, [dict(report.to_record(), split=args.split)])
    return 0


# ═══════════════════════════════════════════════════════════════════════════════
# PARAMS
# ═══════════════════════════════════════════════════════════════════════════════

def parameter_table(config: RunConfig) -> pd.DataFrame:
    """One row per classifier kind with its head parameter count."""
    ssm, backbone = config.ssm, config.backbone
    width, classes = ssm.num_channels, ssm.num_classes
    input_shape = (backbone.in_channels, config.data.image_size, config.data.image_size)
    body = backbone_param_count(backbone, input_shape)
    rows = [(f"{n}FC", parallel_fc_param_count(width, classes, n)) for n in (1, 2, 3)]
    rows.append((f"SSM (H={ssm.num_heads})", ssm_param_count(ssm, include_bn=True)))
    rows.append((f"SSM (H={ssm.num_heads}, no BN)", ssm_param_count(ssm, include_bn=False)))
    single = rows[0][1]
    table = pd.DataFrame(rows, columns=["classifier", "head_params"])
    table["backbone_params"] = body
    table["total_params"] = table["head_params"] + body
    table["delta_vs_1fc"] = table["head_params"] - single
    return table


def cmd_params(args) -> int:
    """Print the parameter comparison table."""
    config = load_run_config(args.config, config_overrides(args), check_paths=False)
    table = parameter_table(config)
    shown = table.copy()
    for column in ("head_params", "backbone_params", "total_params", "delta_vs_1fc"):
        shown[column] = shown[column].map(lambda v: f"{v:,} ({v / 1e6:.3f}M)")
    print(f"📊 Parameters for C={config.ssm.num_channels}, classes={config.ssm.num_classes}, "
          f"bn_relu_on_last={str(config.ssm.bn_relu_on_last).lower()}")
    print("=" * 60)
    print(shown.to_string(index=False))
    path = report_path(args, "params")
    if path:
        append_records(path, table.to_dict(orient="records"))
    return 0


# ═══════════════════════════════════════════════════════════════════════════════
# GRADCHECK
# ═══════════════════════════════════════════════════════════════════════════════

def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    return tensor_sum(mul(out, Tensor(rng.normal(size=out.shape))))


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _check_linear(config: RunConfig, rng) -> float:
    layer, x = Linear(5, 3, rng=rng), _leaf(rng, 4, 5)
    layer.bias.data = rng.normal(size=3)
    weights = rng.normal(size=(4, 3))
    return grad_check(lambda: tensor_sum(mul(layer(x), Tensor(weights))), [x] + layer.parameters())


def _check_conv2d(config: RunConfig, rng) -> float:
    layer, x = Conv2d(3, 4, 3, stride=2, padding=1, rng=rng), _leaf(rng, 2, 3, 5, 5)
    weights = rng.normal(size=(2, 4, 3, 3))
    return grad_check(lambda: tensor_sum(mul(layer(x), Tensor(weights))), [x] + layer.parameters())


def _check_batchnorm(shape: Tuple[int, ...], mode: str):
    def check(config: RunConfig, rng) -> float:
        layer, x = BatchNorm(shape[1]), _leaf(rng, *shape)
        layer.gamma.data = rng.uniform(0.5, 1.5, size=shape[1])
        layer.beta.data = rng.normal(size=shape[1])
        layer.running_mean.data = rng.normal(size=shape[1])
        layer.running_var.data = rng.uniform(0.5, 2.0, size=shape[1])
        layer.set_mode(mode)
        weights = rng.normal(size=shape)
        return grad_check(lambda: tensor_sum(mul(layer(x), Tensor(weights))), [x] + layer.parameters())
    return check


def _check_relu(config: RunConfig, rng) -> float:
    magnitude = rng.uniform(0.1, 1.0, size=(4, 6))
    x = Tensor(magnitude * rng.choice([-1.0, 1.0], size=(4, 6)), requires_grad=True)
    weights = rng.normal(size=(4, 6))
    return grad_check(lambda: tensor_sum(mul(relu(x), Tensor(weights))), [x])


def _check_max_pool2d(config: RunConfig, rng) -> float:
    # well-separated values so no perturbation changes a window's winner
    x = Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True)
    weights = rng.normal(size=(2, 3, 3, 3))
    return grad_check(lambda: tensor_sum(mul(max_pool2d(x), Tensor(weights))), [x])


def _check_global_avg_pool(config: RunConfig, rng) -> float:
    x = _leaf(rng, 2, 3, 4, 4)
    weights = rng.normal(size=(2, 3))
    return grad_check(lambda: tensor_sum(mul(global_avg_pool(x), Tensor(weights))), [x])


def _check_cross_entropy(config: RunConfig, rng) -> float:
    logits, labels = _leaf(rng, 4, 5), rng.integers(0, 5, size=4)
    return grad_check(lambda: cross_entropy(logits, labels), [logits])


def _check_ssm_head(config: RunConfig, rng) -> float:
    heads = config.ssm.num_heads
    ssm = SSMConfig(num_channels=2 * heads, num_heads=heads, num_classes=3,
                    bn_relu_on_last=config.ssm.bn_relu_on_last)
    head, features = SSMHead(ssm, rng=rng), _leaf(rng, 6, 2 * heads)
    labels = rng.integers(0, 3, size=6)
    return grad_check(lambda: ssm_loss(head(features), labels, config.train.scheme),
                      [features] + head.parameters())


def _check_backbone_ssm(config: RunConfig, rng) -> float:
    heads = config.ssm.num_heads
    backbone = BackboneConfig("cnn", (2, 2 * heads), 1)
    ssm = SSMConfig(num_channels=2 * heads, num_heads=heads, num_classes=3,
                    bn_relu_on_last=config.ssm.bn_relu_on_last)
    model = build_network(backbone, config.head, ssm, (1, 6, 6), seed=int(rng.integers(1 << 31)))
    images, labels = Tensor(rng.normal(size=(4, 1, 6, 6))), rng.integers(0, 3, size=4)
    return grad_check(lambda: ssm_loss(model(images), labels, config.train.scheme), model.parameters())


GRADCHECKS: Dict[str, Callable[[RunConfig, np.random.Generator], float]] = {
    "linear": _check_linear,
    "conv2d": _check_conv2d,
    "batchnorm_train_1d": _check_batchnorm((6, 4), "train"),
    "batchnorm_train_2d": _check_batchnorm((3, 2, 4, 4), "train"),
    "batchnorm_eval": _check_batchnorm((5, 3), "eval"),
    "relu": _check_relu,
    "max_pool2d": _check_max_pool2d,
    "global_avg_pool": _check_global_avg_pool,
    "cross_entropy": _check_cross_entropy,
    "ssm_head": _check_ssm_head,
    "backbone_ssm": _check_backbone_ssm,
}


def run_gradchecks(config: RunConfig) -> Dict[str, float]:
    set_default_dtype(np.float64)
    results = {}
    for i, (name, check) in enumerate(GRADCHECKS.items()):
        results[name] = check(config, np.random.default_rng([config.train.seed, i]))
    return results


def cmd_gradcheck(args) -> int:
    """Compare analytic and numeric gradients on a small random batch."""
    config = load_run_config(args.config, config_overrides(args), check_paths=False)
    started = time.time()
    results = run_gradchecks(config)
    failed = [name for name, error in results.items() if error > GRADCHECK_THRESHOLD]
    for name, error in results.items():
        print(f"{'❌' if name in failed else '✅'} {name:<20} max rel. error {error:.3e}")
    print("=" * 60)
    print(f"📊 Summary: {len(results) - len(failed)}/{len(results)} checks below {GRADCHECK_THRESHOLD:g}")
    print(f"⏱️  Processing time: {time.time() - started:.2f} seconds")
    path = report_path(args, "gradcheck")
    if path:
        append_records(path, [{"check": n, "max_relative_error": e, "passed": n not in failed}
                              for n, e in results.items()])
    return 1 if failed else 0


# ═══════════════════════════════════════════════════════════════════════════════
# ENTRY POINT
# ═══════════════════════════════════════════════════════════════════════════════

COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "ensemble": cmd_ensemble,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssm_lab",
        description="Train and analyse Split-and-Share classifier heads",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python ssm_lab.py train --config configs/desk.cfg
  python ssm_lab.py eval --checkpoint runs/desk/checkpoint_best.ckpt
  python ssm_lab.py gradcam --checkpoint runs/desk/checkpoint_final.ckpt --image 3
  python ssm_lab.py ensemble --checkpoint a.ckpt --checkpoint b.ckpt
  python ssm_lab.py params --config configs/imagenet_params.cfg
  python ssm_lab.py gradcheck

Exit codes: 0 ok, 1 gradcheck failure or usage error, 2 config error,
3 dataset error, 4 checkpoint or file error.
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint: bool = False):
        p.add_argument("--config", help="Run configuration file (key = value)")
        p.add_argument("--out", help="Output directory")
        p.add_argument("--seed", type=int, help="Override train.seed")
        p.add_argument("--precision", type=int, choices=(32, 64), help="Tensor precision in bits")
        p.add_argument("--quiet", action="store_true", help="No progress bars")
        p.add_argument("--verbose", "-v", action="store_true", help="Log library diagnostics")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="Checkpoint file")
            p.add_argument("--split", choices=("train", "test"), default="test", help="Dataset split")

    train = sub.add_parser("train", help="Train a model")
    common(train)
    train.add_argument("--resume", help="Continue from a checkpoint_last.ckpt")
    train.add_argument("--parallel-data", action="store_true", help="Prepare batches on worker threads")

    common(sub.add_parser("eval", help="Evaluate a checkpoint"), checkpoint=True)

    gradcam = sub.add_parser("gradcam", help="Write split-wise Grad-CAM maps as PGM files")
    common(gradcam, checkpoint=True)
    gradcam.add_argument("--image", type=int, default=0, help="Image index in the split")
    gradcam.add_argument("--class", dest="target_class", type=int, help="Target class (default: the label)")
    gradcam.add_argument("--head", type=int, help="Head index, 1-based (default: all heads)")

    ensemble = sub.add_parser("ensemble", help="Evaluate an ensemble of checkpoints")
    common(ensemble)
    ensemble.add_argument("--checkpoint", action="append", help="Member checkpoint (repeat)")
    ensemble.add_argument("--split", choices=("train", "test"), default="test", help="Dataset split")
    ensemble.add_argument("--rule", choices=("mean_softmax", "mean_logits"), default="mean_softmax")

    common(sub.add_parser("params", help="Print the classifier parameter table"))
    common(sub.add_parser("gradcheck", help="Finite-difference check of every layer"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        with thread_limits():
            return COMMANDS[args.command](args)
    except SSMLabError as e:
        print(f"❌ Error: {e}")
        return e.exit_code
    except OSError as e:
        print(f"❌ File error: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
