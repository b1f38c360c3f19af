"""Command-line entry point: gen-data, train, eval, project, schedule.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import tensorio
from .data import generate_synthetic, load_datasets, save_datasets
from .errors import ConfigError, GradrevError
from .model import ModelConfig
from .schedule import ScheduleState, factor
from .training import (CHECKPOINT_VERSION, TrainConfig, evaluate, load_checkpoint, metrics_csv,
                       project_latent, run_protocol, save_checkpoint, steps_csv, write_text)

MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of integers, got {text!r}")


def _write_manifest(out: Path, command: str, config: dict, seed: int, artifacts: dict,
                    started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "format_versions": {"tensor": tensorio.VERSION, "checkpoint": CHECKPOINT_VERSION,
                            "manifest": MANIFEST_VERSION},
        "timing": {"seconds": round(time.time() - started, 3)},
    }
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    # meta.json records the generator flags; no timing so reruns are byte-identical
    out = Path(args.out)
    _prepare_out(out, args.force)
    shift = args.shift
    if shift not in ("default", "identity"):
        try:
            shift = json.loads(Path(shift).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"--shift must be 'default', 'identity' or a JSON file: {e}")
    per_class = args.per_class[0] if len(args.per_class) == 1 else args.per_class
    config = {"domains": args.domains, "per_class": args.per_class, "size": args.size,
              "shift": args.shift, "classes": args.classes}
    try:
        datasets = generate_synthetic(args.domains, args.classes, per_class, args.size, shift, args.seed)
    except ConfigError as e:
        raise UsageError(str(e))
    save_datasets(datasets, out, args.seed, {"generator": config})
    for ds in datasets:
        print(f"domain {ds.domain_label}: {len(ds)} samples "
              f"(train {len(ds.train_index)}, val {len(ds.val_index)}), "
              f"class counts {np.bincount(ds.class_labels).tolist()}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = ("protocol", "epochs", "batch_size", "lr", "source_domain", "active_domains",
                "alpha", "clamp", "seed", "eval_every")


def _load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}")
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    # a run manifest carries its resolved config under "config"
    if "command" in doc and "config" in doc:
        doc = doc["config"]
    return dict(doc)


def resolve_train_config(doc: dict, args, datasets) -> TrainConfig:
    """Merge defaults, the JSON config and flags (flags win)."""
    unknown = set(doc) - set(_TRAIN_FLAGS) - {"model", "data", "init_checkpoint"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    merged = {k: doc[k] for k in _TRAIN_FLAGS if k in doc}
    for k in _TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    model = dict(doc.get("model", {}))
    # unspecified model dimensions follow the data
    model.setdefault("input_size", int(datasets[0].images.shape[-1]))
    model.setdefault("num_classes", max(2, 1 + max(int(ds.class_labels.max()) for ds in datasets)))
    model.setdefault("num_domains", max(2, 1 + max(ds.domain_label for ds in datasets)))
    try:
        return TrainConfig(**{**merged, "model": ModelConfig.from_dict(model)})
    except (TypeError, ConfigError) as e:
        raise UsageError(str(e))


def cmd_train(args) -> int:
    started = time.time()
    doc = _load_config_file(args.config) if args.config else {}
    data_root = args.data or doc.get("data")
    init_path = args.init_checkpoint or doc.get("init_checkpoint")
    protocol = args.protocol or doc.get("protocol", "baseline")
    if data_root is None:
        raise UsageError("--data is required")
    if protocol == "finetune" and not init_path:
        raise UsageError("--protocol finetune requires --init-checkpoint")
    if init_path and not Path(init_path).is_file():
        raise UsageError(f"init checkpoint {init_path} does not exist")
    if not Path(data_root).is_dir():
        raise UsageError(f"data directory {data_root} does not exist")

    datasets = load_datasets(data_root)
    init = load_checkpoint(init_path) if init_path else None
    if init is not None:
        # the network shape comes from the checkpoint being continued
        doc = {**doc, "model": init.model_config.to_dict()}
    cfg = resolve_train_config(doc, args, datasets)
    out = Path(args.out)
    _prepare_out(out, args.force)

    result = run_protocol(cfg, datasets, init=init)
    write_text(out / "metrics.csv", metrics_csv(result.history))
    write_text(out / "steps.csv", steps_csv(result.steps))
    save_checkpoint(result.checkpoint, out / "checkpoint.grda")
    config = {**cfg.to_dict(), "data": str(data_root),
              "init_checkpoint": None if init_path is None else str(init_path)}
    _write_manifest(out, "train", config, cfg.seed,
                    {"metrics": "metrics.csv", "steps": "steps.csv", "checkpoint": "checkpoint.grda"},
                    started)
    for r in result.history:
        if r.epoch == cfg.epochs:
            print(f"epoch {r.epoch} domain {r.domain}: accuracy {r.accuracy:.4f} "
                  f"clf_loss {r.clf_loss:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval / project
# ---------------------------------------------------------------------------


def _check_inputs(args) -> None:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} does not exist")
    if not Path(args.data).is_dir():
        raise UsageError(f"data directory {args.data} does not exist")


def cmd_eval(args) -> int:
    _check_inputs(args)
    ckpt = load_checkpoint(args.checkpoint)
    datasets = load_datasets(args.data)
    rows = [evaluate(ckpt.params, ds, args.split, ckpt.model_config, ckpt.epoch, ckpt.lam)
            for ds in datasets]
    print(f"{'domain':>6}  {'accuracy':>8}  {'clf_loss':>8}  {'dmn_loss':>8}")
    for r in rows:
        print(f"{r.domain:>6}  {r.accuracy:>8.4f}  {r.clf_loss:>8.4f}  {r.dmn_loss:>8.4f}")
    if args.out:
        write_text(args.out, metrics_csv(rows))
    return 0


def cmd_project(args) -> int:
    _check_inputs(args)
    ckpt = load_checkpoint(args.checkpoint)
    datasets = load_datasets(args.data)
    images, classes, domains = [], [], []
    for ds in datasets:
        if args.split == "all":
            x, y = ds.images, ds.class_labels
        else:
            x, y = ds.split(args.split)
        images.append(x)
        classes.append(y)
        domains.append(np.full(len(y), ds.domain_label))
    proj = project_latent(ckpt.params, np.concatenate(images), ckpt.model_config,
                          np.concatenate(classes), np.concatenate(domains))
    write_text(args.out, proj.to_csv())
    print(f"wrote {len(proj.coords)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def schedule_table(alpha: float, steps: int, clamp: float | None = None, points: int = 11) -> str:
    ns = sorted(set(int(round(x)) for x in np.linspace(0, steps, points)))
    lines = ["n,n/N,lambda" + (",ceiling" if clamp is not None else "")]
    for n in ns:
        state = ScheduleState(n, steps, alpha, clamp if clamp is not None else 1.0)
        lam = factor(state)
        row = f"{n},{n / steps:.6f},{lam:.6f}"
        if clamp is not None:
            row += f",{clamp * lam:.6f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def cmd_schedule(args) -> int:
    if args.steps <= 0:
        raise UsageError("--steps must be positive")
    if not args.alpha > 0:
        raise UsageError("--alpha must be positive")
    if args.clamp is not None and not args.clamp > 0:
        raise UsageError("--clamp must be positive")
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    sys.stdout.write(schedule_table(args.alpha, args.steps, args.clamp, args.points))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradrev", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--classes", type=int, default=7)
    p.add_argument("--per-class", type=_int_list, default=[20])
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--shift", default="default", help="'default', 'identity' or a JSON file of specs")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a training protocol")
    p.add_argument("--protocol", choices=("baseline", "finetune", "da"))
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config or a previous run manifest; flags override it")
    p.add_argument("--init-checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--clamp", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--source-domain", type=int)
    p.add_argument("--active-domains", type=_int_list)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every domain")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics CSV path")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="export 2-D PCA coordinates of the latent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="all")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("schedule", help="print the domain-loss weight table")
    p.add_argument("--alpha", type=float, default=10.0)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--clamp", type=float)
    p.add_argument("--points", type=int, default=11)
    p.set_defaults(func=cmd_schedule)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"{parser.prog} {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (GradrevError, OSError) as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
