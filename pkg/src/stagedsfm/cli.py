"""Command-line surface: dataset synthesis, training, evaluation, ablations.

Subcommands: synth, train, eval-depth, eval-traj, eval-intrinsics, ablate.
Every command writes into its --out directory and refuses to overwrite
existing outputs without --force.  Config precedence: CLI flag > config
file (key = value lines) > built-in default; the effective configuration is
echoed into the run manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import shutil
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .data import (SequenceRecord, SyntheticSceneSpec, generate_synthetic,
                   load_sequence_dir, split, write_sequence_dir)
from .metrics import DepthEvalConfig, ate, pre
from .trainer import (StepPlan, TrainConfig, Trainer, ablation_suite,
                      evaluate_depth, gt_trajectory, load_checkpoint,
                      predict_depths, predict_intrinsics, predict_trajectory)
from .metrics import _umeyama


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 320x256, got '{text}'") from exc


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("splits must be three comma-separated ratios")
    return tuple(parts)  # type: ignore[return-value]


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise SystemExit(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_config_file(path: str | None) -> dict:
    """key = value lines mirroring TrainConfig fields; '#' starts a comment."""
    if path is None:
        return {}
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    casts = {"epochs": int, "batch_size": int, "decay_epoch": int, "lora_rank": int,
             "warmup_steps": int, "seed": int, "app_warmup_batches": int,
             "lr": float, "lr_decay": float, "vis_threshold": float,
             "grad_clip": float, "app_lr_scale": float, "flow_lr_scale": float,
             "motion_convention": str, "step_mode": str}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields or key not in casts:
            raise SystemExit(f"{path}:{lineno}: unknown config key '{key}'")
        out[key] = casts[key](value)
    return out


def _effective_config(args: argparse.Namespace) -> TrainConfig:
    merged = _read_config_file(getattr(args, "config", None))
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr"),
                      ("lora_rank", "lora_rank"), ("warmup", "warmup_steps"),
                      ("seed", "seed"), ("decay_epoch", "decay_epoch"),
                      ("app_warmup", "app_warmup_batches"),
                      ("step_mode", "step_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    if "decay_epoch" not in merged and "epochs" in merged:
        merged["decay_epoch"] = min(TrainConfig.decay_epoch, merged["epochs"] - 1)
    return TrainConfig(**merged)


def _write_manifest(out: Path, config: TrainConfig, plan: StepPlan | None,
                    extra: dict, end_time: str | None = None) -> Path:
    manifest = {
        "config": dataclasses.asdict(config),
        "plan": dataclasses.asdict(plan) if plan is not None else None,
        "seed": config.seed,
        "code_version": __version__,
        "start_time": extra.pop("start_time"),
        "end_time": end_time,
        "outputs": extra.pop("outputs"),
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def _verify_json(*paths: Path) -> None:
    for p in paths:
        json.loads(p.read_text())


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_split(args: argparse.Namespace) -> SequenceRecord:
    record = load_sequence_dir(args.data)
    if getattr(args, "split", "all") == "all":
        return record
    train, val, test = split(record, args.splits)
    return {"train": train, "val": val, "test": test}[args.split]


# -- commands ----------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    w, h = args.size
    spec = SyntheticSceneSpec(width=w, height=h, frames=args.frames, seed=args.seed,
                              illumination_amplitude=args.illumination,
                              specular_blobs=args.specular)
    record = generate_synthetic(spec)
    write_sequence_dir(record, out)
    load_sequence_dir(out)  # verify everything parses back
    print(f"wrote {args.frames} frames ({w}x{h}) to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    config = _effective_config(args)
    plan = StepPlan.parse(args.order, finetune_qkv=not args.no_qkv,
                          multiscale_iid=not args.no_multiscale,
                          use_iid=not args.no_iid)
    record = load_sequence_dir(args.data)
    train_rec, _, _ = split(record, args.splits)

    start = _now()
    outputs = {"losses": str(out / "losses.jsonl"),
               "checkpoints": str(out / "checkpoints")}
    _write_manifest(out, config, plan, {"start_time": start, "outputs": outputs,
                                        "data": str(args.data)})
    trainer = Trainer(config, plan)
    checkpoints = trainer.train(train_rec, out)
    _write_manifest(out, config, plan, {"start_time": start, "outputs": outputs,
                                        "data": str(args.data)}, end_time=_now())
    _verify_json(out / "manifest.json")
    if not (out / "losses.jsonl").exists() or not checkpoints:
        raise SystemExit("training outputs missing")
    print(f"trained {config.epochs} epochs (plan {plan.label()}); "
          f"final checkpoint {checkpoints[-1]}")
    return 0


def cmd_eval_depth(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    trainer = load_checkpoint(args.checkpoint)
    record = _load_split(args)
    cfg = DepthEvalConfig(median_scaling=not args.no_median_scaling)
    metrics = evaluate_depth(trainer.nets, record, cfg)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    preds = predict_depths(trainer.nets, record)
    stride = max(1, len(preds) // 4)
    for i in range(0, len(preds), stride):
        plt.imsave(plots / f"depth_{i:06d}.png", preds[i], cmap="magma")
    _verify_json(out / "metrics.json")
    print(json.dumps(metrics, indent=1))
    return 0


def cmd_eval_traj(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    trainer = load_checkpoint(args.checkpoint)
    record = _load_split(args)
    pred = predict_trajectory(trainer.nets, record,
                              trainer.config.motion_convention)
    gt = gt_trajectory(record)
    metrics = {"ate": ate(pred, gt, align=args.align),
               "ate_sim3": ate(pred, gt, align="sim3"),
               "ate_none": ate(pred, gt, align="none"),
               "align": args.align, "frames": len(record)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    shown = pred
    if args.align == "sim3":
        s, r, t = _umeyama(pred, gt)
        shown = (s * (r @ pred.T)).T + t
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt[:, 0], gt[:, 1], label="ground truth")
    ax.plot(shown[:, 0], shown[:, 1], label="predicted")
    ax.set_aspect("equal")
    ax.legend()
    fig.savefig(plots / "trajectory.png", dpi=120)
    plt.close(fig)
    _verify_json(out / "metrics.json")
    print(json.dumps({"ate": metrics["ate"]}, indent=1))
    return 0


def cmd_eval_intrinsics(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    trainer = load_checkpoint(args.checkpoint)
    record = _load_split(args)
    if record.intrinsics is None:
        raise SystemExit("data has no ground-truth intrinsics")
    predicted = predict_intrinsics(trainer.nets, record)
    errors = pre(predicted, record.intrinsics)
    table = {
        "gt": {k: float(getattr(record.intrinsics, k)) for k in ("fx", "fy", "cx", "cy")},
        "pred": {k: float(getattr(predicted, k)) for k in ("fx", "fy", "cx", "cy")},
        "pre": errors,
    }
    (out / "metrics.json").write_text(json.dumps(table, indent=1))
    _verify_json(out / "metrics.json")
    header = "          " + "".join(f"{k:>10}" for k in ("fx", "fy", "cx", "cy"))
    lines = [header]
    for row in ("gt", "pred"):
        lines.append(f"{row:>10}" + "".join(f"{table[row][k]:>10.4f}" for k in table[row]))
    lines.append(f"{'PRE %':>10}" + "".join(f"{errors[k]:>10.2f}" for k in errors))
    print("\n".join(lines))
    return 0


def _parse_plans(text: str, base_flags: dict) -> list[StepPlan]:
    """Semicolon-separated orders; '@no-qkv', '@no-multiscale', '@no-iid' suffixes."""
    plans = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        flags = dict(base_flags)
        if "@" in chunk:
            chunk, marks = chunk.split("@", 1)
            for mark in marks.split("+"):
                key = {"no-qkv": "finetune_qkv", "no-multiscale": "multiscale_iid",
                       "no-iid": "use_iid"}.get(mark)
                if key is None:
                    raise SystemExit(f"unknown plan flag '{mark}'")
                flags[key] = False
        plans.append(StepPlan.parse(chunk, **flags))
    return plans


def cmd_ablate(args: argparse.Namespace) -> int:
    out = _prepare_out(args.out, args.force)
    config = _effective_config(args)
    base_flags = {"finetune_qkv": not args.no_qkv,
                  "multiscale_iid": not args.no_multiscale,
                  "use_iid": not args.no_iid}
    if args.plans_file:
        entries = json.loads(Path(args.plans_file).read_text())
        plans = [StepPlan.parse(e["order"], **{**base_flags, **e.get("flags", {})})
                 for e in entries]
    else:
        plans = _parse_plans(args.plans, base_flags)

    record = load_sequence_dir(args.data)
    train_rec, val_rec, _ = split(record, args.splits)
    start = _now()
    outputs = {"table": str(out / "ablation.json"), "text": str(out / "ablation.txt")}
    _write_manifest(out, config, None, {"start_time": start, "outputs": outputs,
                                        "plans": [p.label() for p in plans],
                                        "data": str(args.data)})
    rows = ablation_suite(train_rec, val_rec, plans, config)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))

    cols = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta")
    width = max(len(r["plan"]) for r in rows) + 2
    lines = ["Steps".ljust(width) + "".join(f"{c:>10}" for c in cols)]
    for row in rows:
        if "error" in row:
            lines.append(row["plan"].ljust(width) + f"  {row['error']}")
        else:
            lines.append(row["plan"].ljust(width)
                         + "".join(f"{row[c]:>10.4f}" for c in cols))
    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    _write_manifest(out, config, None, {"start_time": start, "outputs": outputs,
                                        "plans": [p.label() for p in plans],
                                        "data": str(args.data)}, end_time=_now())
    _verify_json(out / "ablation.json", out / "manifest.json")
    print("\n".join(lines))
    return 0


# -- parser ------------------------------------------------------------------


def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lora-rank", dest="lora_rank", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--decay-epoch", dest="decay_epoch", type=int, default=None)
    p.add_argument("--app-warmup", dest="app_warmup", type=int, default=None,
                   help="freeze the appearance net for the first N batches")
    p.add_argument("--step-mode", dest="step_mode", choices=("per_batch", "per_epoch"),
                   default=None)
    p.add_argument("--no-qkv", action="store_true")
    p.add_argument("--no-multiscale", action="store_true")
    p.add_argument("--no-iid", action="store_true")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--splits", type=_parse_ratios, default=(0.8, 0.1, 0.1))


def _add_eval_flags(p: argparse.ArgumentParser, default_split: str) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"),
                   default=default_split)
    p.add_argument("--splits", type=_parse_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagedsfm")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic ground-truth sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--illumination", type=float, default=0.1)
    p.add_argument("--specular", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the staged training schedule")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--order", default="I,II,III")
    p.add_argument("--force", action="store_true")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-depth", help="depth metrics + colormapped maps")
    _add_eval_flags(p, "val")
    p.add_argument("--no-median-scaling", action="store_true")
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-traj", help="trajectory ATE + plot")
    _add_eval_flags(p, "test")
    p.add_argument("--align", choices=("sim3", "none"), default="sim3")
    p.set_defaults(func=cmd_eval_traj)

    p = sub.add_parser("eval-intrinsics", help="intrinsics percentage errors")
    _add_eval_flags(p, "test")
    p.set_defaults(func=cmd_eval_intrinsics)

    p = sub.add_parser("ablate", help="run a manifest of step plans")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plans",
                   default="I,II,III;I,{II,III};{I,II},III;III,I,II;I,III")
    p.add_argument("--plans-file", default=None)
    p.add_argument("--force", action="store_true")
    _add_common_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
