"""Three-step per-epoch training schedule with per-step freeze sets,
independent optimizers, fusion plans for ablations, checkpointing and
evaluation drivers.

Step I trains the optical-flow and appearance networks on flow registration;
step II trains the decomposition network on multiscale reconstruction;
step III trains everything except the optical-flow network on rigid
transformation alignments.  A fused group evaluates the fused loss with the
union freeze set and a single update.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor

from . import losses as L
from .data import SequenceRecord
from .geometry import (EgoMotion, Intrinsics, flow_to_grid, scale_pyramid,
                       visibility_from_backward_flow, warp_bilinear)
from .losses import LossReport, LossWeights
from .metrics import DepthEvalConfig, compose_trajectory, depth_metrics
from .networks import AdapterRegistry, NetworkConfig, build_networks, inject_adapters

STEPS = ("I", "II", "III")

# Modules trained per step; everything else is frozen for that step.
FREEZE_SETS: dict[str, tuple[str, ...]] = {
    "I": ("flow", "appearance"),
    "II": ("iid",),
    "III": ("depth", "pose", "appearance", "iid"),
}


class ResourceExhausted(RuntimeError):
    """An over-fused plan ran out of memory."""


@dataclass
class StepPlan:
    """Ordered step groups; a group with more than one step is fused."""

    groups: tuple[tuple[str, ...], ...] = (("I",), ("II",), ("III",))
    finetune_qkv: bool = True
    multiscale_iid: bool = True
    use_iid: bool = True

    def __post_init__(self):
        seen: list[str] = []
        for group in self.groups:
            if not group:
                raise ValueError("empty step group")
            for step in group:
                if step not in STEPS:
                    raise ValueError(f"unknown step '{step}'")
                if step in seen:
                    raise ValueError(f"step {step} appears more than once")
                seen.append(step)

    @classmethod
    def parse(cls, text: str, **flags) -> "StepPlan":
        """Parse the order grammar: comma-separated groups, braces fuse.

        Example: "I,{II,III}" -> [("I",), ("II", "III")].
        """
        groups: list[tuple[str, ...]] = []
        rest = text.replace(" ", "")
        while rest:
            if rest.startswith("{"):
                end = rest.find("}")
                if end < 0:
                    raise ValueError(f"unbalanced braces in order '{text}'")
                groups.append(tuple(rest[1:end].split(",")))
                rest = rest[end + 1:].lstrip(",")
            else:
                head = rest.split(",", 1)
                groups.append((head[0],))
                rest = head[1] if len(head) > 1 else ""
        return cls(groups=tuple(groups), **flags)

    def label(self) -> str:
        parts = ["{" + ",".join(g) + "}" if len(g) > 1 else g[0] for g in self.groups]
        return "->".join(parts)

    def trains(self, step: str) -> bool:
        return any(step in g for g in self.groups)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay: float = 0.1
    decay_epoch: int = 10
    lora_rank: int = 4
    warmup_steps: int = 20000
    seed: int = 0
    vis_threshold: float = 0.75
    grad_clip: float = 1.0                       # max gradient norm per update; 0 disables
    app_warmup_batches: int = 0                  # appearance net frozen for the first N batches
    app_lr_scale: float = 0.1                    # two-time-scale: appearance updates slower
    flow_lr_scale: float = 0.1                   # flow likewise (dense warp players walk at high lr)
    motion_convention: str = "target_to_source"  # or "source_to_target"
    step_mode: str = "per_batch"                 # or "per_epoch"
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lora_rank"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lr and lr_decay must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0 <= self.decay_epoch < self.epochs:
            raise ValueError("need 0 <= decay_epoch < epochs")
        if self.motion_convention not in ("target_to_source", "source_to_target"):
            raise ValueError(f"unknown motion convention '{self.motion_convention}'")
        if self.step_mode not in ("per_batch", "per_epoch"):
            raise ValueError(f"unknown step mode '{self.step_mode}'")


class Batch(NamedTuple):
    target: Tensor                 # (B, 3, H, W)
    sources: tuple[Tensor, ...]    # temporal neighbours, each (B, 3, H, W)


def _frame_tensor(record: SequenceRecord, indices: Sequence[int]) -> Tensor:
    stack = np.stack([record.frames[i] for i in indices])
    return torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()


def make_batches(record: SequenceRecord, batch_size: int, *, seed: int = 0,
                 epoch: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    """Deterministic batches of (prev, target, next) triplets.

    Only interior frames serve as targets so both temporal neighbours exist.
    """
    targets = np.arange(1, len(record) - 1)
    if len(targets) == 0:
        raise ValueError("record too short for triplet batches")
    if shuffle:
        rng = np.random.default_rng(np.random.PCG64(100003 * seed + epoch))
        targets = rng.permutation(targets)
    for start in range(0, len(targets), batch_size):
        chunk = [int(i) for i in targets[start:start + batch_size]]
        yield Batch(_frame_tensor(record, chunk),
                    (_frame_tensor(record, [i - 1 for i in chunk]),
                     _frame_tensor(record, [i + 1 for i in chunk])))


def _group_key(group: tuple[str, ...]) -> str:
    return "+".join(group)


class Trainer:
    """Owns the networks, the per-group optimizers and the step logic."""

    def __init__(self, config: TrainConfig, plan: StepPlan | None = None,
                 weights: LossWeights | None = None):
        self.config = config
        self.plan = plan or StepPlan()
        self.weights = weights or LossWeights()
        torch.manual_seed(config.seed)
        self.nets = build_networks(config.network)
        self.registry: AdapterRegistry = inject_adapters(
            self.nets["depth"], config.lora_rank, config.warmup_steps,
            include_qkv=self.plan.finetune_qkv)
        self.optimizers: dict[str, torch.optim.Adam] = {}
        for group in self.plan.groups:
            # the appearance net trains on its own (slower) time scale so it
            # cannot chase per-batch misalignment faster than geometry settles
            scales = {"appearance": config.app_lr_scale, "flow": config.flow_lr_scale}
            param_groups = []
            for m in self._trainable_modules(group):
                scale = scales.get(m, 1.0)
                params = [p for p in self.nets[m].parameters() if p.requires_grad]
                param_groups.append({"params": params, "lr": config.lr * scale,
                                     "lr_scale": scale})
            self.optimizers[_group_key(group)] = torch.optim.Adam(
                param_groups, lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
        self.updates = {key: 0 for key in self.optimizers}
        self.batches_seen = 0

    def _trainable_modules(self, group: tuple[str, ...]) -> tuple[str, ...]:
        mods: list[str] = []
        for step in group:
            for m in FREEZE_SETS[step]:
                if m == "iid" and not self.plan.use_iid:
                    continue
                if m not in mods:
                    mods.append(m)
        return tuple(mods)

    # -- per-step forward passes ------------------------------------------

    def _visibility(self, flow_bwd: Tensor) -> Tensor:
        return visibility_from_backward_flow(flow_bwd, self.config.vis_threshold)

    def _forward_step_I(self, batch: Batch) -> LossReport:
        reports = []
        for source in batch.sources:
            flow_fwd, flow_bwd = self.nets["flow"](batch.target, source)
            app = self.nets["appearance"](batch.target, source)
            with torch.no_grad():
                mask = self._visibility(flow_bwd)
            reports.append(L.step1_loss(batch.target, source, flow_fwd, app,
                                        mask, self.weights))
        return LossReport.mean(reports)

    def _forward_step_II(self, batch: Batch) -> LossReport:
        frames = [batch.target, *batch.sources]
        if self.plan.multiscale_iid:
            pyramids = [scale_pyramid(f) for f in frames]
        else:
            pyramids = [[f] for f in frames]
        decomps = [[self.nets["iid"](img) for img in pyr] for pyr in pyramids]
        return L.step2_loss(pyramids, decomps, self.weights)

    def _forward_step_III(self, batch: Batch) -> LossReport:
        depth = self.nets["depth"](batch.target)
        target_refl = self.nets["iid"](batch.target).reflectance if self.plan.use_iid else None
        reports = []
        for source in batch.sources:
            pose = self.nets["pose"](batch.target, source)
            motion = EgoMotion.from_axisangle(pose.axisangle, pose.translation)
            if self.config.motion_convention == "source_to_target":
                motion = motion.inverse()
            app = self.nets["appearance"](batch.target, source)
            with torch.no_grad():
                flow_fwd, flow_bwd = self.nets["flow"](batch.target, source)
                mask = self._visibility(flow_bwd)
                optflow_warped = warp_bilinear(source, flow_to_grid(flow_fwd))
            decomp = self.nets["iid"](source) if self.plan.use_iid else None
            reports.append(L.step3_loss(
                batch.target, source, depth, motion, pose.intrinsics, app, mask,
                optflow_warped, source_decomp=decomp, target_reflectance=target_refl,
                weights=self.weights))
        return LossReport.mean(reports)

    def _forward(self, step: str, batch: Batch) -> LossReport | None:
        if step == "I":
            return self._forward_step_I(batch)
        if step == "II":
            if not self.plan.use_iid:
                return None
            return self._forward_step_II(batch)
        return self._forward_step_III(batch)

    # -- updates -----------------------------------------------------------

    def _update(self, group: tuple[str, ...], report: LossReport) -> None:
        key = _group_key(group)
        opt = self.optimizers[key]
        opt.zero_grad(set_to_none=True)
        try:
            report.total.backward()
        except (MemoryError, RuntimeError) as exc:
            if isinstance(exc, MemoryError) or "out of memory" in str(exc).lower():
                raise ResourceExhausted(f"group {key} exhausted memory") from exc
            raise
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for pg in opt.param_groups for p in pg["params"]], self.config.grad_clip)
        if self.batches_seen < self.config.app_warmup_batches:
            for p in self.nets["appearance"].parameters():
                p.grad = None
        if "III" in group:
            self.registry.warmup_tick()
        opt.step()
        self.updates[key] += 1

    def run_group(self, group: tuple[str, ...], batch: Batch) -> LossReport:
        """Forward the group's steps, fuse if needed, and apply one update."""
        parts = {step: self._forward(step, batch) for step in group}
        if len(group) == 1:
            report = parts[group[0]]
            if report is None:
                raise ValueError("plan trains step II alone but decomposition is disabled")
        else:
            report = L.fused_losses(step1=parts.get("I"), step2=parts.get("II"),
                                    step3=parts.get("III"), weights=self.weights)
        self._update(group, report)
        return report

    def run_step_I(self, batch: Batch) -> LossReport:
        return self.run_group(("I",), batch)

    def run_step_II(self, batch: Batch) -> LossReport:
        return self.run_group(("II",), batch)

    def run_step_III(self, batch: Batch) -> LossReport:
        return self.run_group(("III",), batch)

    def set_epoch_lr(self, epoch: int) -> float:
        lr = self.config.lr * (self.config.lr_decay if epoch >= self.config.decay_epoch else 1.0)
        for opt in self.optimizers.values():
            for pg in opt.param_groups:
                pg["lr"] = lr * pg.get("lr_scale", 1.0)
        return lr

    def run_epoch(self, record: SequenceRecord, epoch: int = 0,
                  log: list[dict] | None = None) -> list[dict]:
        """One epoch over the record following the plan; returns scalar rows."""
        self.set_epoch_lr(epoch)
        rows = log if log is not None else []

        def one_batch(batch: Batch, index: int, group: tuple[str, ...]) -> None:
            report = self.run_group(group, batch)
            rows.append({"epoch": epoch, "batch": index,
                         "group": _group_key(group), **report.scalars()})

        if self.config.step_mode == "per_batch":
            batches = make_batches(record, self.config.batch_size,
                                   seed=self.config.seed, epoch=epoch)
            for i, batch in enumerate(batches):
                for group in self.plan.groups:
                    one_batch(batch, i, group)
                self.batches_seen += 1
        else:
            for group in self.plan.groups:
                batches = make_batches(record, self.config.batch_size,
                                       seed=self.config.seed, epoch=epoch)
                for i, batch in enumerate(batches):
                    one_batch(batch, i, group)
            self.batches_seen += len(list(make_batches(
                record, self.config.batch_size, seed=self.config.seed, epoch=epoch)))
        return rows

    def train(self, record: SequenceRecord, out_dir: str | Path | None = None
              ) -> list[Path]:
        """Full training run; writes per-epoch checkpoints and a loss log."""
        out = Path(out_dir) if out_dir is not None else None
        checkpoints: list[Path] = []
        log_path = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "losses.jsonl"
            log_path.write_text("")
        for epoch in range(self.config.epochs):
            rows = self.run_epoch(record, epoch)
            if log_path is not None:
                with log_path.open("a") as fh:
                    for row in rows:
                        fh.write(json.dumps(row) + "\n")
            if out is not None:
                ckpt = out / "checkpoints" / f"epoch_{epoch:03d}"
                save_checkpoint(self, ckpt)
                checkpoints.append(ckpt)
        return checkpoints


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    """Manifest + one little-endian float32 blob per network."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[dict]] = {}
    for name, net in trainer.nets.items():
        entries, blobs, offset = [], [], 0
        for pname, param in net.named_parameters():
            data = param.detach().cpu().numpy().astype("<f4")
            entries.append({"name": pname, "shape": list(data.shape), "offset": offset})
            blobs.append(data.tobytes())
            offset += data.nbytes
        groups[name] = entries
        (root / f"{name}.bin").write_bytes(b"".join(blobs))
    manifest = {
        "config": asdict(trainer.config),
        "plan": asdict(trainer.plan),
        "seed": trainer.config.seed,
        "step_count": dict(trainer.updates),
        "warmup_remaining": trainer.registry.warmup_remaining,
        "format": {"dtype": "float32", "byte_order": "little"},
        "groups": groups,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def load_checkpoint(path: str | Path) -> Trainer:
    """Rebuild the trainer from a checkpoint directory and load all weights."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg_dict = dict(manifest["config"])
    cfg_dict["network"] = NetworkConfig(**cfg_dict["network"])
    plan_dict = dict(manifest["plan"])
    plan_dict["groups"] = tuple(tuple(g) for g in plan_dict["groups"])
    trainer = Trainer(TrainConfig(**cfg_dict), StepPlan(**plan_dict))
    trainer.registry.warmup_remaining = manifest["warmup_remaining"]
    for name, entries in manifest["groups"].items():
        blob = (root / f"{name}.bin").read_bytes()
        params = dict(trainer.nets[name].named_parameters())
        for entry in entries:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count,
                                offset=entry["offset"]).reshape(shape)
            with torch.no_grad():
                params[entry["name"]].copy_(torch.from_numpy(arr.copy()))
    return trainer


# -- evaluation drivers ------------------------------------------------------


@torch.no_grad()
def predict_depths(nets: dict, record: SequenceRecord, batch_size: int = 8) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for start in range(0, len(record), batch_size):
        idxs = range(start, min(start + batch_size, len(record)))
        depth = nets["depth"](_frame_tensor(record, list(idxs)))
        out.extend(d[0].numpy() for d in depth)
    return out


@torch.no_grad()
def evaluate_depth(nets: dict, record: SequenceRecord,
                   cfg: DepthEvalConfig | None = None, batch_size: int = 8) -> dict[str, float]:
    """Per-frame depth metrics against record ground truth, averaged."""
    if record.depths is None:
        raise ValueError("record has no ground-truth depth")
    preds = predict_depths(nets, record, batch_size)
    rows = [depth_metrics(pred, gt, cfg) for pred, gt in zip(preds, record.depths)]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


@torch.no_grad()
def predict_trajectory(nets: dict, record: SequenceRecord,
                       motion_convention: str = "target_to_source") -> np.ndarray:
    """Chain predicted pairwise motions into camera centers, starting at origin."""
    motions = []
    for i in range(len(record) - 1):
        target = _frame_tensor(record, [i])
        source = _frame_tensor(record, [i + 1])
        pose = nets["pose"](target, source)
        motion = EgoMotion.from_axisangle(pose.axisangle[0], pose.translation[0])
        if motion_convention == "target_to_source":
            motion = motion.inverse()  # camera i+1 expressed in camera-i coords
        motions.append(motion)
    return compose_trajectory(motions)


def gt_trajectory(record: SequenceRecord) -> np.ndarray:
    """Ground-truth camera centers expressed in the first camera's frame."""
    if record.poses is None:
        raise ValueError("record has no poses")
    rel = np.linalg.inv(record.poses[0])[None] @ record.poses
    return rel[:, :3, 3].copy()


@torch.no_grad()
def predict_intrinsics(nets: dict, record: SequenceRecord, batch_size: int = 8) -> Intrinsics:
    """Average predicted normalized intrinsics over consecutive pairs."""
    vals = []
    pairs = list(range(len(record) - 1))
    for start in range(0, len(pairs), batch_size):
        idxs = pairs[start:start + batch_size]
        target = _frame_tensor(record, idxs)
        source = _frame_tensor(record, [i + 1 for i in idxs])
        intr = nets["pose"](target, source).intrinsics
        vals.append(torch.stack([intr.fx, intr.fy, intr.cx, intr.cy], dim=1))
    fx, fy, cx, cy = torch.cat(vals).mean(dim=0).tolist()
    return Intrinsics(fx, fy, cx, cy)


def ablation_suite(train_record: SequenceRecord, val_record: SequenceRecord,
                   plans: Sequence[StepPlan], config: TrainConfig,
                   weights: LossWeights | None = None) -> list[dict]:
    """Train each plan from the same seed and report validation depth metrics."""
    rows: list[dict] = []
    for plan in plans:
        row: dict = {"plan": plan.label(), "finetune_qkv": plan.finetune_qkv,
                     "multiscale_iid": plan.multiscale_iid, "use_iid": plan.use_iid}
        trainer = Trainer(config, plan, weights)
        try:
            for epoch in range(config.epochs):
                trainer.run_epoch(train_record, epoch)
        except ResourceExhausted as exc:
            row["error"] = f"out of memory: {exc}"
            rows.append(row)
            continue
        row.update(evaluate_depth(trainer.nets, val_record))
        rows.append(row)
    return rows
