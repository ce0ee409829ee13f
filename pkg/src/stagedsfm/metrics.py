"""Evaluation suite: depth error metrics, trajectory composition and ATE,
and per-element intrinsics percentage error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import EgoMotion, Intrinsics


@dataclass
class DepthEvalConfig:
    d_min: float = 1e-3
    d_max: float = 150.0
    median_scaling: bool = True

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  cfg: DepthEvalConfig | None = None) -> dict[str, float]:
    """abs_rel, sq_rel, rmse, rmse_log and the delta < 1.25 accuracy.

    Pixels with gt <= 0 are ignored; with median scaling the prediction is
    rescaled by median(gt)/median(pred) before clamping both to the eval range.
    """
    cfg = cfg or DepthEvalConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = gt > 0
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    d, dh = gt[valid], pred[valid]
    if cfg.median_scaling:
        dh = dh * (np.median(d) / np.median(dh))
    d = np.clip(d, cfg.d_min, cfg.d_max)
    dh = np.clip(dh, cfg.d_min, cfg.d_max)

    err = d - dh
    ratio = np.maximum(d / dh, dh / d)
    return {
        "abs_rel": float(np.mean(np.abs(err) / d)),
        "sq_rel": float(np.mean(err ** 2 / d)),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(d) - np.log(dh)) ** 2))),
        "delta": float(np.mean(ratio < 1.25)),
    }


def compose_trajectory(pairwise: Sequence[EgoMotion]) -> np.ndarray:
    """Chain relative transforms from the identity; returns (N+1, 3) camera centers."""
    if len(pairwise) < 1:
        raise ValueError("need at least one relative motion")
    current = np.eye(4)
    points = [current[:3, 3].copy()]
    for motion in pairwise:
        m = motion.matrix().detach().cpu().numpy().astype(np.float64)
        if m.ndim != 2:
            raise ValueError("compose_trajectory expects unbatched motions")
        current = current @ m
        points.append(current[:3, 3].copy())
    return np.stack(points)


def _umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity (s, R, t) minimizing ||dst - (s R src + t)||."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    cov = cd.T @ cs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rot = u @ sign @ vt
    var_s = (cs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ sign) / var_s) if var_s > 1e-12 else 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def ate(pred: np.ndarray, gt: np.ndarray, align: str = "sim3") -> float:
    """RMSE of pointwise trajectory distances, optionally after sim3 alignment."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("trajectories must both be (N, 3)")
    if len(pred) < 2:
        raise ValueError("trajectories need at least 2 points")
    if align == "sim3":
        s, r, t = _umeyama(pred, gt)
        pred = (s * (r @ pred.T)).T + t
    elif align != "none":
        raise ValueError(f"unknown alignment '{align}'")
    return float(np.sqrt(np.mean(np.sum((gt - pred) ** 2, axis=1))))


def pre(pred_intrinsics: Intrinsics, gt_intrinsics: Intrinsics) -> dict[str, float]:
    """Percentage relative error |k - k_hat| / k * 100 per intrinsics element."""
    out = {}
    for name in ("fx", "fy", "cx", "cy"):
        k = float(getattr(gt_intrinsics, name))
        k_hat = float(getattr(pred_intrinsics, name))
        out[name] = abs(k - k_hat) / k * 100.0
    return out
