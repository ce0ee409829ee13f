"""Training objectives: photometric, smoothness, registration, decomposition
and alignment losses, plus the per-step aggregates and their fusions.

Every function is differentiable and dtype-agnostic.  Loss aggregates return
a LossReport whose `total` tensor is the exact weighted sum of its `terms`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch
from torch import Tensor
from torch.nn import functional as F

from .geometry import (EgoMotion, Intrinsics, SampleGrid, flow_to_grid,
                       rigid_reproject, warp_bilinear)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

# Out-of-frame samples are downweighted, not excluded: their border-clamped
# values still cost this fraction, so shrinking the valid set cannot pay.
BORDER_WEIGHT_FLOOR = 0.2


def _soften(in_bounds: Tensor) -> Tensor:
    return BORDER_WEIGHT_FLOOR + (1.0 - BORDER_WEIGHT_FLOOR) * in_bounds


@dataclass
class LossWeights:
    """Published coefficients of the three step losses and the fusions."""

    w_so: float = 0.001    # forward-flow smoothness in step I
    w_sa: float = 0.01     # appearance smoothness in step I
    w_sm: float = 0.001    # depth/appearance smoothness in step III
    w_tr: float = 0.01     # transformation alignment in step III
    w_iia: float = 0.02    # illumination-free alignment in step III
    w_l2_fused: float = 0.02  # decomposition term inside fused losses
    alpha: float = 0.85    # SSIM mix of the photometric loss

    def __post_init__(self):
        for name in ("w_so", "w_sa", "w_sm", "w_tr", "w_iia", "w_l2_fused"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


@dataclass
class LossReport:
    """Named raw term values, their weights, and the aggregate total."""

    terms: dict[str, Tensor]
    weights: dict[str, float]
    total: Tensor

    def scalars(self) -> dict[str, float]:
        """Flat float dict for JSON logging."""
        out = {name: float(t.detach()) for name, t in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out

    @classmethod
    def from_terms(cls, terms: dict[str, Tensor], weights: dict[str, float]) -> "LossReport":
        total = sum(weights[k] * terms[k] for k in terms)
        return cls(terms, weights, total)

    @staticmethod
    def mean(reports: Sequence["LossReport"]) -> "LossReport":
        """Average reports with identical term structure (e.g. over sources)."""
        first = reports[0]
        n = len(reports)
        terms = {k: sum(r.terms[k] for r in reports) / n for k in first.terms}
        return LossReport.from_terms(terms, dict(first.weights))


def ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel structural similarity with 3x3 mean windows, reflection padded."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    pad = torch.nn.ReflectionPad2d(1)

    def mean3(x):
        return F.avg_pool2d(pad(x), 3, stride=1)

    mu_a, mu_b = mean3(a), mean3(b)
    sig_a = mean3(a * a) - mu_a * mu_a
    sig_b = mean3(b * b) - mu_b * mu_b
    sig_ab = mean3(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _SSIM_C1) * (2 * sig_ab + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (sig_a + sig_b + _SSIM_C2)
    return num / den


def _masked_mean(per_pixel: Tensor, mask: Tensor | None) -> Tensor:
    if mask is None:
        return per_pixel.mean()
    weight = mask.sum()
    if float(weight) == 0.0:
        raise ValueError("degenerate overlap: no valid pixels under the mask")
    return (per_pixel * mask).sum() / weight


def photometric_error(a: Tensor, b: Tensor, alpha: float) -> Tensor:
    """Per-pixel (B, 1, H, W) mix of SSIM dissimilarity and L1."""
    dssim = (1.0 - ssim(a, b)) / 2.0
    err = alpha * dssim + (1.0 - alpha) * (a - b).abs()
    return err.mean(dim=1, keepdim=True)


def photometric_loss(a: Tensor, b: Tensor, alpha: float, mask: Tensor | None = None) -> Tensor:
    return _masked_mean(photometric_error(a, b, alpha), mask)


def _abs_grad_x(t: Tensor) -> Tensor:
    return (t[..., :, 1:] - t[..., :, :-1]).abs().mean(dim=1, keepdim=True)


def _abs_grad_y(t: Tensor) -> Tensor:
    return (t[..., 1:, :] - t[..., :-1, :]).abs().mean(dim=1, keepdim=True)


def _edge_aware(field: Tensor, edges: Tensor | None = None) -> Tensor:
    """Mean over the two directions of |d field| * exp(-|d edges|).

    With edges=None the field weights its own gradients (flow smoothness).
    """
    gx, gy = _abs_grad_x(field), _abs_grad_y(field)
    ex = gx if edges is None else _abs_grad_x(edges)
    ey = gy if edges is None else _abs_grad_y(edges)
    return ((gx * torch.exp(-ex)).mean() + (gy * torch.exp(-ey)).mean()) / 2


def smoothness_flow(flow: Tensor) -> Tensor:
    """Edge-aware smoothness of a flow field against its own gradients."""
    return _edge_aware(flow)


def smoothness_appearance(app: Tensor, residual: Tensor) -> Tensor:
    """Appearance-map smoothness weighted by warp-residual edges."""
    return _edge_aware(app, residual)


def smoothness_step3(app: Tensor, residual: Tensor, depth: Tensor, target: Tensor) -> Tensor:
    """Appearance term plus mean-normalized depth smoothness against image edges."""
    depth_norm = depth / depth.mean(dim=(1, 2, 3), keepdim=True)
    return _edge_aware(app, residual) + _edge_aware(depth_norm, target)


def registration_loss(warped_src: Tensor, target: Tensor, mask: Tensor, app: Tensor,
                      alpha: float, valid: Tensor | None = None) -> Tensor:
    """Photometric loss against the calibration target M*I_t + A."""
    return photometric_loss(warped_src, mask * target + app, alpha, mask=valid)


def step1_loss(target: Tensor, source: Tensor, flow_fwd: Tensor, app: Tensor,
               vis_mask: Tensor, weights: LossWeights | None = None) -> LossReport:
    """Optical-flow registration objective; warps the source internally."""
    w = weights or LossWeights()
    grid = flow_to_grid(flow_fwd)
    warped = warp_bilinear(source, grid)
    l_reg = registration_loss(warped, target, vis_mask, app, w.alpha,
                              valid=_soften(grid.in_bounds))
    l_so = smoothness_flow(flow_fwd)
    l_sa = smoothness_appearance(app, target - warped)
    return LossReport.from_terms(
        {"reg": l_reg, "so": l_so, "sa": l_sa},
        {"reg": 1.0, "so": w.w_so, "sa": w.w_sa})


def step2_loss(pyramids: Sequence[Sequence[Tensor]],
               decompositions: Sequence[Sequence[tuple[Tensor, Tensor]]],
               weights: LossWeights | None = None) -> LossReport:
    """Reconstruction objective I_i ~ R_i * S_i, averaged over scales and frames."""
    w = weights or LossWeights()
    losses = []
    for frame_pyr, frame_dec in zip(pyramids, decompositions):
        for image, (refl, shade) in zip(frame_pyr, frame_dec):
            losses.append(photometric_loss(image, refl * shade, w.alpha))
    if not losses:
        raise ValueError("step2_loss needs at least one frame")
    l2 = sum(losses) / len(losses)
    return LossReport.from_terms({"iid_recon": l2}, {"iid_recon": 1.0})


def transformation_loss(iid_warp: Tensor, rigid_warp: Tensor, target: Tensor,
                        mask: Tensor, app: Tensor, alpha: float,
                        valid: Tensor | None = None) -> Tensor:
    """Alignment of both transformed predictions against M*I_t + A."""
    calib = mask * target + app
    return (photometric_loss(iid_warp, calib, alpha, mask=valid)
            + photometric_loss(rigid_warp, calib, alpha, mask=valid))


def illumination_free_loss(reflect_warp: Tensor, reflect_target: Tensor, mask: Tensor,
                           alpha: float, valid: Tensor | None = None) -> Tensor:
    """Alignment between warped source reflectance and masked target reflectance."""
    return photometric_loss(reflect_warp, mask * reflect_target, alpha, mask=valid)


def step3_loss(target: Tensor, source: Tensor, depth: Tensor, motion: EgoMotion,
               intrinsics: Intrinsics, app: Tensor, vis_mask: Tensor,
               optflow_warped: Tensor,
               source_decomp: tuple[Tensor, Tensor] | None = None,
               target_reflectance: Tensor | None = None,
               weights: LossWeights | None = None) -> LossReport:
    """Rigid-transformation alignment objective; reprojects the source internally.

    With source_decomp/target_reflectance omitted the decomposition terms are
    dropped (ablation without the decomposition network): the transformation
    term keeps only the rigidly warped image and no reflectance alignment is
    added.
    """
    w = weights or LossWeights()
    grid, _ = rigid_reproject(depth, motion, intrinsics)
    rigid_warp = warp_bilinear(source, grid)
    valid = _soften(grid.in_bounds)

    l_sm = smoothness_step3(app, target - optflow_warped, depth, target)
    terms: dict[str, Tensor] = {"sm": l_sm}
    wmap: dict[str, float] = {"sm": w.w_sm}

    if source_decomp is not None:
        refl_warp = warp_bilinear(source_decomp[0], grid)
        shade_warp = warp_bilinear(source_decomp[1], grid)
        iid_warp = refl_warp * shade_warp
        terms["tr"] = transformation_loss(iid_warp, rigid_warp, target, vis_mask,
                                          app, w.alpha, valid=valid)
        terms["iia"] = illumination_free_loss(refl_warp, target_reflectance, vis_mask,
                                              w.alpha, valid=valid)
        wmap.update({"tr": w.w_tr, "iia": w.w_iia})
    else:
        terms["tr"] = photometric_loss(rigid_warp, vis_mask * target + app, w.alpha,
                                       mask=valid)
        wmap["tr"] = w.w_tr
    return LossReport.from_terms(terms, wmap)


def fused_losses(step1: LossReport | None = None, step2: LossReport | None = None,
                 step3: LossReport | None = None,
                 weights: LossWeights | None = None) -> LossReport:
    """Combine step reports into a fused objective.

    L_12 = L_1 + 0.02 L_2, L_23 = 0.02 L_2 + L_3, and the triple fusion
    L_1 + 0.02 L_2 + L_3.  Term names are namespaced per step; the
    decomposition term carries the fused 0.02 weight.
    """
    w = weights or LossWeights()
    terms: dict[str, Tensor] = {}
    wmap: dict[str, float] = {}
    for prefix, report, scale in (("step1", step1, 1.0),
                                  ("step2", step2, w.w_l2_fused),
                                  ("step3", step3, 1.0)):
        if report is None:
            continue
        for name, value in report.terms.items():
            key = f"{prefix}/{name}"
            terms[key] = value
            wmap[key] = scale * report.weights[name]
    if not terms:
        raise ValueError("fused_losses needs at least one report")
    return LossReport.from_terms(terms, wmap)
