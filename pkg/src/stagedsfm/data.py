"""Synthetic ground-truth scene generation and sequence-directory I/O.

On-disk layout (lossless at the stored bit depths, human-inspectable):

    frames/%06d.png   8-bit RGB
    depth/%06d.png    16-bit grayscale, depth = value * depth_scale
    meta.json         {"fx","fy","cx","cy","depth_scale","poses"}

Poses are 4x4 row-major camera-to-world matrices.  The generator renders a
textured height field by per-pixel ray casting from a smooth random camera
trajectory, with optional multiplicative illumination drift and additive
specular blobs; frames and depths are quantized to the on-disk precision at
generation time so a generate -> write -> load round trip is exact.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import EgoMotion, Intrinsics

_FRAME_RE = re.compile(r"^(\d{6})\.png$")
_MARCH_STEPS = 256


@dataclass
class SyntheticSceneSpec:
    width: int = 64
    height: int = 64
    frames: int = 100
    seed: int = 0
    height_octaves: int = 3
    height_amplitude: float = 0.6
    texture_octaves: int = 4
    trajectory_smoothness: float = 40.0   # oscillation period in frames
    translation_amplitude: float = 0.28
    rotation_amplitude_deg: float = 3.0
    illumination_amplitude: float = 0.0
    specular_blobs: int = 0
    fx: float = 0.82
    fy: float = 1.02
    cx: float = 0.5
    cy: float = 0.5
    base_depth: float = 2.2
    max_depth: float = 8.0

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("need at least 2 frames")
        for name in ("height_amplitude", "illumination_amplitude",
                     "translation_amplitude", "rotation_amplitude_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.specular_blobs < 0:
            raise ValueError("specular_blobs must be >= 0")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)


@dataclass
class SequenceRecord:
    """Frames in temporal order plus whatever ground truth is available."""

    frames: list[np.ndarray]                     # (H, W, 3) float32 in [0, 1]
    intrinsics: Intrinsics | None = None
    depths: list[np.ndarray] | None = None       # (H, W) float32, scene units
    poses: np.ndarray | None = None              # (N, 4, 4) camera-to-world
    depth_scale: float = 8.0 / 65535.0
    frame_paths: list[str] | None = None
    gt_reflectance: list[np.ndarray] | None = None  # diagnostics only
    gt_shading: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.depths is not None and len(self.depths) != len(self.frames):
            raise ValueError("depth count does not match frame count")
        if self.poses is not None and len(self.poses) != len(self.frames):
            raise ValueError("pose count does not match frame count")

    def __len__(self) -> int:
        return len(self.frames)

    def relative_motion(self, target: int, source: int, dtype=torch.float32) -> EgoMotion:
        """Ground-truth transform taking camera-frame points of `target` into `source`."""
        if self.poses is None:
            raise ValueError("record has no poses")
        rel = np.linalg.inv(self.poses[source]) @ self.poses[target]
        return EgoMotion(torch.as_tensor(rel[:3, :3], dtype=dtype),
                         torch.as_tensor(rel[:3, 3], dtype=dtype))


def _bilinear(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample (N, M[, C]) grid at fractional indices, clamped to the border."""
    n, m = grid.shape[:2]
    x = np.clip(x, 0.0, m - 1.0)
    y = np.clip(y, 0.0, n - 1.0)
    x0 = np.minimum(np.floor(x), m - 2).astype(np.int64)
    y0 = np.minimum(np.floor(y), n - 2).astype(np.int64)
    wx, wy = x - x0, y - y0
    if grid.ndim == 3:
        wx, wy = wx[..., None], wy[..., None]
    top = grid[y0, x0] * (1 - wx) + grid[y0, x0 + 1] * wx
    bot = grid[y0 + 1, x0] * (1 - wx) + grid[y0 + 1, x0 + 1] * wx
    return top * (1 - wy) + bot * wy


def _value_noise(rng: np.random.Generator, n: int, octaves: int,
                 base_cells: int = 4) -> np.ndarray:
    """Multi-octave bilinear value noise on an n x n grid, normalized to [0, 1]."""
    acc = np.zeros((n, n))
    for o in range(octaves):
        cells = base_cells * 2 ** o
        coarse = rng.uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
        idx = np.linspace(0.0, cells, n)
        gx, gy = np.meshgrid(idx, idx)
        acc += 0.5 ** o * _bilinear(coarse, gx, gy)
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / (hi - lo) if hi > lo else np.zeros_like(acc)


def _rodrigues(v: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(v))
    k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + k
    return (np.eye(3) + math.sin(theta) / theta * k
            + (1 - math.cos(theta)) / theta ** 2 * (k @ k))


def _harmonics(rng: np.random.Generator, t: np.ndarray, period: float,
               amplitude: float) -> np.ndarray:
    """Smooth bounded oscillation: two incommensurate harmonics, random phases."""
    phases = rng.uniform(0, 2 * np.pi, size=2)
    raw = (np.sin(2 * np.pi * t / period + phases[0])
           + 0.35 * np.sin(2 * np.pi * t / (period * 0.413) + phases[1]))
    return amplitude * raw / 1.35


class _SceneRenderer:
    """Height-field ray caster with SceneSpec-derived precomputed grids."""

    GRID_N = 512
    AMBIENT = 0.15

    def __init__(self, spec: SyntheticSceneSpec, rng: np.random.Generator):
        self.spec = spec
        half_fov = max(0.5 / spec.fx, 0.5 / spec.fy)
        self.extent = 1.35 * (spec.base_depth * half_fov
                              + spec.translation_amplitude
                              + spec.base_depth * math.tan(math.radians(spec.rotation_amplitude_deg)))
        n = self.GRID_N
        if spec.height_octaves > 0 and spec.height_amplitude > 0:
            h = _value_noise(rng, n, spec.height_octaves) * spec.height_amplitude
        else:
            h = np.zeros((n, n))
        self.height = h
        cell = 2 * self.extent / (n - 1)
        self.height_gy, self.height_gx = np.gradient(h, cell)

        base = _value_noise(rng, n, max(spec.texture_octaves, 1))
        chans = [_value_noise(rng, n, max(spec.texture_octaves, 1)) for _ in range(3)]
        albedo = np.stack([0.55 * base + 0.45 * c for c in chans], axis=-1)
        self.albedo = 0.25 + 0.7 * albedo
        self.light = np.array([0.35, -0.25, -1.0])
        self.light /= np.linalg.norm(self.light)

        self.illum_freq = rng.uniform(0.6, 1.4, size=2)
        self.illum_phase0 = rng.uniform(0, 2 * np.pi)
        if spec.specular_blobs:
            self.blob_center = rng.uniform(0.25, 0.75, size=(spec.specular_blobs, 2))
            self.blob_radius = rng.uniform(0.05, 0.2, size=spec.specular_blobs)
            self.blob_phase = rng.uniform(0, 2 * np.pi, size=spec.specular_blobs)

    def _world_to_index(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        scale = (self.GRID_N - 1) / (2 * self.extent)
        return (x + self.extent) * scale, (y + self.extent) * scale

    def surface_height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ix, iy = self._world_to_index(x, y)
        return _bilinear(self.height, ix, iy)

    def render(self, rot_wc: np.ndarray, center: np.ndarray, frame_idx: int
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (rgb (H,W,3), depth (H,W), reflectance, shading*gain)."""
        spec = self.spec
        w, h = spec.width, spec.height
        us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        dirs_cam = np.stack([(us - spec.cx * w) / (spec.fx * w),
                             (vs - spec.cy * h) / (spec.fy * h),
                             np.ones_like(us)], axis=-1).reshape(-1, 3)
        dirs = dirs_cam @ rot_wc.T

        z0 = spec.base_depth
        t_lo = max(0.05, 0.7 * (z0 - spec.height_amplitude - abs(center[2])))
        t_hi = (z0 + abs(center[2]) + 0.2) / 0.8
        taus = np.linspace(t_lo, t_hi, _MARCH_STEPS)

        px = center[0] + taus[:, None] * dirs[None, :, 0]
        py = center[1] + taus[:, None] * dirs[None, :, 1]
        pz = center[2] + taus[:, None] * dirs[None, :, 2]
        f = pz - z0 + self.surface_height(px, py)
        if (f[0] >= 0).any():
            raise ValueError("camera starts below the surface; adjust the scene spec")
        above = f >= 0
        hit = above.any(axis=0)
        idx = np.where(hit, above.argmax(axis=0), _MARCH_STEPS - 1)
        idx = np.maximum(idx, 1)

        lo, hi_t = taus[idx - 1], taus[idx]
        mid = 0.5 * (lo + hi_t)
        pm = center[None, :] + mid[:, None] * dirs
        fm = pm[:, 2] - z0 + self.surface_height(pm[:, 0], pm[:, 1])
        lo = np.where(fm >= 0, lo, mid)
        hi_t = np.where(fm >= 0, mid, hi_t)
        tau_star = 0.5 * (lo + hi_t)

        pts = center[None, :] + tau_star[:, None] * dirs
        ix, iy = self._world_to_index(pts[:, 0], pts[:, 1])
        albedo = _bilinear(self.albedo, ix, iy)
        gx = _bilinear(self.height_gx, ix, iy)
        gy = _bilinear(self.height_gy, ix, iy)
        normal = np.stack([-gx, -gy, -np.ones_like(gx)], axis=-1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
        lambert = np.clip(normal @ self.light, 0.0, 1.0)
        shading = self.AMBIENT + (1 - self.AMBIENT) * lambert

        gain = np.ones_like(shading)
        if spec.illumination_amplitude > 0:
            un, vn = (us / w).reshape(-1), (vs / h).reshape(-1)
            phase = self.illum_phase0 + 2 * np.pi * frame_idx / max(spec.frames, 1)
            gain = 1.0 + spec.illumination_amplitude * np.cos(
                2 * np.pi * (self.illum_freq[0] * un + self.illum_freq[1] * vn) + phase)

        rgb = albedo * (shading * gain)[:, None]
        if spec.specular_blobs:
            un, vn = (us / w).reshape(-1), (vs / h).reshape(-1)
            t_frac = 2 * np.pi * frame_idx / max(spec.frames, 1)
            for b in range(spec.specular_blobs):
                cx = self.blob_center[b, 0] + self.blob_radius[b] * math.cos(t_frac + self.blob_phase[b])
                cy = self.blob_center[b, 1] + self.blob_radius[b] * math.sin(t_frac + self.blob_phase[b])
                r2 = (un - cx) ** 2 + (vn - cy) ** 2
                rgb += 0.35 * np.exp(-r2 / (2 * 0.08 ** 2))[:, None]

        rgb = np.clip(rgb, 0.0, 1.0).reshape(h, w, 3)
        return (rgb, tau_star.reshape(h, w), albedo.reshape(h, w, 3),
                (shading * gain).reshape(h, w))


def generate_synthetic(spec: SyntheticSceneSpec) -> SequenceRecord:
    """Render a sequence with exact depth/pose/intrinsics ground truth.

    Output frames and depths are already quantized to the on-disk precision
    (8-bit frames, 16-bit depth), so writing and re-loading is lossless.
    """
    rng = np.random.default_rng(spec.seed)
    renderer = _SceneRenderer(spec, rng)

    t = np.arange(spec.frames, dtype=np.float64)
    period = max(spec.trajectory_smoothness, 2.0)
    amp = spec.translation_amplitude
    pos = np.stack([_harmonics(rng, t, period, amp),
                    _harmonics(rng, t, period * 1.21, 0.8 * amp),
                    _harmonics(rng, t, period * 1.53, 0.5 * amp)], axis=-1)
    rot_amp = math.radians(spec.rotation_amplitude_deg)
    axis = np.stack([_harmonics(rng, t, period * 1.37, rot_amp),
                     _harmonics(rng, t, period * 1.11, rot_amp),
                     _harmonics(rng, t, period * 1.73, 0.5 * rot_amp)], axis=-1)

    depth_scale = spec.max_depth / 65535.0
    frames, depths, refls, shades = [], [], [], []
    poses = np.zeros((spec.frames, 4, 4))
    for i in range(spec.frames):
        rot = _rodrigues(axis[i])
        poses[i] = np.eye(4)
        poses[i, :3, :3] = rot
        poses[i, :3, 3] = pos[i]
        rgb, depth, refl, shade = renderer.render(rot, pos[i], i)
        frames.append((np.round(rgb * 255.0) / 255.0).astype(np.float32))
        q = np.clip(np.round(depth / depth_scale), 0, 65535)
        depths.append((q * depth_scale).astype(np.float32))
        refls.append(refl.astype(np.float32))
        shades.append(shade.astype(np.float32))

    return SequenceRecord(frames=frames, intrinsics=spec.intrinsics(),
                          depths=depths, poses=poses, depth_scale=depth_scale,
                          gt_reflectance=refls, gt_shading=shades)


def write_sequence_dir(record: SequenceRecord, path: str | Path) -> Path:
    """Write the on-disk layout; returns the directory path."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if record.depths is not None:
        (root / "depth").mkdir(exist_ok=True)
    for i, frame in enumerate(record.frames):
        img = Image.fromarray(np.round(frame * 255.0).astype(np.uint8))
        img.save(root / "frames" / f"{i:06d}.png")
        if record.depths is not None:
            q = np.clip(np.round(record.depths[i] / record.depth_scale), 0, 65535)
            Image.fromarray(q.astype(np.uint16)).save(root / "depth" / f"{i:06d}.png")
    if record.intrinsics is None:
        raise ValueError("cannot write a sequence without intrinsics")
    meta = {"fx": float(record.intrinsics.fx), "fy": float(record.intrinsics.fy),
            "cx": float(record.intrinsics.cx), "cy": float(record.intrinsics.cy),
            "depth_scale": record.depth_scale,
            "poses": record.poses.tolist() if record.poses is not None else None}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return root


def _load_image(path: Path, index: int, size: tuple[int, int] | None) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise ValueError(f"corrupt image at frame index {index}: {path}") from exc
    if size is not None and img.size != size:
        img = img.convert("F") if img.mode.startswith("I") else img
        img = img.resize(size, Image.BILINEAR)
    return np.asarray(img)


def load_sequence_dir(path: str | Path, size: tuple[int, int] | None = None
                      ) -> SequenceRecord:
    """Read a sequence directory, optionally resizing frames to (width, height).

    Normalized intrinsics are resolution-independent and load unchanged.
    """
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing metadata file: {meta_path}")
    meta = json.loads(meta_path.read_text())
    for key in ("fx", "fy", "cx", "cy", "depth_scale"):
        if key not in meta:
            raise ValueError(f"meta.json is missing required key '{key}'")

    frame_dir = root / "frames"
    if not frame_dir.is_dir():
        raise FileNotFoundError(f"missing frames directory: {frame_dir}")
    names = sorted(p.name for p in frame_dir.iterdir() if _FRAME_RE.match(p.name))
    if not names:
        raise FileNotFoundError(f"no frames found in {frame_dir}")
    indices = [int(_FRAME_RE.match(n).group(1)) for n in names]
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError("frame indices are not strictly increasing")

    frames, paths = [], []
    for i, name in enumerate(names):
        arr = _load_image(frame_dir / name, i, size)
        frames.append((arr.astype(np.float64) / 255.0).astype(np.float32))
        paths.append(str(frame_dir / name))

    depths = None
    depth_scale = float(meta["depth_scale"])
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        depths = []
        for i, name in enumerate(names):
            arr = _load_image(depth_dir / name, i, size)
            depths.append((arr.astype(np.float64) * depth_scale).astype(np.float32))
        if len(depths) != len(frames):
            raise ValueError("depth count does not match frame count")

    poses = np.asarray(meta["poses"], dtype=np.float64) if meta.get("poses") else None
    intr = Intrinsics(float(meta["fx"]), float(meta["fy"]),
                      float(meta["cx"]), float(meta["cy"]))
    return SequenceRecord(frames=frames, intrinsics=intr, depths=depths,
                          poses=poses, depth_scale=depth_scale, frame_paths=paths)


def split(record: SequenceRecord, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
          ) -> tuple[SequenceRecord, SequenceRecord, SequenceRecord]:
    """Contiguous temporal train/val/test split; no shuffling across boundaries."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError("ratios must be non-negative and sum to 1")
    n = len(record)
    b1 = int(round(ratios[0] * n))
    b2 = int(round((ratios[0] + ratios[1]) * n))

    def section(a: int, b: int) -> SequenceRecord:
        pick = slice(a, b)
        return SequenceRecord(
            frames=record.frames[pick], intrinsics=record.intrinsics,
            depths=record.depths[pick] if record.depths is not None else None,
            poses=record.poses[pick] if record.poses is not None else None,
            depth_scale=record.depth_scale,
            frame_paths=record.frame_paths[pick] if record.frame_paths else None,
            gt_reflectance=record.gt_reflectance[pick] if record.gt_reflectance else None,
            gt_shading=record.gt_shading[pick] if record.gt_shading else None)

    return section(0, b1), section(b1, b2), section(b2, n)
