"""Toy-scale trainable networks for the six roles (depth, forward/backward
flow, appearance, pose+intrinsics, decomposition) and the low-rank adapter
machinery applied to the depth encoder.

The depth network is a small ViT-style encoder plus a convolutional
reassembly decoder; flow/appearance/decomposition are compact U-Nets; the
pose/intrinsics network is a conv encoder with pooled heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .geometry import Intrinsics, disparity_to_depth

_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(x + this) == 1 at x == 0


@dataclass
class DepthNetConfig:
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    decoder_channels: int = 32
    mlp_ratio: int = 4
    pos_grid: int = 8          # base position-embedding grid, resized per input
    d_min: float = 0.1
    d_max: float = 150.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must divide by num_heads")


class DecomposedPair(NamedTuple):
    reflectance: Tensor  # (B, 3, H, W) in [0, 1]
    shading: Tensor      # (B, 1, H, W) >= 0


class PoseIntrinsicsOutput(NamedTuple):
    axisangle: Tensor       # (B, 3)
    translation: Tensor     # (B, 3)
    intrinsics: Intrinsics  # normalized, batched tensor fields


class _Attention(nn.Module):
    """Multi-head self-attention with a single fused query/key/value linear."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.mT * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class _Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, dim * mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class _VitEncoder(nn.Module):
    def __init__(self, cfg: DepthNetConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(
            torch.randn(1, cfg.embed_dim, cfg.pos_grid, cfg.pos_grid) * 0.02)
        self.blocks = nn.ModuleList(
            _Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
            for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, image: Tensor) -> list[Tensor]:
        """Token features after every block, each (B, N, D); grid in self.last_grid."""
        tokens = self.patch_embed(image - 0.5)
        gh, gw = tokens.shape[-2:]
        pos = self.pos_embed
        if (gh, gw) != pos.shape[-2:]:
            pos = F.interpolate(pos, size=(gh, gw), mode="bilinear", align_corners=False)
        tokens = (tokens + pos).flatten(2).mT
        feats = []
        for block in self.blocks:
            tokens = block(tokens)
            feats.append(tokens)
        feats[-1] = self.norm(feats[-1])
        self.last_grid = (gh, gw)
        return feats


class _DepthDecoder(nn.Module):
    """Reassembles two token maps and upsamples back to image resolution."""

    def __init__(self, cfg: DepthNetConfig):
        super().__init__()
        ch = cfg.decoder_channels
        self.fuse = nn.Conv2d(2 * cfg.embed_dim, ch, 3, padding=1)
        ups = []
        stages = int(round(math.log2(cfg.patch_size)))
        for i in range(stages):
            out = ch if i < stages // 2 else ch // 2
            ups.append(nn.Conv2d(ch, out, 3, padding=1))
            ch = out
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, feats: list[Tensor], grid: tuple[int, int]) -> Tensor:
        gh, gw = grid
        maps = [f.mT.reshape(f.shape[0], -1, gh, gw) for f in feats]
        x = F.relu(self.fuse(torch.cat(maps, dim=1)))
        for conv in self.ups:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.relu(conv(x))
        return torch.sigmoid(self.head(x))


class DepthNet(nn.Module):
    """Predicts strictly positive depth via the scaled-disparity mapping."""

    def __init__(self, cfg: DepthNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or DepthNetConfig()
        self.encoder = _VitEncoder(self.cfg)
        self.decoder = _DepthDecoder(self.cfg)
        self._taps = (self.cfg.num_blocks // 2 - 1, self.cfg.num_blocks - 1)

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[-2:]
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"input {h}x{w} not divisible by patch size {p}")
        feats = self.encoder(image)
        sigma = self.decoder([feats[t] for t in self._taps], self.encoder.last_grid)
        return disparity_to_depth(sigma, self.cfg.d_min, self.cfg.d_max)


class UNet(nn.Module):
    """Compact encoder-decoder backbone; one conv per level.

    decode() returns the decoder features fine-to-coarse so heads can tap any
    resolution; forward() applies the full-resolution head.
    """

    def __init__(self, in_ch: int, out_ch: int, base: int = 16, levels: int = 4):
        super().__init__()
        self.chs = [base * 2 ** i for i in range(levels)]
        self.stem = nn.Conv2d(in_ch, self.chs[0], 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv2d(self.chs[i], self.chs[i + 1], 3, stride=2, padding=1)
            for i in range(levels - 1))
        self.up = nn.ModuleList(
            nn.Conv2d(self.chs[i + 1] + self.chs[i], self.chs[i], 3, padding=1)
            for i in range(levels - 1))
        self.head = nn.Conv2d(self.chs[0], out_ch, 3, padding=1)

    def decode(self, x: Tensor) -> list[Tensor]:
        """Decoder features [full, 1/2, 1/4, ...] (fine to coarse)."""
        h, w = x.shape[-2:]
        align = 2 ** len(self.down)
        if h % align or w % align:
            raise ValueError(f"input {h}x{w} not divisible by {align}")
        feats = [F.relu(self.stem(x))]
        for down in self.down:
            feats.append(F.relu(down(feats[-1])))
        y = feats[-1]
        out = []
        for i in reversed(range(len(self.up))):
            y = F.interpolate(y, scale_factor=2, mode="nearest")
            y = F.relu(self.up[i](torch.cat([y, feats[i]], dim=1)))
            out.append(y)
        return out[::-1]

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.decode(x)[0])


class FlowNet(nn.Module):
    """One shared network; forward flow from (target|source), backward from (source|target).

    The flow is the sum of zero-initialized side outputs from three decoder
    resolutions (coarse-to-fine: coarse levels lock global motion, fine levels
    add detail), soft-bounded to a fraction of the frame so a runaway flow
    cannot push every sample off the image.
    """

    MAX_FLOW_FRACTION = 0.3
    BOUND_LEAK = 0.02  # keeps a restoring gradient even when saturated

    def __init__(self, base: int = 16, levels: int = 4):
        super().__init__()
        self.net = UNet(6, 2, base, levels)
        taps = min(3, levels - 1)
        self.side = nn.ModuleList(
            nn.Conv2d(self.net.chs[i], 2, 3, padding=1) for i in range(taps))
        for conv in self.side:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def _bounded(self, raw: Tensor) -> Tensor:
        bound = self.MAX_FLOW_FRACTION * min(raw.shape[-2:])
        soft = bound * torch.tanh(raw / bound)
        return (1 - self.BOUND_LEAK) * soft + self.BOUND_LEAK * raw

    def _flow(self, pair: Tensor) -> Tensor:
        feats = self.net.decode(pair)
        full = pair.shape[-2:]
        raw = None
        for conv, feat in zip(self.side, feats):
            part = conv(feat)
            if part.shape[-2:] != full:
                part = F.interpolate(part, size=full, mode="bilinear",
                                     align_corners=False)
            raw = part if raw is None else raw + part
        return self._bounded(raw)

    def forward(self, target: Tensor, source: Tensor) -> tuple[Tensor, Tensor]:
        fwd = self._flow(torch.cat([target, source], dim=1) - 0.5)
        bwd = self._flow(torch.cat([source, target], dim=1) - 0.5)
        return fwd, bwd


class AppearanceNet(nn.Module):
    """Additive brightness-change field in [-1, 1].

    Emitted at quarter resolution and bilinearly upsampled: the field models
    smooth illumination change, and restricting it to low frequencies keeps
    it from absorbing texture-scale misalignment instead of the geometry.
    """

    HEAD_LEVEL = 2  # 1/4 resolution

    def __init__(self, base: int = 16, levels: int = 4):
        super().__init__()
        self.net = UNet(6, 3, base, levels)
        level = min(self.HEAD_LEVEL, levels - 2)
        self.level = level
        self.coarse_head = nn.Conv2d(self.net.chs[level], 3, 3, padding=1)
        nn.init.zeros_(self.coarse_head.weight)
        nn.init.zeros_(self.coarse_head.bias)

    def forward(self, target: Tensor, source: Tensor) -> Tensor:
        feats = self.net.decode(torch.cat([target, source], dim=1) - 0.5)
        coarse = self.coarse_head(feats[self.level])
        full = F.interpolate(coarse, size=target.shape[-2:], mode="bilinear",
                             align_corners=False)
        return torch.tanh(full)


class IIDNet(nn.Module):
    """Decomposes an image into reflectance in [0, 1] and non-negative shading."""

    def __init__(self, base: int = 16, levels: int = 4):
        super().__init__()
        self.net = UNet(3, 4, base, levels)

    def forward(self, image: Tensor) -> DecomposedPair:
        out = self.net(image - 0.5)
        return DecomposedPair(torch.sigmoid(out[:, :3]), F.softplus(out[:, 3:4]))


class PoseIntrinsicsNet(nn.Module):
    """Conv encoder + global pooling + separate pose and intrinsics heads."""

    TRANSLATION_SCALE = 0.01  # small-motion prior

    def __init__(self, base: int = 16):
        super().__init__()
        chs = [base, base * 2, base * 4, base * 8]
        self.encoder = nn.Sequential(
            nn.Conv2d(6, chs[0], 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(chs[0], chs[1], 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(chs[1], chs[2], 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(chs[2], chs[3], 3, stride=2, padding=1), nn.ReLU(),
        )
        self.pose_head = nn.Sequential(nn.Linear(chs[3], 64), nn.ReLU(), nn.Linear(64, 6))
        self.intr_head = nn.Sequential(nn.Linear(chs[3], 64), nn.ReLU(), nn.Linear(64, 4))

    def forward(self, target: Tensor, source: Tensor) -> PoseIntrinsicsOutput:
        x = self.encoder(torch.cat([target, source], dim=1) - 0.5)
        pooled = x.mean(dim=(2, 3))
        pose = self.pose_head(pooled)
        raw = self.intr_head(pooled)
        intr = Intrinsics(fx=F.softplus(raw[:, 0] + _SOFTPLUS_ONE),
                          fy=F.softplus(raw[:, 1] + _SOFTPLUS_ONE),
                          cx=torch.sigmoid(raw[:, 2]),
                          cy=torch.sigmoid(raw[:, 3]))
        return PoseIntrinsicsOutput(pose[:, :3], pose[:, 3:] * self.TRANSLATION_SCALE, intr)


class LoraLinear(nn.Module):
    """Frozen linear adapted by y + gate_out * (up @ (gate_in * (down @ x))).

    down ~ N(0, 1/rank), up = 0 and gates = 1, so the adapter starts as an
    exact no-op.
    """

    def __init__(self, base: nn.Linear, rank: int):
        super().__init__()
        if rank < 1:
            raise ValueError("rank must be >= 1")
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)
        self.base = base
        self.rank = rank
        kw = {"dtype": base.weight.dtype, "device": base.weight.device}
        self.down = nn.Parameter(torch.randn(rank, base.in_features, **kw) * rank ** -0.5)
        self.up = nn.Parameter(torch.zeros(base.out_features, rank, **kw))
        self.gate_in = nn.Parameter(torch.ones(rank, **kw))
        self.gate_out = nn.Parameter(torch.ones(base.out_features, **kw))

    def forward(self, x: Tensor) -> Tensor:
        return lora_apply(self, x, self.base(x))

    def gates(self) -> tuple[Tensor, Tensor]:
        return self.gate_in, self.gate_out

    def trainable_count(self) -> int:
        d_in, d_out = self.base.in_features, self.base.out_features
        return self.rank * d_in + d_out * self.rank + self.rank + d_out


def lora_apply(adapter: LoraLinear, x: Tensor, y_frozen: Tensor) -> Tensor:
    """Low-rank gated update y' = y + gate_out * (up @ (gate_in * (down @ x)))."""
    if x.shape[-1] != adapter.down.shape[-1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match adapter "
                         f"input dim {adapter.down.shape[-1]}")
    if y_frozen.shape[-1] != adapter.up.shape[0]:
        raise ValueError(f"frozen output dim {y_frozen.shape[-1]} does not match "
                         f"adapter output dim {adapter.up.shape[0]}")
    h = F.linear(x, adapter.down) * adapter.gate_in
    return y_frozen + F.linear(h, adapter.up) * adapter.gate_out


class AdapterRegistry:
    """Adapters injected into a depth encoder plus warm-up accounting.

    While warm-up steps remain, warmup_tick discards the gate gradients so
    the gate vectors receive no updates; afterwards they train normally.
    Call between backward() and optimizer.step().
    """

    def __init__(self, adapters: list[LoraLinear], warmup_steps: int):
        self.adapters = adapters
        self.warmup_remaining = warmup_steps
        self.total_ticks = 0
        self.frozen_ticks = 0

    @property
    def warming_up(self) -> bool:
        return self.warmup_remaining > 0

    def gate_parameters(self) -> list[nn.Parameter]:
        return [g for a in self.adapters for g in a.gates()]

    def warmup_tick(self) -> None:
        self.total_ticks += 1
        if self.warmup_remaining > 0:
            for gate in self.gate_parameters():
                gate.grad = None
            self.warmup_remaining -= 1
            self.frozen_ticks += 1

    def trainable_count(self) -> int:
        return sum(a.trainable_count() for a in self.adapters)


def inject_adapters(depth_net: DepthNet, rank: int, warmup_steps: int,
                    include_qkv: bool = True) -> AdapterRegistry:
    """Wrap the per-block qkv and feed-forward linears with adapters.

    Freezes every other encoder weight; the decoder stays fully trainable.
    """
    for param in depth_net.encoder.parameters():
        param.requires_grad_(False)
    adapters = []
    for block in depth_net.encoder.blocks:
        if include_qkv:
            block.attn.qkv = LoraLinear(block.attn.qkv, rank)
            adapters.append(block.attn.qkv)
        block.mlp.fc1 = LoraLinear(block.mlp.fc1, rank)
        block.mlp.fc2 = LoraLinear(block.mlp.fc2, rank)
        adapters.extend([block.mlp.fc1, block.mlp.fc2])
    return AdapterRegistry(adapters, warmup_steps)


@dataclass
class NetworkConfig:
    """Architecture knobs for all six roles."""

    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    decoder_channels: int = 32
    unet_base: int = 16
    unet_levels: int = 4
    pose_base: int = 16
    d_min: float = 0.1
    d_max: float = 150.0

    def depth_config(self) -> DepthNetConfig:
        return DepthNetConfig(patch_size=self.patch_size, embed_dim=self.embed_dim,
                              num_blocks=self.num_blocks, num_heads=self.num_heads,
                              decoder_channels=self.decoder_channels,
                              d_min=self.d_min, d_max=self.d_max)


def build_networks(cfg: NetworkConfig | None = None) -> dict[str, nn.Module]:
    """All networks, keyed by role. Seed torch beforehand for determinism."""
    cfg = cfg or NetworkConfig()
    return {
        "depth": DepthNet(cfg.depth_config()),
        "flow": FlowNet(cfg.unet_base, cfg.unet_levels),
        "appearance": AppearanceNet(cfg.unet_base, cfg.unet_levels),
        "pose": PoseIntrinsicsNet(cfg.pose_base),
        "iid": IIDNet(cfg.unet_base, cfg.unet_levels),
    }
