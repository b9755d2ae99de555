"""Frustum fusion network: point segmentation, box features, image encoder, fusion head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from . import tensor as T
from .codec import CENTER, HEADING_LOGITS, HEADING_RESIDUALS, NUM_HEADING_BIN, NUM_OUTPUTS, SIZE
from .errors import ConfigMismatch, ShapeMismatch

# output layers start near zero: uniform mask logits, prior sizes, flat heading scores
HEAD_GAIN = 0.01

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def _conv_out(size: int) -> int:
    # 3x3 kernel, stride 2, pad 1
    return (size - 1) // 2 + 1


@dataclass
class ModelConfig:
    n_points: int = 1024
    m_points: int = 512
    point_feature_dim: int = 512
    crop_size: int = 224
    stem_channels: int = 64
    backbone_channels: tuple = (64, 128, 256, 512)
    reduced_dim: int = 128
    encoder_layers: int = 3
    heads: int = 8
    ffn_dim: int = 512
    fused_dim: int = 1024
    num_classes: int = 6
    heading_bins: int = NUM_HEADING_BIN
    seg_point_widths: tuple = (64, 64, 64, 128, 1024)
    seg_local_layer: int = 1  # per-point feature concatenated with the global one
    seg_head_widths: tuple = (512, 256, 128, 128)
    box_point_widths: tuple = (128, 128, 256, 512)
    box_fc_widths: tuple = (512,)
    fusion_widths: tuple = (512, 256)
    flat_tokens: bool = False
    layer_norm: bool = True
    use_mask_channel: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))
        if self.fused_dim != 2 * self.point_feature_dim:
            raise ConfigMismatch(f"fused_dim {self.fused_dim} must be twice point_feature_dim {self.point_feature_dim}")
        if self.heading_bins != NUM_HEADING_BIN:
            raise ConfigMismatch(f"heading_bins must be {NUM_HEADING_BIN}")
        if len(self.backbone_channels) != 4:
            raise ConfigMismatch("backbone needs exactly 4 stages")
        if self.token_dim % self.heads:
            raise ConfigMismatch(f"token width {self.token_dim} not divisible by {self.heads} heads")
        if not 0 <= self.seg_local_layer < len(self.seg_point_widths):
            raise ConfigMismatch("seg_local_layer out of range")
        if self.dtype not in _DTYPES:
            raise ConfigMismatch(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def map_extent(self) -> int:
        s = _conv_out(self.crop_size)  # stem
        for _ in self.backbone_channels:
            s = _conv_out(s)
        return s

    @property
    def num_tokens(self) -> int:
        return 1 if self.flat_tokens else self.map_extent**2

    @property
    def token_dim(self) -> int:
        return self.reduced_dim * (self.map_extent**2 if self.flat_tokens else 1)

    @property
    def encoder_input_length(self) -> int:
        return self.num_tokens * self.token_dim

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Reduced widths and a 56 px crop for single-machine CPU runs."""
        base = dict(
            n_points=512,
            m_points=256,
            crop_size=56,
            stem_channels=16,
            backbone_channels=(16, 32, 64, 64),
            reduced_dim=32,
            ffn_dim=64,
            seg_point_widths=(64, 64, 128),
            seg_head_widths=(64,),
            box_point_widths=(64, 128, 128),
            box_fc_widths=(256,),
            fusion_widths=(256, 128),
            num_classes=2,
            dtype="float32",
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest shapes that still touch every layer; used by gradient checks."""
        base = dict(
            n_points=16,
            m_points=8,
            point_feature_dim=16,
            fused_dim=32,
            crop_size=48,
            stem_channels=4,
            backbone_channels=(4, 4, 8, 8),
            reduced_dim=8,
            encoder_layers=1,
            heads=2,
            ffn_dim=8,
            num_classes=2,
            seg_point_widths=(8, 16),
            seg_local_layer=0,
            seg_head_widths=(8,),
            box_point_widths=(16, 16),
            box_fc_widths=(16,),
            fusion_widths=(16,),
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ layers


class Linear(nn.Module):
    def __init__(self, fan_in: int, fan_out: int, gen: torch.Generator, dtype, gain: float = math.sqrt(6.0)):
        super().__init__()
        bound = gain / math.sqrt(fan_in)
        self.weight = nn.Parameter(torch.empty(fan_out, fan_in, dtype=dtype).uniform_(-bound, bound, generator=gen))
        self.bias = nn.Parameter(torch.zeros(fan_out, dtype=dtype))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class MLP(nn.Module):
    """Stack of Linear+ReLU layers; ``last_relu=False`` leaves the last layer linear."""

    def __init__(self, widths, gen, dtype, last_relu: bool = True, out_gain: float = 1.0):
        super().__init__()
        self.layers = nn.ModuleList(
            Linear(a, b, gen, dtype, gain=math.sqrt(6.0) if (last_relu or i < len(widths) - 2) else out_gain)
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        )
        self.last_relu = last_relu

    def forward(self, x, keep: int | None = None):
        kept = None
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.last_relu or i < len(self.layers) - 1:
                x = T.relu(x)
            if i == keep:
                kept = x
        return (x, kept) if keep is not None else x


class Conv(nn.Module):
    def __init__(self, cin, cout, k, gen, dtype):
        super().__init__()
        bound = math.sqrt(6.0 / (cin * k * k))
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k, dtype=dtype).uniform_(-bound, bound, generator=gen))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=dtype))
        self.pad = k // 2

    def forward(self, x, stride: int = 1):
        return T.conv2d(x, self.weight, self.bias, stride=stride, pad=self.pad)


class ResidualStage(nn.Module):
    """Strided 3x3 entry conv, then a 3x3 conv whose output is added back before ReLU."""

    def __init__(self, cin, cout, gen, dtype):
        super().__init__()
        self.entry = Conv(cin, cout, 3, gen, dtype)
        self.body = Conv(cout, cout, 3, gen, dtype)

    def forward(self, x):
        y = T.relu(self.entry(x, stride=2))
        return T.relu(y + self.body(y))


class LayerNorm(nn.Module):
    def __init__(self, dim, dtype):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias)


class EncoderLayer(nn.Module):
    """Post-norm encoder layer: self-attention and a ReLU feed-forward, each with a residual."""

    def __init__(self, dim, heads, ffn_dim, layer_norm, gen, dtype):
        super().__init__()
        self.heads = heads
        self.q, self.k, self.v = (Linear(dim, dim, gen, dtype, gain=math.sqrt(3.0)) for _ in range(3))
        self.o = Linear(dim, dim, gen, dtype, gain=math.sqrt(3.0))
        self.ff1 = Linear(dim, ffn_dim, gen, dtype)
        self.ff2 = Linear(ffn_dim, dim, gen, dtype, gain=math.sqrt(3.0))
        self.norm1 = LayerNorm(dim, dtype) if layer_norm else None
        self.norm2 = LayerNorm(dim, dtype) if layer_norm else None

    def attention_params(self) -> T.AttentionParams:
        return T.AttentionParams(
            self.q.weight, self.k.weight, self.v.weight, self.o.weight,
            self.q.bias, self.k.bias, self.v.bias, self.o.bias,
        )

    def forward(self, x):
        x = x + T.multihead_self_attention(x, self.heads, self.attention_params())
        if self.norm1 is not None:
            x = self.norm1(x)
        x = x + self.ff2(T.relu(self.ff1(x)))
        if self.norm2 is not None:
            x = self.norm2(x)
        return x


# ------------------------------------------------------------------ networks


def _batched(x: torch.Tensor, dims: int):
    if x.dim() == dims:
        return x.unsqueeze(0), True
    if x.dim() == dims + 1:
        return x, False
    raise ShapeMismatch(f"expected a {dims}-d input or a batch of them, got shape {tuple(x.shape)}")


class FusionNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(seed))
        dt = cfg.torch_dtype
        K, P = cfg.num_classes, cfg.point_feature_dim

        # instance segmentation
        sw = cfg.seg_point_widths
        self.seg_point = MLP((4,) + sw, gen, dt)
        local = sw[cfg.seg_local_layer]
        self.seg_head = MLP((local + sw[-1] + K,) + cfg.seg_head_widths + (2,), gen, dt, last_relu=False, out_gain=HEAD_GAIN)

        # box feature from the selected object points
        bw = cfg.box_point_widths
        self.box_point = MLP((4,) + bw, gen, dt)
        self.box_fc = MLP((bw[-1] + K,) + cfg.box_fc_widths + (P,), gen, dt)

        # image crop feature
        self.stem = Conv(3, cfg.stem_channels, 3, gen, dt)
        chans = (cfg.stem_channels,) + tuple(cfg.backbone_channels)
        self.stages = nn.ModuleList(ResidualStage(a, b, gen, dt) for a, b in zip(chans[:-1], chans[1:]))
        self.reduce = Conv(chans[-1], cfg.reduced_dim, 1, gen, dt)
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.num_tokens, cfg.token_dim, generator=gen, dtype=dt))
        self.encoder = nn.ModuleList(
            EncoderLayer(cfg.token_dim, cfg.heads, cfg.ffn_dim, cfg.layer_norm, gen, dt) for _ in range(cfg.encoder_layers)
        )
        self.image_out = Linear(cfg.token_dim, P, gen, dt, gain=math.sqrt(3.0))

        self.fusion = MLP((cfg.fused_dim,) + cfg.fusion_widths + (NUM_OUTPUTS,), gen, dt, last_relu=False, out_gain=HEAD_GAIN)

    @property
    def dtype(self) -> torch.dtype:
        return self.cfg.torch_dtype

    def _points(self, points: torch.Tensor, n: int | None) -> tuple[torch.Tensor, bool]:
        pts, single = _batched(points, 2)
        if pts.shape[-1] != 4 or (n is not None and pts.shape[-2] != n):
            raise ShapeMismatch(f"expected ({n}, 4) points, got {tuple(pts.shape[-2:])}")
        if not self.cfg.use_mask_channel:
            pts = torch.cat([pts[..., :3], torch.zeros_like(pts[..., 3:])], dim=-1)
        return pts, single

    def _onehot(self, onehot: torch.Tensor, batch: int) -> torch.Tensor:
        oh = onehot.reshape(-1, onehot.shape[-1]) if onehot.dim() > 1 else onehot.unsqueeze(0)
        if oh.shape[-1] != self.cfg.num_classes:
            raise ShapeMismatch(f"class code has {oh.shape[-1]} entries, config expects {self.cfg.num_classes}")
        if oh.shape[0] == 1 and batch > 1:
            oh = oh.expand(batch, -1)
        if oh.shape[0] != batch:
            raise ShapeMismatch("class codes and points disagree on batch size")
        return oh

    def segment(self, points: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
        """Per-point foreground/background logits, (n, 2) or (B, n, 2)."""
        pts, single = self._points(points, self.cfg.n_points)
        oh = self._onehot(onehot, pts.shape[0])
        feat, local = self.seg_point(pts, keep=self.cfg.seg_local_layer)
        glob = T.reduce_max_over_points(feat)  # (B, 1, C)
        n = pts.shape[1]
        ctx = torch.cat([glob, oh.unsqueeze(1)], dim=-1).expand(-1, n, -1)
        logits = self.seg_head(torch.cat([local, ctx], dim=-1))
        return logits[0] if single else logits

    def point_feature(self, obj_points: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
        pts, _ = self._points(obj_points, self.cfg.m_points)
        oh = self._onehot(onehot, pts.shape[0])
        glob = T.reduce_max_over_points(self.box_point(pts))[:, 0]
        return self.box_fc(torch.cat([glob, oh], dim=-1))

    def image_feature(self, crop: torch.Tensor, return_tokens: bool = False):
        x, _ = _batched(crop, 3)
        s = self.cfg.crop_size
        if tuple(x.shape[1:]) != (3, s, s):
            raise ShapeMismatch(f"expected a (3, {s}, {s}) crop, got {tuple(x.shape[1:])}")
        x = T.relu(self.stem(x, stride=2))
        for stage in self.stages:
            x = stage(x)
        x = self.reduce(x)  # (B, d, l', l')
        b = x.shape[0]
        tokens = x.flatten(2).transpose(1, 2)  # one token per cell, (B, l'^2, d)
        if self.cfg.flat_tokens:
            tokens = x.reshape(b, 1, -1)
        tokens = tokens + self.pos
        for layer in self.encoder:
            tokens = layer(tokens)
        out = self.image_out(tokens.mean(dim=1))
        return (out, tokens) if return_tokens else out

    def fuse(self, point_feat: torch.Tensor, image_feat: torch.Tensor) -> torch.Tensor:
        """Concatenate (point first) and regress the 30 box parameters."""
        pf = point_feat.reshape(-1, point_feat.shape[-1])
        imf = image_feat.reshape(-1, image_feat.shape[-1])
        P = self.cfg.point_feature_dim
        if pf.shape[-1] != P or imf.shape[-1] != P or pf.shape[0] != imf.shape[0]:
            raise ShapeMismatch(f"fusion expects two (*, {P}) features, got {tuple(pf.shape)} and {tuple(imf.shape)}")
        return self.fusion(torch.cat([pf, imf], dim=-1))


def split_params(out: torch.Tensor) -> dict[str, torch.Tensor]:
    return {
        "center": out[..., CENTER],
        "size": out[..., SIZE],
        "heading_logits": out[..., HEADING_LOGITS],
        "heading_residuals": out[..., HEADING_RESIDUALS],
    }


# ------------------------------------------------------------- selection


@dataclass
class Selection:
    points: torch.Tensor  # (m, 4), xyz centered
    centroid: np.ndarray  # (3,)
    indices: np.ndarray  # rows of the input frustum
    foreground: np.ndarray  # (n,) bool predicted mask


def _exact_mean(xyz: np.ndarray) -> np.ndarray:
    # correctly rounded sums do not depend on row order
    return np.array([math.fsum(xyz[:, j]) for j in range(3)]) / len(xyz)


def select_and_center(points: torch.Tensor, logits: torch.Tensor, m: int, rng: np.random.Generator) -> Selection:
    """Pick m predicted-foreground rows and move their centroid to the origin.

    More than m foreground points are subsampled without replacement, fewer
    are padded with replacement, and an empty mask falls back to all points.
    The centroid is the mean of the whole foreground set.
    """
    pts = points.detach()
    fg = (logits.detach()[:, 1] > logits.detach()[:, 0]).cpu().numpy()
    idx = np.flatnonzero(fg)
    if idx.size == 0:
        idx = np.arange(len(pts))
    xyz = pts[torch.as_tensor(idx)][:, :3].cpu().numpy().astype(np.float64)
    centroid = _exact_mean(xyz)
    if idx.size > m:
        chosen = np.sort(rng.choice(idx, size=m, replace=False))
    elif idx.size < m:
        chosen = np.concatenate([idx, rng.choice(idx, size=m - idx.size, replace=True)])
    else:
        chosen = idx
    sel = pts[torch.as_tensor(chosen)].clone()
    sel[:, :3] -= torch.as_tensor(centroid, dtype=sel.dtype)
    return Selection(sel, centroid, chosen, fg)


@dataclass
class DetectionResult:
    box: object  # Box3D
    label: str
    confidence: float
    mask: np.ndarray
    frame_id: str = ""
    object_index: int = 0
    score: float = 0.0
    extras: dict = field(default_factory=dict)


def check_sample_shapes(cfg: ModelConfig, sample) -> None:
    if sample.points.shape != (cfg.n_points, 4):
        raise ConfigMismatch(f"sample has {sample.points.shape} points, checkpoint expects ({cfg.n_points}, 4)")
    if len(sample.class_code) != cfg.num_classes:
        raise ConfigMismatch(f"sample has {len(sample.class_code)} classes, checkpoint expects {cfg.num_classes}")
    if sample.pixels is None or sample.pixels.shape != (3, cfg.crop_size, cfg.crop_size):
        got = None if sample.pixels is None else sample.pixels.shape
        raise ConfigMismatch(f"sample crop {got} does not match checkpoint crop size {cfg.crop_size}")
