"""SphericalNormalNet network: conv embedding, spherical transformer U-net, multi-level normal heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .sphere_geom import ErpGridSpec, build_tangent_sampling_grid, sample_rows


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 64
    levels: int = 4
    base_channels: int = 32
    num_heads: int = 2
    k_samples: int = 9
    mlp_ratio: float = 2.0
    # 3 = multi-layer embedding; 1 = single conv (baseline ablation)
    embed_layers: int = 3
    # number of attention blocks kept; the rest become conv blocks (None = all)
    vit_blocks: int | None = None
    lattice_scale: float = 1.0

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.width != 2 * self.height:
            raise ValueError("width must equal 2 * height")
        if self.height % (2 ** self.levels):
            raise ValueError(f"height {self.height} not divisible by 2**levels")
        if self.base_channels % self.num_heads:
            raise ValueError("base_channels must be divisible by num_heads")
        if self.embed_layers < 1:
            raise ValueError("embed_layers must be >= 1")
        total = 2 * self.levels + 1
        if self.vit_blocks is not None:
            v = self.vit_blocks
            if v < 0 or v > total or (v > 0 and v % 2 == 0):
                raise ValueError(f"vit_blocks must be 0 or odd and <= {total}, got {v}")

    @property
    def num_scales(self) -> int:
        return max(self.levels, 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def attention_levels(self) -> set:
        """Levels (``levels`` = bottleneck) whose blocks use attention."""
        total = 2 * self.levels + 1
        v = total if self.vit_blocks is None else self.vit_blocks
        keep = set()
        if v >= 1:
            keep.add(self.levels)
        lvl = self.levels - 1
        v -= 1
        while v >= 2 and lvl >= 0:
            keep.add(lvl)
            lvl -= 1
            v -= 2
        return keep

    def to_dict(self) -> dict:
        return asdict(self)


def pano_pad(x: torch.Tensor, p: int) -> torch.Tensor:
    """Circular padding across longitude, replicate padding at the poles."""
    if p == 0:
        return x
    x = F.pad(x, (p, p, 0, 0), mode="circular")
    return F.pad(x, (0, 0, p, p), mode="replicate")


class PanoConv2d(nn.Conv2d):
    """Same-size (or strided) convolution with ERP-aware padding."""

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, groups=1, bias=True):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=0, groups=groups, bias=bias)

    def forward(self, x):
        return super().forward(pano_pad(x, self.kernel_size[0] // 2))


def upsample2x(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Bilinear upsampling that wraps across the longitude seam."""
    if factor == 1:
        return x
    H, W = x.shape[-2:]
    x = F.pad(x, (1, 1, 0, 0), mode="circular")
    x = F.interpolate(x, size=(H * factor, (W + 2) * factor), mode="bilinear", align_corners=False)
    return x[..., factor:-factor]


def resize_to(x: torch.Tensor, size) -> torch.Tensor:
    H, W = x.shape[-2:]
    if (H, W) == tuple(size):
        return x
    f = size[0] // H
    if f * H != size[0] or f * W != size[1]:
        raise ValueError(f"cannot resize {H}x{W} to {size} by an integer factor")
    return upsample2x(x, f)


class FeatureEmbed(nn.Module):
    def __init__(self, in_channels=3, out_channels=32, num_layers=3):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(num_layers):
            layers += [PanoConv2d(c, out_channels, 3), nn.BatchNorm2d(out_channels), nn.ReLU()]
            c = out_channels
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class SphericalAttention(nn.Module):
    """Deformable attention over tangent-patch samples.

    For each query token and head the module predicts ``K`` attention logits
    and ``K`` 2-D offsets (the token flow) from the query feature, samples the
    value-projected map at ``grid + flow`` and mixes the samples with the
    softmax weights.
    """

    def __init__(self, dim, num_heads, spec: ErpGridSpec, k_samples=9, lattice_scale=1.0):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.dim = dim
        self.num_heads = num_heads
        self.k_samples = k_samples
        self.spec = spec
        grid = build_tangent_sampling_grid(spec, k_samples, math.tan(spec.angular_step) * lattice_scale)
        self.register_buffer("grid", grid.as_tensor(torch.float64), persistent=False)

        self.value_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.attn_logits = nn.Linear(dim, num_heads * k_samples)
        self.flow_proj = nn.Linear(dim, num_heads * k_samples * 2)
        nn.init.zeros_(self.flow_proj.weight)
        nn.init.zeros_(self.flow_proj.bias)

        self.record = False
        self.last_weights = None
        self.last_positions = None

    def forward(self, tokens):
        # tokens: (B, N, C) with N = H * W
        B, N, C = tokens.shape
        H, W = self.spec.height, self.spec.width
        m, K = self.num_heads, self.k_samples
        ch = C // m

        weights = self.attn_logits(tokens).view(B, N, m, K).softmax(-1)
        flow = self.flow_proj(tokens).view(B, N, m, K, 2)
        pos = self.grid.to(tokens.dtype)[None, :, None] + flow

        values = self.value_proj(tokens).view(B, N, m, ch).transpose(1, 2).reshape(B * m, N, ch)
        mixed = sample_rows(
            values, H, W,
            pos.transpose(1, 2).reshape(B * m, N, K, 2),
            weights.transpose(1, 2).reshape(B * m, N, K),
        )
        out = self.out_proj(mixed.view(B, m, N, ch).transpose(1, 2).reshape(B, N, C))

        if self.record:
            self.last_weights = weights.detach()
            self.last_positions = pos.detach()
        return out


class LeFF(nn.Module):
    """Token-wise expansion, 3x3 depth-wise conv on the ERP grid, projection back."""

    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.linear1 = nn.Linear(dim, hidden_dim)
        self.dwconv = PanoConv2d(hidden_dim, hidden_dim, 3, groups=hidden_dim)
        self.linear2 = nn.Linear(hidden_dim, dim)

    def forward(self, tokens, H, W):
        B, N, _ = tokens.shape
        x = F.gelu(self.linear1(tokens))
        x = x.transpose(1, 2).reshape(B, -1, H, W)
        x = F.gelu(self.dwconv(x))
        x = x.flatten(2).transpose(1, 2)
        return self.linear2(x)


class TransformerBlock(nn.Module):
    def __init__(self, dim, num_heads, spec: ErpGridSpec, k_samples=9, mlp_ratio=2.0, lattice_scale=1.0, name="block"):
        super().__init__()
        self.spec = spec
        self.name = name
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SphericalAttention(dim, num_heads, spec, k_samples, lattice_scale)
        self.norm2 = nn.LayerNorm(dim)
        self.leff = LeFF(dim, int(dim * mlp_ratio))

    def forward(self, x):
        B, C, H, W = x.shape
        if (H, W) != (self.spec.height, self.spec.width):
            raise ValueError(f"{self.name}: expected {self.spec.height}x{self.spec.width} input, got {H}x{W}")
        t = x.flatten(2).transpose(1, 2)
        t = t + self.attn(self.norm1(t))
        t = t + self.leff(self.norm2(t), H, W)
        out = t.transpose(1, 2).reshape(B, C, H, W)
        check_finite(out, self.name)
        return out


class ConvBlock(nn.Module):
    """Residual conv block used where attention is swapped out."""

    def __init__(self, dim, name="block"):
        super().__init__()
        self.name = name
        self.conv1 = PanoConv2d(dim, dim, 3)
        self.conv2 = PanoConv2d(dim, dim, 3)

    def forward(self, x):
        out = x + self.conv2(F.gelu(self.conv1(x)))
        check_finite(out, self.name)
        return out


def check_finite(x: torch.Tensor, name: str):
    if not torch.isfinite(x).all():
        bad = (~torch.isfinite(x)).nonzero()[0].tolist()
        raise FloatingPointError(f"non-finite activation in {name} at index (b, c, v, u) = {tuple(bad)}")


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = PanoConv2d(channels, 2 * channels, 3, stride=2)

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % 2 or W % 2:
            raise ValueError(f"downsample needs even spatial size, got {H}x{W}")
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        if channels % 2:
            raise ValueError(f"upsample needs an even channel count, got {channels}")
        self.proj = nn.Conv2d(channels, channels // 2, 1)

    def forward(self, x):
        return self.proj(upsample2x(x))


class NormalHead(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = PanoConv2d(channels, 3, 3)

    def forward(self, x):
        return torch.tanh(self.conv(x))


class SphericalNormalNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        L = cfg.levels
        attn_levels = cfg.attention_levels()

        def block(level, dim, name):
            spec = ErpGridSpec(cfg.height >> level, cfg.width >> level)
            if level in attn_levels:
                return TransformerBlock(dim, cfg.num_heads, spec, cfg.k_samples, cfg.mlp_ratio, cfg.lattice_scale, name)
            return ConvBlock(dim, name)

        self.embed = FeatureEmbed(3, cfg.base_channels, cfg.embed_layers)
        self.encoder = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(L):
            self.encoder.append(block(i, cfg.channels(i), f"encoder.{i}"))
            self.down.append(Downsample(cfg.channels(i)))
        self.bottleneck = block(L, cfg.channels(L), "bottleneck") if L > 0 else None

        # decoder/head index 0 is the coarsest scale
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.decoder = nn.ModuleList()
        self.heads = nn.ModuleList()
        for j in reversed(range(L)):
            c = cfg.channels(j)
            self.up.append(Upsample(2 * c))
            self.fuse.append(nn.Conv2d(2 * c, c, 1))
            self.decoder.append(block(j, c, f"decoder.{j}"))
            self.heads.append(NormalHead(c))
        if L == 0:
            self.heads.append(NormalHead(cfg.base_channels))

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, SphericalAttention)]

    def set_record(self, flag: bool):
        for m in self.attention_modules():
            m.record = flag

    def forward(self, rgb):
        cfg = self.config
        if rgb.shape[-2:] != (cfg.height, cfg.width) or rgb.shape[1] != 3:
            raise ValueError(f"expected (B, 3, {cfg.height}, {cfg.width}) input, got {tuple(rgb.shape)}")
        x = self.embed(rgb)
        if cfg.levels == 0:
            return [self.heads[0](x)]
        skips = []
        for enc, down in zip(self.encoder, self.down):
            x = enc(x)
            skips.append(x)
            x = down(x)
        x = self.bottleneck(x)
        outs = []
        for up, fuse, dec, head, skip in zip(self.up, self.fuse, self.decoder, self.heads, reversed(skips)):
            x = dec(fuse(torch.cat([up(x), skip], dim=1)))
            outs.append(head(x))
        return outs


def param_count(config: ModelConfig) -> int:
    model = SphericalNormalNet(config)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_manifest(model: nn.Module) -> str:
    """One ``name<TAB>shape`` line per parameter, for diffing checkpoints."""
    lines = [f"{name}\t{tuple(p.shape)}" for name, p in model.named_parameters()]
    return "\n".join(lines) + "\n"
