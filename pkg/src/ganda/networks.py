"""Generator (U-Net with a residual middle path) and DCGAN-style discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidSpec, ShapeMismatch

INIT_STD = 0.02


def _as_tuple(v):
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class GeneratorSpec:
    input_channels: int = 2
    contracting_filters: tuple = (32, 64, 128)
    residual_blocks: int = 3
    residual_filters: int = 128
    expansive_filters: tuple = (128, 64, 32)
    boundary_kernel_px: int = 7
    inner_kernel_px: int = 3
    stride: int = 2
    skip_connections: bool = True
    leaky_slope: float = 0.2
    bn_momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "contracting_filters", _as_tuple(self.contracting_filters))
        object.__setattr__(self, "expansive_filters", _as_tuple(self.expansive_filters))

    @classmethod
    def scaled(cls, input_channels=2, filters=(8, 16, 32), **kw) -> "GeneratorSpec":
        """Spec with the default topology but different filter counts."""
        filters = _as_tuple(filters)
        return cls(input_channels=input_channels, contracting_filters=filters,
                   residual_filters=filters[-1], expansive_filters=filters[::-1], **kw)

    @property
    def downsample_factor(self) -> int:
        return self.stride ** len(self.contracting_filters)

    def validate(self) -> None:
        c, e = self.contracting_filters, self.expansive_filters
        if self.input_channels < 1:
            raise InvalidSpec("input_channels must be >= 1")
        if not c:
            raise InvalidSpec("contracting path needs at least one layer")
        if any(f <= 0 for f in c + e) or self.residual_filters <= 0:
            raise InvalidSpec("filter counts must be positive")
        if e != c[::-1]:
            raise InvalidSpec(f"expansive filters {e} must mirror contracting filters {c}")
        if self.residual_filters != c[-1]:
            raise InvalidSpec("residual_filters must equal the last contracting filter count")
        if self.residual_blocks < 0:
            raise InvalidSpec("residual_blocks must be >= 0")
        if self.boundary_kernel_px % 2 == 0 or self.inner_kernel_px % 2 == 0:
            raise InvalidSpec("kernel sizes must be odd")
        if self.stride < 1:
            raise InvalidSpec("stride must be >= 1")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise InvalidSpec("bn_momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["contracting_filters"] = list(self.contracting_filters)
        d["expansive_filters"] = list(self.expansive_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown generator spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_channels: int = 1
    conv_filters: tuple = (16, 32, 64, 128, 256, 512)
    kernel_px: int = 4
    stride: int = 2
    input_size_px: int = 512
    leaky_slope: float = 0.2
    first_layer_norm: bool = False
    conditional: bool = False
    bn_momentum: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", _as_tuple(self.conv_filters))

    @property
    def feature_size_px(self) -> int:
        return self.input_size_px // self.stride ** len(self.conv_filters)

    def validate(self) -> None:
        if self.input_channels < 1:
            raise InvalidSpec("input_channels must be >= 1")
        if not self.conv_filters or any(f <= 0 for f in self.conv_filters):
            raise InvalidSpec("conv_filters must be a non-empty list of positive ints")
        if self.kernel_px != 2 * self.stride:
            raise InvalidSpec("kernel_px must equal 2 * stride so each layer divides by stride")
        if self.input_size_px % self.stride ** len(self.conv_filters):
            raise InvalidSpec(
                f"input_size_px {self.input_size_px} not divisible by "
                f"{self.stride}^{len(self.conv_filters)}"
            )
        if self.conditional and self.input_channels < 2:
            raise InvalidSpec("a conditional discriminator also sees the source channels")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise InvalidSpec("bn_momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidSpec(f"unknown discriminator spec keys: {sorted(unknown)}")
        return cls(**d)


def _bn(channels, momentum):
    # Keras-style momentum m keeps m of the running value; torch keeps 1 - m.
    return nn.BatchNorm2d(channels, momentum=1.0 - momentum)


class ResidualBlock(nn.Module):
    """x + act(BN(conv(x))); the identity when the conv weights are zero."""

    def __init__(self, channels, kernel, slope, momentum):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel, padding=kernel // 2, bias=False)
        self.bn = _bn(channels, momentum)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return x + self.act(self.bn(self.conv(x)))


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        s, m = spec.stride, spec.bn_momentum

        self.down = nn.ModuleList()
        in_ch = spec.input_channels
        for i, f in enumerate(spec.contracting_filters):
            k = spec.boundary_kernel_px if i == 0 else spec.inner_kernel_px
            self.down.append(nn.Sequential(
                nn.Conv2d(in_ch, f, k, stride=s, padding=k // 2, bias=False),
                _bn(f, m),
                nn.LeakyReLU(spec.leaky_slope),
            ))
            in_ch = f

        self.res = nn.Sequential(*[
            ResidualBlock(spec.residual_filters, spec.inner_kernel_px, spec.leaky_slope, m)
            for _ in range(spec.residual_blocks)
        ])

        self.up = nn.ModuleList()
        skips = list(spec.contracting_filters[:-1])[::-1]
        in_ch = spec.residual_filters
        k = spec.inner_kernel_px
        for j, f in enumerate(spec.expansive_filters):
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(in_ch, f, k, stride=s, padding=k // 2,
                                   output_padding=s - 1, bias=False),
                _bn(f, m),
                nn.ReLU(),
            ))
            in_ch = f
            if spec.skip_connections and j < len(skips):
                in_ch += skips[j]

        kb = spec.boundary_kernel_px
        self.head = nn.Conv2d(in_ch, 1, kb, padding=kb // 2)

    def forward(self, x, return_features=False):
        feats = []
        for block in self.down:
            x = block(x)
            feats.append(x)
        x = self.res(x)
        skips = feats[:-1][::-1]
        for j, block in enumerate(self.up):
            x = block(x)
            if self.spec.skip_connections and j < len(skips):
                x = torch.cat([x, skips[j]], dim=1)
        out = torch.tanh(self.head(x))
        if return_features:
            return out, feats
        return out


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        layers = []
        in_ch = spec.input_channels
        pad = (spec.kernel_px - spec.stride) // 2
        for i, f in enumerate(spec.conv_filters):
            use_bn = i > 0 or spec.first_layer_norm
            layers.append(nn.Conv2d(in_ch, f, spec.kernel_px, stride=spec.stride,
                                    padding=pad, bias=not use_bn))
            if use_bn:
                layers.append(_bn(f, spec.bn_momentum))
            layers.append(nn.LeakyReLU(spec.leaky_slope))
            in_ch = f
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch * spec.feature_size_px ** 2, 1)

    def logits(self, x):
        return self.fc(torch.flatten(self.features(x), 1))

    def forward(self, x):
        return torch.sigmoid(self.logits(x)).squeeze(1)

    def feature_sizes(self, x):
        """Spatial size after every conv block, for shape checks."""
        sizes = []
        for mod in self.features:
            x = mod(x)
            if isinstance(mod, nn.LeakyReLU):
                sizes.append(tuple(x.shape[-2:]))
        return sizes


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """N(0, 0.02) conv/linear weights, zero biases, unit BN scale; fully seeded."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                w = torch.randn(mod.weight.shape, generator=gen, dtype=torch.float64)
                mod.weight.copy_(w * INIT_STD)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
                mod.reset_running_stats()
    return model


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    return init_weights(Generator(spec), seed)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> Discriminator:
    return init_weights(Discriminator(spec), seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _to_nchw(batch, channels, dtype):
    t = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[-1] != channels:
        raise ShapeMismatch(f"expected (N, H, W, {channels}) batch, got {tuple(t.shape)}")
    return t.permute(0, 3, 1, 2).to(dtype).contiguous()


def _param_dtype(model):
    return next(model.parameters()).dtype


def generator_forward(g: Generator, batch) -> np.ndarray:
    """Inference on an (N, H, W, C) batch; returns (N, H, W, 1) in [-1, 1]."""
    x = _to_nchw(batch, g.spec.input_channels, _param_dtype(g))
    f = g.spec.downsample_factor
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeMismatch(f"spatial dims {tuple(x.shape[2:])} must be divisible by {f}")
    g.eval()
    with torch.no_grad():
        out = g(x)
    return out.permute(0, 2, 3, 1).cpu().numpy()


def discriminator_forward(d: Discriminator, batch) -> np.ndarray:
    """Inference on an (N, H, W, C) batch; returns N probabilities in (0, 1)."""
    x = _to_nchw(batch, d.spec.input_channels, _param_dtype(d))
    if tuple(x.shape[2:]) != (d.spec.input_size_px,) * 2:
        raise ShapeMismatch(
            f"discriminator expects {d.spec.input_size_px}px inputs, got {tuple(x.shape[2:])}"
        )
    d.eval()
    with torch.no_grad():
        out = d(x)
    return out.cpu().numpy()
