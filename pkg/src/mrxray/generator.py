"""Configurable encoder/residual/decoder generator for projection translation.

One parametric architecture realizes both presets: the proposed variant
distributes residual blocks across all resolution levels (mirrored on
the encoder and decoder sides, bottleneck counted once) and upsamples
with bilinear interpolation followed by a conv; the baseline gathers
every block at the lowest resolution and upsamples with transposed
convolutions. Downsampling is a 3x3 conv followed by an exact factor-2
average pool, which halves even dims exactly (a strided odd kernel
cannot, under this engine's exact-division rule).

Conv weights and biases are initialized U(-1/sqrt(fan_in),
+1/sqrt(fan_in)); norm gains start at one and norm shifts at small
uniform values rather than zero, because instance norm maps spatially
constant activations to exactly zero and an all-zero-shift model would
be blind to constant inputs. All draws come in layer order from one
seeded stream, so equal seeds build bit-identical models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grad
from .errors import ConfigError, DimensionError, LoadError
from .grad import Tensor

UPSAMPLE_MODES = ("bilinear_conv", "transposed_conv")


@dataclass
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 32
    levels: int = 3
    res_blocks_per_level: tuple[int, ...] = (3, 3, 3)
    upsample_mode: str = "bilinear_conv"
    outer_kernel: int = 7  # stem and head convs
    inner_kernel: int = 3  # everything else

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.res_blocks_per_level) != self.levels:
            raise ConfigError(
                f"res_blocks_per_level has {len(self.res_blocks_per_level)} "
                f"entries for {self.levels} levels"
            )
        if any(r < 0 for r in self.res_blocks_per_level):
            raise ConfigError("residual block counts must be non-negative")
        if sum(self.res_blocks_per_level) < 1:
            raise ConfigError("at least one residual block is required")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"unknown upsample mode {self.upsample_mode!r}")
        for k in (self.outer_kernel, self.inner_kernel):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if min(self.in_channels, self.out_channels, self.base_width) < 1:
            raise ConfigError("channel counts must be positive")

    def widths(self) -> list[int]:
        return [self.base_width * 2**level for level in range(self.levels)]

    def to_dict(self) -> dict[str, str]:
        return {
            "gen.in_channels": str(self.in_channels),
            "gen.out_channels": str(self.out_channels),
            "gen.base_width": str(self.base_width),
            "gen.levels": str(self.levels),
            "gen.res_blocks": ",".join(str(r) for r in self.res_blocks_per_level),
            "gen.upsample_mode": self.upsample_mode,
            "gen.outer_kernel": str(self.outer_kernel),
            "gen.inner_kernel": str(self.inner_kernel),
        }

    @classmethod
    def from_dict(cls, cfg: dict[str, str]) -> "GeneratorConfig":
        try:
            out = cls(
                in_channels=int(cfg["gen.in_channels"]),
                out_channels=int(cfg["gen.out_channels"]),
                base_width=int(cfg["gen.base_width"]),
                levels=int(cfg["gen.levels"]),
                res_blocks_per_level=tuple(
                    int(r) for r in cfg["gen.res_blocks"].split(",")
                ),
                upsample_mode=cfg["gen.upsample_mode"],
                outer_kernel=int(cfg["gen.outer_kernel"]),
                inner_kernel=int(cfg["gen.inner_kernel"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad generator config record: {exc}") from exc
        out.validate()
        return out


def preset_proposed() -> GeneratorConfig:
    """Blocks spread over every resolution, bilinear-conv upsampling."""
    return GeneratorConfig()


def preset_baseline() -> GeneratorConfig:
    """All blocks gathered at the lowest resolution, transposed-conv upsampling."""
    return GeneratorConfig(
        res_blocks_per_level=(0, 0, 9), upsample_mode="transposed_conv"
    )


PRESETS = {"proposed": preset_proposed, "baseline": preset_baseline}


# ---------------------------------------------------------------------------
# layers


NORM_SHIFT_BOUND = 0.1


class _Conv:
    def __init__(self, name, c_in, c_out, k, rng, dtype, padding="reflect", zero=False):
        bound = 1.0 / math.sqrt(c_in * k * k)
        if zero:
            w = np.zeros((c_out, c_in, k, k))
            b = np.zeros(c_out)
        else:
            w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
            b = rng.uniform(-bound, bound, size=c_out)
        self.name = name
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(b.astype(dtype), requires_grad=True)
        self.k = k
        self.padding = padding

    def forward(self, x):
        return grad.conv2d(
            x, self.w, self.b, stride=1, padding=self.padding, pad_size=self.k // 2
        )

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class _ConvTranspose:
    def __init__(self, name, c_in, c_out, k, rng, dtype):
        bound = 1.0 / math.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, size=(c_in, c_out, k, k))
        self.name = name
        self.w = Tensor(w.astype(dtype), requires_grad=True)

    def forward(self, x):
        return grad.conv_transpose2d(x, self.w, stride=2)

    def params(self):
        return [(f"{self.name}.w", self.w)]


class _Norm:
    def __init__(self, name, channels, rng, dtype, zero_shift=False):
        s = np.zeros(channels) if zero_shift else rng.uniform(
            -NORM_SHIFT_BOUND, NORM_SHIFT_BOUND, size=channels
        )
        self.name = name
        self.g = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.s = Tensor(s.astype(dtype), requires_grad=True)

    def forward(self, x):
        return grad.instance_norm(x, self.g, self.s)

    def params(self):
        return [(f"{self.name}.g", self.g), (f"{self.name}.s", self.s)]


class _ResBlock:
    """conv-norm-relu-conv-norm plus identity skip.

    Zeroing the second conv (weights and bias) and the second norm's
    shift makes the branch output exactly zero, so the block is the
    identity map.
    """

    def __init__(self, name, channels, k, rng, dtype, zero_second=False):
        self.conv1 = _Conv(f"{name}.conv1", channels, channels, k, rng, dtype)
        self.norm1 = _Norm(f"{name}.norm1", channels, rng, dtype)
        self.conv2 = _Conv(f"{name}.conv2", channels, channels, k, rng, dtype, zero=zero_second)
        self.norm2 = _Norm(f"{name}.norm2", channels, rng, dtype, zero_shift=zero_second)

    def forward(self, x):
        y = grad.relu(self.norm1.forward(self.conv1.forward(x)))
        y = self.norm2.forward(self.conv2.forward(y))
        return grad.add(x, y)

    def params(self):
        out = []
        for layer in (self.conv1, self.norm1, self.conv2, self.norm2):
            out.extend(layer.params())
        return out


class _Downsample:
    def __init__(self, name, c_in, c_out, k, rng, dtype):
        self.conv = _Conv(f"{name}.conv", c_in, c_out, k, rng, dtype)
        self.norm = _Norm(f"{name}.norm", c_out, rng, dtype)

    def forward(self, x):
        y = grad.relu(self.norm.forward(self.conv.forward(x)))
        return grad.avgpool2x(y)

    def params(self):
        return self.conv.params() + self.norm.params()


class _Upsample:
    def __init__(self, name, c_in, c_out, k, mode, rng, dtype):
        self.mode = mode
        if mode == "bilinear_conv":
            self.conv = _Conv(f"{name}.conv", c_in, c_out, k, rng, dtype)
        else:
            self.conv = _ConvTranspose(f"{name}.convt", c_in, c_out, k, rng, dtype)
        self.norm = _Norm(f"{name}.norm", c_out, rng, dtype)

    def forward(self, x):
        if self.mode == "bilinear_conv":
            y = self.conv.forward(grad.bilinear_upsample2x(x))
        else:
            y = self.conv.forward(x)
        return grad.relu(self.norm.forward(y))

    def params(self):
        return self.conv.params() + self.norm.params()


# ---------------------------------------------------------------------------
# the generator


class Generator:
    def __init__(self, config: GeneratorConfig, seed: int, dtype=np.float32,
                 residual_zero_init: bool = False):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = config.widths()
        k, k1 = config.inner_kernel, config.outer_kernel
        last = config.levels - 1

        self.stem_conv = _Conv("stem.conv", config.in_channels, widths[0], k1, rng, dtype)
        self.stem_norm = _Norm("stem.norm", widths[0], rng, dtype)
        self.enc_blocks: list[list[_ResBlock]] = []
        self.downs: list[_Downsample] = []
        for level in range(last):
            blocks = [
                _ResBlock(f"enc{level}.res{i}", widths[level], k, rng, dtype,
                          zero_second=residual_zero_init)
                for i in range(config.res_blocks_per_level[level])
            ]
            self.enc_blocks.append(blocks)
            self.downs.append(
                _Downsample(f"down{level}", widths[level], widths[level + 1], k, rng, dtype)
            )
        self.mid_blocks = [
            _ResBlock(f"mid.res{i}", widths[last], k, rng, dtype,
                      zero_second=residual_zero_init)
            for i in range(config.res_blocks_per_level[last])
        ]
        self.ups: list[_Upsample] = []
        self.dec_blocks: list[list[_ResBlock]] = []
        for level in reversed(range(last)):
            self.ups.append(
                _Upsample(f"up{level}", widths[level + 1], widths[level], k,
                          config.upsample_mode, rng, dtype)
            )
            self.dec_blocks.append([
                _ResBlock(f"dec{level}.res{i}", widths[level], k, rng, dtype,
                          zero_second=residual_zero_init)
                for i in range(config.res_blocks_per_level[level])
            ])
        self.head_conv = _Conv("head.conv", widths[0], config.out_channels, k1, rng, dtype)

    def _layers(self):
        yield self.stem_conv
        yield self.stem_norm
        for level in range(self.config.levels - 1):
            yield from self.enc_blocks[level]
            yield self.downs[level]
        yield from self.mid_blocks
        for i in range(len(self.ups)):
            yield self.ups[i]
            yield from self.dec_blocks[i]
        yield self.head_conv

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self._layers():
            for name, tensor in layer.params():
                out[name] = tensor
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape if len(x.shape) == 4 else (None,) * 4
        if n is None or c != self.config.in_channels:
            raise DimensionError(
                f"generator expects [N,{self.config.in_channels},H,W], got {x.shape}"
            )
        divisor = 2 ** (self.config.levels - 1)
        if h % divisor or w % divisor:
            raise DimensionError(
                f"spatial dims {h}x{w} must be divisible by {divisor}"
            )
        y = grad.relu(self.stem_norm.forward(self.stem_conv.forward(x)))
        for level in range(self.config.levels - 1):
            for block in self.enc_blocks[level]:
                y = block.forward(y)
            y = self.downs[level].forward(y)
        for block in self.mid_blocks:
            y = block.forward(y)
        for i in range(len(self.ups)):
            y = self.ups[i].forward(y)
            for block in self.dec_blocks[i]:
                y = block.forward(y)
        return grad.tanh(self.head_conv.forward(y))

    # -- checkpoint plumbing

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.parameters().items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(tensors) != set(params):
            missing = sorted(set(params) - set(tensors))
            extra = sorted(set(tensors) - set(params))
            raise LoadError(f"weight set mismatch: missing {missing}, extra {extra}")
        for name, tensor in params.items():
            incoming = tensors[name]
            if incoming.shape != tensor.shape:
                raise LoadError(
                    f"weight {name} has shape {incoming.shape}, expected {tensor.shape}"
                )
            tensor.data = incoming.astype(self.dtype, copy=True)


def build(config: GeneratorConfig, seed: int, dtype=np.float32,
          residual_zero_init: bool = False) -> Generator:
    return Generator(config, seed, dtype=dtype, residual_zero_init=residual_zero_init)


def from_checkpoint(config_dict: dict[str, str], tensors: dict[str, np.ndarray],
                    dtype=np.float32) -> Generator:
    """Rebuild a generator from checkpoint records (weights under "w/")."""
    gen = build(GeneratorConfig.from_dict(config_dict), seed=0, dtype=dtype)
    weights = {
        name[len("w/"):]: arr for name, arr in tensors.items() if name.startswith("w/")
    }
    gen.load_state(weights)
    return gen


def param_count(config: GeneratorConfig) -> int:
    """Closed-form learnable-scalar count; must match the built model."""
    config.validate()
    widths = config.widths()
    k, k1 = config.inner_kernel, config.outer_kernel
    last = config.levels - 1

    def conv(c_in, c_out, kk, bias=True):
        return kk * kk * c_in * c_out + (c_out if bias else 0)

    def norm(c):
        return 2 * c

    def block(c):
        return 2 * (conv(c, c, k) + norm(c))

    total = conv(config.in_channels, widths[0], k1) + norm(widths[0])  # stem
    for level, count in enumerate(config.res_blocks_per_level):
        sides = 1 if level == last else 2  # bottleneck blocks appear once
        total += sides * count * block(widths[level])
    for level in range(last):
        total += conv(widths[level], widths[level + 1], k) + norm(widths[level + 1])
        bias = config.upsample_mode == "bilinear_conv"
        total += conv(widths[level + 1], widths[level], k, bias=bias) + norm(widths[level])
    total += conv(widths[0], config.out_channels, k1)  # head
    return total
