"""Edge-weighted perceptual loss, plus unweighted and pixel baselines.

The perceptual loss compares fixed-extractor activations of the label L
and the generated image G at several scales. With edge weighting, every
element of the per-scale difference is multiplied by a pooled Sobel edge
map of the label, floored at eps, so edge regions are emphasized and
homogeneous regions attenuated without ever being zeroed. Only the G
branch is differentiated; the label features and the edge pyramid are
constants of the optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad
from .errors import ConfigError, DimensionError
from .features import FeatureExtractor
from .grad import Tensor

SOBEL_GX = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_GY = SOBEL_GX.T

NORMS = ("weighted_L1", "weighted_L2")


@dataclass
class LossConfig:
    layers: tuple[int, ...] = (0, 1, 2, 3)
    edge_weighting: bool = True
    eps: float = 0.1
    norm: str = "weighted_L1"
    layer_weights: tuple[float, ...] | None = None  # default: all ones
    signed_sum: bool = False  # literal signed reading, experimentation only

    def validate(self) -> None:
        if not self.layers:
            raise ConfigError("loss layer set must be non-empty")
        if len(set(self.layers)) != len(self.layers):
            raise ConfigError("loss layer set contains duplicates")
        if not 0.0 < self.eps < 1.0:
            raise ConfigError(f"edge floor eps must be in (0,1), got {self.eps}")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown loss norm {self.norm!r}")
        if self.layer_weights is not None:
            if len(self.layer_weights) != len(self.layers):
                raise ConfigError("layer_weights length must match layers")
            if any(w < 0 for w in self.layer_weights):
                raise ConfigError("layer weights must be non-negative")

    def weights(self) -> tuple[float, ...]:
        if self.layer_weights is None:
            return (1.0,) * len(self.layers)
        return tuple(float(w) for w in self.layer_weights)

    def to_dict(self) -> dict[str, str]:
        if self.layer_weights is None:
            weights = ""
        else:
            weights = ",".join(repr(float(w)) for w in self.layer_weights)
        return {
            "loss.layers": ",".join(str(s) for s in self.layers),
            "loss.edge_weighting": "1" if self.edge_weighting else "0",
            "loss.eps": repr(float(self.eps)),
            "loss.norm": self.norm,
            "loss.layer_weights": weights,
            "loss.signed_sum": "1" if self.signed_sum else "0",
        }

    @classmethod
    def from_dict(cls, cfg: dict[str, str]) -> "LossConfig":
        try:
            raw_weights = cfg["loss.layer_weights"]
            out = cls(
                layers=tuple(int(s) for s in cfg["loss.layers"].split(",")),
                edge_weighting=cfg["loss.edge_weighting"] == "1",
                eps=float(cfg["loss.eps"]),
                norm=cfg["loss.norm"],
                layer_weights=(
                    tuple(float(w) for w in raw_weights.split(","))
                    if raw_weights
                    else None
                ),
                signed_sum=cfg["loss.signed_sum"] == "1",
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad loss config record: {exc}") from exc
        out.validate()
        return out


@dataclass
class EdgeMapPyramid:
    """Per-layer constants E_s, each [N,1,h_s,w_s] with values in [eps, 1]."""

    maps: dict[int, np.ndarray]
    eps: float


@dataclass
class LossTargets:
    """Label-side constants, cacheable across training steps."""

    feats: dict[int, np.ndarray]
    pyramid: EdgeMapPyramid | None
    shape: tuple[int, ...] = field(default=())


def _image_data(image) -> np.ndarray:
    return image.data if isinstance(image, Tensor) else np.asarray(image)


def _sobel_magnitude(data: np.ndarray) -> np.ndarray:
    """Unnormalized gradient magnitude, reflect-padded correlation."""
    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    gx = np.zeros_like(data)
    gy = np.zeros_like(data)
    h, w = data.shape[2], data.shape[3]
    for dy in range(3):
        for dx in range(3):
            window = padded[:, :, dy : dy + h, dx : dx + w]
            if SOBEL_GX[dy, dx]:
                gx += SOBEL_GX[dy, dx] * window
            if SOBEL_GY[dy, dx]:
                gy += SOBEL_GY[dy, dx] * window
    return np.sqrt(gx * gx + gy * gy)


def sobel_edge_map(image) -> Tensor:
    """Per-image max-normalized edge magnitude; label-side, not recorded."""
    data = _image_data(image)
    if data.ndim != 4 or data.shape[1] != 1:
        raise DimensionError(f"sobel_edge_map expects [N,1,H,W], got {data.shape}")
    if data.shape[2] < 2 or data.shape[3] < 2:
        raise DimensionError("sobel_edge_map needs at least 2x2 images")
    mag = _sobel_magnitude(data)
    top = mag.max(axis=(1, 2, 3), keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        normed = np.where(top > 0, mag / top, 0.0)
    return Tensor(normed.astype(data.dtype), requires_grad=False)


def _avgpool_factor(arr: np.ndarray, factor: int) -> np.ndarray:
    out = arr
    steps = int(np.log2(factor)) if factor > 1 else 0
    if 2**steps != factor:
        raise DimensionError(f"pyramid factor must be a power of 2, got {factor}")
    for _ in range(steps):
        n, c, h, w = out.shape
        if h % 2 or w % 2:
            raise DimensionError(
                f"edge map dims {h}x{w} not divisible for factor {factor}"
            )
        out = out.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return out


def edge_pyramid(edge_map, fe: FeatureExtractor, cfg: LossConfig) -> EdgeMapPyramid:
    """E_s = eps + (1-eps) * avgpool(edge map, factor of layer s)."""
    cfg.validate()
    data = _image_data(edge_map)
    maps: dict[int, np.ndarray] = {}
    for s in cfg.layers:
        if s not in fe.factors:
            raise ConfigError(f"extractor has no layer {s}")
        pooled = _avgpool_factor(data, fe.factors[s])
        maps[s] = (cfg.eps + (1.0 - cfg.eps) * pooled).astype(data.dtype)
    return EdgeMapPyramid(maps=maps, eps=cfg.eps)


def label_targets(label, fe: FeatureExtractor, cfg: LossConfig) -> LossTargets:
    """Precompute the constant label branch (features + pyramid)."""
    cfg.validate()
    data = _image_data(label)
    const = Tensor(data, requires_grad=False)
    feats = fe.extract(const)
    pyramid = None
    if cfg.edge_weighting:
        pyramid = edge_pyramid(sobel_edge_map(const), fe, cfg)
    return LossTargets(
        feats={s: feats[s].data for s in cfg.layers},
        pyramid=pyramid,
        shape=tuple(data.shape),
    )


def perceptual_loss_against(
    targets: LossTargets, generated: Tensor, fe: FeatureExtractor, cfg: LossConfig
) -> Tensor:
    cfg.validate()
    if targets.shape and tuple(generated.shape) != targets.shape:
        raise DimensionError(
            f"generated shape {generated.shape} does not match label {targets.shape}"
        )
    gen_feats = fe.extract(generated)
    total: Tensor | None = None
    for s, w in zip(cfg.layers, cfg.weights()):
        diff = grad.sub(Tensor(targets.feats[s], requires_grad=False), gen_feats[s])
        if cfg.signed_sum:
            per_elem = diff
        elif cfg.norm == "weighted_L1":
            per_elem = grad.absval(diff)
        else:
            per_elem = grad.hadamard(diff, diff)
        if cfg.edge_weighting:
            weight_map = Tensor(targets.pyramid.maps[s], requires_grad=False)
            per_elem = grad.hadamard(per_elem, weight_map)
        term = grad.tmean(per_elem)
        if w != 1.0:
            term = grad.scale(term, w)
        total = term if total is None else grad.add(total, term)
    return total


def perceptual_loss(label, generated: Tensor, fe: FeatureExtractor, cfg: LossConfig) -> Tensor:
    """Edge-weighted multi-scale feature loss; gradients flow into the
    generated branch only."""
    return perceptual_loss_against(label_targets(label, fe, cfg), generated, fe, cfg)


def pixel_loss(label, generated: Tensor, norm: str = "L1") -> Tensor:
    """mean |L-G| or mean (L-G)^2."""
    if norm not in ("L1", "L2"):
        raise ConfigError(f"unknown pixel loss norm {norm!r}")
    label_t = label if isinstance(label, Tensor) else Tensor(np.asarray(label))
    diff = grad.sub(label_t, generated)
    if norm == "L1":
        return grad.tmean(grad.absval(diff))
    return grad.tmean(grad.hadamard(diff, diff))
