"""Fixed-weight multi-scale feature extractor for the perceptual loss.

A four-stage stack of 3x3 zero-padded convs with relu, widths
8/16/32/64, with factor-2 average pooling between stages. Stage outputs
are taken before pooling, so their downsampling factors are 1, 2, 4,
and 8. Zero padding keeps the stack defined down to 1x1 maps, so inputs
as small as 8x8 are accepted. The weights are never trained; a deterministic seed-generated
bundle ships with the package, and loaders record its content hash so
checkpoints can pin the exact feature space they were trained against.
"""

from __future__ import annotations

import importlib.resources
import io
import math

import numpy as np

from . import formats, grad
from .errors import DimensionError, LoadError
from .grad import Tensor

STAGE_WIDTHS = (8, 16, 32, 64)
STAGE_FACTORS = (1, 2, 4, 8)
DEFAULT_BUNDLE = "feature_weights_v1.bin"
DEFAULT_BUNDLE_SEED = 61


def make_weight_bundle(seed: int = DEFAULT_BUNDLE_SEED) -> dict[str, np.ndarray]:
    """Generate the fixed conv stack deterministically.

    Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) keeps activation variance
    roughly constant through relu stages, so every scale of the stack
    contributes comparably to feature differences. Biases are zero.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    c_in = 1
    for i, width in enumerate(STAGE_WIDTHS):
        bound = math.sqrt(6.0 / (c_in * 9))
        w = rng.uniform(-bound, bound, size=(width, c_in, 3, 3))
        tensors[f"stage{i}.weight"] = w.astype(np.float32)
        tensors[f"stage{i}.bias"] = np.zeros(width, dtype=np.float32)
        c_in = width
    return tensors


class FeatureExtractor:
    """Immutable feature stack: image -> {stage index: activation map}."""

    def __init__(self, tensors: dict[str, np.ndarray], bundle_sha256: str = ""):
        self.bundle_sha256 = bundle_sha256
        self.stages: list[tuple[Tensor, Tensor]] = []
        c_in = 1
        for i, width in enumerate(STAGE_WIDTHS):
            try:
                w = tensors[f"stage{i}.weight"]
                b = tensors[f"stage{i}.bias"]
            except KeyError as exc:
                raise LoadError(f"feature bundle is missing stage {i}") from exc
            if w.shape != (width, c_in, 3, 3) or b.shape != (width,):
                raise LoadError(
                    f"feature bundle stage {i} has shapes {w.shape}/{b.shape}, "
                    f"expected {(width, c_in, 3, 3)}/{(width,)}"
                )
            self.stages.append((Tensor(w), Tensor(b)))
            c_in = width
        self.layers = tuple(range(len(self.stages)))
        self.factors = dict(zip(self.layers, STAGE_FACTORS))

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        return cls(formats.load_tensor_bundle(path), formats.sha256_file(path))

    @classmethod
    def default(cls) -> "FeatureExtractor":
        ref = importlib.resources.files("mrxray").joinpath("data", DEFAULT_BUNDLE)
        data = ref.read_bytes()
        return cls(
            formats.read_tensor_bundle(io.BytesIO(data)), formats.sha256_bytes(data)
        )

    def as_dtype(self, dtype) -> "FeatureExtractor":
        """Copy with weights cast, for double-precision gradient checks."""
        clone = FeatureExtractor.__new__(FeatureExtractor)
        clone.bundle_sha256 = self.bundle_sha256
        clone.stages = [
            (Tensor(w.data.astype(dtype)), Tensor(b.data.astype(dtype)))
            for w, b in self.stages
        ]
        clone.layers = self.layers
        clone.factors = self.factors
        return clone

    def extract(self, image: Tensor) -> dict[int, Tensor]:
        """All stage activations; differentiable w.r.t. the image."""
        if image.data.ndim != 4 or image.shape[1] != 1:
            raise DimensionError(
                f"feature input must be [N,1,H,W], got {image.shape}"
            )
        depth = len(self.stages)
        divisor = 2 ** (depth - 1)
        if image.shape[2] % divisor or image.shape[3] % divisor:
            raise DimensionError(
                f"feature input dims {image.shape[2]}x{image.shape[3]} "
                f"must be divisible by {divisor}"
            )
        feats: dict[int, Tensor] = {}
        x = image
        for i, (w, b) in enumerate(self.stages):
            x = grad.relu(grad.conv2d(x, w, b, stride=1, padding="zero", pad_size=1))
            feats[i] = x
            if i + 1 < depth:
                x = grad.avgpool2x(x)
        return feats


def feature_extract(fe: FeatureExtractor, image: Tensor) -> dict[int, Tensor]:
    return fe.extract(image)


def _data_bytes(name: str) -> bytes:
    return importlib.resources.files("mrxray").joinpath("data", name).read_bytes()


def load_probe_image() -> np.ndarray:
    """The bundled 8x8 regression image."""
    return formats.read_image(io.BytesIO(_data_bytes("feature_probe_v1.bin")))


def load_probe_features() -> dict[str, np.ndarray]:
    """Stage activations of the probe image, frozen at bundle creation."""
    return formats.read_tensor_bundle(
        io.BytesIO(_data_bytes("feature_probe_features_v1.bin"))
    )
