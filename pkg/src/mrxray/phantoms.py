"""Procedural two-channel head phantoms.

A phantom is painted from ellipsoids onto a voxel grid centered on the
isocenter. The first ellipsoid is the head itself; when the skull-shell
flag is set, the rim between the head surface and its 0.88-scaled copy
is bone (high attenuation, near-zero MR intensity), which guarantees a
structure visible in exactly one modality. Remaining ellipsoids are
soft-tissue structures confined to the brain so no structure ever
touches the volume boundary. Coverage is antialiased by 2x supersampling
per axis, and later ellipsoids overwrite earlier ones in proportion to
their coverage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .projector import Volume

BRAIN_SHRINK = 0.88  # skull shell occupies the rim outside this scale


@dataclass(frozen=True)
class TissueClass:
    name: str
    mr: float  # MR intensity, arbitrary units
    mu: float  # attenuation, 1/mm


BRAIN = TissueClass("brain", mr=0.7, mu=0.02)
BONE = TissueClass("bone", mr=0.02, mu=0.08)

SOFT_TISSUES = (
    TissueClass("ventricle", mr=1.0, mu=0.018),
    TissueClass("lesion", mr=0.85, mu=0.024),
    TissueClass("vessel", mr=0.55, mu=0.028),
    TissueClass("calcification", mr=0.05, mu=0.055),
)


@dataclass
class PhantomSpec:
    """Everything that determines a phantom; the seed fixes all draws."""

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ellipsoid_count: tuple[int, int] = (4, 7)  # inclusive range, head included
    tissues: tuple[TissueClass, ...] = SOFT_TISSUES
    skull_shell: bool = True
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.ellipsoid_count
        if lo > hi:
            raise ConfigError(f"ellipsoid count range is degenerate: {lo} > {hi}")
        if lo < 0:
            raise ConfigError("ellipsoid counts must be non-negative")
        if not self.tissues:
            raise ConfigError("at least one tissue class is required")
        for tissue in (*self.tissues, BRAIN, BONE):
            if tissue.mr < 0 or tissue.mu < 0:
                raise ConfigError(f"tissue {tissue.name!r} has negative values")
        if any(int(d) < 2 for d in self.dims):
            raise ConfigError(f"phantom dims must be >= 2 per axis, got {self.dims}")
        if any(not s > 0 for s in self.spacing):
            raise ConfigError(f"phantom spacing must be positive, got {self.spacing}")


def _axis_coords(n: int, origin: float, step: float) -> np.ndarray:
    """Subvoxel sample coordinates, shape (n, 2): centers -/+ a quarter step."""
    centers = origin + np.arange(n) * step
    return centers[:, None] + np.array([-0.25, 0.25]) * step


def _ellipsoid_coverage(spec: PhantomSpec, origin, center, semi) -> np.ndarray:
    """Fraction of each voxel inside the ellipsoid, from 2^3 subsamples."""
    parts = []
    for axis in range(3):
        coords = _axis_coords(spec.dims[axis], origin[axis], spec.spacing[axis])
        parts.append(((coords - center[axis]) / semi[axis]) ** 2)
    q = (
        parts[0][:, :, None, None, None, None]
        + parts[1][None, None, :, :, None, None]
        + parts[2][None, None, None, None, :, :]
    )
    return (q <= 1.0).mean(axis=(1, 3, 5))


def _paint(mr: np.ndarray, mu: np.ndarray, cov: np.ndarray, tissue: TissueClass) -> None:
    keep = 1.0 - cov
    mr *= keep
    mr += cov * tissue.mr
    mu *= keep
    mu += cov * tissue.mu


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic phantom volume; bit-identical for equal specs.

    A zero ellipsoid count yields an all-zero volume (the shell needs a
    head to attach to, so it is skipped too).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dims = np.asarray(spec.dims, dtype=np.int64)
    spacing = np.asarray(spec.spacing, dtype=np.float64)
    origin = -(dims - 1) / 2.0 * spacing
    mr = np.zeros(spec.dims)
    mu = np.zeros(spec.dims)

    lo, hi = spec.ellipsoid_count
    count = int(rng.integers(lo, hi + 1))
    if count >= 1:
        half = float(((dims - 1) * spacing).min()) / 2.0
        head_center = rng.uniform(-0.05, 0.05, size=3) * half
        head_semi = rng.uniform(0.62, 0.82, size=3) * half
        outer = _ellipsoid_coverage(spec, origin, head_center, head_semi)
        if spec.skull_shell:
            _paint(mr, mu, outer, BONE)
            inner = _ellipsoid_coverage(spec, origin, head_center, BRAIN_SHRINK * head_semi)
            _paint(mr, mu, inner, BRAIN)
            brain_semi = BRAIN_SHRINK * head_semi
        else:
            _paint(mr, mu, outer, BRAIN)
            brain_semi = head_semi
        for _ in range(count - 1):
            tissue = spec.tissues[int(rng.integers(0, len(spec.tissues)))]
            semi = rng.uniform(0.08, 0.26, size=3) * half
            room = np.maximum(0.85 * brain_semi - semi, 0.0)
            center = head_center + rng.uniform(-1.0, 1.0, size=3) * room
            _paint(mr, mu, _ellipsoid_coverage(spec, origin, center, semi), tissue)

    vol = Volume(
        dims=tuple(int(d) for d in spec.dims),
        spacing=tuple(float(s) for s in spec.spacing),
        origin=tuple(float(o) for o in origin),
        mr=mr.astype(np.float32),
        mu=mu.astype(np.float32),
    )
    vol.validate()
    return vol
