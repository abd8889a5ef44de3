"""Ray-marched forward projection of two-channel volumes.

World frame: x and y span the axial plane, z is the rotation axis, and
the isocenter sits at the world origin. A volume is positioned by the mm
offset of its first voxel center. For a rotation angle a about z the
detector axes are u = (cos a, sin a, 0) and v = (0, 0, 1); rays travel
along w = (-sin a, cos a, 0) in parallel mode, or from the point source
at -SAD*w toward the detector plane centered at (SDD-SAD)*w in cone
mode. Pixel values are line integrals in channel-unit*mm, computed with
the composite midpoint rule over trilinear samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import ClassVar

import numpy as np

from . import formats
from .errors import ContractError, GeometryError, LoadError

TWO_PI = 2.0 * math.pi


@dataclass
class Volume:
    """Registered two-channel voxel grid.

    ``mr`` holds MR intensity (arbitrary units, >= 0) and ``mu`` holds
    X-ray attenuation in 1/mm (>= 0). Both share dims, spacing, and
    origin, so the channels are aligned by construction. Voxel (i,j,k)
    is centered at origin + (i*sx, j*sy, k*sz).
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    mr: np.ndarray
    mu: np.ndarray

    CHANNELS: ClassVar[tuple[str, ...]] = ("mr", "mu")

    def validate(self) -> None:
        if len(self.dims) != 3 or any(int(d) < 2 for d in self.dims):
            raise GeometryError(f"volume dims must be >= 2 per axis, got {self.dims}")
        if len(self.spacing) != 3 or any(not s > 0.0 for s in self.spacing):
            raise GeometryError(f"voxel spacing must be positive, got {self.spacing}")
        if len(self.origin) != 3:
            raise GeometryError("origin must have three components")
        for name in self.CHANNELS:
            arr = self.channel(name)
            if arr.shape != tuple(self.dims):
                raise ContractError(
                    f"channel {name!r} shape {arr.shape} does not match dims {self.dims}"
                )
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"channel {name!r} contains non-finite values")
            if np.any(arr < 0):
                raise ContractError(f"channel {name!r} contains negative values")

    def channel(self, name: str) -> np.ndarray:
        if name not in self.CHANNELS:
            raise ContractError(f"unknown channel {name!r}")
        return getattr(self, name)

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Interpolable region: the box spanned by the voxel centers."""
        lo = np.asarray(self.origin, dtype=np.float64)
        extent = (np.asarray(self.dims, dtype=np.float64) - 1.0) * np.asarray(
            self.spacing, dtype=np.float64
        )
        return lo, lo + extent


@dataclass
class ProjectionGeometry:
    """Detector placement for one projection angle."""

    mode: str  # "parallel" or "cone"
    nu: int
    nv: int
    du: float
    dv: float
    angle: float  # radians about z
    sad: float = 0.0  # cone only: source to isocenter, mm
    sdd: float = 0.0  # cone only: source to detector, mm

    def validate(self) -> None:
        if self.mode not in ("parallel", "cone"):
            raise GeometryError(f"unknown projection mode {self.mode!r}")
        if self.nu < 1 or self.nv < 1:
            raise GeometryError(f"detector dims must be positive, got {self.nu}x{self.nv}")
        if not (self.du > 0.0 and self.dv > 0.0):
            raise GeometryError("detector pixel spacing must be positive")
        if not math.isfinite(self.angle):
            raise GeometryError("angle must be finite")
        if self.mode == "cone":
            if not self.sad > 0.0:
                raise GeometryError("cone mode needs SAD > 0")
            if not self.sdd > self.sad:
                raise GeometryError("cone mode needs SDD > SAD")


def _ray_set(geom: ProjectionGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, flattened row-major."""
    # fmod keeps exact multiples of 2*pi bit-identical to angle 0
    ang = math.fmod(geom.angle, TWO_PI)
    cos_a, sin_a = math.cos(ang), math.sin(ang)
    u_axis = np.array([cos_a, sin_a, 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    w_axis = np.array([-sin_a, cos_a, 0.0])

    pu = (np.arange(geom.nu) - (geom.nu - 1) / 2.0) * geom.du
    pv = (np.arange(geom.nv) - (geom.nv - 1) / 2.0) * geom.dv
    offsets = pv[:, None, None] * v_axis + pu[None, :, None] * u_axis  # (nv, nu, 3)

    if geom.mode == "parallel":
        origins = offsets
        dirs = np.broadcast_to(w_axis, offsets.shape).copy()
    else:
        source = -geom.sad * w_axis
        pixels = (geom.sdd - geom.sad) * w_axis + offsets
        dirs = pixels - source
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(source, offsets.shape).copy()
    return origins.reshape(-1, 3), dirs.reshape(-1, 3)


def _clip_to_box(
    origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method entry/exit parameters; t0 >= t1 marks a miss."""
    n_rays = origins.shape[0]
    t0 = np.full(n_rays, -np.inf)
    t1 = np.full(n_rays, np.inf)
    for axis in range(3):
        d = dirs[:, axis]
        r = origins[:, axis]
        zero = d == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[axis] - r) / d
            tb = (hi[axis] - r) / d
        near = np.where(zero, -np.inf, np.minimum(ta, tb))
        far = np.where(zero, np.inf, np.maximum(ta, tb))
        inside = (r >= lo[axis]) & (r <= hi[axis])
        far = np.where(zero & ~inside, -np.inf, far)
        t0 = np.maximum(t0, near)
        t1 = np.minimum(t1, far)
    return t0, t1


def _trilinear(grid: np.ndarray, dims, lo, spacing, points: np.ndarray) -> np.ndarray:
    g = (points - lo) / spacing
    top = np.asarray(dims, dtype=np.float64) - 1.0
    g = np.clip(g, 0.0, top)  # rounding guard; rays were clipped to the box
    i0 = np.minimum(g.astype(np.int64), np.asarray(dims) - 2)
    f = g - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = grid[ix, iy, iz] * (1 - fx) + grid[ix + 1, iy, iz] * fx
    c10 = grid[ix, iy + 1, iz] * (1 - fx) + grid[ix + 1, iy + 1, iz] * fx
    c01 = grid[ix, iy, iz + 1] * (1 - fx) + grid[ix + 1, iy, iz + 1] * fx
    c11 = grid[ix, iy + 1, iz + 1] * (1 - fx) + grid[ix + 1, iy + 1, iz + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def forward_project(
    vol: Volume, channel: str, geom: ProjectionGeometry, step: float | None = None
) -> np.ndarray:
    """Line-integral image of one volume channel, shape (nv, nu), float64.

    Rays that miss the volume produce exactly 0. Default step size is
    min(spacing)/2; each ray uses n = ceil(span/step) midpoint samples
    so the quadrature spans its clipped segment exactly.
    """
    vol.validate()
    geom.validate()
    if step is None:
        step = min(vol.spacing) / 2.0
    if not step > 0.0:
        raise GeometryError(f"step size must be positive, got {step}")

    lo, hi = vol.world_bounds()
    origins, dirs = _ray_set(geom)

    if geom.mode == "cone":
        center = (lo + hi) / 2.0
        radius = float(np.linalg.norm(hi - lo)) / 2.0
        if np.linalg.norm(origins[0] - center) <= radius:
            raise GeometryError("cone source lies inside the volume bounding sphere")

    t0, t1 = _clip_to_box(origins, dirs, lo, hi)
    span = t1 - t0
    hit = span > 0.0
    counts = np.zeros(origins.shape[0], dtype=np.int64)
    counts[hit] = np.ceil(span[hit] / step).astype(np.int64)
    h_ray = np.zeros_like(span)
    h_ray[hit] = span[hit] / counts[hit]

    grid = vol.channel(channel).astype(np.float64, copy=False)
    spacing = np.asarray(vol.spacing, dtype=np.float64)
    acc = np.zeros(origins.shape[0])
    for i in range(int(counts.max(initial=0))):
        active = i < counts
        t = t0[active] + (i + 0.5) * h_ray[active]
        points = origins[active] + t[:, None] * dirs[active]
        acc[active] += _trilinear(grid, vol.dims, lo, spacing, points)
    acc *= h_ray
    return acc.reshape(geom.nv, geom.nu)


def project_pair(
    vol: Volume, geom: ProjectionGeometry, step: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """(mr, xray) projection pair over the identical ray set, float32."""
    mr = forward_project(vol, "mr", geom, step)
    xray = forward_project(vol, "mu", geom, step)
    return mr.astype(np.float32), xray.astype(np.float32)


# ---------------------------------------------------------------------------
# volume files


def save_volume(path, vol: Volume) -> None:
    vol.validate()
    with open(path, "wb") as f:
        f.write((formats.MAGIC_VOLUME + "\n").encode("ascii"))
        f.write(("dims " + " ".join(str(int(d)) for d in vol.dims) + "\n").encode("ascii"))
        for key, values in (("spacing", vol.spacing), ("origin", vol.origin)):
            line = key + " " + " ".join(formats.fmt_float(v) for v in values)
            f.write((line + "\n").encode("ascii"))
        f.write(("channels " + " ".join(vol.CHANNELS) + "\n").encode("ascii"))
        for name in vol.CHANNELS:
            f.write(np.ascontiguousarray(vol.channel(name), dtype="<f4").tobytes())


def _header_fields(f, key: str, count: int) -> list[str]:
    line = formats.read_line(f)
    parts = line.split()
    if len(parts) != count + 1 or parts[0] != key:
        raise LoadError(f"bad volume header line: {line!r}")
    return parts[1:]


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        if formats.read_line(f) != formats.MAGIC_VOLUME:
            raise LoadError(f"{path}: not a volume file")
        try:
            dims = tuple(int(v) for v in _header_fields(f, "dims", 3))
            spacing = tuple(float(v) for v in _header_fields(f, "spacing", 3))
            origin = tuple(float(v) for v in _header_fields(f, "origin", 3))
        except ValueError as exc:
            raise LoadError(f"{path}: malformed volume header") from exc
        names = tuple(_header_fields(f, "channels", len(Volume.CHANNELS)))
        if names != Volume.CHANNELS:
            raise LoadError(f"{path}: unexpected channels {names}")
        count = int(np.prod(dims, dtype=np.int64))
        channels = {}
        for name in names:
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise LoadError(f"{path}: channel {name!r} payload truncated")
            channels[name] = (
                np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
            )
    vol = Volume(dims=dims, spacing=spacing, origin=origin, **channels)
    vol.validate()
    return vol
