"""Dataset assembly: phantom batches, projection pairs, manifest, scaling.

A dataset is a directory of raw projection images plus one manifest
file. The manifest holds per-channel percentile scaling records and one
line per projection pair; pair files store raw line integrals so the
scaling stays invertible.

Splits are by phantom: every projection angle of one phantom lands on
the same side, so no test-phantom information can reach training.
Scaling percentiles are likewise computed from train pairs only.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import formats
from .errors import ConfigError, LoadError
from .phantoms import PhantomSpec, generate_phantom
from .projector import ProjectionGeometry, project_pair

MAGIC_MANIFEST = "manifest v1"
SPLITS = ("train", "test")
CHANNELS = ("mr", "xray")


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    mr_path: str  # relative to the manifest directory
    xray_path: str
    split: str


class Manifest:
    """Pair listing plus per-channel (p1, p99) scaling records."""

    def __init__(self, records: list[PairRecord], norms: dict[str, tuple[float, float]]):
        seen = set()
        for rec in records:
            if rec.split not in SPLITS:
                raise ConfigError(f"unknown split {rec.split!r} for pair {rec.pair_id}")
            if rec.pair_id in seen:
                raise ConfigError(f"duplicate pair id {rec.pair_id}")
            seen.add(rec.pair_id)
        for channel, (lo, hi) in norms.items():
            if channel not in CHANNELS:
                raise ConfigError(f"unknown norm channel {channel!r}")
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise ConfigError(f"degenerate norm record for {channel}: [{lo}, {hi}]")
        if set(norms) != set(CHANNELS):
            raise ConfigError(f"manifest needs norm records for {CHANNELS}")
        self.records = list(records)
        self.norms = dict(norms)

    def split(self, name: str) -> list[PairRecord]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [rec for rec in self.records if rec.split == name]

    def save(self, path) -> None:
        lines = [MAGIC_MANIFEST]
        for channel in CHANNELS:
            lo, hi = self.norms[channel]
            lines.append(
                f"norm {channel} {formats.fmt_float(lo)} {formats.fmt_float(hi)}"
            )
        for rec in self.records:
            lines.append(f"pair {rec.pair_id} {rec.mr_path} {rec.xray_path} {rec.split}")
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="ascii") as f:
            lines = [ln.rstrip("\n") for ln in f]
        if not lines or lines[0] != MAGIC_MANIFEST:
            raise LoadError(f"{path}: not a manifest file")
        records: list[PairRecord] = []
        norms: dict[str, tuple[float, float]] = {}
        for ln in lines[1:]:
            if not ln:
                continue
            fields = ln.split(" ")
            if fields[0] == "norm" and len(fields) == 4:
                norms[fields[1]] = (float(fields[2]), float(fields[3]))
            elif fields[0] == "pair" and len(fields) == 5:
                records.append(PairRecord(fields[1], fields[2], fields[3], fields[4]))
            else:
                raise LoadError(f"{path}: bad manifest line {ln!r}")
        return cls(records, norms)


def load_pair(manifest_path, rec: PairRecord) -> tuple[np.ndarray, np.ndarray]:
    """Raw (mr, xray) projection images for one pair record."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    mr = formats.load_image(os.path.join(base, rec.mr_path))
    xray = formats.load_image(os.path.join(base, rec.xray_path))
    if mr.shape != xray.shape:
        raise LoadError(
            f"pair {rec.pair_id}: mr {mr.shape} and xray {xray.shape} shapes differ"
        )
    return mr, xray


# ---------------------------------------------------------------------------
# value scaling


def normalize(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clip-affine map of raw values to [0, 1] using a norm record."""
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0).astype(values.dtype)


def denormalize(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (values * (hi - lo) + lo).astype(values.dtype)


def to_network(values: np.ndarray) -> np.ndarray:
    """[0, 1] to the generator's tanh range [-1, 1]."""
    return (2.0 * values - 1.0).astype(values.dtype)


def from_network(values: np.ndarray) -> np.ndarray:
    return (0.5 * (values + 1.0)).astype(values.dtype)


# ---------------------------------------------------------------------------
# building


def half_turn_angles(count: int) -> list[float]:
    """`count` view angles evenly covering 180 degrees."""
    if count < 1:
        raise ConfigError(f"need at least one angle, got {count}")
    return [k * math.pi / count for k in range(count)]


def parallel_geometries(count: int, nu: int = 64, nv: int = 64,
                        du: float = 1.0, dv: float = 1.0) -> list[ProjectionGeometry]:
    return [
        ProjectionGeometry(mode="parallel", nu=nu, nv=nv, du=du, dv=dv, angle=angle)
        for angle in half_turn_angles(count)
    ]


def build_dataset(specs: list[PhantomSpec], geoms: list[ProjectionGeometry],
                  split: tuple[int, int], out_dir, step: float | None = None) -> str:
    """Project every phantom under every geometry and write a dataset.

    The first `split[0]` specs become train phantoms, the rest test
    phantoms. Returns the manifest path. Percentile scaling (1st/99th
    per channel) is computed over train pixels only.
    """
    train_count, test_count = split
    if min(train_count, test_count) < 0 or train_count + test_count != len(specs):
        raise ConfigError(
            f"split {split} does not partition {len(specs)} phantoms"
        )
    if train_count == 0:
        raise ConfigError("split leaves the train side empty")
    if not geoms:
        raise ConfigError("need at least one projection geometry")
    os.makedirs(out_dir, exist_ok=True)

    records: list[PairRecord] = []
    train_values: dict[str, list[np.ndarray]] = {ch: [] for ch in CHANNELS}
    for p_idx, spec in enumerate(specs):
        volume = generate_phantom(spec)
        which = "train" if p_idx < train_count else "test"
        for a_idx, geom in enumerate(geoms):
            mr, xray = project_pair(volume, geom, step=step)
            pair_id = f"phantom{p_idx:02d}_a{a_idx:02d}"
            mr_name = f"{pair_id}.mr.bin"
            xray_name = f"{pair_id}.xray.bin"
            formats.save_image(os.path.join(out_dir, mr_name), mr)
            formats.save_image(os.path.join(out_dir, xray_name), xray)
            records.append(PairRecord(pair_id, mr_name, xray_name, which))
            if which == "train":
                train_values["mr"].append(mr.reshape(-1))
                train_values["xray"].append(xray.reshape(-1))

    norms = {}
    for channel in CHANNELS:
        pool = np.concatenate(train_values[channel]).astype(np.float64)
        lo = float(np.percentile(pool, 1.0))
        hi = float(np.percentile(pool, 99.0))
        if hi <= lo:
            raise ConfigError(
                f"degenerate {channel} scaling: percentiles [{lo}, {hi}]"
            )
        norms[channel] = (lo, hi)

    manifest_path = os.path.join(out_dir, "manifest.txt")
    Manifest(records, norms).save(manifest_path)
    return manifest_path
