"""Checkpoint evaluation: per-pair metric rows, aggregates, comparison report.

Metrics are computed in the normalized [0, 1] value domain (data range
1.0), the same domain both network branches train in, so numbers are
comparable across arms regardless of raw projection scaling. Panel
images for each test pair (input, label, per-arm output) are quantized
with a fixed scale of 1.0; absolute-difference panels carry their own
scale sidecar because their dynamic range is the interesting part.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import Manifest, from_network, load_pair, normalize, to_network
from .errors import ConfigError
from .formats import fmt_float, load_checkpoint, sha256_file, write_pgm16
from .generator import Generator, from_checkpoint
from .grad import Tensor
from .metrics import abs_diff_image, edge_region_mae, psnr, ssim

METRIC_NAMES = ("psnr", "ssim", "mae", "edge_mae")
REPORT_NAME = "report.tsv"
SUMMARY_NAME = "summary.txt"


@dataclass
class PairMetrics:
    arm: str
    pair_id: str
    psnr: float
    ssim: float
    mae: float
    edge_mae: float | None  # None: label has no edge region

    def values(self) -> dict[str, float | None]:
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "mae": self.mae,
            "edge_mae": self.edge_mae,
        }


@dataclass
class EvalReport:
    rows: list[PairMetrics]
    aggregates: dict[str, dict[str, tuple[float, float]]]
    image_paths: list[str] = field(default_factory=list)

    @staticmethod
    def aggregate(rows: list[PairMetrics]) -> dict[str, dict[str, tuple[float, float]]]:
        """Per-arm (mean, population std) over the defined per-pair values."""
        arms: dict[str, list[PairMetrics]] = {}
        for row in rows:
            arms.setdefault(row.arm, []).append(row)
        out: dict[str, dict[str, tuple[float, float]]] = {}
        for arm, arm_rows in arms.items():
            stats: dict[str, tuple[float, float]] = {}
            for name in METRIC_NAMES:
                vals = [
                    row.values()[name] for row in arm_rows
                    if row.values()[name] is not None
                ]
                if not vals:
                    stats[name] = (math.nan, math.nan)
                else:
                    mean = float(np.mean(vals))
                    stats[name] = (mean, float(np.std(vals)))
            out[arm] = stats
        return out


def _normalized_pair(manifest: Manifest, manifest_path, rec):
    """(mr01, xray01) for one pair, float32 in [0, 1]."""
    mr, xray = load_pair(manifest_path, rec)
    lo_mr, hi_mr = manifest.norms["mr"]
    lo_x, hi_x = manifest.norms["xray"]
    return (
        normalize(mr.astype(np.float32), lo_mr, hi_mr),
        normalize(xray.astype(np.float32), lo_x, hi_x),
    )


def _generate01(gen: Generator, mr01: np.ndarray) -> np.ndarray:
    """Forward one normalized input; tanh output mapped back to (0, 1)."""
    out = gen.forward(Tensor(to_network(mr01)[None, None]))
    return from_network(out.data[0, 0])


def _pair_row(arm: str, pair_id: str, label01, gen01) -> PairMetrics:
    label64 = label01.astype(np.float64)
    gen64 = gen01.astype(np.float64)
    return PairMetrics(
        arm=arm,
        pair_id=pair_id,
        psnr=psnr(label64, gen64, data_range=1.0),
        ssim=ssim(label64, gen64, data_range=1.0),
        mae=float(np.mean(np.abs(label64 - gen64))),
        edge_mae=edge_region_mae(label64, gen64),
    )


def evaluate_checkpoint(
    manifest_path,
    checkpoint_path,
    out_dir=None,
    arm: str = "model",
    split: str = "test",
) -> EvalReport:
    """Metric rows for one checkpoint over one manifest split.

    With ``out_dir`` set, also writes per-pair output and absolute
    difference panels plus the report table.
    """
    manifest = Manifest.load(manifest_path)
    config, tensors = load_checkpoint(checkpoint_path)
    gen = from_checkpoint(config, tensors)
    rows: list[PairMetrics] = []
    images: list[str] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for rec in manifest.split(split):
        mr01, xray01 = _normalized_pair(manifest, manifest_path, rec)
        gen01 = _generate01(gen, mr01)
        rows.append(_pair_row(arm, rec.pair_id, xray01, gen01))
        if out_dir is not None:
            out_path = os.path.join(out_dir, f"{rec.pair_id}_{arm}_output.pgm")
            diff_path = os.path.join(out_dir, f"{rec.pair_id}_{arm}_absdiff.pgm")
            write_pgm16(out_path, gen01, scale=1.0)
            abs_diff_image(xray01, gen01, path=diff_path)
            images += [out_path, diff_path]
    report = EvalReport(rows=rows, aggregates=EvalReport.aggregate(rows),
                        image_paths=images)
    if out_dir is not None:
        _write_report(out_dir, report)
    return report


def compare_arms(manifest_path, checkpoints: dict[str, str], out_dir) -> EvalReport:
    """Evaluate named checkpoints on one test split, side by side.

    Every checkpoint must record the hash of the manifest it was trained
    on, and all hashes (including the manifest given here) must agree;
    otherwise the comparison is refused. Emits per-pair panel images
    (input, label, one output and one difference per arm) plus the
    metric table and a summary under ``out_dir``.
    """
    if len(checkpoints) < 2:
        raise ConfigError("arm comparison needs at least two checkpoints")
    manifest = Manifest.load(manifest_path)
    manifest_sha = sha256_file(manifest_path)
    generators: dict[str, Generator] = {}
    for arm, path in checkpoints.items():
        config, tensors = load_checkpoint(path)
        recorded = config.get("data.manifest_sha", "")
        if recorded != manifest_sha:
            raise ConfigError(
                f"arm {arm!r} was trained on a different dataset "
                f"(manifest hash mismatch); comparison refused"
            )
        generators[arm] = from_checkpoint(config, tensors)

    os.makedirs(out_dir, exist_ok=True)
    rows: list[PairMetrics] = []
    images: list[str] = []
    for rec in manifest.split("test"):
        mr01, xray01 = _normalized_pair(manifest, manifest_path, rec)
        input_path = os.path.join(out_dir, f"{rec.pair_id}_input.pgm")
        label_path = os.path.join(out_dir, f"{rec.pair_id}_label.pgm")
        write_pgm16(input_path, mr01, scale=1.0)
        write_pgm16(label_path, xray01, scale=1.0)
        images += [input_path, label_path]
        for arm in checkpoints:
            gen01 = _generate01(generators[arm], mr01)
            rows.append(_pair_row(arm, rec.pair_id, xray01, gen01))
            out_path = os.path.join(out_dir, f"{rec.pair_id}_{arm}_output.pgm")
            diff_path = os.path.join(out_dir, f"{rec.pair_id}_{arm}_absdiff.pgm")
            write_pgm16(out_path, gen01, scale=1.0)
            abs_diff_image(xray01, gen01, path=diff_path)
            images += [out_path, diff_path]

    report = EvalReport(rows=rows, aggregates=EvalReport.aggregate(rows),
                        image_paths=images)
    _write_report(out_dir, report)
    return report


def _fmt_cell(value: float | None) -> str:
    return fmt_float(value) if value is not None else "nan"


def _write_report(out_dir, report: EvalReport) -> None:
    """Tab-separated per-pair table plus a mean +/- std summary."""
    table_path = os.path.join(out_dir, REPORT_NAME)
    with open(table_path, "w", newline="\n") as f:
        f.write("arm\tpair_id\tpsnr\tssim\tmae\tedge_mae\n")
        for row in report.rows:
            cells = [row.arm, row.pair_id]
            cells += [_fmt_cell(row.values()[name]) for name in METRIC_NAMES]
            f.write("\t".join(cells) + "\n")
    summary_path = os.path.join(out_dir, SUMMARY_NAME)
    with open(summary_path, "w", newline="\n") as f:
        for arm in report.aggregates:
            f.write(f"{arm}\n")
            for name in METRIC_NAMES:
                mean, std = report.aggregates[arm][name]
                f.write(f"  {name}: {mean:.6g} +/- {std:.6g}\n")
