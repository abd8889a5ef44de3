"""Deterministic trainer: adaptive-moment updates, epoch loop, ablation arms.

Everything that lands in an artifact (checkpoints, the metric log) is a
pure function of the config, the dataset and the feature bundle; wall
time and progress chatter go to the console stream only, so equal runs
produce byte-identical files. Label-side loss constants are cached per
training pair and concatenated per batch. Test pairs are reloaded from
disk every epoch and never touch the optimization: if their files have
been removed the test column logs nan and training proceeds unchanged.
"""

from __future__ import annotations

import math
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import grad
from .dataset import Manifest, PairRecord, load_pair, normalize, to_network
from .errors import ConfigError, LoadError, NumericsError
from .features import FeatureExtractor
from .formats import fmt_float, load_checkpoint, save_checkpoint, sha256_file
from .generator import (
    Generator,
    GeneratorConfig,
    PRESETS,
    build,
    from_checkpoint,
    preset_proposed,
)
from .grad import Tensor
from .losses import (
    EdgeMapPyramid,
    LossConfig,
    LossTargets,
    label_targets,
    perceptual_loss_against,
)
from .seeding import substream_seed

LOG_NAME = "train_log.tsv"
LOG_HEADER = "epoch\ttrain_loss\ttest_loss"
DIVERGENCE_FACTOR = 1e3


@dataclass
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=preset_proposed)
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 200
    seed: int | None = None  # mandatory; drives init, shuffling, patches
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    patch_size: int | None = None  # None: train on full frames
    checkpoint_every: int = 0  # epochs between snapshots; 0: final only

    def validate(self) -> None:
        self.generator.validate()
        self.loss.validate()
        if self.seed is None:
            raise ConfigError("training seed is mandatory")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("moment decay rates must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("optimizer eps must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint cadence must be non-negative")
        if self.patch_size is not None:
            stride = 2 ** (self.generator.levels - 1)
            if self.patch_size < stride or self.patch_size % stride:
                raise ConfigError(
                    f"patch size {self.patch_size} must be a positive "
                    f"multiple of {stride}"
                )

    def to_dict(self) -> dict[str, str]:
        out = {
            "train.epochs": str(self.epochs),
            "train.seed": "" if self.seed is None else str(self.seed),
            "train.lr": repr(float(self.lr)),
            "train.beta1": repr(float(self.beta1)),
            "train.beta2": repr(float(self.beta2)),
            "train.eps": repr(float(self.eps)),
            "train.batch_size": str(self.batch_size),
            "train.patch_size": "" if self.patch_size is None else str(self.patch_size),
            "train.checkpoint_every": str(self.checkpoint_every),
        }
        out.update(self.generator.to_dict())
        out.update(self.loss.to_dict())
        return out

    @classmethod
    def from_dict(cls, cfg: dict[str, str]) -> "TrainConfig":
        try:
            out = cls(
                generator=GeneratorConfig.from_dict(cfg),
                loss=LossConfig.from_dict(cfg),
                epochs=int(cfg["train.epochs"]),
                seed=int(cfg["train.seed"]) if cfg["train.seed"] else None,
                lr=float(cfg["train.lr"]),
                beta1=float(cfg["train.beta1"]),
                beta2=float(cfg["train.beta2"]),
                eps=float(cfg["train.eps"]),
                batch_size=int(cfg["train.batch_size"]),
                patch_size=(
                    int(cfg["train.patch_size"]) if cfg["train.patch_size"] else None
                ),
                checkpoint_every=int(cfg["train.checkpoint_every"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad training config record: {exc}") from exc
        out.validate()
        return out


# ---------------------------------------------------------------------------
# optimizer state


@dataclass
class TrainState:
    """Optimizer progress plus the provenance the checkpoint must carry."""

    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    epoch: int = 0
    initial_loss: float = math.nan
    manifest_sha: str = ""
    bundle_sha: str = ""

    @classmethod
    def fresh(cls, params: dict[str, Tensor], manifest_sha: str = "",
              bundle_sha: str = "") -> "TrainState":
        return cls(
            step=0,
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            manifest_sha=manifest_sha,
            bundle_sha=bundle_sha,
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: TrainState,
    cfg: TrainConfig,
) -> None:
    """One bias-corrected moment update, in place, in the weight dtype.

    A missing or None gradient counts as zero; from a fresh state that
    leaves the weight unchanged. Non-finite gradients abort with the step
    and parameter name before any weight is touched.
    """
    step = state.step + 1
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name!r} at step {step}")
    state.step = step
    corr1 = 1.0 - cfg.beta1**step
    corr2 = 1.0 - cfg.beta2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(
                f"gradient shape {g.shape} does not match {name!r} {p.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (cfg.lr / corr1) * m / (np.sqrt(v / corr2) + cfg.eps)


# ---------------------------------------------------------------------------
# data plumbing


def _network_pair(manifest: Manifest, manifest_path, rec: PairRecord):
    """One pair as float32 [1,1,H,W] arrays in the generator's value range."""
    mr, xray = load_pair(manifest_path, rec)
    lo_mr, hi_mr = manifest.norms["mr"]
    lo_x, hi_x = manifest.norms["xray"]
    x = to_network(normalize(mr.astype(np.float32), lo_mr, hi_mr))
    y = to_network(normalize(xray.astype(np.float32), lo_x, hi_x))
    return x[None, None], y[None, None]


def _concat_targets(items: list[LossTargets], cfg: LossConfig) -> LossTargets:
    feats = {
        s: np.concatenate([it.feats[s] for it in items], axis=0) for s in cfg.layers
    }
    pyramid = None
    if cfg.edge_weighting:
        pyramid = EdgeMapPyramid(
            maps={
                s: np.concatenate([it.pyramid.maps[s] for it in items], axis=0)
                for s in cfg.layers
            },
            eps=cfg.eps,
        )
    n = sum(it.shape[0] for it in items)
    return LossTargets(feats=feats, pyramid=pyramid, shape=(n,) + items[0].shape[1:])


# ---------------------------------------------------------------------------
# checkpointing


def _save_state(path, cfg: TrainConfig, gen: Generator, state: TrainState) -> None:
    config = {
        "state.step": str(state.step),
        "state.epoch": str(state.epoch),
        "state.initial_loss": fmt_float(state.initial_loss),
        "data.manifest_sha": state.manifest_sha,
        "features.bundle_sha": state.bundle_sha,
    }
    config.update(cfg.to_dict())
    params = gen.parameters()
    tensors: dict[str, np.ndarray] = {}
    for name, p in params.items():
        tensors[f"w/{name}"] = p.data
    for name in params:
        tensors[f"m/{name}"] = state.m[name]
    for name in params:
        tensors[f"v/{name}"] = state.v[name]
    save_checkpoint(path, config, tensors)


def _restore_state(path, cfg: TrainConfig, manifest_sha: str):
    config, tensors = load_checkpoint(path)
    try:
        saved = TrainConfig.from_dict(config)
        state_fields = {
            "step": int(config["state.step"]),
            "epoch": int(config["state.epoch"]),
            "initial_loss": float(config["state.initial_loss"]),
            "manifest_sha": config["data.manifest_sha"],
            "bundle_sha": config["features.bundle_sha"],
        }
    except (KeyError, ValueError) as exc:
        raise LoadError(f"{path}: incomplete training state: {exc}") from exc
    # The epoch horizon may be extended on resume; everything else must match.
    want = dict(cfg.to_dict(), **{"train.epochs": ""})
    have = dict(saved.to_dict(), **{"train.epochs": ""})
    if want != have:
        raise ConfigError("resume config does not match checkpoint config")
    if state_fields["manifest_sha"] != manifest_sha:
        raise ConfigError("resume dataset does not match checkpoint dataset")
    gen = from_checkpoint(config, tensors)
    params = gen.parameters()
    try:
        state = TrainState(
            m={name: tensors[f"m/{name}"] for name in params},
            v={name: tensors[f"v/{name}"] for name in params},
            **state_fields,
        )
    except KeyError as exc:
        raise LoadError(f"{path}: missing optimizer moment {exc}") from exc
    return gen, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    epochs_run: int
    steps: int
    final_train_loss: float
    final_test_loss: float


def _epoch_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def train(
    manifest_path,
    cfg: TrainConfig,
    out_dir,
    resume=None,
    console=sys.stderr,
) -> TrainResult:
    """Fit the generator on the manifest's train split.

    Writes ``train_log.tsv`` (one line per epoch: epoch index, mean train
    loss over batches, mean test loss over pairs) plus cadence and final
    checkpoints under ``out_dir``. ``resume`` continues from a checkpoint
    written by this function and reproduces the uninterrupted run bit for
    bit. A per-epoch mean train loss above 1000x the very first batch
    loss aborts the run.
    """
    cfg.validate()
    manifest = Manifest.load(manifest_path)
    manifest_sha = sha256_file(manifest_path)
    train_recs = manifest.split("train")
    test_recs = manifest.split("test")
    if not train_recs:
        raise ConfigError("training split is empty")

    fe = FeatureExtractor.default()
    if resume is not None:
        gen, state = _restore_state(resume, cfg, manifest_sha)
    else:
        gen = build(cfg.generator, seed=substream_seed(cfg.seed, "init"))
        state = TrainState.fresh(
            gen.parameters(), manifest_sha=manifest_sha, bundle_sha=fe.bundle_sha256
        )
    params = gen.parameters()
    start_epoch = state.epoch

    train_pairs = [_network_pair(manifest, manifest_path, rec) for rec in train_recs]
    shapes = {x.shape for x, _ in train_pairs}
    if len(shapes) > 1 and cfg.patch_size is None:
        raise ConfigError("training pairs must share dimensions (or use patches)")
    if cfg.patch_size is not None:
        limit = min(min(x.shape[2], x.shape[3]) for x, _ in train_pairs)
        if cfg.patch_size > limit:
            raise ConfigError(
                f"patch size {cfg.patch_size} exceeds smallest pair extent {limit}"
            )
        cached_targets = None
    else:
        cached_targets = [label_targets(y, fe, cfg.loss) for _, y in train_pairs]

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, LOG_NAME)
    log = open(log_path, "w" if resume is None else "a", newline="\n")
    missing_noted = False
    train_mean = math.nan
    test_mean = math.nan
    try:
        if resume is None:
            log.write(LOG_HEADER + "\n")
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            t0 = time.monotonic()
            order = np.random.default_rng(
                substream_seed(cfg.seed, f"shuffle-{epoch}")
            ).permutation(len(train_pairs))
            patch_rng = np.random.default_rng(
                substream_seed(cfg.seed, f"patch-{epoch}")
            )
            loss_total = 0.0
            batches = _epoch_batches(order, cfg.batch_size)
            for batch in batches:
                if cfg.patch_size is None:
                    x_batch = np.concatenate([train_pairs[i][0] for i in batch])
                    targets = _concat_targets(
                        [cached_targets[i] for i in batch], cfg.loss
                    )
                else:
                    ps = cfg.patch_size
                    crops_x, crops_y = [], []
                    for i in batch:
                        x, y = train_pairs[i]
                        top = int(patch_rng.integers(0, x.shape[2] - ps + 1))
                        left = int(patch_rng.integers(0, x.shape[3] - ps + 1))
                        crops_x.append(x[:, :, top : top + ps, left : left + ps])
                        crops_y.append(y[:, :, top : top + ps, left : left + ps])
                    x_batch = np.concatenate(crops_x)
                    targets = label_targets(np.concatenate(crops_y), fe, cfg.loss)
                with grad.Tape() as tape:
                    generated = gen.forward(Tensor(x_batch))
                    loss = perceptual_loss_against(targets, generated, fe, cfg.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericsError(
                        f"non-finite training loss at step {state.step + 1}"
                    )
                if math.isnan(state.initial_loss):
                    state.initial_loss = value
                grad.backward(tape, loss)
                adam_step(params, {n: p.grad for n, p in params.items()}, state, cfg)
                for p in params.values():
                    p.zero_grad()
                loss_total += value
            train_mean = loss_total / len(batches)
            state.epoch = epoch
            if train_mean > DIVERGENCE_FACTOR * state.initial_loss:
                raise NumericsError(
                    f"training diverged: epoch {epoch} mean loss {train_mean} "
                    f"exceeds {DIVERGENCE_FACTOR:g}x initial {state.initial_loss}"
                )

            test_mean, missing = _test_loss(
                manifest, manifest_path, test_recs, gen, fe, cfg.loss
            )
            if missing and not missing_noted:
                print("test pairs unavailable; logging test loss as nan", file=console)
                missing_noted = True

            log.write(f"{epoch}\t{fmt_float(train_mean)}\t{fmt_float(test_mean)}\n")
            log.flush()
            wall = time.monotonic() - t0
            print(
                f"epoch {epoch}/{cfg.epochs} train {train_mean:.6g} "
                f"test {test_mean:.6g} wall {wall:.2f}s",
                file=console,
            )

            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                _save_state(
                    os.path.join(out_dir, f"ckpt_ep{epoch:04d}.bin"), cfg, gen, state
                )
    finally:
        log.close()

    final_path = os.path.join(out_dir, "ckpt_final.bin")
    _save_state(final_path, cfg, gen, state)
    return TrainResult(
        checkpoint_path=final_path,
        log_path=log_path,
        epochs_run=cfg.epochs - start_epoch,
        steps=state.step,
        final_train_loss=train_mean,
        final_test_loss=test_mean,
    )


def _test_loss(manifest, manifest_path, test_recs, gen, fe, loss_cfg):
    """Mean per-pair loss with no tape active; (nan, True) on missing files."""
    if not test_recs:
        return math.nan, False
    total = 0.0
    for rec in test_recs:
        try:
            x, y = _network_pair(manifest, manifest_path, rec)
        except (LoadError, OSError):
            return math.nan, True
        generated = gen.forward(Tensor(x))
        loss = perceptual_loss_against(
            label_targets(y, fe, loss_cfg), generated, fe, loss_cfg
        )
        total += loss.item()
    return total / len(test_recs), False


# ---------------------------------------------------------------------------
# ablation


ABLATION_ARMS = (
    ("baseline_edge", "baseline", True),
    ("proposed_plain", "proposed", False),
    ("proposed_edge", "proposed", True),
)


@dataclass
class AblationResult:
    runs: dict[str, TrainResult]
    report_dir: str
    report: object  # evaluation comparison, see evaluate.compare_arms


def run_ablation(
    manifest_path,
    base_cfg: TrainConfig,
    out_dir,
    console=sys.stderr,
) -> AblationResult:
    """Train three matched arms and emit the evaluation comparison.

    Arms differ from ``base_cfg`` only in generator preset and edge
    weighting; seed, budget and data order are shared, so the arms see
    identical pair sequences and step counts. The final checkpoints are
    compared on the test split (tables plus difference images under
    ``<out_dir>/comparison``).
    """
    from .evaluate import compare_arms

    runs: dict[str, TrainResult] = {}
    for arm, preset, edge in ABLATION_ARMS:
        cfg = replace(
            base_cfg,
            generator=PRESETS[preset](),
            loss=replace(base_cfg.loss, edge_weighting=edge),
        )
        print(f"ablation arm {arm}", file=console)
        runs[arm] = train(manifest_path, cfg, os.path.join(out_dir, arm), console=console)
    report_dir = os.path.join(out_dir, "comparison")
    report = compare_arms(
        manifest_path,
        {arm: result.checkpoint_path for arm, result in runs.items()},
        report_dir,
    )
    return AblationResult(runs=runs, report_dir=report_dir, report=report)
