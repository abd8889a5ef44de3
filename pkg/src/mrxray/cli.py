"""Command-line entry point for the full pipeline.

One binary, eight subcommands: phantom, project, dataset, train, infer,
eval, ablate, gradcheck. Every run echoes its resolved configuration and
the content hashes of its file inputs to the error stream before doing
any work, then writes artifacts only under ``--out`` and prints their
paths on stdout. Training options follow a three-layer precedence:
built-in defaults, then ``--config`` file lines (``key = value``), then
flags; every config key doubles as a dotted flag (``--train.lr``).

Exit codes: 0 success, 1 usage error, 2 data or config error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import grad
from .dataset import (
    Manifest,
    build_dataset,
    denormalize,
    from_network,
    normalize,
    parallel_geometries,
    to_network,
)
from .errors import ConfigError, MrxrayError, NumericsError
from .evaluate import REPORT_NAME, evaluate_checkpoint
from .features import FeatureExtractor
from .formats import (
    load_checkpoint,
    load_image,
    read_config,
    save_image,
    sha256_file,
    write_pgm16,
)
from .generator import PRESETS, GeneratorConfig, from_checkpoint
from .generator import build as build_generator
from .grad import FD_SUITE, Tensor, directional_gradcheck, fd_case, gradcheck
from .phantoms import PhantomSpec, generate_phantom
from .projector import load_volume, project_pair, save_volume
from .seeding import substream_seed
from .training import TrainConfig, run_ablation, train

CONFIG_KEYS = tuple(TrainConfig(seed=0).to_dict())
GRADCHECK_MODELS = ("generator_proposed", "generator_baseline")
GRADCHECK_OP_TOL = 1e-4
GRADCHECK_MODEL_TOL = 1e-3


# ---------------------------------------------------------------------------
# config resolution


def _flag_dest(key: str) -> str:
    return key.replace(".", "__")


def _read_config_file(path) -> dict[str, str]:
    out = read_config(path)
    unknown = sorted(k for k in out if k not in CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return out


def _resolve_train_config(args) -> tuple[TrainConfig, dict[str, str]]:
    merged = TrainConfig().to_dict()
    if getattr(args, "preset", None):
        merged.update(PRESETS[args.preset]().to_dict())
    if args.config is not None:
        merged.update(_read_config_file(args.config))
    if args.seed is not None:
        merged["train.seed"] = str(args.seed)
    for key in CONFIG_KEYS:
        value = getattr(args, _flag_dest(key), None)
        if value is not None:
            merged[key] = value
    return TrainConfig.from_dict(merged), merged


def _echo(config: dict[str, str], inputs=()) -> None:
    """Resolved config and input content hashes, before any work happens."""
    for key, value in config.items():
        print(f"config {key}={value}", file=sys.stderr)
    for path in inputs:
        print(f"input {path} sha256 {sha256_file(path)}", file=sys.stderr)


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"dims must be X,Y,Z, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad dims {text!r}") from exc
    return dims


def _parse_split(text: str) -> tuple[int, int]:
    parts = text.split(":")
    try:
        a, b = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"split must be TRAIN:TEST, got {text!r}") from exc
    return a, b


# ---------------------------------------------------------------------------
# subcommands


def _cmd_phantom(args) -> int:
    dims = _parse_dims(args.dims)
    _echo({"phantom.count": str(args.count), "phantom.dims": args.dims,
           "phantom.seed": str(args.seed), "out": args.out})
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = PhantomSpec(dims=dims, seed=substream_seed(args.seed, f"phantom-{i}"))
        path = os.path.join(args.out, f"phantom{i:02d}.vol.bin")
        save_volume(path, generate_phantom(spec))
        print(path)
    return 0


def _cmd_project(args) -> int:
    _echo({"project.angles": str(args.angles), "project.nu": str(args.nu),
           "project.nv": str(args.nv), "project.step": str(args.step),
           "out": args.out}, inputs=[args.volume])
    vol = load_volume(args.volume)
    geoms = parallel_geometries(args.angles, nu=args.nu, nv=args.nv)
    os.makedirs(args.out, exist_ok=True)
    for k, geom in enumerate(geoms):
        mr, xray = project_pair(vol, geom, step=args.step)
        mr_path = os.path.join(args.out, f"view_a{k:02d}.mr.bin")
        xray_path = os.path.join(args.out, f"view_a{k:02d}.xray.bin")
        save_image(mr_path, mr)
        save_image(xray_path, xray)
        print(mr_path)
        print(xray_path)
    return 0


def _cmd_dataset(args) -> int:
    dims = _parse_dims(args.dims)
    split = _parse_split(args.split)
    _echo({"dataset.phantoms": str(args.phantoms), "dataset.split": args.split,
           "dataset.angles": str(args.angles), "dataset.dims": args.dims,
           "dataset.nu": str(args.nu), "dataset.nv": str(args.nv),
           "dataset.seed": str(args.seed), "out": args.out})
    specs = [
        PhantomSpec(dims=dims, seed=substream_seed(args.seed, f"phantom-{i}"))
        for i in range(args.phantoms)
    ]
    geoms = parallel_geometries(args.angles, nu=args.nu, nv=args.nv)
    manifest_path = build_dataset(specs, geoms, split, args.out, step=args.step)
    print(manifest_path)
    return 0


def _cmd_train(args) -> int:
    cfg, merged = _resolve_train_config(args)
    inputs = [args.manifest] + ([args.resume] if args.resume else [])
    _echo(merged, inputs=inputs)
    print(f"feature-bundle sha256 {FeatureExtractor.default().bundle_sha256}",
          file=sys.stderr)
    result = train(args.manifest, cfg, args.out, resume=args.resume)
    print(result.checkpoint_path)
    return 0


def _cmd_infer(args) -> int:
    config, tensors = load_checkpoint(args.checkpoint)
    _echo(config, inputs=[args.checkpoint, args.input, args.manifest])
    gen_cfg = GeneratorConfig.from_dict(config)
    image = load_image(args.input)
    h, w = image.shape
    stride = 2 ** (gen_cfg.levels - 1)
    if h % stride or w % stride:
        want_h = ((h + stride - 1) // stride) * stride
        want_w = ((w + stride - 1) // stride) * stride
        raise ConfigError(
            f"input dims {h}x{w} are not divisible by {stride}; "
            f"pad the projection to {want_h}x{want_w} first"
        )
    gen = from_checkpoint(config, tensors)
    manifest = Manifest.load(args.manifest)
    lo_mr, hi_mr = manifest.norms["mr"]
    net_in = to_network(normalize(image.astype(np.float32), lo_mr, hi_mr))
    out01 = from_network(gen.forward(Tensor(net_in[None, None])).data[0, 0])

    os.makedirs(args.out, exist_ok=True)
    raw_path = os.path.join(args.out, "generated.bin")
    pgm_path = os.path.join(args.out, "generated.pgm")
    save_image(raw_path, out01)
    write_pgm16(pgm_path, out01.astype(np.float64), scale=1.0)
    print(raw_path)
    print(pgm_path)
    if args.intensity:
        lo_x, hi_x = manifest.norms["xray"]
        intensity_path = os.path.join(args.out, "generated_intensity.bin")
        save_image(intensity_path, denormalize(out01, lo_x, hi_x))
        print(intensity_path)
    return 0


def _cmd_eval(args) -> int:
    _echo({"eval.split": args.split, "eval.arm": args.arm, "out": args.out},
          inputs=[args.manifest, args.checkpoint])
    evaluate_checkpoint(args.manifest, args.checkpoint, out_dir=args.out,
                        arm=args.arm, split=args.split)
    print(os.path.join(args.out, REPORT_NAME))
    return 0


def _cmd_ablate(args) -> int:
    cfg, merged = _resolve_train_config(args)
    _echo(merged, inputs=[args.manifest])
    print(f"feature-bundle sha256 {FeatureExtractor.default().bundle_sha256}",
          file=sys.stderr)
    result = run_ablation(args.manifest, cfg, args.out)
    print(os.path.join(result.report_dir, REPORT_NAME))
    return 0


def _check_model(name: str, seed: int) -> float:
    """Directional whole-model probe in float64 at a small extent."""
    preset = PRESETS[name.removeprefix("generator_")]()
    gen = build_generator(preset, seed=substream_seed(seed, name), dtype=np.float64)
    rng = np.random.default_rng(substream_seed(seed, f"{name}-data"))
    target = Tensor(rng.uniform(-0.8, 0.8, (1, 1, 16, 16)), requires_grad=False)

    def fn(x, *weights):
        d = grad.sub(gen.forward(x), target)
        return grad.tmean(grad.hadamard(d, d))

    inputs = [Tensor(rng.uniform(-0.8, 0.8, (1, 1, 16, 16)), requires_grad=True)]
    inputs += list(gen.parameters().values())
    res = directional_gradcheck(fn, inputs, n_directions=4, rng=rng)
    return res.max_rel_error


def _cmd_gradcheck(args) -> int:
    if args.ops == "all":
        names = list(FD_SUITE) + list(GRADCHECK_MODELS)
    else:
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in FD_SUITE + GRADCHECK_MODELS]
        if unknown:
            raise ConfigError(f"unknown gradcheck ops: {', '.join(unknown)}")
    _echo({"gradcheck.ops": ",".join(names), "gradcheck.trials": str(args.trials),
           "gradcheck.seed": str(args.seed)})
    failures = 0
    for name in names:
        if name in GRADCHECK_MODELS:
            worst = _check_model(name, args.seed)
            tol = GRADCHECK_MODEL_TOL
        else:
            worst = 0.0
            for trial in range(args.trials):
                fn, inputs = fd_case(name, seed=1000 * FD_SUITE.index(name) + trial)
                res = gradcheck(fn, inputs, step=1e-4)
                worst = max(worst, res.max_rel_error)
            tol = GRADCHECK_OP_TOL
        ok = worst < tol
        failures += 0 if ok else 1
        print(f"{name}: max rel error {worst:.3e} "
              f"({'ok' if ok else 'FAIL'}, tol {tol:g})")
    if failures:
        raise NumericsError(f"{failures} gradient check(s) exceeded tolerance")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, metavar="FILE",
                     help="key = value lines merged below flags")
    sub.add_argument("--preset", choices=sorted(PRESETS), default=None,
                     help="generator preset applied before file and flags")
    sub.add_argument("--seed", type=int, default=None,
                     help="root seed (shorthand for --train.seed)")
    for key in CONFIG_KEYS:
        sub.add_argument(f"--{key}", dest=_flag_dest(key), default=None,
                         metavar="V", help=argparse.SUPPRESS)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrxray",
        description="MR-projection to X-ray-projection translation pipeline",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("phantom", help="generate procedural phantom volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--dims", default="64,64,64")
    p.set_defaults(fn=_cmd_phantom)

    p = commands.add_parser("project", help="project a volume to image pairs")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--angles", type=int, required=True)
    p.add_argument("--nu", type=int, default=64)
    p.add_argument("--nv", type=int, default=64)
    p.add_argument("--step", type=float, default=None)
    p.set_defaults(fn=_cmd_project)

    p = commands.add_parser("dataset", help="build a paired train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--phantoms", type=int, required=True)
    p.add_argument("--split", required=True, help="phantom counts, TRAIN:TEST")
    p.add_argument("--angles", type=int, required=True)
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--nu", type=int, default=64)
    p.add_argument("--nv", type=int, default=64)
    p.add_argument("--step", type=float, default=None)
    p.set_defaults(fn=_cmd_dataset)

    p = commands.add_parser("train", help="train the generator on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, metavar="CKPT")
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = commands.add_parser("infer", help="translate one MR projection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="raw MR projection image")
    p.add_argument("--manifest", required=True,
                   help="supplies the normalization records")
    p.add_argument("--out", required=True)
    p.add_argument("--intensity", action="store_true",
                   help="also export in the raw X-ray intensity domain")
    p.set_defaults(fn=_cmd_infer)

    p = commands.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--arm", default="model")
    p.set_defaults(fn=_cmd_eval)

    p = commands.add_parser("ablate", help="run the three-arm comparison")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=_cmd_ablate)

    p = commands.add_parser("gradcheck", help="finite-difference self check")
    p.add_argument("--ops", default="all",
                   help="'all' or a comma-separated case list")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.fn(args)
    except NumericsError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (MrxrayError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
