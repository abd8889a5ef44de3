"""On-disk formats shared across the pipeline.

Every artifact is a plain-text header followed by little-endian raw
scalars, so writes are deterministic and files round-trip
byte-identically. Binary payloads are always float32; numbers inside
headers use the shortest decimal form that parses back to the same
float.
"""

from __future__ import annotations

import hashlib
from typing import BinaryIO

import numpy as np

from .errors import ConfigError, ContractError, LoadError

MAGIC_TENSOR = "tensor v1"
MAGIC_IMAGE = "image v1"
MAGIC_VOLUME = "volume v1"
MAGIC_CKPT = "ckpt v1"


def fmt_float(x: float) -> str:
    """Shortest decimal string that parses back to the same float."""
    return repr(float(x))


def read_line(f: BinaryIO) -> str:
    """Read one newline-terminated ascii header line from a binary stream."""
    raw = bytearray()
    while True:
        ch = f.read(1)
        if not ch:
            raise LoadError("unexpected end of file in header")
        if ch == b"\n":
            break
        raw += ch
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise LoadError("header line is not ascii") from exc


# ---------------------------------------------------------------------------
# tensor records


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    """Write one "tensor v1 <rank> <dims...>" record.

    Payloads are strictly float32; the caller casts explicitly so a
    precision loss is never silent.
    """
    if arr.dtype != np.float32:
        raise ContractError(f"tensor payloads are float32, got {arr.dtype}")
    header = f"{MAGIC_TENSOR} {arr.ndim}"
    if arr.shape:
        header += " " + " ".join(str(d) for d in arr.shape)
    f.write((header + "\n").encode("ascii"))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    line = read_line(f)
    parts = line.split()
    if parts[:2] != ["tensor", "v1"] or len(parts) < 3:
        raise LoadError(f"bad tensor header: {line!r}")
    try:
        rank = int(parts[2])
        shape = tuple(int(p) for p in parts[3:])
    except ValueError as exc:
        raise LoadError(f"bad tensor header: {line!r}") from exc
    if rank != len(shape) or any(d < 0 for d in shape):
        raise LoadError(f"bad tensor header: {line!r}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise LoadError("tensor payload truncated")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return arr.astype(np.float32, copy=True)


def write_tensor_bundle(f: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Write a counted sequence of named tensor records."""
    f.write(f"tensors {len(tensors)}\n".encode("ascii"))
    for name, arr in tensors.items():
        if not name or any(c.isspace() for c in name):
            raise ContractError(f"bad tensor name {name!r}")
        f.write(f"{name}\n".encode("ascii"))
        write_tensor(f, arr)


def _read_bundle_body(f: BinaryIO, count: int) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = read_line(f)
        if name in out:
            raise LoadError(f"duplicate tensor name {name!r}")
        out[name] = read_tensor(f)
    return out


def read_tensor_bundle(f: BinaryIO) -> dict[str, np.ndarray]:
    line = read_line(f)
    parts = line.split()
    if len(parts) != 2 or parts[0] != "tensors" or not parts[1].isdigit():
        raise LoadError(f"bad bundle header: {line!r}")
    return _read_bundle_body(f, int(parts[1]))


def save_tensor_bundle(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_tensor_bundle(f, tensors)


def load_tensor_bundle(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_tensor_bundle(f)


# ---------------------------------------------------------------------------
# projection images


def save_image(path, img: np.ndarray) -> None:
    """Write a 2d projection image, row-major with shape (nv, nu)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractError(f"image must be 2d, got shape {img.shape}")
    nv, nu = img.shape
    with open(path, "wb") as f:
        f.write(f"{MAGIC_IMAGE} {nu} {nv}\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(f: BinaryIO) -> np.ndarray:
    line = read_line(f)
    parts = line.split()
    if parts[:2] != ["image", "v1"] or len(parts) != 4:
        raise LoadError(f"bad image header: {line!r}")
    try:
        nu, nv = int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise LoadError(f"bad image header: {line!r}") from exc
    raw = f.read(4 * nu * nv)
    if len(raw) != 4 * nu * nv:
        raise LoadError("image payload truncated")
    return np.frombuffer(raw, dtype="<f4").reshape(nv, nu).astype(np.float32)


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_image(f)


# ---------------------------------------------------------------------------
# 16-bit PGM export


def write_pgm16(path, data: np.ndarray, scale: float | None = None) -> float:
    """Quantize non-negative data to 16-bit PGM (maxval 65535).

    Returns the scale that maps gray 65535 back to physical units;
    callers record it in a sidecar so the file stays invertible.
    """
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"PGM image must be 2d, got shape {a.shape}")
    if scale is None:
        top = float(a.max()) if a.size else 0.0
        scale = top if top > 0.0 else 1.0
    if scale <= 0.0:
        raise ContractError("PGM scale must be positive")
    q = np.clip(np.rint(a / scale * 65535.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii"))
        f.write(q.tobytes())  # PGM stores the most significant byte first
    return float(scale)


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        if read_line(f) != "P5":
            raise LoadError("not a binary PGM file")
        dims = read_line(f).split()
        if len(dims) != 2 or not all(p.isdigit() for p in dims):
            raise LoadError("bad PGM dimensions")
        w, h = int(dims[0]), int(dims[1])
        if read_line(f).strip() != "65535":
            raise LoadError("only 16-bit PGM (maxval 65535) is supported")
        raw = f.read(2 * w * h)
        if len(raw) != 2 * w * h:
            raise LoadError("PGM payload truncated")
        return np.frombuffer(raw, dtype=">u2").reshape(h, w).astype(np.uint16)


def pgm16_to_float(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * (scale / 65535.0)


# ---------------------------------------------------------------------------
# key=value config files


def read_config(path) -> dict[str, str]:
    """Parse a "key = value" file; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def write_config(path, cfg: dict[str, str]) -> None:
    with open(path, "w", encoding="ascii") as f:
        for key, value in cfg.items():
            f.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Write header, key=value config lines, then named tensor records."""
    with open(path, "wb") as f:
        f.write((MAGIC_CKPT + "\n").encode("ascii"))
        for key, value in config.items():
            if "=" in key or any(c.isspace() for c in key) or not key:
                raise ContractError(f"bad config key {key!r}")
            if "\n" in value:
                raise ContractError(f"config value for {key!r} contains newline")
            f.write(f"{key}={value}\n".encode("ascii"))
        write_tensor_bundle(f, tensors)


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if read_line(f) != MAGIC_CKPT:
            raise LoadError(f"{path}: not a checkpoint file")
        config: dict[str, str] = {}
        while True:
            line = read_line(f)
            parts = line.split()
            if len(parts) == 2 and parts[0] == "tensors" and parts[1].isdigit():
                tensors = _read_bundle_body(f, int(parts[1]))
                return config, tensors
            if "=" not in line:
                raise LoadError(f"bad checkpoint config line: {line!r}")
            key, _, value = line.partition("=")
            if key in config:
                raise LoadError(f"duplicate checkpoint config key {key!r}")
            config[key] = value


# ---------------------------------------------------------------------------
# content hashes


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
