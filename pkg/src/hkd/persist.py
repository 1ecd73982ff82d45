"""Little-endian binary formats for trajectory datasets and checkpoints.

Dataset (``HKDT``)::

    magic[4] version:u32 n_traj:u32 n_grid:u32 C:u32 H:u32 W:u32
    epsilon:f32 horizon:f32 schedule:u8 times:f32[n_grid]
    states:f32[n_traj, n_grid, C, H, W]

Checkpoint (``HKDC``)::

    magic[4] version:u32 config_len:u32 config:utf8[config_len] count:u32
    count x { name_len:u32 name:utf8 rank:u32 dims:u32[rank] data:f32[prod(dims)] }

Writers go through a temporary file in the destination directory followed
by an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .netarch import HKDModel, param_shapes
from .teacher import VE_TAG, TrajectoryDataset

DATASET_MAGIC = b"HKDT"
CHECKPOINT_MAGIC = b"HKDC"
VERSION = 1
MAX_TENSOR_BYTES = 2 ** 32 - 1
_F32 = np.dtype("<f4")


class PersistError(Exception):
    code = "persist"


class FormatError(PersistError):
    code = "bad-magic"


class UnsupportedVersionError(PersistError):
    code = "unsupported-version"


class CorruptionError(PersistError):
    code = "corrupt"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ShapeValidationError(PersistError):
    code = "shape-mismatch"


class SizeLimitError(PersistError):
    code = "size-limit"


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated payload: {what} starting at byte {self.pos} "
                                  f"needs {n} bytes, {len(self.buf) - self.pos} present",
                                  len(self.buf))
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32(self, what: str) -> float:
        return struct.unpack("<f", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def floats(self, count: int, what: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=_F32).astype(np.float32)

    def finish(self) -> None:
        if self.pos != len(self.buf):
            raise CorruptionError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def _check_magic(r: _Reader, magic: bytes) -> None:
    got = r.take(4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}: expected {magic.decode()!r}")
    version = r.u32("version")
    if version > VERSION:
        raise UnsupportedVersionError(f"format version {version} is newer than supported {VERSION}")
    if version < 1:
        raise FormatError(f"invalid format version {version}")


# --- datasets ------------------------------------------------------------------

def dataset_bytes(ds: TrajectoryDataset) -> bytes:
    n, g = ds.states.shape[:2]
    C, H, W = ds.image_shape
    times = np.asarray(ds.times)
    if times.shape != (g,) or not np.all(np.diff(times.astype(np.float64)) < 0):
        raise ValueError("dataset times must be strictly decreasing with one entry per grid point")
    head = DATASET_MAGIC + struct.pack("<IIIIIIffB", VERSION, n, g, C, H, W,
                                       ds.epsilon, ds.horizon, ds.schedule_tag)
    return head + times.astype(_F32).tobytes() + np.ascontiguousarray(ds.states, dtype=_F32).tobytes()


def write_dataset(ds: TrajectoryDataset, path) -> None:
    atomic_write(path, dataset_bytes(ds))


def parse_dataset(buf: bytes) -> TrajectoryDataset:
    r = _Reader(buf)
    _check_magic(r, DATASET_MAGIC)
    n, g = r.u32("n_traj"), r.u32("n_grid")
    C, H, W = r.u32("C"), r.u32("H"), r.u32("W")
    eps, T = r.f32("epsilon"), r.f32("horizon")
    tag = r.u8("schedule")
    if tag != VE_TAG:
        raise FormatError(f"unknown schedule tag {tag}")
    times_at = r.pos
    times = r.floats(g, "times")
    if g < 2 or not np.all(np.diff(times.astype(np.float64)) < 0):
        raise CorruptionError("times are not strictly decreasing", times_at)
    if times[0] != np.float32(T) or times[-1] != np.float32(eps):
        raise CorruptionError("time grid endpoints differ from horizon/epsilon", times_at)
    states = r.floats(n * g * C * H * W, "states").reshape(n, g, C, H, W)
    r.finish()
    return TrajectoryDataset(times, states, eps, T, tag)


def read_dataset(path) -> TrajectoryDataset:
    return parse_dataset(Path(path).read_bytes())


# --- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    """Config text plus a named parameter table."""

    config_text: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config(self) -> RunConfig:
        return RunConfig.parse(self.config_text)

    @classmethod
    def from_model(cls, model: HKDModel, config_text: str) -> "Checkpoint":
        return cls(config_text, {k: np.array(v, dtype=np.float32) for k, v in model.state_dict().items()})

    def to_model(self, dtype=np.float32) -> HKDModel:
        model = HKDModel(self.config.model, dtype=dtype, init=False)
        model.load_state_dict(self.params)
        return model

    def same_as(self, other: "Checkpoint") -> bool:
        return checkpoint_bytes(self) == checkpoint_bytes(other)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    text = ckpt.config_text.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(text)), text,
             struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        arr = np.ascontiguousarray(arr, dtype=_F32)
        if arr.nbytes > MAX_TENSOR_BYTES:
            raise SizeLimitError(f"parameter {name} is {arr.nbytes} bytes, limit {MAX_TENSOR_BYTES}")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes, validate: bool = True) -> Checkpoint:
    r = _Reader(buf)
    _check_magic(r, CHECKPOINT_MAGIC)
    clen = r.u32("config length")
    try:
        text = r.take(clen, "config text").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptionError(f"config echo is not UTF-8: {e}", r.pos - clen) from None
    count = r.u32("parameter count")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_at = r.pos
        nlen = r.u32("name length")
        name = r.take(nlen, "parameter name").decode("utf-8", errors="replace")
        if name in params:
            raise CorruptionError(f"duplicate parameter name {name!r}", entry_at)
        rank = r.u32(f"rank of {name}")
        dims = [r.u32(f"dims of {name}") for _ in range(rank)]
        numel = int(np.prod(dims, dtype=object)) if dims else 1
        if 4 * numel > MAX_TENSOR_BYTES:
            raise SizeLimitError(f"parameter {name} declares {4 * numel} bytes, "
                                 f"limit {MAX_TENSOR_BYTES}")
        params[name] = r.floats(numel, f"data of {name}").reshape(dims)
    r.finish()
    ckpt = Checkpoint(text, params)
    if validate:
        validate_checkpoint(ckpt)
    return ckpt


def validate_checkpoint(ckpt: Checkpoint) -> None:
    try:
        cfg = ckpt.config
    except ConfigError as e:
        raise ShapeValidationError(f"config echo does not parse: {e}") from None
    expected = param_shapes(cfg.model)
    for name, arr in ckpt.params.items():
        if name not in expected:
            raise ShapeValidationError(f"parameter {name} is not part of the configured model")
        if tuple(arr.shape) != expected[name]:
            raise ShapeValidationError(f"parameter {name} has shape {tuple(arr.shape)}, "
                                       f"config implies {expected[name]}")
    missing = sorted(set(expected) - set(ckpt.params))
    if missing:
        raise ShapeValidationError(f"checkpoint lacks parameters {missing}")


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# --- images ----------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` in [-1, 1] to ``[H, W]`` or ``[H, W, 3]`` bytes."""
    v = np.clip((np.asarray(img, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    u8 = np.rint(v * 255.0).astype(np.uint8)
    return u8[0] if u8.shape[0] == 1 else np.moveaxis(u8, 0, -1)


def contact_sheet(images, ncol: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile ``[N, C, H, W]`` images into one ``[C, H', W']`` image (padding at -1)."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    sheet = -np.ones((c, nrow * (h + pad) + pad, ncol * (w + pad) + pad))
    for k in range(n):
        i, j = divmod(k, ncol)
        y, x = pad + i * (h + pad), pad + j * (w + pad)
        sheet[:, y:y + h, x:x + w] = images[k]
    return sheet


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    arr = to_uint8(img)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".png", dir=path.parent or ".")
    os.close(fd)
    try:
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
