"""Frame preprocessing, sequence windowing, dataset splits and frame-directory I/O."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, FormatError, PathError

FRAME_SHAPE = (32, 32, 3)
DEFAULT_GAMMA = 0.45
TABLE_I_RATIOS = (55, 22, 24)
MANIFEST_NAME = "manifest.tsv"
DATASET_INFO_NAME = "dataset.cfg"
_FRAME_RE = re.compile(r"^frame_(\d{6})\.png$")


@dataclass(frozen=True)
class FrameSequence:
    """Preprocessed frames of one video as an immutable ``(N, input_dim)`` array."""

    frames: np.ndarray
    fps: float = 10.0
    source_id: str = ""
    image_shape: tuple = FRAME_SHAPE

    def __post_init__(self):
        arr = np.array(self.frames, dtype=np.float32)
        if arr.ndim != 2:
            raise ContractError(f"frames must be (N, input_dim), got shape {arr.shape}")
        if arr.shape[1] != int(np.prod(self.image_shape)):
            raise ContractError(f"input_dim {arr.shape[1]} does not match image shape {self.image_shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0 or not np.isfinite(arr).all()):
            raise ContractError(f"frame values of {self.source_id or 'video'} must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "frames", arr)
        object.__setattr__(self, "image_shape", tuple(self.image_shape))

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frames.shape[1]

    def image(self, i: int) -> np.ndarray:
        return self.frames[i].reshape(self.image_shape)


@dataclass
class DatasetSplit:
    train: list[FrameSequence] = field(default_factory=list)
    val: list[FrameSequence] = field(default_factory=list)
    test: list[FrameSequence] = field(default_factory=list)

    def __post_init__(self):
        seen = {}
        for name in ("train", "val", "test"):
            for v in getattr(self, name):
                if v.source_id in seen:
                    raise ContractError(f"video {v.source_id!r} appears in both {seen[v.source_id]} and {name}")
                seen[v.source_id] = name

    def assignment(self) -> list[tuple[str, str]]:
        return [(name, v.source_id) for name in ("train", "val", "test") for v in getattr(self, name)]


@dataclass(frozen=True)
class Window:
    """A stride-1 slice of a video: ``seq_len`` inputs followed by ``horizon`` targets."""

    video: FrameSequence
    start: int
    seq_len: int
    horizon: int

    @property
    def inputs(self) -> np.ndarray:
        return self.video.frames[self.start:self.start + self.seq_len]

    @property
    def targets(self) -> np.ndarray:
        s = self.start + self.seq_len
        return self.video.frames[s:s + self.horizon]

    @property
    def synced_targets(self) -> np.ndarray:
        """The inputs shifted one frame forward."""
        return self.video.frames[self.start + 1:self.start + self.seq_len + 1]

    @property
    def target_index(self) -> int:
        return self.start + self.seq_len + self.horizon - 1


# -- preprocessing ---------------------------------------------------------

def normalize_frame(raw) -> np.ndarray:
    """Map 8-bit values in [0, 255] to float32 in [0, 1]."""
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


def gamma_correct(frame: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if not gamma > 0:
        raise ContractError(f"gamma must be positive, got {gamma}")
    frame = np.asarray(frame)
    if gamma == 1:
        return frame.copy()
    return np.power(np.clip(frame, 0.0, 1.0), gamma).astype(frame.dtype, copy=False)


def resize_bilinear(frame: np.ndarray, size: tuple[int, int] = FRAME_SHAPE[:2]) -> np.ndarray:
    """Corner-aligned bilinear resize of an ``(H, W, C)`` image."""
    frame = np.asarray(frame)
    H, W = frame.shape[:2]
    out_h, out_w = size
    if (H, W) == (out_h, out_w):
        return frame.copy()

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo)

    y0, y1, wy = axis(H, out_h)
    x0, x1, wx = axis(W, out_w)
    f = frame.astype(np.float64)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
    bottom = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(out, 0.0, 1.0).astype(frame.dtype if np.issubdtype(frame.dtype, np.floating) else np.float32)


def preprocess(raw: np.ndarray, gamma: float | None = DEFAULT_GAMMA,
               size: tuple[int, int] = FRAME_SHAPE[:2]) -> np.ndarray:
    """normalize -> gamma -> resize; returns a flat float32 frame."""
    raw = np.asarray(raw)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    x = normalize_frame(raw)
    if gamma is not None:
        x = gamma_correct(x, gamma)
    return resize_bilinear(x, size).astype(np.float32).reshape(-1)


def quantize(frame: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8 bits."""
    return np.floor(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# -- windows and splits ----------------------------------------------------

def window_count(n_frames: int, seq_len: int, horizon: int) -> int:
    return max(0, n_frames - seq_len - horizon + 1)


def window_sequences(video: FrameSequence, seq_len: int, horizon: int = 1) -> list[Window]:
    """Every stride-1 window of ``seq_len`` inputs and ``horizon`` targets."""
    if seq_len < 1 or horizon < 1:
        raise ContractError(f"seq_len and horizon must be >= 1, got {seq_len}, {horizon}")
    n = len(video)
    if n < seq_len + horizon:
        raise ContractError(f"video {video.source_id!r} has {n} frames; needs at least {seq_len + horizon}")
    return [Window(video, i, seq_len, horizon) for i in range(window_count(n, seq_len, horizon))]


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    ratios = np.asarray(ratios, dtype=float)
    if ratios.ndim != 1 or (ratios < 0).any() or ratios.sum() <= 0:
        raise ContractError(f"invalid split ratios {list(ratios)}")
    ratios = ratios / ratios.sum()
    need = int((ratios > 0).sum())
    if n < need:
        raise ContractError(f"{n} videos cannot fill {need} non-empty splits")
    exact = ratios * n
    sizes = np.floor(exact).astype(int)
    # largest remainder, ties to the earlier split
    for i in sorted(range(len(sizes)), key=lambda k: (-(exact[k] - sizes[k]), k))[: n - sizes.sum()]:
        sizes[i] += 1
    for i in np.flatnonzero((ratios > 0) & (sizes == 0)):
        sizes[int(np.argmax(sizes))] -= 1
        sizes[i] = 1
    return [int(s) for s in sizes]


def split_dataset(videos: Sequence[FrameSequence], ratios: Sequence[float] = TABLE_I_RATIOS,
                  seed: int = 0) -> DatasetSplit:
    """Seeded whole-video split into train/val/test."""
    if len(ratios) != 3:
        raise ContractError("split_dataset needs exactly three ratios (train, val, test)")
    sizes = _split_sizes(len(videos), ratios)
    order = np.random.default_rng(seed).permutation(len(videos))
    parts, start = [], 0
    for size in sizes:
        parts.append([videos[i] for i in order[start:start + size]])
        start += size
    return DatasetSplit(*parts)


# -- frame directories -----------------------------------------------------

def frame_name(i: int) -> str:
    return f"frame_{i:06d}.png"


def load_frame_directory(path, gamma: float | None = None, size: tuple[int, int] = FRAME_SHAPE[:2],
                         fps: float = 10.0) -> FrameSequence:
    """Read ``frame_NNNNNN.png`` files (contiguous from 000000) and preprocess them.

    ``gamma=None`` skips gamma correction, which is right for frames written by
    :func:`save_frames` (already preprocessed).
    """
    path = Path(path)
    if not path.is_dir():
        raise PathError(f"frame directory {path} does not exist")
    indices = []
    for name in os.listdir(path):
        m = _FRAME_RE.match(name)
        if m:
            indices.append(int(m.group(1)))
    if not indices:
        raise FormatError(f"no frame_NNNNNN.png files in {path}")
    indices.sort()
    for expected, got in enumerate(indices):
        if got != expected:
            raise FormatError(f"{path}: missing {frame_name(expected)}")
    frames = []
    for i in indices:
        fp = path / frame_name(i)
        try:
            with Image.open(fp) as im:
                raw = np.asarray(im.convert("RGB"))
        except (UnidentifiedImageError, OSError) as exc:
            raise FormatError(f"cannot decode {fp}: {exc}") from None
        frames.append(preprocess(raw, gamma, size))
    return FrameSequence(np.stack(frames), fps=fps, source_id=path.name, image_shape=(size[0], size[1], 3))


def save_frames(seq: FrameSequence, path) -> None:
    """Write each frame as an 8-bit RGB PNG."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i in range(len(seq)):
        Image.fromarray(quantize(seq.image(i)), mode="RGB").save(path / frame_name(i))


def write_manifest(root, split: DatasetSplit) -> Path:
    root = Path(root)
    out = root / MANIFEST_NAME
    with open(out, "w") as fh:
        for name, vid in split.assignment():
            fh.write(f"{name}\t{vid}\n")
    return out


def read_manifest(root) -> list[tuple[str, str]]:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise PathError(f"dataset manifest {path} not found")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] not in ("train", "val", "test"):
                raise FormatError(f"{path}:{lineno}: expected 'split<TAB>videoname', got {line!r}")
            rows.append((parts[0], parts[1]))
    return rows


def load_dataset(root, gamma: float | None = None, size: tuple[int, int] = FRAME_SHAPE[:2]) -> DatasetSplit:
    """Load every video listed in the manifest under ``root``."""
    root = Path(root)
    if not root.is_dir():
        raise PathError(f"dataset directory {root} does not exist")
    parts = {"train": [], "val": [], "test": []}
    for name, vid in read_manifest(root):
        parts[name].append(load_frame_directory(root / vid, gamma=gamma, size=size))
    return DatasetSplit(**parts)
