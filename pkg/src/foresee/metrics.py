"""Image-quality metrics and the exhaustive-window evaluation protocol."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .data import FRAME_SHAPE, FrameSequence, quantize, window_count
from .errors import ContractError, DimensionError

SSIM_WINDOW = 8
SSIM_STRIDE = 4
K1, K2 = 0.01, 0.03
COPY_LAST = "copy_last"


def mse_images(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse_images: shapes {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


def _as_image(x, image_shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.size != int(np.prod(image_shape)):
            raise DimensionError(f"frame of {x.size} values does not match image shape {image_shape}")
        x = x.reshape(image_shape)
    if x.ndim == 2:
        x = x[:, :, None]
    return x


def ssim(a, b, image_shape=FRAME_SHAPE, window: int = SSIM_WINDOW, stride: int = SSIM_STRIDE,
         data_range: float = 1.0) -> float:
    """Mean SSIM over uniform ``window``-sized patches taken every ``stride``
    pixels, computed per channel and averaged. Statistics are population
    (1/N) moments. Images smaller than the window use one whole-image patch.
    """
    x, y = _as_image(a, image_shape), _as_image(b, image_shape)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes {x.shape} and {y.shape} differ")
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    wh, ww = min(window, x.shape[0]), min(window, x.shape[1])
    px = sliding_window_view(x, (wh, ww), axis=(0, 1))[::stride, ::stride]
    py = sliding_window_view(y, (wh, ww), axis=(0, 1))[::stride, ::stride]
    mx, my = px.mean(axis=(-2, -1)), py.mean(axis=(-2, -1))
    vx = ((px - mx[..., None, None]) ** 2).mean(axis=(-2, -1))
    vy = ((py - my[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((px - mx[..., None, None]) * (py - my[..., None, None])).mean(axis=(-2, -1))
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    # mean per channel first, then across channels
    return float(np.mean(s.mean(axis=(0, 1))))


def ssim_x100(a, b, image_shape=FRAME_SHAPE) -> float:
    return 100.0 * ssim(a, b, image_shape)


@dataclass
class MetricsReport:
    """Per-horizon means over every exhaustive window of the evaluated videos."""

    approach: str
    horizon: int
    mse: list[float]
    ssim_x100: list[float]
    windows: int
    per_video: dict[str, dict] = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        return [(self.approach, h + 1, self.mse[h], self.ssim_x100[h], self.windows) for h in range(self.horizon)]


class _Accumulator:
    def __init__(self, horizon):
        self.mse = [[] for _ in range(horizon)]
        self.ssim = [[] for _ in range(horizon)]

    def add(self, preds, targets, image_shape):
        for h, (p, t) in enumerate(zip(preds, targets)):
            self.mse[h].append(mse_images(p, t))
            self.ssim[h].append(ssim_x100(p, t, image_shape))

    @staticmethod
    def _mean(values):
        # fsum is exact, so the result is independent of accumulation order
        return math.fsum(values) / len(values)

    def means(self):
        return [self._mean(v) for v in self.mse], [self._mean(v) for v in self.ssim]

    @property
    def count(self):
        return len(self.mse[0])


def report_from_rollouts(approach: str, per_video: Mapping[str, tuple[np.ndarray, np.ndarray]],
                         image_shape=FRAME_SHAPE) -> MetricsReport:
    """Build a report from ``{video: (predictions (n, H, D), targets (n, H, D))}``."""
    total = None
    breakdown = {}
    for vid, (preds, targets) in per_video.items():
        preds, targets = np.asarray(preds), np.asarray(targets)
        if preds.shape != targets.shape or preds.ndim != 3:
            raise DimensionError(f"{vid}: predictions {preds.shape} vs targets {targets.shape}")
        H = preds.shape[1]
        acc = _Accumulator(H)
        if total is None:
            total = _Accumulator(H)
        for p, t in zip(preds, targets):
            acc.add(p, t, image_shape)
            total.add(p, t, image_shape)
        m, s = acc.means()
        breakdown[vid] = {"mse": m, "ssim_x100": s, "windows": acc.count}
    if total is None or total.count == 0:
        raise ContractError("no windows to report")
    m, s = total.means()
    return MetricsReport(approach, len(m), m, s, total.count, breakdown)


def copy_last_rollout(window: np.ndarray, horizon: int) -> np.ndarray:
    window = np.asarray(window)
    if window.ndim != 2 or window.shape[0] == 0:
        raise ContractError("copy-last-frame needs a non-empty window")
    return np.repeat(window[-1:], horizon, axis=0)


def model_rollout_fn(model, input_averaging: float | None = None) -> Callable:
    from .model import rollout

    def fn(window, horizon):
        return np.stack([f.data for f in rollout(model, window, horizon, input_averaging)])

    return fn


def evaluate(approaches: Mapping[str, object], videos: Sequence[FrameSequence], seq_len: int = 10,
             horizon: int = 1, image_shape=None, stride: int = 1) -> dict[str, MetricsReport]:
    """Roll every approach out over all exhaustive windows of ``videos``.

    ``approaches`` maps names to models or ``fn(window, horizon) -> (H, D)``
    callables. The copy-last-frame baseline is always included.
    """
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    if not videos:
        raise ContractError("no videos to evaluate")
    image_shape = image_shape or videos[0].image_shape
    fns = {}
    for name, a in approaches.items():
        fns[name] = model_rollout_fn(a) if hasattr(a, "predict_at") else a
    fns.setdefault(COPY_LAST, copy_last_rollout)
    if sum(window_count(len(v), seq_len, horizon) for v in videos) == 0:
        raise ContractError(f"no video is long enough for {seq_len} inputs + horizon {horizon}")
    reports = {}
    for name, fn in fns.items():
        per_video = {}
        for v in videos:
            n = window_count(len(v), seq_len, horizon)
            if n == 0:
                continue
            starts = range(0, n, stride)
            preds = np.stack([fn(v.frames[i:i + seq_len], horizon) for i in starts])
            targets = np.stack([v.frames[i + seq_len:i + seq_len + horizon] for i in starts])
            per_video[v.source_id] = (preds, targets)
        reports[name] = report_from_rollouts(name, per_video, image_shape)
    return reports


def write_report_csv(reports, path) -> Path:
    path = Path(path)
    if isinstance(reports, MetricsReport):
        reports = [reports]
    elif isinstance(reports, Mapping):
        reports = list(reports.values())
    with open(path, "w") as fh:
        fh.write("approach,horizon,mse,ssim_x100,windows\n")
        for r in reports:
            for approach, h, m, s, n in r.rows():
                fh.write(f"{approach},{h},{m!r},{s!r},{n}\n")
    return path


def write_per_video_csv(reports, path) -> Path:
    path = Path(path)
    reports = list(reports.values()) if isinstance(reports, Mapping) else list(reports)
    with open(path, "w") as fh:
        fh.write("approach,video,horizon,mse,ssim_x100,windows\n")
        for r in reports:
            for vid, d in r.per_video.items():
                for h in range(r.horizon):
                    fh.write(f"{r.approach},{vid},{h + 1},{d['mse'][h]!r},{d['ssim_x100'][h]!r},{d['windows']}\n")
    return path


def montage(targets: Sequence, predictions: Sequence, path, image_shape=FRAME_SHAPE,
            columns: int | None = None, scale: int = 4, gap: int = 2) -> Path:
    """Two-row grid: ground-truth frames on top, predictions below."""
    n = min(len(targets), len(predictions))
    if columns is not None:
        n = min(n, columns)
    if n == 0:
        raise ContractError("montage needs at least one frame pair")
    H, W = image_shape[0] * scale, image_shape[1] * scale
    canvas = np.full((2 * H + 3 * gap, n * W + (n + 1) * gap, 3), 255, dtype=np.uint8)
    for row, frames in enumerate((targets, predictions)):
        for c in range(n):
            img = quantize(np.asarray(frames[c]).reshape(image_shape))
            img = np.repeat(np.repeat(img, scale, 0), scale, 1)
            y = gap + row * (H + gap)
            x = gap + c * (W + gap)
            canvas[y:y + H, x:x + W] = img
    path = Path(path)
    Image.fromarray(canvas, mode="RGB").save(path)
    return path
