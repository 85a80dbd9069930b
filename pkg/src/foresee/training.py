"""Loss, optimizers, the synced (MM-2) and decoder-only (MM-1) training
procedures, and per-video online adaptation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as ft
from .data import FrameSequence, Window, window_count, window_sequences
from .errors import ContractError, DimensionError
from .model import AttnSteps, SequencePredictor, predict_next_frame, rollout
from .tensor import Tensor

log = logging.getLogger(__name__)

VARIANTS = ("mm1", "mm2")
OPTIMIZERS = ("adam", "adagrad")


def mse_loss(predicted: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    if predicted.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {predicted.shape} and {target.shape} differ")
    d = predicted - target
    return ft.mean(d * d)


# -- optimizers ------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-parameter accumulators; Adam keeps ``m``/``v``, Adagrad ``accum``.

    Subnormal entries are flushed to zero every ``FLUSH_INTERVAL`` steps;
    arithmetic on denormals is an order of magnitude slower on most CPUs.
    """

    kind: str = "adam"
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if self.eps is None:
            self.eps = 1e-8 if self.kind == "adam" else 1e-10

    @property
    def buffer_names(self) -> tuple:
        return ("m", "v") if self.kind == "adam" else ("accum",)

    @classmethod
    def create(cls, kind: str, params: dict[str, Tensor]) -> "OptimizerState":
        state = cls(kind=kind)
        state.buffers = {b: {k: np.zeros_like(p.data) for k, p in params.items()} for b in state.buffer_names}
        return state

    def check(self, params: dict[str, Tensor]) -> None:
        for b in self.buffer_names:
            bufs = self.buffers.get(b)
            if bufs is None or set(bufs) != set(params):
                raise ContractError(f"optimizer buffer {b!r} does not cover the parameter set")
            for k, p in params.items():
                if bufs[k].shape != p.shape:
                    raise ContractError(f"optimizer buffer {b}.{k} has shape {bufs[k].shape}, param {p.shape}")

    def to_arrays(self, prefix: str = "optim.") -> dict[str, np.ndarray]:
        out = {f"{prefix}{self.kind}.step": np.array([self.step], dtype=np.float32)}
        for b, bufs in self.buffers.items():
            for k, arr in bufs.items():
                out[f"{prefix}{self.kind}.{b}.{k}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "optim.") -> "OptimizerState":
        kinds = {k[len(prefix):].split(".", 1)[0] for k in arrays}
        if len(kinds) != 1:
            raise ContractError(f"mixed optimizer state kinds {sorted(kinds)}")
        kind = kinds.pop()
        state = cls(kind=kind)
        head = f"{prefix}{kind}."
        for key, arr in arrays.items():
            rest = key[len(head):]
            if rest == "step":
                state.step = int(arr.reshape(-1)[0])
                continue
            buf, name = rest.split(".", 1)
            state.buffers.setdefault(buf, {})[name] = np.array(arr)
        return state


FLUSH_INTERVAL = 16


def _maybe_flush(state: "OptimizerState") -> None:
    if state.step % FLUSH_INTERVAL:
        return
    for bufs in state.buffers.values():
        for arr in bufs.values():
            arr[np.abs(arr) < np.finfo(arr.dtype).tiny] = 0.0


def _grads_for(params: dict[str, Tensor], grads) -> dict[str, np.ndarray]:
    if grads is None:
        return {k: p.grad for k, p in params.items()}
    for k, p in params.items():
        if k not in grads or np.shape(grads[k]) != p.shape:
            raise ContractError(f"gradient for {k} missing or mis-shaped")
    return grads


def adam_step(params: dict[str, Tensor], grads, state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place; zeroes the parameter gradients.

    ``grads=None`` reads each parameter's accumulated ``.grad``.
    """
    state.check(params)
    grads = _grads_for(params, grads)
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    scale = lr * np.sqrt(c2) / c1
    eps = state.eps * np.sqrt(c2)
    for k, p in params.items():
        g = grads[k]
        m, v = state.buffers["m"][k], state.buffers["v"][k]
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        # lr * (m / c1) / (sqrt(v / c2) + eps), rearranged to save passes
        np.sqrt(v, out=tmp)
        tmp += eps
        np.divide(m, tmp, out=tmp)
        tmp *= scale
        p.data -= tmp
        p.zero_grad()
    _maybe_flush(state)


def adagrad_step(params: dict[str, Tensor], grads, state: OptimizerState, lr: float) -> None:
    state.check(params)
    grads = _grads_for(params, grads)
    state.step += 1
    for k, p in params.items():
        g = grads[k]
        acc = state.buffers["accum"][k]
        acc += np.square(g)
        denom = np.sqrt(acc)
        denom += state.eps
        np.divide(g, denom, out=denom)
        denom *= lr
        p.data -= denom
        p.zero_grad()
    _maybe_flush(state)


def optimizer_step(params, state: OptimizerState, lr: float) -> None:
    (adam_step if state.kind == "adam" else adagrad_step)(params, None, state, lr)


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    variant: str = "mm2"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 1
    batch_mode: str = "per_sequence"
    seed: int = 0
    mm1_horizon: int = 5
    max_steps: int | None = None
    max_seconds: float | None = None
    val_interval: int = 500
    val_max_windows: int | None = 200
    online: bool = False
    online_window_frames: int = 10
    online_epochs: int = 5
    online_input_averaging: bool = True
    input_averaging_weight: float = 0.5
    online_learning_rate: float | None = None
    online_resume_optimizer: bool = False
    rollout_horizon: int = 5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.batch_mode != "per_sequence":
            raise ContractError("only per_sequence batching is supported")
        if not self.learning_rate >= 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.rollout_horizon < 1 or self.mm1_horizon < 1:
            raise ContractError("epochs, rollout_horizon and mm1_horizon must be >= 1")
        if self.online_epochs < 0 or self.online_window_frames < 2:
            raise ContractError("online_epochs must be >= 0 and online_window_frames >= 2")
        if self.max_steps is not None and self.max_steps < 0:
            raise ContractError("max_steps must be >= 0")
        if self.max_seconds is not None and not self.max_seconds > 0:
            raise ContractError("max_seconds must be positive")
        if not 0.0 <= self.input_averaging_weight <= 1.0:
            raise ContractError("input_averaging_weight must lie in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)

    @property
    def online_averaging(self) -> float | None:
        return self.input_averaging_weight if self.online_input_averaging else None


# -- sequence losses -------------------------------------------------------

def _attend_flags(model: SequencePredictor, n: int) -> list[bool]:
    if model.config.attn_steps is AttnSteps.ALL:
        return [True] * n
    return [k == n - 1 for k in range(n)]


def synced_loss(model: SequencePredictor, inputs: np.ndarray, targets: np.ndarray,
                input_averaging: float | None = None) -> Tensor:
    """Mean per-step MSE when step ``t`` predicts frame ``t+1`` (MM-2)."""
    dtype = model.recon_W.dtype
    X = Tensor(inputs, dtype=dtype)
    T = X.shape[0]
    preds = model.predict_at(X, list(range(T)), _attend_flags(model, T), input_averaging)
    return mse_loss(ft.stack(preds), Tensor(targets, dtype=dtype))


def decoded_loss(model: SequencePredictor, inputs: np.ndarray, targets: np.ndarray,
                 input_averaging: float | None = None) -> Tensor:
    """Encode ``inputs`` then decode ``len(targets)`` frames recursively (MM-1).

    Re-fed predictions are clamped to [0, 1]; the loss uses the raw outputs.
    """
    dtype = model.recon_W.dtype
    rows = [Tensor(r, dtype=dtype) for r in inputs]
    H = len(targets)
    attend = _attend_flags(model, H)
    preds = []
    for k in range(H):
        X = ft.stack(rows)
        p = model.predict_at(X, [X.shape[0] - 1], [attend[k]], input_averaging)[0]
        preds.append(p)
        rows = rows[1:] + [ft.clamp(p)]
    return mse_loss(ft.stack(preds), Tensor(targets, dtype=dtype))


def window_loss(model: SequencePredictor, window: Window, variant: str,
                input_averaging: float | None = None) -> Tensor:
    if variant == "mm2":
        return synced_loss(model, window.inputs, window.synced_targets, input_averaging)
    return decoded_loss(model, window.inputs, window.targets, input_averaging)


# -- training loops --------------------------------------------------------

@dataclass
class HistoryRow:
    step: int
    epoch: int
    train_mse: float | None = None
    val_mse: float | None = None


@dataclass
class TrainResult:
    model: SequencePredictor
    history: list[HistoryRow]
    optimizer_state: OptimizerState

    @property
    def train_losses(self) -> list[float]:
        return [r.train_mse for r in self.history if r.train_mse is not None]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_mse for r in self.history if r.val_mse is not None]


def write_history_csv(history: Sequence[HistoryRow], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("step,epoch,train_mse,val_mse\n")
        for r in history:
            tr = "" if r.train_mse is None else repr(float(r.train_mse))
            va = "" if r.val_mse is None else repr(float(r.val_mse))
            fh.write(f"{r.step},{r.epoch},{tr},{va}\n")
    return path


def _spread(items: list, limit: int | None) -> list:
    if limit is None or len(items) <= limit:
        return items
    idx = np.linspace(0, len(items) - 1, limit).round().astype(int)
    return [items[i] for i in idx]


def validation_windows(model: SequencePredictor, videos: Sequence[FrameSequence],
                       limit: int | None = None) -> list[Window]:
    T = model.config.seq_len
    wins = [w for v in videos if window_count(len(v), T, 1) > 0 for w in window_sequences(v, T, 1)]
    return _spread(wins, limit)


def next_frame_mse(model: SequencePredictor, windows: Sequence[Window],
                   input_averaging: float | None = None) -> float:
    """Mean clamped next-frame MSE over ``windows``."""
    if not windows:
        raise ContractError("no windows to evaluate")
    errs = []
    for w in windows:
        pred = predict_next_frame(model, w.inputs, input_averaging).data.astype(np.float64)
        errs.append(float(np.mean((pred - w.targets[0]) ** 2)))
    return math.fsum(errs) / len(errs)


def training_windows(model: SequencePredictor, videos: Sequence[FrameSequence], cfg: TrainConfig) -> list[Window]:
    T = model.config.seq_len
    horizon = 1 if cfg.variant == "mm2" else cfg.mm1_horizon
    wins = [w for v in videos if window_count(len(v), T, horizon) > 0 for w in window_sequences(v, T, horizon)]
    if not wins:
        raise ContractError(f"dataset has no windows of {T} inputs + {horizon} targets")
    return wins


def train(model: SequencePredictor, videos: Sequence[FrameSequence], cfg: TrainConfig,
          val_videos: Sequence[FrameSequence] = (), progress: Callable[[HistoryRow], None] | None = None,
          ) -> TrainResult:
    """Stochastic per-window training; one optimizer step per window.

    ``cfg.max_seconds`` caps total wall-clock time, validation included;
    runs that hit it are not reproducible step-for-step.
    """
    windows = training_windows(model, videos, cfg)
    params = model.named_parameters()
    state = OptimizerState.create(cfg.optimizer, params)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    val = validation_windows(model, val_videos, cfg.val_max_windows) if val_videos else []
    history: list[HistoryRow] = []
    start = time.perf_counter()

    def validate(step, epoch):
        row = HistoryRow(step, epoch, val_mse=next_frame_mse(model, val))
        history.append(row)
        if progress:
            progress(row)

    if val:
        validate(0, 0)
    step, last_val = 0, 0

    def exhausted():
        return (cfg.max_steps is not None and step >= cfg.max_steps) or \
            (cfg.max_seconds is not None and time.perf_counter() - start >= cfg.max_seconds)

    for epoch in range(1, cfg.epochs + 1):
        for i in rng.permutation(len(windows)):
            if exhausted():
                break
            with ft.Tape() as tape:
                loss = window_loss(model, windows[i], cfg.variant)
                tape.backward(loss)
            optimizer_step(params, state, cfg.learning_rate)
            step += 1
            row = HistoryRow(step, epoch, train_mse=float(loss.item()))
            history.append(row)
            if progress and step % 50 == 0:
                progress(row)
            if val and step % cfg.val_interval == 0:
                validate(step, epoch)
                last_val = step
        if exhausted():
            break
    if val and last_val != step:
        validate(step, min(epoch, cfg.epochs))
    return TrainResult(model, history, state)


def train_mm2(model, dataset, cfg: TrainConfig, val_videos=(), progress=None) -> TrainResult:
    return train(model, dataset, cfg.replace(variant="mm2"), val_videos, progress)


def train_mm1(model, dataset, cfg: TrainConfig, val_videos=(), progress=None) -> TrainResult:
    return train(model, dataset, cfg.replace(variant="mm1"), val_videos, progress)


# -- online adaptation -----------------------------------------------------

@dataclass
class OnlineResult:
    source_id: str
    times: list[int]
    rollouts: np.ndarray
    targets: np.ndarray
    adapt_losses: list[float]


def online_adapt_and_project(base, video: FrameSequence, cfg: TrainConfig, stride: int = 1,
                             optimizer_state: OptimizerState | None = None) -> OnlineResult:
    """Adapt a fresh copy of ``base`` along one video and project after each step.

    At every evaluation time ``t`` (the last observed frame of an exhaustive
    window) the model takes ``online_epochs`` synced-loss Adam steps on the
    trailing ``online_window_frames`` observed frames, then rolls out
    ``rollout_horizon`` frames. Adaptation is cumulative within the video.

    With ``cfg.online_resume_optimizer`` Adam resumes from a copy of
    ``optimizer_state`` (a path ``base`` supplies its stored state) when that
    state is Adam's; otherwise it starts from zero.
    """
    from .checkpoint import load_checkpoint

    if isinstance(base, (str, Path)):
        model, stored = load_checkpoint(base, with_optimizer=True)
        optimizer_state = optimizer_state or stored
    else:
        model = base.copy()
    T, H, Wn = model.config.seq_len, cfg.rollout_horizon, cfg.online_window_frames
    if len(video) < T + H:
        raise ContractError(f"video {video.source_id!r} has {len(video)} frames; online projection needs "
                            f"at least seq_len + rollout_horizon = {T + H}")
    avg = cfg.online_averaging
    lr = cfg.learning_rate if cfg.online_learning_rate is None else cfg.online_learning_rate
    params = model.named_parameters()
    if cfg.online_resume_optimizer and optimizer_state is not None and optimizer_state.kind == "adam":
        state = OptimizerState.from_arrays(optimizer_state.to_arrays())
        state.check(params)
    else:
        state = OptimizerState.create("adam", params)
    times, outs, targets, losses = [], [], [], []
    frames = video.frames
    for i in range(0, window_count(len(video), T, H), stride):
        t = i + T - 1
        trail = frames[max(0, t - Wn + 1):t + 1]
        for _ in range(cfg.online_epochs):
            with ft.Tape() as tape:
                loss = synced_loss(model, trail[:-1], trail[1:], avg)
                tape.backward(loss)
            adam_step(params, None, state, lr)
            losses.append(float(loss.item()))
        pred = rollout(model, frames[i:i + T], H, avg)
        times.append(t)
        outs.append(np.stack([p.data for p in pred]))
        targets.append(frames[t + 1:t + 1 + H])
    return OnlineResult(video.source_id, times, np.stack(outs), np.stack(targets), losses)
