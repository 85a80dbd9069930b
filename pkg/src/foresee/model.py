"""The Foresee network: stacked GRU layers, attention and a fully connected
reconstruction layer, together with recursive multi-frame rollout.

Vectors are 1-D tensors; a sequence of ``T`` frames is a ``(T, input_dim)``
matrix. Weight matrices are laid out ``(fan_in, fan_out)`` so every affine
map is ``x @ W + b``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as ft
from .errors import ContractError, DimensionError
from .tensor import Tensor


class AttnPlacement(str, Enum):
    OUTPUT = "output"
    HIDDEN = "hidden"


class AttnSteps(str, Enum):
    LAST = "last"
    ALL = "all"


class Arch(str, Enum):
    FORESEE = "foresee"
    ENCDEC_LSTM = "encdec_lstm"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 3072
    hidden_size: int = 512
    num_layers: int = 2
    seq_len: int = 10
    attn_placement: AttnPlacement = AttnPlacement.OUTPUT
    attn_steps: AttnSteps = AttnSteps.ALL
    literal_attn_exp: bool = False
    arch: Arch = Arch.FORESEE

    def __post_init__(self):
        object.__setattr__(self, "attn_placement", AttnPlacement(self.attn_placement))
        object.__setattr__(self, "attn_steps", AttnSteps(self.attn_steps))
        object.__setattr__(self, "arch", Arch(self.arch))
        for name in ("input_dim", "hidden_size", "num_layers", "seq_len"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")

    def replace(self, **changes) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ModelConfig(**values)


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


@dataclass
class GruLayerParams:
    W_ir: Tensor
    W_iz: Tensor
    W_in: Tensor
    W_hr: Tensor
    W_hz: Tensor
    W_hn: Tensor
    b_ir: Tensor
    b_iz: Tensor
    b_in: Tensor
    b_hr: Tensor
    b_hz: Tensor
    b_hn: Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> "GruLayerParams":
        ws = {n: uniform_init(rng, in_dim, (in_dim, hidden), dtype) for n in ("W_ir", "W_iz", "W_in")}
        ws.update({n: uniform_init(rng, hidden, (hidden, hidden), dtype) for n in ("W_hr", "W_hz", "W_hn")})
        bs = {n: zeros_param((hidden,), dtype) for n in ("b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn")}
        return cls(**ws, **bs)

    @property
    def input_dim(self) -> int:
        return self.W_ir.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W_ir.shape[1]


@dataclass
class AttentionParams:
    """Shared score projection ``(width, 1)`` and its scalar bias."""

    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        return cls(uniform_init(rng, width, (width, 1), dtype), zeros_param((1,), dtype))


def _check_vec(name: str, t: Tensor, n: int) -> None:
    if t.shape != (n,):
        raise DimensionError(f"{name}: expected shape ({n},), got {t.shape}")


def gru_cell_step(layer: GruLayerParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update for a single time step."""
    _check_vec("gru_cell_step x_t", x_t, layer.input_dim)
    _check_vec("gru_cell_step h_prev", h_prev, layer.hidden_size)
    r = ft.sigmoid(ft.add_bias(x_t @ layer.W_ir, layer.b_ir) + ft.add_bias(h_prev @ layer.W_hr, layer.b_hr))
    z = ft.sigmoid(ft.add_bias(x_t @ layer.W_iz, layer.b_iz) + ft.add_bias(h_prev @ layer.W_hz, layer.b_hz))
    n = ft.tanh(ft.add_bias(x_t @ layer.W_in, layer.b_in) + r * ft.add_bias(h_prev @ layer.W_hn, layer.b_hn))
    return (1.0 - z) * n + z * h_prev


def gru_layer_sequence(layer: GruLayerParams, X: Tensor) -> list[Tensor]:
    """Run one GRU layer over a ``(T, in)`` sequence from a zero state.

    Input projections for all steps are computed as one matrix product; the
    recurrence is the same as :func:`gru_cell_step`.
    """
    if X.ndim != 2 or X.shape[1] != layer.input_dim:
        raise DimensionError(f"GRU layer expects (T, {layer.input_dim}) input, got {X.shape}")
    XR = ft.add_bias(X @ layer.W_ir, layer.b_ir)
    XZ = ft.add_bias(X @ layer.W_iz, layer.b_iz)
    XN = ft.add_bias(X @ layer.W_in, layer.b_in)
    h = Tensor(np.zeros(layer.hidden_size, dtype=X.dtype))
    out = []
    for t in range(X.shape[0]):
        r = ft.sigmoid(XR[t] + ft.add_bias(h @ layer.W_hr, layer.b_hr))
        z = ft.sigmoid(XZ[t] + ft.add_bias(h @ layer.W_hz, layer.b_hz))
        n = ft.tanh(XN[t] + r * ft.add_bias(h @ layer.W_hn, layer.b_hn))
        h = (1.0 - z) * n + z * h
        out.append(h)
    return out


def as_sequence(frames, dtype=None) -> Tensor:
    """Coerce a frame window (matrix, tensor, array or list of vectors) to ``(T, D)``."""
    if isinstance(frames, Tensor):
        X = frames
    elif hasattr(frames, "frames"):
        X = Tensor(frames.frames, dtype=dtype)
    elif isinstance(frames, (list, tuple)):
        if not frames:
            raise ContractError("empty frame sequence")
        if all(isinstance(f, Tensor) for f in frames):
            X = ft.stack(list(frames))
        else:
            X = Tensor(np.stack([np.asarray(f) for f in frames]), dtype=dtype)
    else:
        X = Tensor(np.asarray(frames), dtype=dtype)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractError(f"frame sequence must be a non-empty (T, D) matrix, got shape {X.shape}")
    return X


def average_inputs(X: Tensor, weight: float = 0.5) -> Tensor:
    """Blend each frame with its predecessor: ``w*x_t + (1-w)*x_{t-1}``; the first is kept."""
    T = X.shape[0]
    A = np.eye(T) * weight + np.eye(T, k=-1) * (1.0 - weight)
    A[0, 0] = 1.0
    return Tensor(A, dtype=X.dtype) @ X


class SequencePredictor:
    """Parameter bookkeeping shared by Foresee and the LSTM baseline.

    Subclasses implement :meth:`named_parameters` and :meth:`predict_at`.
    """

    config: ModelConfig

    def named_parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def predict_at(self, X: Tensor, steps: Sequence[int], attend: Sequence[bool],
                   input_averaging: float | None = None) -> list[Tensor]:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def copy(self) -> "SequencePredictor":
        clone = copy.deepcopy(self)
        for p in clone.parameters():
            p._grad = None
        return clone

    def astype(self, dtype) -> "SequencePredictor":
        clone = self.copy()
        for p in clone.parameters():
            p.data = p.data.astype(dtype)
        return clone

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(arrays) != set(params):
            missing = sorted(set(params) - set(arrays))
            extra = sorted(set(arrays) - set(params))
            raise ContractError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class ForeseeModel(SequencePredictor):
    def __init__(self, config: ModelConfig, gru_layers: list[GruLayerParams], attention: AttentionParams,
                 recon_W: Tensor, recon_b: Tensor):
        if len(gru_layers) != config.num_layers:
            raise ContractError(f"expected {config.num_layers} GRU layers, got {len(gru_layers)}")
        for i, layer in enumerate(gru_layers):
            want = config.input_dim if i == 0 else config.hidden_size
            if layer.input_dim != want or layer.hidden_size != config.hidden_size:
                raise DimensionError(f"GRU layer {i} has shape {layer.input_dim}->{layer.hidden_size}")
        width = config.input_dim if config.attn_placement is AttnPlacement.OUTPUT else config.hidden_size
        if attention.W.shape != (width, 1):
            raise DimensionError(f"attention W must be ({width}, 1), got {attention.W.shape}")
        if recon_W.shape != (config.hidden_size, config.input_dim) or recon_b.shape != (config.input_dim,):
            raise DimensionError(f"reconstruction shapes {recon_W.shape}, {recon_b.shape} do not match config")
        self.config = config
        self.gru_layers = gru_layers
        self.attention = attention
        self.recon_W = recon_W
        self.recon_b = recon_b

    @classmethod
    def init(cls, config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> "ForeseeModel":
        if config.arch is not Arch.FORESEE:
            raise ContractError(f"ForeseeModel cannot be built from arch {config.arch.value}")
        rng = np.random.default_rng(seed)
        layers = [GruLayerParams.init(config.input_dim if i == 0 else config.hidden_size,
                                      config.hidden_size, rng, dtype) for i in range(config.num_layers)]
        width = config.input_dim if config.attn_placement is AttnPlacement.OUTPUT else config.hidden_size
        attention = AttentionParams.init(width, rng, dtype)
        recon_W = uniform_init(rng, config.hidden_size, (config.hidden_size, config.input_dim), dtype)
        recon_b = zeros_param((config.input_dim,), dtype)
        return cls(config, layers, attention, recon_W, recon_b)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "ForeseeModel":
        model = cls.init(config, seed=0, dtype=dtype)
        for p in model.parameters():
            p.data[...] = 0
        return model

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.gru_layers):
            for f in fields(layer):
                out[f"gru.{i}.{f.name}"] = getattr(layer, f.name)
        out["attn.W"] = self.attention.W
        out["attn.b"] = self.attention.b
        out["recon.W"] = self.recon_W
        out["recon.b"] = self.recon_b
        return out

    def encode(self, X: Tensor, input_averaging: float | None = None) -> list[Tensor]:
        if input_averaging is not None:
            X = average_inputs(X, input_averaging)
        outputs = None
        for i, layer in enumerate(self.gru_layers):
            outputs = gru_layer_sequence(layer, X)
            if i + 1 < len(self.gru_layers):
                X = ft.stack(outputs)
        return outputs

    def predict_at(self, X: Tensor, steps: Sequence[int], attend: Sequence[bool],
                   input_averaging: float | None = None) -> list[Tensor]:
        """Unclamped next-frame predictions emitted at encoder ``steps``.

        With ``attend[k]`` the prediction at step ``t`` attends over steps
        ``0..t`` only; otherwise it reconstructs step ``t`` alone.
        """
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise DimensionError(f"expected (T, {self.config.input_dim}) frames, got {X.shape}")
        O = self.encode(X, input_averaging)
        Omat = ft.stack(O)
        literal = self.config.literal_attn_exp
        need_scores = any(attend)
        if self.config.attn_placement is AttnPlacement.OUTPUT:
            F = reconstruct(self, Omat)
            scores = _scores(self.attention, F, literal) if need_scores else None
            return [ft.softmax(scores[: t + 1]) @ F[: t + 1] if a else F[t] for t, a in zip(steps, attend)]
        scores = _scores(self.attention, Omat, literal) if need_scores else None
        vecs = [ft.softmax(scores[: t + 1]) @ Omat[: t + 1] if a else O[t] for t, a in zip(steps, attend)]
        frames = reconstruct(self, ft.stack(vecs))
        return [frames[k] for k in range(len(vecs))]


def _scores(attn: AttentionParams, O: Tensor, literal: bool) -> Tensor:
    e = ft.reshape(ft.tanh(ft.add_bias(O @ attn.W, attn.b)), (O.shape[0],))
    return ft.exp(e) if literal else e


def encode_sequence(model: ForeseeModel, frames) -> list[Tensor]:
    """Topmost-layer GRU output at every step, starting from zero state."""
    X = as_sequence(frames)
    if X.shape[1] != model.config.input_dim:
        raise DimensionError(f"frames have {X.shape[1]} values, model expects {model.config.input_dim}")
    return model.encode(X)


def attention_context(attn: AttentionParams, O, literal_exp: bool = False) -> Tensor:
    """Softmax-normalised weight per step from one tanh score per step."""
    Omat = as_sequence(O)
    if Omat.shape[1] != attn.W.shape[0]:
        raise DimensionError(f"step width {Omat.shape[1]} does not match attention W {attn.W.shape}")
    return ft.softmax(_scores(attn, Omat, literal_exp))


def attended_output(O, C: Tensor) -> Tensor:
    """Context-weighted sum of the per-step vectors."""
    Omat = as_sequence(O)
    if C.ndim != 1 or C.shape[0] != Omat.shape[0]:
        raise DimensionError(f"context of shape {C.shape} for {Omat.shape[0]} steps")
    return C @ Omat


def reconstruct(model, h: Tensor, clamp: bool = False) -> Tensor:
    """Fully connected map from hidden width to a frame (rows of ``h`` if 2-D)."""
    if h.shape[-1] != model.recon_W.shape[0]:
        raise DimensionError(f"reconstruct: input width {h.shape[-1]} vs weights {model.recon_W.shape}")
    out = ft.add_bias(h @ model.recon_W, model.recon_b)
    return ft.clamp(out) if clamp else out


def _window_matrix(model: SequencePredictor, window) -> Tensor:
    X = as_sequence(window, dtype=model.recon_W.dtype)
    if X.shape[0] != model.config.seq_len:
        raise ContractError(f"window has {X.shape[0]} frames, model needs seq_len={model.config.seq_len}")
    if X.shape[1] != model.config.input_dim:
        raise DimensionError(f"frames have {X.shape[1]} values, model expects {model.config.input_dim}")
    return X


def predict_next_frame(model: SequencePredictor, window, input_averaging: float | None = None) -> Tensor:
    """Predict the frame after ``window``, clamped to [0, 1]."""
    X = _window_matrix(model, window)
    T = X.shape[0]
    pred = model.predict_at(X, [T - 1], [True], input_averaging)[0]
    return ft.clamp(pred)


def rollout(model: SequencePredictor, window, horizon: int, input_averaging: float | None = None) -> list[Tensor]:
    """Predict ``horizon`` frames by re-feeding each (clamped) prediction."""
    if horizon < 1:
        raise ContractError(f"rollout horizon must be >= 1, got {horizon}")
    X = _window_matrix(model, window)
    frames = [X.data[i] for i in range(X.shape[0])]
    out = []
    for _ in range(horizon):
        nxt = predict_next_frame(model, np.stack(frames), input_averaging)
        out.append(nxt)
        frames = frames[1:] + [nxt.data]
    return out
