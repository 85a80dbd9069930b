"""Comparison baselines: a stacked encoder-decoder LSTM and copy-last-frame."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as ft
from .errors import ContractError, DimensionError
from .model import (Arch, ModelConfig, SequencePredictor, _check_vec, _window_matrix, as_sequence,
                    average_inputs, reconstruct, uniform_init, zeros_param)
from .tensor import Tensor

_GATES = ("i", "f", "g", "o")


def lstm_config(input_dim: int = 3072, hidden_size: int = 1024, num_layers: int = 2,
                seq_len: int = 10) -> ModelConfig:
    return ModelConfig(input_dim=input_dim, hidden_size=hidden_size, num_layers=num_layers,
                       seq_len=seq_len, arch=Arch.ENCDEC_LSTM)


@dataclass
class LstmLayerParams:
    W_ii: Tensor
    W_if: Tensor
    W_ig: Tensor
    W_io: Tensor
    W_hi: Tensor
    W_hf: Tensor
    W_hg: Tensor
    W_ho: Tensor
    b_ii: Tensor
    b_if: Tensor
    b_ig: Tensor
    b_io: Tensor
    b_hi: Tensor
    b_hf: Tensor
    b_hg: Tensor
    b_ho: Tensor

    @classmethod
    def init(cls, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> "LstmLayerParams":
        p = {f"W_i{g}": uniform_init(rng, in_dim, (in_dim, hidden), dtype) for g in _GATES}
        p.update({f"W_h{g}": uniform_init(rng, hidden, (hidden, hidden), dtype) for g in _GATES})
        p.update({f"b_{s}{g}": zeros_param((hidden,), dtype) for s in "ih" for g in _GATES})
        return cls(**p)

    @property
    def input_dim(self) -> int:
        return self.W_ii.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.W_ii.shape[1]


def _gate(layer: LstmLayerParams, g: str, xg: Tensor, h: Tensor) -> Tensor:
    return xg + ft.add_bias(h @ getattr(layer, f"W_h{g}"), getattr(layer, f"b_h{g}"))


def _lstm_update(layer, xproj, h, c):
    i = ft.sigmoid(_gate(layer, "i", xproj["i"], h))
    f = ft.sigmoid(_gate(layer, "f", xproj["f"], h))
    g = ft.tanh(_gate(layer, "g", xproj["g"], h))
    o = ft.sigmoid(_gate(layer, "o", xproj["o"], h))
    c = f * c + i * g
    return o * ft.tanh(c), c


def lstm_cell_step(layer: LstmLayerParams, x_t: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM update; ``state`` is ``(h, c)``."""
    h, c = state
    _check_vec("lstm_cell_step x_t", x_t, layer.input_dim)
    _check_vec("lstm_cell_step h", h, layer.hidden_size)
    _check_vec("lstm_cell_step c", c, layer.hidden_size)
    xproj = {g: ft.add_bias(x_t @ getattr(layer, f"W_i{g}"), getattr(layer, f"b_i{g}")) for g in _GATES}
    return _lstm_update(layer, xproj, h, c)


def lstm_layer_sequence(layer: LstmLayerParams, X: Tensor) -> list[Tensor]:
    if X.ndim != 2 or X.shape[1] != layer.input_dim:
        raise DimensionError(f"LSTM layer expects (T, {layer.input_dim}) input, got {X.shape}")
    proj = {g: ft.add_bias(X @ getattr(layer, f"W_i{g}"), getattr(layer, f"b_i{g}")) for g in _GATES}
    h = Tensor(np.zeros(layer.hidden_size, dtype=X.dtype))
    c = Tensor(np.zeros(layer.hidden_size, dtype=X.dtype))
    out = []
    for t in range(X.shape[0]):
        h, c = _lstm_update(layer, {g: proj[g][t] for g in _GATES}, h, c)
        out.append(h)
    return out


class EncDecLSTM(SequencePredictor):
    """Stacked LSTM whose last hidden state is reconstructed to a frame."""

    def __init__(self, config: ModelConfig, layers: list[LstmLayerParams], recon_W: Tensor, recon_b: Tensor):
        if len(layers) != config.num_layers:
            raise ContractError(f"expected {config.num_layers} LSTM layers, got {len(layers)}")
        if recon_W.shape != (config.hidden_size, config.input_dim):
            raise DimensionError(f"reconstruction weights {recon_W.shape} do not match config")
        self.config = config
        self.layers = layers
        self.recon_W = recon_W
        self.recon_b = recon_b

    @classmethod
    def init(cls, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> "EncDecLSTM":
        config = config or lstm_config()
        if config.arch is not Arch.ENCDEC_LSTM:
            raise ContractError(f"EncDecLSTM cannot be built from arch {config.arch.value}")
        rng = np.random.default_rng(seed)
        layers = [LstmLayerParams.init(config.input_dim if i == 0 else config.hidden_size,
                                       config.hidden_size, rng, dtype) for i in range(config.num_layers)]
        recon_W = uniform_init(rng, config.hidden_size, (config.hidden_size, config.input_dim), dtype)
        return cls(config, layers, recon_W, zeros_param((config.input_dim,), dtype))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                out[f"lstm.{i}.{f.name}"] = getattr(layer, f.name)
        out["recon.W"] = self.recon_W
        out["recon.b"] = self.recon_b
        return out

    def predict_at(self, X: Tensor, steps: Sequence[int], attend: Sequence[bool],
                   input_averaging: float | None = None) -> list[Tensor]:
        # no attention: ``attend`` is accepted for interface parity and ignored
        if X.ndim != 2 or X.shape[1] != self.config.input_dim:
            raise DimensionError(f"expected (T, {self.config.input_dim}) frames, got {X.shape}")
        if input_averaging is not None:
            X = average_inputs(X, input_averaging)
        for layer in self.layers:
            outputs = lstm_layer_sequence(layer, X)
            X = ft.stack(outputs)
        frames = reconstruct(self, ft.stack([outputs[t] for t in steps]))
        return [frames[k] for k in range(len(steps))]


def encdec_lstm_predict(model: EncDecLSTM, window) -> Tensor:
    X = _window_matrix(model, window)
    return ft.clamp(model.predict_at(X, [X.shape[0] - 1], [False])[0])


def copy_last_frame(window) -> Tensor:
    """Return the final frame of the window unchanged."""
    if window is None or len(window) == 0:
        raise ContractError("copy_last_frame needs a non-empty window")
    X = as_sequence(window)
    return Tensor(X.data[-1].copy(), dtype=X.dtype)
