"""Binary checkpoint container.

Layout (all little-endian)::

    b"FRSE"  u16 version
    config:  u8 arch, u32 input_dim, u32 hidden_size, u32 num_layers, u32 seq_len,
             u8 attn_placement, u8 attn_steps, u8 literal_attn_exp
    tensors: repeated (u16 name_len, name utf-8, u8 rank, u32 dims[rank], f32 payload)
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from .baselines import EncDecLSTM
from .errors import FormatError, PathError
from .model import Arch, AttnPlacement, AttnSteps, ForeseeModel, ModelConfig, SequencePredictor

MAGIC = b"FRSE"
VERSION = 1
_CONFIG = struct.Struct("<BIIIIBBB")
_ARCH = [Arch.FORESEE, Arch.ENCDEC_LSTM]
_PLACEMENT = [AttnPlacement.OUTPUT, AttnPlacement.HIDDEN]
_STEPS = [AttnSteps.LAST, AttnSteps.ALL]
OPTIM_PREFIX = "optim."


def encode_config(cfg: ModelConfig) -> bytes:
    return _CONFIG.pack(_ARCH.index(cfg.arch), cfg.input_dim, cfg.hidden_size, cfg.num_layers, cfg.seq_len,
                        _PLACEMENT.index(cfg.attn_placement), _STEPS.index(cfg.attn_steps),
                        int(cfg.literal_attn_exp))


def decode_config(raw: bytes) -> ModelConfig:
    arch, d, h, layers, seq, place, steps, literal = _CONFIG.unpack(raw)
    try:
        return ModelConfig(input_dim=d, hidden_size=h, num_layers=layers, seq_len=seq,
                           attn_placement=_PLACEMENT[place], attn_steps=_STEPS[steps],
                           literal_attn_exp=bool(literal), arch=_ARCH[arch])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"invalid config block: {exc}") from None


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def to_bytes(model: SequencePredictor, extra: dict[str, np.ndarray] | None = None) -> bytes:
    body = MAGIC + struct.pack("<H", VERSION) + encode_config(model.config)
    tensors = dict(model.state_arrays())
    tensors.update(extra or {})
    body += encode_tensors(tensors)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    header = len(MAGIC) + 2 + _CONFIG.size
    if len(blob) < header + 4:
        raise FormatError("checkpoint is truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC32 mismatch (file is corrupted)")
    if body[:4] != MAGIC:
        raise FormatError(f"bad magic {body[:4]!r}")
    (version,) = struct.unpack("<H", body[4:6])
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg = decode_config(body[6:header])
    tensors, pos = {}, header
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed tensor record at byte {pos}: {exc}") from None
    return cfg, tensors


def build_model(cfg: ModelConfig) -> SequencePredictor:
    if cfg.arch is Arch.ENCDEC_LSTM:
        return EncDecLSTM.init(cfg)
    return ForeseeModel.init(cfg)


def save_checkpoint(model: SequencePredictor, path, optimizer_state=None) -> Path:
    path = Path(path)
    extra = optimizer_state.to_arrays(OPTIM_PREFIX) if optimizer_state is not None else None
    blob = to_bytes(model, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path, with_optimizer: bool = False):
    """Load a model (and optionally its optimizer state) from ``path``."""
    path = Path(path)
    if not path.is_file():
        raise PathError(f"checkpoint {path} not found")
    cfg, tensors = from_bytes(path.read_bytes())
    params = {k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)}
    model = build_model(cfg)
    try:
        model.load_arrays(params)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not with_optimizer:
        return model
    from .training import OptimizerState

    optim = {k: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
    state = OptimizerState.from_arrays(optim, OPTIM_PREFIX) if optim else None
    return model, state


def content_hash(path) -> str:
    """Git blob hash (sha1 of ``b"blob <len>\\0" + content``)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
