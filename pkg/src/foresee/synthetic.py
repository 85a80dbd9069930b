"""Synthetic "chaotic motion" videos: coloured sprites that wander randomly
inside a bounded canvas, bouncing off the walls.

Sprites are rendered with fractional pixel coverage, so any sub-pixel motion
changes the frame. By default every video of a scene shares one backdrop, as
with a fixed camera; ``shared_background=False`` draws one per video.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import TABLE_I_RATIOS, FrameSequence
from .errors import ContractError

BACKGROUNDS = ("solid", "gradient", "textured")
SHAPES = ("rect", "disc")


@dataclass(frozen=True)
class SyntheticSceneConfig:
    num_videos: int = 20
    frames_per_video: int = 200
    height: int = 32
    width: int = 32
    channels: int = 3
    num_sprites: int = 3
    sprite_size_min: int = 4
    sprite_size_max: int = 8
    speed_min: float = 2.0
    speed_max: float = 4.0
    direction_change_probability: float = 0.1
    background: str = "solid"
    shared_background: bool = True
    shapes: tuple = SHAPES
    fps: float = 10.0
    seed: int = 0
    split_ratios: tuple = TABLE_I_RATIOS
    require_motion: bool = True

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "split_ratios", tuple(self.split_ratios))
        if self.channels != 3:
            raise ContractError("only RGB (channels=3) scenes are supported")
        if min(self.num_videos, self.frames_per_video, self.height, self.width) < 1:
            raise ContractError("num_videos, frames_per_video, height and width must be >= 1")
        if self.num_sprites < 0:
            raise ContractError("num_sprites must be >= 0")
        if self.num_sprites == 0 and self.require_motion:
            raise ContractError("num_sprites=0 cannot produce moving content (set require_motion=false)")
        if not 1 <= self.sprite_size_min <= self.sprite_size_max <= min(self.height, self.width):
            raise ContractError(f"invalid sprite size range [{self.sprite_size_min}, {self.sprite_size_max}]")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ContractError(f"invalid speed range [{self.speed_min}, {self.speed_max}]")
        if not 0.0 <= self.direction_change_probability <= 1.0:
            raise ContractError("direction_change_probability must lie in [0, 1]")
        if self.background not in BACKGROUNDS:
            raise ContractError(f"background must be one of {BACKGROUNDS}, got {self.background!r}")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ContractError(f"shapes must be a non-empty subset of {SHAPES}")

    @property
    def image_shape(self) -> tuple:
        return (self.height, self.width, self.channels)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _background(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.height, cfg.width
    if cfg.background == "solid":
        return np.broadcast_to(rng.uniform(0.1, 0.9, 3), (H, W, 3)).copy()
    if cfg.background == "gradient":
        a, b = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:H, 0:W]
        t = (np.cos(angle) * xx / max(W - 1, 1) + np.sin(angle) * yy / max(H - 1, 1))
        t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
        return a * (1 - t[..., None]) + b * t[..., None]
    base = rng.uniform(0.2, 0.8, 3)
    noise = rng.normal(0, 0.08, (H // 4 + 1, W // 4 + 1, 3))
    noise = np.repeat(np.repeat(noise, 4, 0), 4, 1)[:H, :W]
    return np.clip(base + noise, 0.0, 1.0)


def _sprite_color(rng: np.random.Generator, bg_mean: np.ndarray) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, 3)
        if np.abs(c - bg_mean).max() > 0.3:
            return c
    return 1.0 - bg_mean


def _coverage(cfg, shape, x, y, size):
    """Fractional pixel coverage of a sprite whose top-left corner is (x, y)."""
    H, W = cfg.height, cfg.width
    if shape == "rect":
        cols = np.arange(W)
        rows = np.arange(H)
        cx = np.clip(np.minimum(cols + 1, x + size) - np.maximum(cols, x), 0, 1)
        cy = np.clip(np.minimum(rows + 1, y + size) - np.maximum(rows, y), 0, 1)
        return cy[:, None] * cx[None, :]
    r = size / 2.0
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    dist = np.hypot(xx - (x + r), yy - (y + r))
    return np.clip(r - dist + 0.5, 0.0, 1.0)


def video_rng(cfg: SyntheticSceneConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))


def generate_synthetic_video(cfg: SyntheticSceneConfig, index: int = 0,
                             return_tracks: bool = False):
    """Render video ``index`` of the scene described by ``cfg``.

    With ``return_tracks`` also returns the ``(frames, sprites, 2)`` array of
    sprite top-left positions.
    """
    rng = video_rng(cfg, index)
    if cfg.shared_background:
        bg = _background(cfg, np.random.default_rng(np.random.SeedSequence([cfg.seed])))
    else:
        bg = _background(cfg, rng)
    bg_mean = bg.reshape(-1, 3).mean(axis=0)
    sprites = []
    for _ in range(cfg.num_sprites):
        size = int(rng.integers(cfg.sprite_size_min, cfg.sprite_size_max + 1))
        sprites.append({
            "shape": cfg.shapes[int(rng.integers(len(cfg.shapes)))],
            "size": size,
            "color": _sprite_color(rng, bg_mean),
            "pos": np.array([rng.uniform(0, cfg.width - size), rng.uniform(0, cfg.height - size)]),
            "speed": rng.uniform(cfg.speed_min, cfg.speed_max),
            "angle": rng.uniform(0, 2 * np.pi),
        })
    frames = np.empty((cfg.frames_per_video, cfg.height * cfg.width * 3), dtype=np.float32)
    tracks = np.zeros((cfg.frames_per_video, len(sprites), 2))
    for f in range(cfg.frames_per_video):
        img = bg.copy()
        for k, s in enumerate(sprites):
            tracks[f, k] = s["pos"]
            a = _coverage(cfg, s["shape"], s["pos"][0], s["pos"][1], s["size"])[..., None]
            img = img * (1 - a) + s["color"] * a
        frames[f] = np.clip(img, 0.0, 1.0).reshape(-1)
        for s in sprites:
            _advance(cfg, s, rng)
    seq = FrameSequence(frames, fps=cfg.fps, source_id=f"video_{index:03d}", image_shape=cfg.image_shape)
    return (seq, tracks) if return_tracks else seq


def _advance(cfg: SyntheticSceneConfig, s: dict, rng: np.random.Generator) -> None:
    # the draw happens for every sprite every frame so streams stay aligned
    turn = rng.uniform() < cfg.direction_change_probability
    new_angle = rng.uniform(0, 2 * np.pi)
    if turn:
        s["angle"] = new_angle
    v = s["speed"] * np.array([np.cos(s["angle"]), np.sin(s["angle"])])
    pos = s["pos"] + v
    limits = np.array([cfg.width - s["size"], cfg.height - s["size"]], dtype=float)
    for axis in range(2):
        lim = limits[axis]
        if lim <= 0:
            pos[axis] = 0.0
            continue
        # reflect until inside [0, lim]; flip the velocity component per bounce
        while pos[axis] < 0 or pos[axis] > lim:
            if pos[axis] < 0:
                pos[axis] = -pos[axis]
            else:
                pos[axis] = 2 * lim - pos[axis]
            v[axis] = -v[axis]
    s["pos"] = pos
    s["angle"] = float(np.arctan2(v[1], v[0]))


def generate_synthetic_dataset(cfg: SyntheticSceneConfig) -> list[FrameSequence]:
    return [generate_synthetic_video(cfg, i) for i in range(cfg.num_videos)]
