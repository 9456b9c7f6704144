"""Seeded moving-shape sequences over textured noise.

Each sequence holds one or two moving shapes (the foreground) and a few
static distractor shapes drawn underneath them. Shapes are rasterised at
pixel centres, so a shape with centre ``(cx, cy)`` covers pixel ``(i, j)``
when the point ``(x=j, y=i)`` lies strictly inside it.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from imcnet.config import from_kv, parse_kv, serialize
from imcnet.errors import ConfigError
from imcnet.tensor import ops

SHAPES = ("square", "disk")
MOTIONS = ("constant", "sinusoidal")


@dataclass
class SynthConfig:
    seed: int = 0
    count: int = 8
    size: Tuple[int, ...] = (64, 64)
    frames: int = 9
    shapes: Tuple[str, ...] = SHAPES
    motions: Tuple[str, ...] = MOTIONS
    speed_min: float = 1.0
    speed_max: float = 2.5
    radius_min: float = 6.0
    radius_max: float = 10.0
    objects_max: int = 2
    distractors: int = 1

    def __post_init__(self):
        if len(self.size) != 2 or any(s <= 0 or s % 32 for s in self.size):
            raise ConfigError(f"synthetic size must be two multiples of 32, got {self.size}")
        bad = set(self.shapes) - set(SHAPES) or set(self.motions) - set(MOTIONS)
        if bad or not self.shapes or not self.motions:
            raise ConfigError(f"unknown or empty shape/motion kinds: {sorted(bad) or 'empty'}")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ConfigError(f"need 0 <= speed_min <= speed_max, got {self.speed_min}, {self.speed_max}")
        if not 0 < self.radius_min <= self.radius_max or 2 * self.radius_max + 4 > min(self.size):
            raise ConfigError(f"radius range {self.radius_min}..{self.radius_max} does not fit {self.size}")
        if self.count < 1 or self.frames < 1 or self.objects_max < 1 or self.distractors < 0:
            raise ConfigError("count, frames and objects_max must be >= 1 and distractors >= 0")

    @classmethod
    def parse(cls, text, source="<synth config>"):
        return from_kv(cls, parse_kv(text, source))

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read synthetic config {path}: {exc.strerror}") from None
        return cls.parse(text, str(path))

    def dumps(self):
        return serialize(self)


@dataclass
class Shape:
    kind: str
    radius: float                    # half side for squares
    color: np.ndarray                # (3,) in [0, 1]
    centre: Tuple[float, float]      # (x, y) at frame 0, or the oscillation midpoint
    motion: str = "static"
    velocity: Tuple[float, float] = (0.0, 0.0)
    amplitude: Tuple[float, float] = (0.0, 0.0)
    period: float = 1.0
    phase: float = 0.0

    def position(self, t):
        cx, cy = self.centre
        if self.motion == "constant":
            return cx + self.velocity[0] * t, cy + self.velocity[1] * t
        if self.motion == "sinusoidal":
            s = math.sin(2 * math.pi * t / self.period + self.phase)
            return cx + self.amplitude[0] * s, cy + self.amplitude[1] * s
        return cx, cy

    def area(self):
        return (2 * self.radius) ** 2 if self.kind == "square" else math.pi * self.radius ** 2

    def perimeter(self):
        return 8 * self.radius if self.kind == "square" else 2 * math.pi * self.radius

    def raster(self, t, size):
        h, w = size
        cx, cy = self.position(t)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        if self.kind == "square":
            return (np.abs(xs - cx) < self.radius) & (np.abs(ys - cy) < self.radius)
        return (xs - cx) ** 2 + (ys - cy) ** 2 < self.radius ** 2


@dataclass
class SyntheticSequence:
    name: str
    frames: np.ndarray                              # (F, H, W, 3) uint8
    masks: np.ndarray                               # (F, H, W) uint8 in {0, 1}
    objects: List[Shape] = field(default_factory=list)
    distractors: List[Shape] = field(default_factory=list)

    def __len__(self):
        return self.frames.shape[0]

    def frame(self, i):
        return self.frames[i]

    def mask(self, i):
        return self.masks[i]


def _smooth_noise(rng, size, cells=5):
    coarse = rng.uniform(size=(1, 3, cells, cells))
    return ops.upsample_bilinear(coarse, size=size)[0].transpose(1, 2, 0)


def _moving_shape(rng, cfg):
    h, w = cfg.size
    kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    motion = cfg.motions[int(rng.integers(len(cfg.motions)))]
    r = float(rng.uniform(cfg.radius_min, cfg.radius_max))
    speed = float(rng.uniform(cfg.speed_min, cfg.speed_max))
    angle = float(rng.uniform(0, 2 * math.pi))
    color = rng.uniform(0.05, 0.95, size=3)
    # centre range that keeps the whole shape inside the frame
    lo = np.array([r + 1.0, r + 1.0])
    hi = np.array([w - r - 2.0, h - r - 2.0])
    steps = max(cfg.frames - 1, 1)
    direction = np.array([math.cos(angle), math.sin(angle)])
    if motion == "constant":
        vel = speed * direction
        span = np.abs(vel) * steps
        room = hi - lo
        vel = vel * min([1.0] + [room[k] / span[k] for k in range(2) if span[k] > 0])
        disp = vel * steps
        c_lo = lo - np.minimum(0, disp)
        c_hi = hi - np.maximum(0, disp)
        c0 = rng.uniform(c_lo, c_hi)
        return Shape(kind, r, color, (float(c0[0]), float(c0[1])), motion,
                     velocity=(float(vel[0]), float(vel[1])))
    period = float(rng.uniform(6.0, 12.0))
    amp = speed * period / (2 * math.pi) * direction
    amp = np.clip(amp, -(hi - lo) / 2, (hi - lo) / 2)
    mid = rng.uniform(lo + np.abs(amp), hi - np.abs(amp))
    return Shape(kind, r, color, (float(mid[0]), float(mid[1])), motion,
                 amplitude=(float(amp[0]), float(amp[1])), period=period,
                 phase=float(rng.uniform(0, 2 * math.pi)))


def _static_shape(rng, cfg):
    h, w = cfg.size
    kind = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
    r = float(rng.uniform(cfg.radius_min, cfg.radius_max))
    c = (float(rng.uniform(r + 1, w - r - 2)), float(rng.uniform(r + 1, h - r - 2)))
    return Shape(kind, r, rng.uniform(0.05, 0.95, size=3), c)


def _paint(canvas, shape, t, texture):
    inside = shape.raster(t, canvas.shape[:2])
    canvas[inside] = np.clip(shape.color + texture[inside], 0, 1)
    return inside


def make_sequence(rng, cfg, name):
    size = tuple(cfg.size)
    background = 0.15 + 0.7 * _smooth_noise(rng, size) + rng.normal(0, 0.04, size + (3,))
    n_obj = int(rng.integers(1, cfg.objects_max + 1))
    objects = [_moving_shape(rng, cfg) for _ in range(n_obj)]
    distractors = [_static_shape(rng, cfg) for _ in range(cfg.distractors)]
    textures = [rng.normal(0, 0.05, size + (3,)) for _ in objects + distractors]
    frames = np.empty((cfg.frames,) + size + (3,), dtype=np.uint8)
    masks = np.zeros((cfg.frames,) + size, dtype=np.uint8)
    for t in range(cfg.frames):
        canvas = background.copy()
        for shape, tex in zip(distractors, textures[n_obj:]):
            _paint(canvas, shape, t, tex)
        for shape, tex in zip(objects, textures):
            masks[t] |= _paint(canvas, shape, t, tex)
        frames[t] = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
    return SyntheticSequence(name, frames, masks, objects, distractors)


def generate_synthetic(cfg=None, **overrides):
    """Generate ``cfg.count`` sequences; identical configs give identical data."""
    if cfg is None:
        cfg = SynthConfig(**overrides)
    elif overrides:
        raise TypeError("pass either a SynthConfig or keyword overrides, not both")
    rng = np.random.default_rng(cfg.seed)
    return [make_sequence(rng, cfg, f"synth{i:03d}") for i in range(cfg.count)]


def write_davis(sequences, root):
    """Write sequences in the DAVIS folder layout (PNG frames and 0/255 masks)."""
    from PIL import Image

    root = Path(root)
    for seq in sequences:
        img_dir = root / "JPEGImages" / seq.name
        ann_dir = root / "Annotations" / seq.name
        img_dir.mkdir(parents=True, exist_ok=True)
        ann_dir.mkdir(parents=True, exist_ok=True)
        for i in range(len(seq)):
            Image.fromarray(seq.frame(i)).save(img_dir / f"{i:05d}.png")
            Image.fromarray((seq.mask(i) * 255).astype(np.uint8)).save(ann_dir / f"{i:05d}.png")
    return root
