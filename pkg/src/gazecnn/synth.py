"""Procedural eye-pair renderer and head-pose x gaze sweep generator.

Each eye is drawn in 2D: skin background, a white sclera ellipse, an iris
disk with a dark pupil, and upper/lower lids.  The iris centre sits at
``(0.25 * w * sin(yaw), -0.25 * h * sin(pitch))`` from the eyeball centre, so
its position is a strictly monotone function of each gaze angle.  Head yaw and
pitch shift the visible eyeball region, head roll shears it, and head pitch
also moves the lids.  Every edge is anti-aliased, which keeps sub-pixel iris
motion visible in the pixels.  Lighting (a global gain and a warm/cold tint)
is applied last.

The construction is mirror-symmetric: rendering with negated gaze yaw, head
yaw and head roll gives the left-right flipped image.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from gazecnn import tensor as T
from gazecnn.data import GazeSample, write_manifest, write_png

DEFAULT_EYE_SIZE = (32, 96)
MAX_ANGLE = 60.0

SCLERA = np.array([0.93, 0.92, 0.90])
PUPIL = np.array([0.04, 0.03, 0.03])

PRESETS = {
    "bright": {"gain": 1.0, "temperature": 0.0},
    "dim": {"gain": 0.45, "temperature": 0.15},
}


@dataclass(frozen=True)
class CharacterParams:
    name: str
    skin: tuple[float, float, float] = (0.80, 0.62, 0.52)
    iris: tuple[float, float, float] = (0.30, 0.20, 0.10)
    aperture: float = 0.8
    iris_radius: float = 0.7
    spacing: float = 0.6
    gain: float = 1.0
    temperature: float = 0.0

    def __post_init__(self):
        for frac in ("aperture", "iris_radius", "spacing"):
            v = getattr(self, frac)
            if not 0 < v <= 1:
                raise ValueError(f"{frac} must lie in (0, 1], got {v}")
        for col in ("skin", "iris"):
            if not all(0 <= c <= 1 for c in getattr(self, col)):
                raise ValueError(f"{col} colour must lie in [0, 1]^3")
        if self.gain <= 0:
            raise ValueError(f"gain must be positive, got {self.gain}")


def make_characters(n: int, seed: int = 0, preset: str = "bright") -> list[CharacterParams]:
    """``n`` random characters lit according to a named preset."""
    if preset not in PRESETS:
        raise ValueError(f"unknown lighting preset {preset!r}; choose from {sorted(PRESETS)}")
    light = PRESETS[preset]
    rng = T.make_rng([seed, sum(map(ord, preset))])
    chars = []
    for i in range(n):
        tone = rng.uniform(0.35, 0.9)
        skin = (tone, tone * rng.uniform(0.68, 0.80), tone * rng.uniform(0.55, 0.68))
        iris = tuple(float(c) for c in rng.uniform(0.05, 0.45, size=3))
        chars.append(CharacterParams(
            name=f"{preset}{i:03d}",
            skin=tuple(float(c) for c in skin),
            iris=iris,
            aperture=float(rng.uniform(0.8, 1.0)),
            iris_radius=float(rng.uniform(0.55, 0.7)),
            spacing=float(rng.uniform(0.3, 1.0)),
            gain=float(light["gain"] * rng.uniform(0.9, 1.1)),
            temperature=float(light["temperature"] + rng.uniform(-0.03, 0.03)),
        ))
    return chars


def _arange(lo, hi, step):
    n = int(round((hi - lo) / step)) + 1
    return tuple(float(lo + i * step) for i in range(n))


@dataclass(frozen=True)
class SweepGrid:
    """Gaze angles swept at every head pose (defaults: 9 x 17 gaze x 25 heads)."""

    gaze_pitch: tuple[float, ...] = _arange(-20, 20, 5)
    gaze_yaw: tuple[float, ...] = _arange(-40, 40, 5)
    head: tuple[tuple[float, float, float], ...] = field(default_factory=lambda: tuple(
        (p, y, 0.0) for p in _arange(-20, 20, 10) for y in _arange(-20, 20, 10)))

    @classmethod
    def coarse(cls, gaze_step: float = 10.0, head_step: float = 20.0) -> "SweepGrid":
        return cls(_arange(-20, 20, gaze_step), _arange(-40, 40, gaze_step),
                   tuple((p, y, 0.0) for p in _arange(-20, 20, head_step)
                         for y in _arange(-20, 20, head_step)))

    @property
    def n_gaze(self) -> int:
        return len(self.gaze_pitch) * len(self.gaze_yaw)

    def __len__(self) -> int:
        return self.n_gaze * len(self.head)

    def points(self) -> Iterator[tuple[tuple[float, float, float], tuple[float, float]]]:
        for head in self.head:
            for gp in self.gaze_pitch:
                for gy in self.gaze_yaw:
                    yield head, (gp, gy)


def iris_offset(gaze, size=DEFAULT_EYE_SIZE) -> tuple[float, float]:
    """Iris centre relative to the eyeball centre, in pixels (x right, y down)."""
    h, w = size
    pitch, yaw = (math.radians(a) for a in gaze)
    return 0.25 * w * math.sin(yaw), -0.25 * h * math.sin(pitch)


def _coverage(signed_dist):
    return np.clip(signed_dist + 0.5, 0.0, 1.0)[..., None]


def render_eye(char: CharacterParams, head, gaze, size=DEFAULT_EYE_SIZE) -> np.ndarray:
    """One eye as a float ``3 x h x w`` image in [0, 1]."""
    for a in (*head, *gaze):
        if not abs(a) <= MAX_ANGLE:
            raise ValueError(f"angle {a} outside +-{MAX_ANGLE} degrees")
    h, w = size
    hp, hy, hr = (math.radians(a) for a in head)
    # pixel centres, symmetric about the image centre
    x = np.arange(w) + 0.5 - w / 2
    y = np.arange(h) + 0.5 - h / 2
    X, Y = np.meshgrid(x, y)

    oy = -0.15 * h * math.sin(hp)
    v = Y - oy
    u = X - 0.15 * w * math.sin(hy) - 0.5 * math.sin(hr) * v

    a = 0.40 * w * (0.85 + 0.15 * char.spacing)
    b = 0.40 * h
    sclera = _coverage((1 - np.sqrt((u / a) ** 2 + (v / b) ** 2)) * b)

    ix, iy = iris_offset(gaze, size)
    r_iris = char.iris_radius * b
    d_iris = np.sqrt((u - ix) ** 2 + (v - iy) ** 2)
    iris = _coverage(r_iris - d_iris) * sclera
    pupil = _coverage(0.45 * r_iris - d_iris) * sclera

    top = -b * (0.35 + 0.65 * char.aperture) - 0.12 * h * math.sin(hp)
    bottom = b * (0.75 + 0.25 * char.aperture)
    arch = 1 - 0.35 * np.clip(u / a, -1, 1) ** 2
    lids = np.maximum(_coverage(top * arch - v), _coverage(v - bottom * arch))

    skin = np.asarray(char.skin)
    img = skin + sclera * (SCLERA - skin)
    img = img + iris * (np.asarray(char.iris) - img)
    img = img + pupil * (PUPIL - img)
    img = img + lids * (0.85 * skin - img)

    tint = np.array([1 + char.temperature, 1.0, 1 - char.temperature])
    img = np.clip(img * (char.gain * tint), 0.0, 1.0)
    return img.transpose(2, 0, 1)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255).astype(np.uint8)


def render_eye_pair(char: CharacterParams, head, gaze, size=DEFAULT_EYE_SIZE):
    """Left and right eye images (``uint8``, ``3 x h x w``).

    Both eyes share one construction, so the pair is its own mirror image
    once the eyes are swapped.
    """
    eye = _quantize(render_eye(char, head, gaze, size))
    return eye, eye.copy()


def _fmt_angle(a: float) -> str:
    return f"{int(round(a * 10)):+d}"


def image_names(char: CharacterParams, head, gaze) -> tuple[str, str]:
    stem = "_".join([char.name, _fmt_angle(head[0]), _fmt_angle(head[1]),
                     _fmt_angle(gaze[0]), _fmt_angle(gaze[1])])
    return f"{stem}_L.png", f"{stem}_R.png"


def jitter_character(char: CharacterParams, rng: np.random.Generator,
                     scale: float = 1.0) -> CharacterParams:
    """Small per-frame variation of a character (lid openness, iris size, colours, light).

    Gaze and head pose are untouched, so labels stay exact; the variation
    keeps a network from keying on the handful of exact characters it trains on.
    """
    if scale == 0:
        return char

    def frac(v, d):
        return float(np.clip(v + scale * rng.uniform(-d, d), 0.05, 1.0))

    def colour(c, d):
        return tuple(float(np.clip(x + scale * rng.uniform(-d, d), 0.0, 1.0)) for x in c)

    return CharacterParams(
        name=char.name,
        skin=colour(char.skin, 0.05),
        iris=colour(char.iris, 0.05),
        aperture=frac(char.aperture, 0.08),
        iris_radius=frac(char.iris_radius, 0.05),
        spacing=frac(char.spacing, 0.2),
        gain=char.gain * (1 + scale * rng.uniform(-0.05, 0.05)),
        temperature=char.temperature + scale * rng.uniform(-0.02, 0.02),
    )


def _sweep(characters: Sequence[CharacterParams], grid: SweepGrid, seed: int, size,
           noise: float, jitter: float):
    for ci, char in enumerate(characters):
        rng = T.make_rng([seed, ci])
        for head, gaze in grid.points():
            eye = render_eye(jitter_character(char, rng, jitter), head, gaze, size)
            left = _quantize(np.clip(eye + rng.normal(0, noise, eye.shape), 0, 1))
            right = _quantize(np.clip(eye + rng.normal(0, noise, eye.shape), 0, 1))
            yield char, head, gaze, left, right


def render_samples(characters: Sequence[CharacterParams], grid: SweepGrid = SweepGrid(),
                   seed: int = 0, size=DEFAULT_EYE_SIZE, noise: float = 1.5 / 255,
                   domain: str | None = None, jitter: float = 1.0) -> list[GazeSample]:
    """The samples :func:`generate_dataset` would write, built in memory.

    The images are bit-identical to what loading the written manifest gives.
    """
    out = []
    for char, head, gaze, left, right in _sweep(characters, grid, seed, size, noise, jitter):
        out.append(GazeSample(left, right, tuple(head), tuple(gaze), char.name,
                              domain if domain is not None else _domain(char)))
    return out


def _domain(char: CharacterParams) -> str:
    return char.name.rstrip("0123456789") or "synthetic"


def generate_dataset(characters: Sequence[CharacterParams], grid: SweepGrid, out_dir,
                     seed: int = 0, size=DEFAULT_EYE_SIZE, noise: float = 1.5 / 255,
                     domain: str | None = None, jitter: float = 1.0) -> list[dict]:
    """Write one PNG pair per (character, head pose, gaze) plus ``manifest.csv``.

    Every frame is rendered from a slightly jittered copy of its character
    (see :func:`jitter_character`; ``jitter=0`` disables it) and gets
    independent pixel noise of standard deviation ``noise`` per eye.

    Returns the manifest rows.  An empty character list writes an empty
    manifest and no images.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise PermissionError(f"directory is not writable: {out_dir}")
        rows = []
        for char, head, gaze, left, right in _sweep(characters, grid, seed, size, noise, jitter):
            lname, rname = image_names(char, head, gaze)
            write_png(out_dir / lname, left)
            write_png(out_dir / rname, right)
            rows.append({
                "left_path": lname, "right_path": rname,
                "head_pitch": head[0], "head_yaw": head[1], "head_roll": head[2],
                "gaze_pitch": gaze[0], "gaze_yaw": gaze[1],
                "subject": char.name,
                "domain": domain if domain is not None else _domain(char),
            })
        write_manifest(out_dir / "manifest.csv", rows)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc}") from exc
    return rows
