"""Samples, manifest ingestion, eye cropping, preprocessing, mirroring and folds.

Eye images are stored channel-first (``3 x h x w``).  Images decoded from PNG
stay ``uint8`` in memory and are scaled to [0, 1] by :func:`preprocess`; float
images are taken to be in [0, 1] already.  Keeping the 8-bit form is what lets
tens of thousands of samples sit in memory at once.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from gazecnn import tensor as T
from gazecnn.model import HEAD_POSE_SCALE

MANIFEST_COLUMNS = (
    "left_path", "right_path",
    "head_pitch", "head_yaw", "head_roll",
    "gaze_pitch", "gaze_yaw",
    "subject", "domain",
)
EYE_H, EYE_W = 35, 210
INPUT_H, INPUT_W = 2 * EYE_H, EYE_W
MIRROR_SUFFIX = "~m"


class ManifestError(ValueError):
    """A manifest row could not be read; the message names the row."""


@dataclass(frozen=True, eq=False)
class GazeSample:
    left_eye: np.ndarray
    right_eye: np.ndarray
    head_pose: tuple[float, float, float]
    gaze: tuple[float, float]
    subject_id: str
    domain: str = ""

    def __post_init__(self):
        for name in ("left_eye", "right_eye"):
            img = getattr(self, name)
            if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] < 2 or img.shape[2] < 2:
                raise ValueError(f"{name} must be a 3 x h x w image (h, w >= 2), got {img.shape}")
        angles = (*self.head_pose, *self.gaze)
        if len(self.head_pose) != 3 or len(self.gaze) != 2:
            raise ValueError("head_pose needs 3 angles and gaze 2")
        if not all(math.isfinite(a) for a in angles):
            raise ValueError(f"non-finite angle in head {self.head_pose} / gaze {self.gaze}")
        if max(abs(a) for a in self.gaze) > 90:
            raise ValueError(f"gaze {self.gaze} exceeds 90 degrees")

    @property
    def base_subject(self) -> str:
        return base_subject(self.subject_id)


def base_subject(subject_id: str) -> str:
    """Subject a (possibly mirrored) sample originates from."""
    return subject_id.removesuffix(MIRROR_SUFFIX)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(path, image: np.ndarray) -> None:
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(image.transpose(1, 2, 0)), "RGB").save(
        path, compress_level=1)


def _angle(row: dict, key: str, lineno: int) -> float:
    raw = row.get(key)
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ManifestError(f"row {lineno}: column {key} is not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise ManifestError(f"row {lineno}: column {key} is not finite: {raw!r}")
    return value


def load_manifest(path) -> list[GazeSample]:
    """Read a manifest CSV and decode every referenced eye image.

    Row numbers in error messages are file line numbers (the header is line 1).
    """
    path = Path(path)
    root = path.parent
    samples = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: header lacks columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(row.get(c) is None for c in MANIFEST_COLUMNS):
                raise ManifestError(f"row {lineno}: wrong number of fields")
            head = tuple(_angle(row, k, lineno) for k in ("head_pitch", "head_yaw", "head_roll"))
            gaze = tuple(_angle(row, k, lineno) for k in ("gaze_pitch", "gaze_yaw"))
            key = (row["subject"], row["left_path"])
            if key in seen:
                raise ManifestError(f"row {lineno}: duplicate subject/left_path pair {key}")
            seen.add(key)
            eyes = []
            for col in ("left_path", "right_path"):
                img_path = root / row[col]
                if not img_path.is_file():
                    raise ManifestError(f"row {lineno}: missing image file {img_path}")
                try:
                    eyes.append(read_png(img_path))
                except OSError as exc:
                    raise ManifestError(f"row {lineno}: cannot decode {img_path}: {exc}") from exc
            try:
                samples.append(GazeSample(eyes[0], eyes[1], head, gaze, row["subject"], row["domain"]))
            except ValueError as exc:
                raise ManifestError(f"row {lineno}: {exc}") from exc
    return samples


def write_manifest(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                             for k, v in row.items()})


def crop_eyes(image: np.ndarray, left_center, right_center):
    """Cut one rectangle per eye out of a ``3 x H x W`` frame.

    Each crop is 0.6 x the interocular distance wide and a third of that tall,
    centred on the eye and shifted back inside the frame when it would cross
    an edge.  Centres are ``(x, y)`` pixel coordinates.
    """
    _, h, w = image.shape
    (lx, ly), (rx, ry) = left_center, right_center
    for x, y in (left_center, right_center):
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"eye centre ({x}, {y}) outside {w}x{h} image")
    dist = math.hypot(rx - lx, ry - ly)
    if dist < 4:
        raise ValueError(f"interocular distance {dist:.2f} px is too small to crop")
    cw = min(int(round(0.6 * dist)), w)
    ch = min(max(int(round(cw / 3)), 1), h)

    def cut(cx, cy):
        x0 = int(round(cx - cw / 2))
        y0 = int(round(cy - ch / 2))
        x0 = min(max(x0, 0), w - cw)
        y0 = min(max(y0, 0), h - ch)
        return image[:, y0:y0 + ch, x0:x0 + cw].copy()

    return cut(lx, ly), cut(rx, ry)


def _as_unit(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) * np.float32(1 / 255)
    return images.astype(np.float32, copy=False)


def _resize_eyes(eyes: list[np.ndarray]) -> np.ndarray:
    """Resize a list of eye images to ``EYE_H x EYE_W``; same-sized ones go together."""
    out = np.empty((len(eyes), 3, EYE_H, EYE_W), dtype=np.float32)
    groups: dict[tuple, list[int]] = {}
    for i, e in enumerate(eyes):
        groups.setdefault(e.shape, []).append(i)
    for idx in groups.values():
        stack = _as_unit(np.stack([eyes[i] for i in idx]))
        out[idx] = T.bilinear_resize(stack, EYE_H, EYE_W)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def preprocess_batch(samples: Sequence[GazeSample]) -> tuple[np.ndarray, np.ndarray]:
    """Network inputs for a list of samples: ``N x 3 x 70 x 210`` eyes and ``N x 3`` poses."""
    n = len(samples)
    eyes = np.empty((n, 3, INPUT_H, INPUT_W), dtype=np.float32)
    if n:
        eyes[:, :, :EYE_H] = _resize_eyes([s.left_eye for s in samples])
        eyes[:, :, EYE_H:] = _resize_eyes([s.right_eye for s in samples])
    pose = np.array([s.head_pose for s in samples], dtype=np.float32).reshape(n, 3)
    pose /= np.float32(HEAD_POSE_SCALE)
    return eyes, pose


def preprocess(sample: GazeSample) -> tuple[np.ndarray, np.ndarray]:
    """Left eye stacked above right eye, each resized to 35x210; head pose / 90."""
    eyes, pose = preprocess_batch([sample])
    return eyes[0], pose[0]


def targets(samples: Sequence[GazeSample]) -> np.ndarray:
    return np.array([s.gaze for s in samples], dtype=np.float64).reshape(len(samples), 2)


def mirror_augment(sample: GazeSample) -> GazeSample:
    """Horizontally mirrored twin of a sample.

    Images flip left-right and the eyes swap sides; gaze yaw, head yaw and
    head roll change sign.  Mirroring twice gives the original back.
    """
    hp, hy, hr = sample.head_pose
    gp, gy = sample.gaze
    sid = sample.subject_id
    sid = base_subject(sid) if sid.endswith(MIRROR_SUFFIX) else sid + MIRROR_SUFFIX
    return GazeSample(
        left_eye=sample.right_eye[:, :, ::-1],
        right_eye=sample.left_eye[:, :, ::-1],
        head_pose=(hp, -hy, -hr),
        gaze=(gp, -gy),
        subject_id=sid,
        domain=sample.domain,
    )


def with_mirrors(samples: Sequence[GazeSample]) -> list[GazeSample]:
    return list(samples) + [mirror_augment(s) for s in samples]


@dataclass
class FoldSplit:
    folds: list[list[int]]
    subject_fold: dict[str, int]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_test(self, fold: int) -> tuple[list[int], list[int]]:
        train = sorted(i for f, idx in enumerate(self.folds) if f != fold for i in idx)
        return train, list(self.folds[fold])


def subjects_of(samples: Sequence[GazeSample]) -> list[str]:
    """Distinct source subjects, in first-appearance order."""
    return list(dict.fromkeys(s.base_subject for s in samples))


def split_folds(samples: Sequence[GazeSample], k: int = 4, seed: int = 0) -> FoldSplit:
    """Subject-disjoint folds: shuffled subjects dealt round-robin into ``k`` folds."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    subjects = sorted(subjects_of(samples))
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = T.make_rng(seed).permutation(len(subjects))
    subject_fold = {subjects[j]: pos % k for pos, j in enumerate(order)}
    folds: list[list[int]] = [[] for _ in range(k)]
    for i, s in enumerate(samples):
        folds[subject_fold[s.base_subject]].append(i)
    return FoldSplit(folds, subject_fold)
