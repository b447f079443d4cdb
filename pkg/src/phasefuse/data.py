"""Manifests, image files and the synthetic three-class dataset."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

LABELS = ("normal", "pneumonia", "covid")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}
IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass
class ManifestEntry:
    path: Path
    label: int
    fold: int | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    @property
    def folds(self) -> np.ndarray | None:
        if any(e.fold is None for e in self.entries):
            return None
        return np.array([e.fold for e in self.entries], dtype=int)


def load_manifest(path, k: int | None = None) -> Manifest:
    """Parse a ``path,label[,fold]`` CSV; paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty manifest")
    header = [h.strip() for h in rows[0]]
    if header not in (["path", "label"], ["path", "label", "fold"]):
        raise DataError(f"{path}:1: header must be 'path,label[,fold]', got {','.join(header)!r}")
    has_fold = len(header) == 3
    seen: dict[str, int] = {}
    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rel, label = row[0].strip(), row[1].strip()
        if label not in LABEL_IDS:
            raise DataError(f"{path}:{lineno}: invalid label {label!r} (expected one of {', '.join(LABELS)})")
        if rel in seen:
            raise DataError(f"{path}: duplicate path {rel!r} on lines {seen[rel]} and {lineno}")
        seen[rel] = lineno
        fold = None
        if has_fold and row[2].strip():
            try:
                fold = int(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: fold {row[2]!r} is not an integer") from None
            if fold < 0 or (k is not None and fold >= k):
                raise DataError(f"{path}:{lineno}: fold {fold} out of range")
        entries.append(ManifestEntry(root / rel, LABEL_IDS[label], fold))
    return Manifest(entries, root)


def write_manifest(path, manifest: Manifest, folds=None) -> None:
    path = Path(path)
    folds = manifest.folds if folds is None else folds
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"] + (["fold"] if folds is not None else []))
        for i, e in enumerate(manifest.entries):
            rel = Path(os.path.relpath(e.path.resolve(), path.parent.resolve()))
            row = [rel.as_posix(), LABELS[e.label]]
            if folds is not None:
                row.append(int(folds[i]))
            w.writerow(row)


# ---------------------------------------------------------------- images


def read_image(path) -> np.ndarray:
    """Grayscale image scaled to [0, 1] by its maximum code value."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                top = 65535.0
            elif im.mode in ("L", "P", "RGB", "RGBA", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                top = 255.0
            else:
                raise DataError(f"{path}: unsupported image mode {im.mode}")
    except (OSError, SyntaxError) as e:
        raise DataError(f"{path}: cannot read image ({e})") from e
    return np.clip(arr / top, 0.0, 1.0)


def write_gray16(path, img: np.ndarray) -> None:
    codes = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(codes).save(path)


def write_gray8(path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def write_rgb8(path, img: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8), "RGB").save(path)


def list_images(target) -> list[Path]:
    target = Path(target)
    if target.is_file():
        return [target]
    if target.is_dir():
        return sorted(p for p in target.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    raise DataError(f"no such file or directory: {target}")


# ----------------------------------------------------------- synthetic data


def _blob(size, cy, cx, sigma):
    y, x = np.mgrid[0:size, 0:size]
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma ** 2))


def synth_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic image of the given class.

    Class 0 is a smooth low-frequency background, class 1 adds one large
    bright blob, class 2 adds two to four smaller scattered blobs.
    """
    y, x = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size), rng.uniform(0.3, 0.45))
    for _ in range(3):
        fy, fx = rng.uniform(-1.5, 1.5, 2)
        img += rng.uniform(0.02, 0.05) * np.cos(2 * np.pi * (fy * y + fx * x) + rng.uniform(0, 2 * np.pi))
    if label == 1:
        c = rng.uniform(0.3, 0.7, 2) * size
        img += rng.uniform(0.4, 0.5) * _blob(size, c[0], c[1], rng.uniform(size / 7, size / 5.5))
    elif label == 2:
        centers: list[np.ndarray] = []
        n = int(rng.integers(2, 5))
        while len(centers) < n:
            c = rng.uniform(0.15, 0.85, 2) * size
            if all(np.hypot(*(c - o)) > size / 5 for o in centers):
                centers.append(c)
        for c in centers:
            img += rng.uniform(0.4, 0.5) * _blob(size, c[0], c[1], rng.uniform(size / 20, size / 15))
    img *= rng.uniform(0.75, 1.0)
    img += rng.normal(0.0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(out_dir, n_per_class: int, size: int, seed: int) -> Path:
    """Write ``3 * n_per_class`` 16-bit PNGs and ``manifest.csv``; returns the manifest path."""
    if size <= 0 or size % 32:
        raise ConfigError(f"size must be a positive multiple of 32, got {size}")
    if n_per_class < 5:
        raise ConfigError(f"n_per_class must be at least 5, got {n_per_class}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(3 * n_per_class)
    entries = []
    idx = 0
    for label in range(3):
        for j in range(n_per_class):
            rng = np.random.default_rng(children[idx])
            idx += 1
            name = f"{LABELS[label]}_{j:04d}.png"
            write_gray16(out / name, synth_image(label, size, rng))
            entries.append(ManifestEntry(out / name, label))
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, Manifest(entries, out), folds=None)
    return manifest_path
