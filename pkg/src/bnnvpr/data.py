"""Image and dataset ingestion, ground-truth parsing and synthetic place data."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .vpr import GroundTruth

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".pnm", ".bmp", ".tif", ".tiff"}


class DatasetError(ValueError):
    pass


def list_images(directory: str | Path) -> list[Path]:
    """Image files in ``directory`` in byte-wise lexicographic filename order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"{directory} is not a directory")
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    if not files:
        raise DatasetError(f"{directory} contains no images")
    return sorted(files, key=lambda p: p.name.encode("utf-8"))


def load_image(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode to an H x W x 3 float32 array in [0, 1], bilinear-resized to ``size`` (H, W)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"cannot decode image {path.name}: {exc}") from exc
    return arr / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def parse_ground_truth(text: str) -> GroundTruth:
    """``tolerance,<k>`` on the first line, or ``query_id,ref_id`` rows.

    Blank lines and ``#`` comments are skipped; in pair mode an optional
    ``query,ref`` header is allowed.
    """
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = next(csv.reader([line]))
        rows.append((lineno, [c.strip() for c in cells]))
    if not rows:
        raise DatasetError("ground truth file is empty")
    lineno, first = rows[0]
    if first[0].lower() == "tolerance":
        if len(first) != 2 or not first[1].isdigit():
            raise DatasetError(f"line {lineno}: expected 'tolerance,<frames>'")
        if len(rows) > 1:
            raise DatasetError(f"line {rows[1][0]}: unexpected row after tolerance header")
        return GroundTruth.frames(int(first[1]))
    if [c.lower() for c in first] in (["query", "ref"], ["query_id", "ref_id"]):
        rows = rows[1:]
    pairs: dict[str, set[str]] = {}
    for lineno, cells in rows:
        if len(cells) != 2 or not all(cells):
            raise DatasetError(f"line {lineno}: expected 'query_id,ref_id'")
        pairs.setdefault(cells[0], set()).add(cells[1])
    return GroundTruth.explicit(pairs)


def read_ground_truth(path: str | Path) -> GroundTruth:
    try:
        return parse_ground_truth(Path(path).read_text())
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


@dataclass
class PlaceDataset:
    references: list[tuple[str, np.ndarray]]
    queries: list[tuple[str, np.ndarray]]
    ground_truth: GroundTruth


def load_dataset(
    ref_dir: str | Path,
    query_dir: str | Path,
    gt_path: str | Path,
    input_shape: Sequence[int] = (227, 227, 3),
) -> PlaceDataset:
    """Reference/query images (ids are file stems) plus ground truth."""
    size = (int(input_shape[0]), int(input_shape[1]))
    refs = [(p.stem, load_image(p, size)) for p in list_images(ref_dir)]
    queries = [(p.stem, load_image(p, size)) for p in list_images(query_dir)]
    gt = read_ground_truth(gt_path)
    gt.validate([q for q, _ in queries], [r for r, _ in refs])
    return PlaceDataset(refs, queries, gt)


def load_labeled_folders(root: str | Path, input_shape: Sequence[int]) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Training images laid out as ``root/<category>/<image>``."""
    root = Path(root)
    classes = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name.encode("utf-8"))
    if not classes:
        raise DatasetError(f"{root} has no category folders")
    size = (int(input_shape[0]), int(input_shape[1]))
    images, labels = [], []
    for label, folder in enumerate(classes):
        for path in list_images(folder):
            images.append(load_image(path, size))
            labels.append(label)
    return np.stack(images), np.asarray(labels, dtype=np.int64), [c.name for c in classes]


# --------------------------------------------------------------------------
# synthetic places


def _prototype(rng: np.random.Generator, shape: tuple[int, int, int]) -> np.ndarray:
    h, w, c = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros(shape)
    # a few oriented gratings and blobs with random colours
    for _ in range(4):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += wave[..., None] * rng.uniform(-0.5, 0.5, c)
    for _ in range(3):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.1, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.uniform(-1.0, 1.0, c)
    img -= img.min()
    img /= max(img.max(), 1e-9)
    return img


def perturb(
    image: np.ndarray,
    rng: np.random.Generator,
    noise: float = 0.05,
    brightness: float = 0.2,
    shift: int = 0,
) -> np.ndarray:
    """Brightness change, additive Gaussian noise and an optional small shift."""
    out = image * rng.uniform(1 - brightness, 1 + brightness)
    if shift:
        dy, dx = rng.integers(-shift, shift + 1, 2)
        out = np.roll(out, (int(dy), int(dx)), axis=(0, 1))
    out = out + rng.normal(0.0, noise, image.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class SyntheticPlaces:
    prototypes: np.ndarray
    train_images: np.ndarray
    train_labels: np.ndarray

    def references(self) -> list[tuple[str, np.ndarray]]:
        return [(f"place{i:03d}", p.astype(np.float32)) for i, p in enumerate(self.prototypes)]

    def queries(self, seed: int, noise: float = 0.05, brightness: float = 0.2) -> list[tuple[str, np.ndarray]]:
        rng = np.random.default_rng(seed)
        return [
            (f"query{i:03d}", perturb(p, rng, noise, brightness).astype(np.float32))
            for i, p in enumerate(self.prototypes)
        ]


def synthetic_places(
    n_places: int = 8,
    per_place: int = 32,
    shape: tuple[int, int, int] = (32, 32, 3),
    seed: int = 0,
    noise: float = 0.05,
    brightness: float = 0.2,
    shift: int = 2,
) -> SyntheticPlaces:
    """A toy place-recognition set: one clean prototype per place plus perturbed training views."""
    rng = np.random.default_rng(seed)
    protos = np.stack([_prototype(rng, shape) for _ in range(n_places)])
    images = np.stack(
        [perturb(protos[i], rng, noise, brightness, shift) for i in range(n_places) for _ in range(per_place)]
    ).astype(np.float32)
    labels = np.repeat(np.arange(n_places), per_place)
    return SyntheticPlaces(protos, images, labels)
