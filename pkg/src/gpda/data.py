"""Synthetic partial-domain tasks and IDX (MNIST/USPS style) ingestion."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    domain: str = "source"

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != self.labels.shape[0]:
            raise ContractError(
                f"{self.domain}: samples {self.samples.shape} do not match labels {self.labels.shape}"
            )
        if np.isnan(self.samples).any():
            raise ContractError(f"{self.domain}: NaN features")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass(frozen=True)
class PdaTask:
    source: LabeledDataset
    target: LabeledDataset
    shared: tuple[int, ...]
    outlier: tuple[int, ...]

    def __post_init__(self):
        shared, outlier = set(self.shared), set(self.outlier)
        if shared & outlier:
            raise ContractError("shared and outlier classes overlap")
        if not set(np.unique(self.target.labels).tolist()) <= shared:
            raise ContractError("target carries labels outside the shared classes")

    @property
    def num_classes(self) -> int:
        return len(self.shared) + len(self.outlier)


@dataclass(frozen=True)
class Shift:
    """Rigid target shift: rotate about the origin, then translate; plus noise level."""

    rotation_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    noise: float = 0.6


def class_centers(num_classes: int, radius: float = 5.0, dim: int = 2) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_synthetic_pda(
    num_source_classes: int,
    num_target_classes: int,
    per_class_n: int,
    shift: Shift = Shift(),
    seed: int = 0,
    dim: int = 2,
    target_per_class_n: int | None = None,
) -> PdaTask:
    """Gaussian classes on a radius-5 circle; the target keeps the first classes, shifted.

    Extra dimensions beyond the first two carry pure noise.
    """
    if not 1 <= num_target_classes <= num_source_classes:
        raise ContractError(f"need 1 <= C_t <= C_s, got C_t={num_target_classes}, C_s={num_source_classes}")
    if per_class_n < 1:
        raise ContractError(f"per_class_n must be positive, got {per_class_n}")
    if shift.noise <= 0:
        raise ContractError(f"noise level must be positive, got {shift.noise}")
    if dim < 2:
        raise ContractError(f"synthetic tasks need at least two dimensions, got {dim}")
    n_t = per_class_n if target_per_class_n is None else target_per_class_n
    rng = np.random.default_rng(seed)
    centers = class_centers(num_source_classes, dim=dim)

    src_labels = np.repeat(np.arange(num_source_classes), per_class_n)
    src = centers[src_labels] + shift.noise * rng.standard_normal((src_labels.size, dim))

    tgt_labels = np.repeat(np.arange(num_target_classes), n_t)
    tgt = centers[tgt_labels] + shift.noise * rng.standard_normal((tgt_labels.size, dim))
    theta = np.deg2rad(shift.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    tgt[:, :2] = tgt[:, :2] @ rot.T + np.asarray(shift.translation, dtype=np.float64)

    return PdaTask(
        LabeledDataset(src, src_labels, "source"),
        LabeledDataset(tgt, tgt_labels, "target"),
        tuple(range(num_target_classes)),
        tuple(range(num_target_classes, num_source_classes)),
    )


def make_partial_target(ds: LabeledDataset, keep: Iterable[int]) -> LabeledDataset:
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ContractError("keep-set is empty")
    missing = set(keep) - set(ds.classes().tolist())
    if missing:
        raise ContractError(f"keep-set names absent classes {sorted(missing)}")
    mask = np.isin(ds.labels, keep)
    if not mask.any():
        raise ContractError("no samples left after filtering")
    return LabeledDataset(ds.samples[mask], ds.labels[mask], ds.domain)


def make_task(source: LabeledDataset, target: LabeledDataset, keep: Sequence[int], num_classes: int) -> PdaTask:
    target = make_partial_target(LabeledDataset(target.samples, target.labels, "target"), keep)
    shared = tuple(sorted(set(int(k) for k in keep)))
    outlier = tuple(c for c in range(num_classes) if c not in shared)
    return PdaTask(source, target, shared, outlier)


# ------------------------------------------------------------------------ IDX


def _read_header(data: bytes, path, expected_magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(data) < need:
        raise IdxFormatError(f"{path}: truncated header at byte {len(data)} (need {need})")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    return struct.unpack_from(f">{ndim}I", data, 4)


def read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    count, rows, cols = _read_header(data, path, IDX_IMAGES_MAGIC, 3)
    offset = 16
    size = count * rows * cols
    if len(data) < offset + size:
        raise IdxFormatError(f"{path}: truncated pixel data at byte {len(data)}, expected {offset + size}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=offset).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (count,) = _read_header(data, path, IDX_LABELS_MAGIC, 1)
    offset = 8
    if len(data) < offset + count:
        raise IdxFormatError(f"{path}: truncated label data at byte {len(data)}, expected {offset + count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).astype(np.intp)


def load_idx(images_path, labels_path, domain: str = "source", side: int | None = None) -> LabeledDataset:
    """Pixels scaled to [0, 1] and flattened; ``side`` bilinearly resizes square images first."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images in {images_path}"
        )
    pixels = images.astype(np.float64) / 255.0
    if side is not None and images.shape[0] and pixels.shape[1:] != (side, side):
        pixels = resize_bilinear(pixels, side)
    return LabeledDataset(pixels.reshape(pixels.shape[0], -1), labels, domain)


def resize_bilinear(images: np.ndarray, side: int) -> np.ndarray:
    from scipy.ndimage import zoom

    n, h, w = images.shape
    return zoom(images, (1, side / h, side / w), order=1, mode="nearest")


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


def export_task_csv(task: PdaTask, path) -> None:
    """One row per sample: feature columns, label, domain (``source``/``target``)."""
    dim = task.source.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dim)] + ["label", "domain"])
        for ds in (task.source, task.target):
            for x, y in zip(ds.samples, ds.labels):
                writer.writerow([repr(float(v)) for v in x] + [int(y), ds.domain])
