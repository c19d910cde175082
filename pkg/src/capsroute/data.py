"""Datasets: IDX image/label files and seeded synthetic routing instances.

The IDX reader understands the classic big-endian layout used by the MNIST
distribution files (magic 0x00000803 for image tensors, 0x00000801 for label
vectors).  Malformed files raise distinct exceptions so callers can tell a
wrong file apart from a damaged one.  Gzipped files (``*.gz``) are read
transparently.

Synthetic agreement instances put a cluster of correlated votes on one
designated output capsule and isotropic noise votes everywhere else; they
are fully determined by their seed (numpy ``default_rng`` / PCG64).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np

__all__ = [
    "LabeledImages",
    "SyntheticAgreementInstance",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "IdxCountMismatchError",
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "load_idx",
    "write_idx",
    "gen_agreement_instance",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxFormatError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxFormatError):
    """File is shorter (or longer) than its own header promises."""


class IdxCountMismatchError(IdxFormatError):
    """Image file and label file disagree about the number of items."""


@dataclass
class LabeledImages:
    """A dataset of grayscale images in [0, 1] with integer class labels."""

    images: np.ndarray  # (count, rows, cols) float64
    labels: np.ndarray  # (count,) int64 in [0, 9]

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be (count, rows, cols), got rank {self.images.ndim}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("one label per image required")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, count: int) -> "LabeledImages":
        """First ``count`` items (the conventional deterministic split)."""
        if not 1 <= count <= len(self):
            raise ValueError(f"cannot take {count} items from a dataset of {len(self)}")
        return LabeledImages(self.images[:count], self.labels[:count])


def _read_file(path: str | PathLike) -> bytes:
    p = Path(path)
    if p.suffix == ".gz":
        with gzip.open(p, "rb") as fh:
            return fh.read()
    return p.read_bytes()


def _parse_images(blob: bytes, origin: str) -> np.ndarray:
    if len(blob) < 16:
        raise IdxTruncatedError(f"{origin}: header needs 16 bytes, file has {len(blob)}")
    magic, count, rows, cols = struct.unpack_from(">IIII", blob, 0)
    if magic != IMAGE_MAGIC:
        raise IdxMagicError(
            f"{origin}: bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"
        )
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise IdxTruncatedError(
            f"{origin}: header promises {expected} bytes ({count} x {rows} x {cols}), file has {len(blob)}"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols).astype(np.float64) / 255.0


def _parse_labels(blob: bytes, origin: str) -> np.ndarray:
    if len(blob) < 8:
        raise IdxTruncatedError(f"{origin}: header needs 8 bytes, file has {len(blob)}")
    magic, count = struct.unpack_from(">II", blob, 0)
    if magic != LABEL_MAGIC:
        raise IdxMagicError(
            f"{origin}: bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"
        )
    if len(blob) != 8 + count:
        raise IdxTruncatedError(
            f"{origin}: header promises {8 + count} bytes ({count} labels), file has {len(blob)}"
        )
    labels = np.frombuffer(blob, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"{origin}: label {int(labels.max())} outside the class range 0-9")
    return labels


def load_idx(images_path: str | PathLike, labels_path: str | PathLike) -> LabeledImages:
    """Load a paired IDX image file and label file.

    Pixels are scaled to [0, 1] as float64.  Raises :class:`IdxMagicError`,
    :class:`IdxTruncatedError`, or :class:`IdxCountMismatchError` for the
    corresponding defects.
    """
    images = _parse_images(_read_file(images_path), str(images_path))
    labels = _parse_labels(_read_file(labels_path), str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels "
            f"({images_path} vs {labels_path})"
        )
    return LabeledImages(images, labels)


def write_idx(images_path: str | PathLike, labels_path: str | PathLike, data: LabeledImages) -> None:
    """Write a dataset in the IDX layout :func:`load_idx` reads.

    Pixels are rounded from [0, 1] back to uint8.  Useful for building
    fixtures and for exporting synthetic corpora through the same loader
    path the real data takes.
    """
    images = np.clip(np.rint(data.images * 255.0), 0, 255).astype(np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, count))
        fh.write(data.labels.astype(np.uint8).tobytes())


@dataclass(frozen=True)
class SyntheticAgreementInstance:
    """One generated routing problem with a known agreeing output."""

    predictions: np.ndarray  # (n, m, k), every slice unit length
    cluster_label: int  # the output capsule that received correlated votes
    seed: int

    @property
    def n(self) -> int:
        return self.predictions.shape[0]


def gen_agreement_instance(
    n: int, m: int, k: int, concentration: float, seed: int
) -> SyntheticAgreementInstance:
    """Votes that agree on one output capsule and are noise on the rest.

    A mean direction is drawn uniformly on the k-sphere; the designated
    output's n votes are ``mean + gaussian / concentration`` re-normalized,
    so larger ``concentration`` means tighter clustering
    (``concentration = inf`` gives identical votes).  All other outputs get
    i.i.d. uniform directions (normalized gaussian draws).  Everything is
    a deterministic function of ``seed``.
    """
    if min(n, m, k) < 1:
        raise ValueError("n, m, k must all be >= 1")
    if not concentration > 0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    rng = np.random.default_rng(seed)
    target = int(rng.integers(m))
    mean = rng.standard_normal(k)
    mean /= np.linalg.norm(mean)
    votes = rng.standard_normal((n, m, k))
    votes[:, target, :] = mean + rng.standard_normal((n, k)) / concentration
    norms = np.sqrt((votes * votes).sum(axis=-1, keepdims=True))
    if (norms == 0.0).any():
        raise ValueError("degenerate zero draw; use a different seed")
    votes = votes / norms
    return SyntheticAgreementInstance(predictions=votes, cluster_label=target, seed=seed)
