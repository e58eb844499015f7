"""Datasets and test streams.

ColoredMNIST: digits 0-4 are class 0 and 5-9 class 1.  The colour bit
equals the class, flipped with probability 0.2 on the train split and 0.9 on
the test split.  The grayscale digit is painted into the red channel for
colour bit 1 and the green channel for colour bit 0.

When the MNIST IDX files are not available, ``synth_fallback`` draws
seven-segment style digits with the same class/colour coupling.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .numerics import spawn
from .transforms import TransformSpec, apply_transform

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FLIP_P = {"train": 0.2, "test": 0.9}
RED, GREEN = 0, 1
ILLEGIBLE_P = 0.1
DATA_ROOT_ENV = "DEYO_DATA_ROOT"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataNotFoundError(ConfigurationError, FileNotFoundError):
    pass


# --------------------------------------------------------------------------
# IDX


def parse_idx(blob: bytes) -> np.ndarray:
    """Decode an MNIST IDX blob.

    Image files give float64 pixels scaled to [0, 1] with shape
    (count, rows, cols); label files give an int64 vector.
    """
    if len(blob) < 8:
        raise FormatError("truncated IDX header", offset=len(blob))
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic == IDX_IMAGES_MAGIC:
        if len(blob) < 16:
            raise FormatError("truncated IDX image header", offset=len(blob))
        count, rows, cols = struct.unpack_from(">III", blob, 4)
        shape, header = (count, rows, cols), 16
    elif magic == IDX_LABELS_MAGIC:
        (count,) = struct.unpack_from(">I", blob, 4)
        shape, header = (count,), 8
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    expected = int(np.prod(shape))
    payload = len(blob) - header
    if payload != expected:
        raise FormatError(
            f"header declares {expected} payload bytes for shape {shape} but {payload} follow",
            offset=header + min(payload, expected),
        )
    data = np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(shape)
    if magic == IDX_IMAGES_MAGIC:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


def write_idx(array) -> bytes:
    """Encode uint8-valued labels (1-D) or images (3-D) as IDX bytes.

    Float images in [0, 1] are rescaled to bytes.
    """
    a = np.asarray(array)
    if a.ndim == 1:
        header = struct.pack(">II", IDX_LABELS_MAGIC, len(a))
        payload = a.astype(np.uint8)
    elif a.ndim == 3:
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *a.shape)
        payload = np.rint(a * 255.0).astype(np.uint8) if a.dtype.kind == "f" else a.astype(np.uint8)
    else:
        raise ValueError("IDX writer handles 1-D labels or 3-D images only")
    return header + payload.tobytes()


def _read_maybe_gz(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def mnist_paths(root, split):
    root = Path(root)
    return [root / name for name in MNIST_FILES[split]]


def load_mnist(root=None, split="train"):
    """Read (images, digit labels) for one split from ``root``.

    ``root`` defaults to $DEYO_DATA_ROOT.  Plain or ``.gz`` files are accepted.
    """
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise DataNotFoundError(
            f"no MNIST directory given; set ${DATA_ROOT_ENV} or data.root to a folder containing "
            + ", ".join(MNIST_FILES[split])
        )
    found = []
    for path in mnist_paths(root, split):
        gz = path.with_name(path.name + ".gz")
        if path.exists():
            found.append(path)
        elif gz.exists():
            found.append(gz)
        else:
            raise DataNotFoundError(f"missing MNIST file: expected {path} (or {gz})")
    images = parse_idx(_read_maybe_gz(found[0]))
    labels = parse_idx(_read_maybe_gz(found[1]))
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels in {root}")
    return images, labels


# --------------------------------------------------------------------------
# coloured datasets


@dataclass
class ColoredSet:
    """Arrays for a coloured binary dataset; ``groups = 2*label + color_bit``."""

    images: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    digits: np.ndarray
    flip_p: float = 0.0

    def __len__(self):
        return len(self.labels)

    @property
    def color_bits(self):
        return self.groups - 2 * self.labels

    def subset(self, idx):
        idx = np.asarray(idx)
        return ColoredSet(
            self.images[idx], self.labels[idx], self.groups[idx], self.digits[idx], self.flip_p
        )

    def group_counts(self):
        return {g: int((self.groups == g).sum()) for g in range(4)}


def colorize(gray, digits, flip_p, rng) -> ColoredSet:
    gray = np.asarray(gray, dtype=np.float64)
    digits = np.asarray(digits, dtype=np.int64)
    if np.any((digits < 0) | (digits > 9)):
        raise ValueError("digit labels must lie in 0..9")
    labels = (digits >= 5).astype(np.int64)
    flips = (rng.random(len(digits)) < flip_p).astype(np.int64)
    color = labels ^ flips
    images = np.zeros(gray.shape + (3,))
    red = color == 1
    images[red, :, :, RED] = gray[red]
    images[~red, :, :, GREEN] = gray[~red]
    return ColoredSet(images, labels, 2 * labels + color, digits, float(flip_p))


def build_colored_mnist(gray, digits, split, rng, flip_p=None) -> ColoredSet:
    """Colour grayscale digits following the ColoredMNIST recipe for ``split``."""
    if flip_p is None:
        if split not in FLIP_P:
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        flip_p = FLIP_P[split]
    return colorize(gray, digits, flip_p, rng)


# seven-segment layout on a unit box: (x0, y0, x1, y1)
_SEGMENTS = np.array(
    [
        (0.0, 0.0, 1.0, 0.0),  # a top
        (1.0, 0.0, 1.0, 0.5),  # b upper right
        (1.0, 0.5, 1.0, 1.0),  # c lower right
        (0.0, 1.0, 1.0, 1.0),  # d bottom
        (0.0, 0.5, 0.0, 1.0),  # e lower left
        (0.0, 0.0, 0.0, 0.5),  # f upper left
        (0.0, 0.5, 1.0, 0.5),  # g middle
    ]
)
_DIGIT_SEGMENTS = {
    0: "abcdef",
    1: "bc",
    2: "abged",
    3: "abgcd",
    4: "fgbc",
    5: "afgcd",
    6: "afgedc",
    7: "abc",
    8: "abcdefg",
    9: "abcdfg",
}
_SEGMENT_MASK = np.array(
    [[ch in _DIGIT_SEGMENTS[d] for ch in "abcdefg"] for d in range(10)], dtype=bool
)


def render_glyphs(digits, rng, size=28, illegible_p=0.0) -> np.ndarray:
    """Rasterize seven-segment digits with random placement, slant and stroke width.

    A fraction ``illegible_p`` of glyphs is drawn from a random segment subset
    unrelated to the digit, so their shape carries no class information.
    """
    digits = np.asarray(digits, dtype=np.int64)
    n = len(digits)
    masks = _SEGMENT_MASK[digits]
    scrawl = rng.random(n) < illegible_p
    masks[scrawl] = rng.random((int(scrawl.sum()), 7)) < 0.5
    out = np.empty((n, size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) + 0.5
    gx, gy = xx.ravel(), yy.ravel()
    chunk = 1024
    for s in range(0, n, chunk):
        m = min(chunk, n - s)
        height = rng.uniform(14.0, 20.0, m)
        width = height * rng.uniform(0.45, 0.7, m)
        cx = size / 2 + rng.uniform(-3.0, 3.0, m)
        cy = size / 2 + rng.uniform(-3.0, 3.0, m)
        slant = rng.uniform(-0.25, 0.25, m)
        half_w = rng.uniform(0.8, 1.8, m)
        intensity = rng.uniform(0.6, 1.0, m)
        seg = _SEGMENTS[None] + rng.uniform(-0.07, 0.07, (m, 7, 4))
        # unit box -> pixels; slant shifts x in proportion to height above centre
        ux = (seg[..., [0, 2]] - 0.5) * width[:, None, None]
        uy = (seg[..., [1, 3]] - 0.5) * height[:, None, None]
        px = (cx[:, None, None] + ux - slant[:, None, None] * uy).astype(np.float32)
        py = (cy[:, None, None] + uy).astype(np.float32)
        ax, ay = px[..., 0, None], py[..., 0, None]  # (m, 7, 1)
        abx, aby = px[..., 1, None] - ax, py[..., 1, None] - ay
        apx, apy = gx - ax, gy - ay  # (m, 7, P)
        t = np.clip((apx * abx + apy * aby) / (abx * abx + aby * aby), 0.0, 1.0)
        dx, dy = apx - t * abx, apy - t * aby
        dist2 = np.where(masks[s : s + m, :, None], dx * dx + dy * dy, np.inf).min(axis=1)
        ink = np.clip(half_w[:, None] + 0.5 - np.sqrt(dist2), 0.0, 1.0) * intensity[:, None]
        out[s : s + m] = ink.reshape(m, size, size)
    return out


def synth_fallback(n, rng, split="train", flip_p=None, illegible_p=ILLEGIBLE_P) -> ColoredSet:
    """Procedural stand-in for ColoredMNIST (no files needed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if flip_p is None:
        flip_p = FLIP_P[split]
    shape_rng, color_rng = spawn(rng, 2)
    digits = shape_rng.integers(0, 10, n)
    gray = render_glyphs(digits, shape_rng, illegible_p=illegible_p)
    return colorize(gray, digits, flip_p, color_rng)


# --------------------------------------------------------------------------
# streams

SCENARIO_KINDS = ("mild", "label_shift", "batch_size_1", "mixed")


@dataclass
class ScenarioSpec:
    kind: str = "mild"
    batch_size: int = 64
    mix: tuple = ((TransformSpec("identity"), 1.0),)
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.replace("-", "_")
        if self.kind in ("bs1", "batch1"):
            self.kind = "batch_size_1"
        if self.kind not in SCENARIO_KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "batch_size_1":
            self.batch_size = 1
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        total = sum(frac for _, frac in self.mix)
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"mix fractions must sum to 1, got {total}")


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    indices: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.labels)


def _chunk(samples, order, x, batch_size, min_batch):
    bounds = list(range(0, len(order), batch_size))
    if len(bounds) > 1 and len(order) - bounds[-1] < min_batch:
        bounds.pop()
    batches = []
    for i, start in enumerate(bounds):
        stop = bounds[i + 1] if i + 1 < len(bounds) else len(order)
        idx = order[start:stop]
        batches.append(Batch(x[idx], samples.labels[idx], samples.groups[idx], idx))
    return batches


def make_stream(samples: ColoredSet, scenario: ScenarioSpec, min_batch: int = 1) -> list[Batch]:
    """Order the test samples into batches according to ``scenario``.

    ``min_batch`` (2 for batch-norm models) merges a too-short tail batch into
    its predecessor.
    """
    n = len(samples)
    if n == 0:
        raise ValueError("cannot build a stream from zero samples")
    order_rng, mix_rng = spawn(np.random.Generator(np.random.Philox(scenario.seed)), 2)
    x = samples.images
    if scenario.kind == "label_shift":
        classes = order_rng.permutation(np.unique(samples.labels))
        order = np.concatenate(
            [order_rng.permutation(np.flatnonzero(samples.labels == c)) for c in classes]
        )
    else:
        order = order_rng.permutation(n)
    if scenario.kind == "mixed":
        specs = [spec for spec, _ in scenario.mix]
        probs = np.array([frac for _, frac in scenario.mix], dtype=np.float64)
        which = mix_rng.choice(len(specs), size=n, p=probs / probs.sum())
        x = x.copy()
        for k, spec in enumerate(specs):
            sel = np.flatnonzero(which == k)
            if len(sel) and spec.kind != "identity":
                x[sel] = apply_transform(x[sel], spec, mix_rng)
    return _chunk(samples, order, x, scenario.batch_size, min_batch)
