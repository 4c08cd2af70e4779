"""Synthetic two-class geometric images, dataset persistence, and a generic
grayscale importer.

Scenes live on the continuous square [0, 31]^2 in (y, x) coordinates (y grows
downwards) and are rendered onto the 31 x 31 pixel grid by 4 x 4 box
supersampling, 16 coverage samples per pixel.  The background grey is 1.0
(white); the three objects carry a random permutation of the greys
(0, 1/3, 2/3).

Randomness comes from the counter-based Philox generator with one stream per
(item, purpose): purpose 0 draws the label, 1 the scene, 2 the pixel noise.
Items are therefore independent and may be generated in any order or in
parallel without changing the result.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

IMAGE_SIDE = 31
BACKGROUND_GREY = 1.0
OBJECT_GREYS = (0.0, 1.0 / 3.0, 2.0 / 3.0)
SUPERSAMPLE = 4

MAGIC = b"HMPD"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHIHH")  # magic, version, count, d1, d2

GENERATOR_VERSION = "hmpcnn-datagen-1"

_PURPOSE_LABEL, _PURPOSE_SCENE, _PURPOSE_NOISE = 0, 1, 2


class FormatError(ValueError):
    """Corrupt or unsupported file contents; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class Shape:
    kind: str            # "circle" | "triangle" | "square"
    center: tuple[float, float]  # (y, x)
    area: float
    grey: float

    def bbox(self) -> tuple[float, float, float, float]:
        """(ymin, ymax, xmin, xmax)."""
        cy, cx = self.center
        if self.kind == "circle":
            r = math.sqrt(self.area / math.pi)
            return cy - r, cy + r, cx - r, cx + r
        if self.kind == "square":
            h = math.sqrt(self.area) / 2.0
            return cy - h, cy + h, cx - h, cx + h
        side = math.sqrt(4.0 * self.area / math.sqrt(3.0))
        height = side * math.sqrt(3.0) / 2.0
        return cy - 2.0 * height / 3.0, cy + height / 3.0, cx - side / 2.0, cx + side / 2.0

    def contains(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        cy, cx = self.center
        if self.area <= 0.0:
            return np.zeros(np.broadcast(yy, xx).shape, dtype=bool)
        if self.kind == "circle":
            return (yy - cy) ** 2 + (xx - cx) ** 2 <= self.area / math.pi
        if self.kind == "square":
            h = math.sqrt(self.area) / 2.0
            return (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= h)
        # equilateral, flat bottom, apex up (towards small y)
        side = math.sqrt(4.0 * self.area / math.sqrt(3.0))
        height = side * math.sqrt(3.0) / 2.0
        dy = yy - (cy - 2.0 * height / 3.0)
        return (dy >= 0.0) & (dy <= height) & (np.abs(xx - cx) <= (side / 2.0) * (dy / height))


@dataclass(frozen=True)
class ShapeScene:
    """Resolved placement of the three objects, ready to rasterise."""

    circle: Shape
    triangle: Shape
    square: Shape
    layout_side: float
    offset: tuple[float, float]
    class_label: int
    noise_scale: float = 0.0

    def shapes(self) -> tuple[Shape, Shape, Shape]:
        """Painter order: circle below triangle below square."""
        return self.circle, self.triangle, self.square


def _uniform_disk(rng: np.random.Generator, radius: float) -> tuple[float, float]:
    r = radius * math.sqrt(rng.uniform())
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return r * math.sin(theta), r * math.cos(theta)  # (dy, dx)


def sample_scene(class_label: int, rng: np.random.Generator, max_tries: int = 200) -> ShapeScene:
    """Draw one scene: areas U[20,40], greys a permutation of (0,1/3,2/3),
    corner layout on a square of area U[80,160] with the square object at the
    bottom-right corner; circle and triangle corners encode the class.  Each
    position is jittered on a disk of radius side/3, then everything gets a
    global offset uniform over the placements keeping all objects inside.
    An infeasible layout (jittered scene wider than the image) is redrawn.
    """
    if class_label not in (0, 1):
        raise ValueError("class label must be 0 or 1")
    areas = rng.uniform(20.0, 40.0, size=3)  # circle, triangle, square
    greys = rng.permutation(np.array(OBJECT_GREYS))
    for _ in range(max_tries):
        layout_side = math.sqrt(rng.uniform(80.0, 160.0))
        a = layout_side
        corners = {"ul": (0.0, 0.0), "ur": (0.0, a), "ll": (a, 0.0), "lr": (a, a)}
        circle_corner = corners["ul"] if class_label == 0 else corners["ll"]
        triangle_corner = corners["ll"] if class_label == 0 else corners["ur"]
        square_corner = corners["lr"]
        jitter = a / 3.0
        centers = []
        for corner in (circle_corner, triangle_corner, square_corner):
            dy, dx = _uniform_disk(rng, jitter)
            centers.append((corner[0] + dy, corner[1] + dx))
        shapes = [Shape(kind, c, area, grey)
                  for kind, c, area, grey in zip(("circle", "triangle", "square"),
                                                 centers, areas, greys)]
        boxes = np.array([s.bbox() for s in shapes])
        ymin, ymax = boxes[:, 0].min(), boxes[:, 1].max()
        xmin, xmax = boxes[:, 2].min(), boxes[:, 3].max()
        if ymax - ymin > IMAGE_SIDE or xmax - xmin > IMAGE_SIDE:
            continue  # cannot fit; redraw layout square and jitters
        ty = rng.uniform(-ymin, IMAGE_SIDE - ymax)
        tx = rng.uniform(-xmin, IMAGE_SIDE - xmax)
        moved = [Shape(s.kind, (s.center[0] + ty, s.center[1] + tx), s.area, s.grey)
                 for s in shapes]
        return ShapeScene(moved[0], moved[1], moved[2], layout_side, (ty, tx), class_label)
    raise RuntimeError(f"no feasible placement found in {max_tries} attempts")


def rasterize(scene: ShapeScene) -> np.ndarray:
    """Render onto the 31 x 31 grid with 4 x 4 supersampling; pixel values are
    coverage-weighted greys over the white background, clipped to [0, 1]."""
    n = IMAGE_SIDE * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    grey = np.full((n, n), BACKGROUND_GREY)
    for shape in scene.shapes():
        grey[shape.contains(yy, xx)] = shape.grey
    img = grey.reshape(IMAGE_SIDE, SUPERSAMPLE, IMAGE_SIDE, SUPERSAMPLE).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def add_noise(img: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel x + scale * N(0,1), truncated back to [0, 1]."""
    if scale < 0:
        raise ValueError("noise scale must be >= 0")
    if scale == 0.0:
        return np.asarray(img, dtype=np.float64).copy()
    return np.clip(img + scale * rng.standard_normal(np.shape(img)), 0.0, 1.0)


@dataclass
class Dataset:
    """Labelled image collection; images are float32, the on-disk truth."""

    images: np.ndarray  # (n, d1, d2) float32 in [0, 1]
    labels: np.ndarray  # (n,) uint8 in {0, 1}
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 3 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images must be (n, d1, d2) matching n labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.provenance)


def _item_rng(seed: int, item: int, purpose: int) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64((item << 2 | purpose) & 0xFFFFFFFFFFFFFFFF)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generate(n: int, seed: int, noise_scale: float = 0.05) -> Dataset:
    """n independent draws: uniform label, scene, raster, noise; the result
    is a pure function of (n, seed, noise_scale)."""
    if n < 1:
        raise ValueError("need n >= 1")
    images = np.empty((n, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        label = int(_item_rng(seed, i, _PURPOSE_LABEL).integers(0, 2))
        scene = sample_scene(label, _item_rng(seed, i, _PURPOSE_SCENE))
        img = rasterize(scene)
        img = add_noise(img, noise_scale, _item_rng(seed, i, _PURPOSE_NOISE))
        images[i] = img.astype(np.float32)
        labels[i] = label
    return Dataset(images, labels, f"{GENERATOR_VERSION} seed={seed} noise={noise_scale}")


# ---------------------------------------------------------------------------
# HMPD container
# ---------------------------------------------------------------------------

def expected_file_size(count: int, d1: int, d2: int) -> int:
    return HEADER.size + count * (1 + 4 * d1 * d2)


def save(ds: Dataset, path) -> None:
    """Write the HMPD container: 14-byte header (magic, version u16, count
    u32, d1 u16, d2 u16, little-endian) then per item a label byte and the
    float32 row-major pixels."""
    n, d1, d2 = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, d1, d2))
        for i in range(n):
            fh.write(struct.pack("<B", int(ds.labels[i])))
            fh.write(ds.images[i].astype("<f4").tobytes(order="C"))


def load(path) -> Dataset:
    """Read an HMPD container; malformed input raises FormatError with the
    offending byte offset."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"file too short for the {HEADER.size}-byte header", len(raw))
    magic, version, count, d1, d2 = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    want = expected_file_size(count, d1, d2)
    if len(raw) != want:
        raise FormatError(f"expected {want} bytes for {count} items of {d1}x{d2}, got {len(raw)}",
                          min(len(raw), want))
    images = np.empty((count, d1, d2), dtype=np.float32)
    labels = np.empty(count, dtype=np.uint8)
    offset = HEADER.size
    item_bytes = 1 + 4 * d1 * d2
    for i in range(count):
        labels[i] = raw[offset]
        if labels[i] > 1:
            raise FormatError(f"label byte must be 0 or 1, got {labels[i]}", offset)
        images[i] = np.frombuffer(raw, dtype="<f4", count=d1 * d2,
                                  offset=offset + 1).reshape(d1, d2)
        offset += item_bytes
    return Dataset(images, labels, f"loaded from {path}")


# ---------------------------------------------------------------------------
# generic grayscale import
# ---------------------------------------------------------------------------

def read_pnm(path) -> np.ndarray:
    """Minimal PGM/PPM reader (P2/P3 ascii, P5/P6 binary, 8-bit); returns
    floats in [0, 1], shape (H, W) or (H, W, 3)."""
    raw = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header", start)
        return raw[start:pos]

    magic = token()
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"unsupported image magic {magic!r}", 0)
    width, height, maxval = int(token()), int(token()), int(token())
    if maxval < 1 or maxval > 255:
        raise FormatError(f"only 8-bit images supported, maxval={maxval}", pos)
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace after maxval
        if len(raw) - pos < count:
            raise FormatError(f"expected {count} pixel bytes, found {len(raw) - pos}", pos)
        data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=pos).astype(np.float64)
    else:
        values = raw[pos:].split()
        if len(values) < count:
            raise FormatError(f"expected {count} ascii pixel values, found {len(values)}", pos)
        data = np.array([int(v) for v in values[:count]], dtype=np.float64)
    data /= maxval
    if channels == 3:
        return data.reshape(height, width, 3)
    return data.reshape(height, width)


LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def import_grayscale(paths, label_rule: Callable, decoder: Callable | None = None) -> Dataset:
    """Build a dataset from image files.

    32x32 inputs are cropped to 31x31 by dropping the last row and column;
    31x31 inputs pass through; anything else is rejected.  RGB collapses to
    luminance.  ``label_rule(path) -> {0,1}``; ``decoder(path)`` may replace
    the built-in PGM/PPM reader and must return floats in [0, 1] shaped
    (H, W) or (H, W, 3).
    """
    decoder = decoder or read_pnm
    images, labels = [], []
    for path in paths:
        arr = np.asarray(decoder(path), dtype=np.float64)
        if arr.ndim == 3:
            arr = LUMA_WEIGHTS[0] * arr[..., 0] + LUMA_WEIGHTS[1] * arr[..., 1] \
                + LUMA_WEIGHTS[2] * arr[..., 2]
        if arr.shape == (32, 32):
            arr = arr[:31, :31]
        if arr.shape != (31, 31):
            raise FormatError(f"{path}: expected 31x31 or 32x32 after decode, got {arr.shape}")
        images.append(np.clip(arr, 0.0, 1.0).astype(np.float32))
        labels.append(int(label_rule(path)))
    if not images:
        raise ValueError("no input files")
    return Dataset(np.stack(images), np.array(labels, dtype=np.uint8),
                   f"imported {len(images)} files")
