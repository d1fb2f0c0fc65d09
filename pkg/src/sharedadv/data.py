"""Dataset generation, IDX ingestion, and bit-exact serialization.

Synthetic data lives in the [0, 1] domain; IDX byte data keeps its native
[0, 255] range. Tensors serialize to the TNSR1 container (5-byte ASCII
magic, little-endian u32 rank and extents, row-major little-endian f32
payload), which round-trips bit-exactly. Experiment records append to a
fixed-header CSV with a JSON-lines sidecar carrying the full config echo.
"""

from __future__ import annotations

import csv
import math
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import RngStream

TNSR_MAGIC = b"TNSR1"
IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
RECORD_HEADER = "sigma,s,eps_train,seed,clean_acc,eps_uni,eps_adv,delta,wall_s"

# Refuse IDX headers whose element count exceeds this bound.
_IDX_MAX_ELEMENTS = 1 << 34


class FormatError(ValueError):
    """A serialized artifact violates its declared byte format."""


@dataclass
class Dataset:
    """Inputs, labels, their domain bounds, and a split tag.

    Labels are class indices [n] for classification or per-pixel maps
    [n, H, W] for dense prediction.
    """

    x: np.ndarray
    y: np.ndarray
    domain: tuple[float, float] = (0.0, 1.0)
    split: str = "train"

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("input and label counts differ")
        lo, hi = self.domain
        if self.x.size and (self.x.min() < lo or self.x.max() > hi):
            raise ValueError("inputs fall outside the declared domain")

    @property
    def n(self) -> int:
        return int(self.x.shape[0])


def gen_blobs(rng: RngStream, n: int, classes: int, dim: int,
              separation: float) -> Dataset:
    """Gaussian clusters with pairwise center distance >= separation.

    Clusters have unit variance before the whole cloud is mapped into
    [0, 1]^dim by a single global affine transform (one scale for every
    axis, so clusters stay spherical). Classes are balanced and the points
    are shuffled.
    """
    if n < classes:
        raise ValueError("need at least one point per class")
    if separation <= 0:
        raise ValueError("separation must be positive")

    center_rng = rng.split()
    point_rng = rng.split()
    shuffle_rng = rng.split()

    # Center coordinates are cubed Gaussians: heavy-tailed, so the class
    # evidence concentrates on a few salient axes (akin to localized image
    # features) instead of spreading evenly over all dimensions. The scale
    # puts typical pairwise center distances near `separation`, so the
    # requested margin binds instead of inflating with the dimension.
    scale = separation * max(1.0, classes ** (1.0 / dim)) / math.sqrt(30.0 * dim)
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < classes:
        g = center_rng.normal((dim,), dtype=np.float64)
        cand = g ** 3 * scale
        if all(np.linalg.norm(cand - c) >= separation for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts > 2000 * classes:
            raise RuntimeError("could not place cluster centers at the requested separation")

    counts = [n // classes + (1 if i < n % classes else 0) for i in range(classes)]
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        pts = centers[c] + point_rng.normal((cnt, dim), dtype=np.float64)
        xs.append(pts)
        ys.append(np.full(cnt, c, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)

    lo, hi = float(x.min()), float(x.max())
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    perm = shuffle_rng.permutation(n)
    return Dataset(x=x[perm].astype(np.float32), y=y[perm])


def _paint_disc(label_map: np.ndarray, ci: int, cj: int, r: int, cls: int):
    side = label_map.shape[0]
    ii, jj = np.ogrid[:side, :side]
    label_map[(ii - ci) ** 2 + (jj - cj) ** 2 <= r * r] = cls


def _paint_rect(label_map: np.ndarray, i0: int, j0: int, h: int, w: int, cls: int):
    label_map[i0:i0 + h, j0:j0 + w] = cls


def target_scene(side: int, classes: int) -> np.ndarray:
    """Fixed label map used as the target of targeted universal attacks.

    Uses the extreme classes (0 and classes-1) so the scene stays
    reachable at large perturbation budgets.
    """
    t = np.zeros((side, side), dtype=np.int64)
    q = side // 4
    _paint_rect(t, q, q, side // 2, side // 2, classes - 1)
    return t


def gen_shapes_seg(rng: RngStream, n: int, side: int, classes: int,
                   max_shapes: int = 3, noise: float = 0.05,
                   weak_channel: tuple[float, float] | None = None,
                   ) -> tuple[Dataset, np.ndarray]:
    """Toy dense-prediction task: class-coded rectangles and discs.

    Pixel intensity encodes the class (class c paints c / (classes - 1))
    plus Gaussian noise, clipped into [0, 1]. With ``weak_channel``
    (contrast, noise) a second channel carries the same class code at low
    contrast but with low noise: a clean shortcut feature that plain
    training latches onto and adversarial training must learn to distrust.
    Returns the dataset and the fixed target scene for targeted universal
    attacks.
    """
    if side < 8:
        raise ValueError("side must be >= 8")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    shape_rng = rng.split()
    noise_rng = rng.split()

    levels = np.linspace(0.0, 1.0, classes)
    n_ch = 2 if weak_channel else 1
    images = np.zeros((n, side, side, n_ch), dtype=np.float32)
    labels = np.zeros((n, side, side), dtype=np.int64)
    for i in range(n):
        lab = labels[i]
        n_shapes = int(shape_rng.integers(0, max_shapes + 1)) if max_shapes else 0
        for _ in range(n_shapes):
            cls = int(shape_rng.integers(1, classes))
            kind = int(shape_rng.integers(0, 2))
            size = int(shape_rng.integers(3, max(4, side // 2)))
            ci = int(shape_rng.integers(0, side))
            cj = int(shape_rng.integers(0, side))
            if kind == 0:
                _paint_rect(lab, ci, cj, size, size, cls)
            else:
                _paint_disc(lab, ci, cj, max(2, size // 2), cls)
        base = levels[lab].astype(np.float32)
        img = base + noise * noise_rng.normal((side, side), dtype=np.float32)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
        if weak_channel:
            contrast, weak_noise = weak_channel
            ch1 = contrast * base + weak_noise * noise_rng.normal((side, side), dtype=np.float32)
            images[i, :, :, 1] = np.clip(ch1, 0.0, 1.0)
    ds = Dataset(x=images, y=labels)
    return ds, target_scene(side, classes)


def load_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian header, unsigned-byte payload).

    Magic 0x00000801 is a label vector, 0x00000803 an image cube. Bytes
    come back as float32 in [0, 255].
    """
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("file too short for an IDX magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_LABEL_MAGIC:
        ndim = 1
    elif magic == IDX_IMAGE_MAGIC:
        ndim = 3
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod([int(d) for d in dims], dtype=object))
    if count > _IDX_MAX_ELEMENTS:
        raise FormatError(f"IDX dimensions overflow: {dims}")
    if len(raw) < header + count:
        raise FormatError(f"truncated IDX payload: expected {count} bytes, "
                          f"got {len(raw) - header}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return data.reshape(dims).astype(np.float32)


def save_tensor(path, t: np.ndarray) -> None:
    """Write a tensor in the TNSR1 container."""
    t = np.ascontiguousarray(t, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TNSR_MAGIC)
        f.write(struct.pack("<I", t.ndim))
        for extent in t.shape:
            f.write(struct.pack("<I", extent))
        f.write(t.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a TNSR1 tensor; bit-exact inverse of :func:`save_tensor`."""
    raw = Path(path).read_bytes()
    if raw[:5] != TNSR_MAGIC:
        raise FormatError("bad TNSR1 magic")
    if len(raw) < 9:
        raise FormatError("truncated TNSR1 header")
    (rank,) = struct.unpack("<I", raw[5:9])
    header = 9 + 4 * rank
    if len(raw) < header:
        raise FormatError("truncated TNSR1 extents")
    shape = struct.unpack(f"<{rank}I", raw[9:header])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(raw) != header + 4 * count:
        raise FormatError(f"TNSR1 payload size mismatch: header says {count} floats, "
                          f"file has {(len(raw) - header) // 4}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header)
    return data.reshape(shape).copy()


@dataclass
class ExperimentRecord:
    """One Pareto-front row: config echo plus measured outcomes.

    Fields that could not be measured stay None with an entry in
    ``reasons`` explaining why.
    """

    sigma: float
    s: int
    eps_train: float
    seed: int
    clean_acc: float
    eps_uni: float | None
    eps_adv: float | None
    delta: float
    wall_s: float
    config: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    reasons: dict = field(default_factory=dict)

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else str(v)
        return [fmt(v) for v in (self.sigma, self.s, self.eps_train, self.seed,
                                 self.clean_acc, self.eps_uni, self.eps_adv,
                                 self.delta, self.wall_s)]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".jsonl")


def write_records(path, records: list[ExperimentRecord]) -> None:
    """Append records to the results CSV and its JSON-lines sidecar.

    The CSV header is fixed; appending to a file with any other header is
    an error. Floats are written with shortest round-trip repr, so parsing
    the file recovers them exactly.
    """
    path = Path(path)
    if path.exists():
        with open(path, newline="") as f:
            first = f.readline().strip()
        if first != RECORD_HEADER:
            raise FormatError(f"existing records file has header {first!r}")
        mode = "a"
    else:
        mode = "w"
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(RECORD_HEADER.split(","))
        for r in records:
            w.writerow(r.csv_row())
    with open(sidecar_path(path), "a") as f:
        for r in records:
            f.write(json.dumps({
                "sigma": r.sigma, "s": r.s, "eps_train": r.eps_train,
                "seed": r.seed, "clean_acc": r.clean_acc,
                "eps_uni": r.eps_uni, "eps_adv": r.eps_adv,
                "delta": r.delta, "wall_s": r.wall_s,
                "config": r.config, "artifacts": r.artifacts,
                "reasons": r.reasons,
            }, sort_keys=True) + "\n")


def parse_records(path) -> list[dict]:
    """Read back a records CSV into dicts with floats restored."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if ",".join(header) != RECORD_HEADER:
            raise FormatError("unexpected records header")
        for raw in reader:
            row = {}
            for key, val in zip(header, raw):
                if val == "":
                    row[key] = None
                elif key in ("s", "seed"):
                    row[key] = int(val)
                else:
                    row[key] = float(val)
            rows.append(row)
    return rows
