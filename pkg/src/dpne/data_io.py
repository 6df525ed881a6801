"""Datasets and file formats.

Covers the synthetic latent-cluster generator, IDX image/label files,
delimited text matrices with min-max normalisation, stratified
subsampling, plain-text embeddings, an npz parameter container, and
receptive field dumps as binary PGM images.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import (
    BadMagic,
    CountMismatch,
    NonNumericCell,
    RaggedRows,
    ShapeMismatch,
    TooFew,
    TruncatedFile,
)
from .network import NetworkParams

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
PARAMS_VERSION = 1


@dataclass
class DataMatrix:
    """A normalised data matrix plus optional labels.

    values are float64 in [0, 1]; feature_range records the raw extent
    before normalisation (scalars or per-column arrays).
    """

    values: np.ndarray
    labels: np.ndarray | None = None
    feature_range: tuple | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass
class SyntheticSpec:
    """Latent Gaussian clusters pushed through a random two-layer decoder."""

    clusters: int = 4
    points_per_cluster: int = 250
    cluster_std: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clusters < 2:
            raise ValueError(f"need at least 2 clusters, got {self.clusters}")
        if self.points_per_cluster < 1:
            raise ValueError(
                f"need at least 1 point per cluster, got {self.points_per_cluster}"
            )
        if self.cluster_std <= 0:
            raise ValueError(f"cluster std must be positive, got {self.cluster_std}")


def gen_synthetic(spec: SyntheticSpec, with_latent: bool = False):
    """Sample 2-d Gaussian clusters and decode them to 100-d observations.

    Cluster centres sit on a radius-10 circle.  The latent points pass
    through two random sigmoid layers (widths 10 then 100) with standard
    normal weights, so observations land strictly inside (0, 1) and no
    further normalisation is needed.
    """
    rng = np.random.default_rng(spec.seed)
    angles = 2.0 * np.pi * np.arange(spec.clusters) / spec.clusters
    centers = 10.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    blocks = [
        centers[c] + spec.cluster_std * rng.standard_normal((spec.points_per_cluster, 2))
        for c in range(spec.clusters)
    ]
    latent = np.vstack(blocks)
    labels = np.repeat(np.arange(spec.clusters), spec.points_per_cluster)
    w1 = rng.standard_normal((10, 2))
    w2 = rng.standard_normal((100, 10))
    values = expit(expit(latent @ w1.T) @ w2.T)
    dm = DataMatrix(values, labels, feature_range=(0.0, 1.0))
    if with_latent:
        return dm, latent
    return dm


def _read_idx_header(raw: bytes, path, expected_magic: int, ndim: int):
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header needs {header} bytes, file has {len(raw)}")
    fields = struct.unpack(f">{1 + ndim}i", raw[:header])
    if fields[0] != expected_magic:
        raise BadMagic(f"{path}: magic {fields[0]}, expected {expected_magic}")
    return fields[1:], header


def load_idx(images_path, labels_path=None) -> DataMatrix:
    """Read big-endian IDX images (and optionally labels) as rows in [0, 1].

    Pixel bytes are divided by 255; feature_range records the raw (0, 255).
    """
    raw = Path(images_path).read_bytes()
    (n, rows, cols), offset = _read_idx_header(raw, images_path, IDX_IMAGES_MAGIC, 3)
    count = n * rows * cols
    if len(raw) < offset + count:
        raise TruncatedFile(
            f"{images_path}: payload needs {count} bytes, found {len(raw) - offset}"
        )
    values = (
        np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)
        .reshape(n, rows * cols)
        .astype(float)
        / 255.0
    )
    labels = None
    if labels_path is not None:
        lraw = Path(labels_path).read_bytes()
        (ln,), loff = _read_idx_header(lraw, labels_path, IDX_LABELS_MAGIC, 1)
        if ln != n:
            raise CountMismatch(f"{images_path} has {n} images but {labels_path} has {ln} labels")
        if len(lraw) < loff + ln:
            raise TruncatedFile(f"{labels_path}: payload needs {ln} bytes")
        labels = np.frombuffer(lraw, dtype=np.uint8, count=ln, offset=loff).astype(np.int64)
    return DataMatrix(values, labels, feature_range=(0.0, 255.0))


def save_idx(images_path, values: np.ndarray, labels_path=None, labels=None, image_shape=None):
    """Write rows of [0, 1] values as IDX ubyte images (rounded to 255ths)."""
    values = np.asarray(values, dtype=float)
    n, m = values.shape
    if image_shape is None:
        side = int(np.sqrt(m))
        image_shape = (side, side) if side * side == m else (1, m)
    rows, cols = image_shape
    if rows * cols != m:
        raise ShapeMismatch(f"image shape {image_shape} does not cover {m} pixels")
    pixels = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    if labels_path is not None:
        lab = np.asarray(labels).astype(np.uint8)
        if lab.shape[0] != n:
            raise CountMismatch(f"{n} images vs {lab.shape[0]} labels")
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">ii", IDX_LABELS_MAGIC, n))
            fh.write(lab.tobytes())


def _read_table(path, delimiter=None) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(delimiter) if delimiter else line.split()
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise RaggedRows(
                    f"{path}: line {lineno} has {len(cells)} columns, expected {width}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(i for i, c in enumerate(cells) if not _is_number(c))
                raise NonNumericCell(
                    f"{path}: line {lineno}, column {bad + 1}: {cells[bad]!r}"
                ) from None
    if not rows:
        raise TooFew(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def load_delimited(path, delimiter=None, label_column=None) -> DataMatrix:
    """Read a delimited text matrix and min-max normalise each column to [0, 1].

    Constant columns map to zero.  label_column (may be negative) is pulled
    out as integer labels before normalisation.  feature_range keeps the raw
    per-column minima and maxima.
    """
    table = _read_table(path, delimiter)
    labels = None
    if label_column is not None:
        ncol = table.shape[1]
        if not -ncol <= label_column < ncol:
            raise ShapeMismatch(f"label column {label_column} out of range for {ncol} columns")
        labels = np.rint(table[:, label_column]).astype(np.int64)
        table = np.delete(table, label_column, axis=1)
    if table.shape[1] == 0:
        raise TooFew(f"{path}: no feature columns left")
    mins = table.min(axis=0)
    maxs = table.max(axis=0)
    span = maxs - mins
    safe = np.where(span > 0.0, span, 1.0)
    values = (table - mins) / safe
    return DataMatrix(values, labels, feature_range=(mins, maxs))


def subsample(dm: DataMatrix, n: int, seed: int = 0, stratified: bool = False) -> DataMatrix:
    """Pick n rows without replacement; stratified keeps class shares.

    Stratified allocation uses largest remainders (ties to the smaller
    class id).  Selected indices are sorted so row order stays stable.
    """
    total = dm.n
    if n > total:
        raise TooFew(f"asked for {n} of {total} rows")
    rng = np.random.default_rng(seed)
    if stratified:
        if dm.labels is None:
            raise ValueError("stratified subsampling needs labels")
        classes, counts = np.unique(dm.labels, return_counts=True)
        shares = n * counts / total
        alloc = np.floor(shares).astype(np.int64)
        rest = shares - alloc
        order = np.lexsort((np.arange(len(classes)), -rest))
        for idx in order[: n - alloc.sum()]:
            alloc[idx] += 1
        picked = []
        for cls, take in zip(classes, alloc):
            pool = np.flatnonzero(dm.labels == cls)
            if take > pool.size:
                raise TooFew(f"class {cls} has {pool.size} rows, need {take}")
            picked.append(rng.choice(pool, size=take, replace=False))
        idx = np.sort(np.concatenate(picked))
    else:
        idx = np.sort(rng.choice(total, size=n, replace=False))
    labels = dm.labels[idx] if dm.labels is not None else None
    return DataMatrix(dm.values[idx], labels, dm.feature_range)


def save_embedding(path, h: np.ndarray, labels=None) -> None:
    """Write rows as space-delimited %.17g text, optional integer label column."""
    h = np.atleast_2d(np.asarray(h, dtype=float))
    if labels is None:
        np.savetxt(path, h, fmt="%.17g", delimiter=" ")
    else:
        labels = np.asarray(labels).reshape(-1, 1)
        if labels.shape[0] != h.shape[0]:
            raise CountMismatch(f"{h.shape[0]} rows vs {labels.shape[0]} labels")
        cols = np.hstack([h, labels.astype(float)])
        np.savetxt(path, cols, fmt=["%.17g"] * h.shape[1] + ["%d"], delimiter=" ")


def load_embedding(path, labeled: bool = False):
    """Read an embedding written by save_embedding; returns (H, labels_or_None)."""
    table = _read_table(path, None)
    if labeled:
        if table.shape[1] < 2:
            raise ShapeMismatch(f"{path}: need at least 2 columns for a labeled embedding")
        return table[:, :-1], np.rint(table[:, -1]).astype(np.int64)
    return table, None


def save_labels(path, labels) -> None:
    np.savetxt(path, np.asarray(labels).reshape(-1, 1), fmt="%d")


def load_labels(path) -> np.ndarray:
    table = _read_table(path, None)
    if table.shape[1] != 1:
        raise ShapeMismatch(f"{path}: labels file must have one column")
    return np.rint(table[:, 0]).astype(np.int64)


def save_train_log(path, log) -> None:
    """Five columns per iteration: iter, O_rec, O_reg, O_dp, total."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(
                f"{rec.iteration:d} {rec.o_rec:.17g} {rec.o_reg:.17g} "
                f"{rec.o_dp:.17g} {rec.total:.17g}\n"
            )


def save_params(path, params: NetworkParams) -> None:
    """Versioned npz container for network weights and biases."""
    payload = {
        "version": np.int64(PARAMS_VERSION),
        "sizes": np.asarray(params.sizes, dtype=np.int64),
        "linear_layer": np.int64(-1 if params.linear_layer is None else params.linear_layer),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"w{i}"] = w
        payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_params(path) -> NetworkParams:
    with np.load(path, allow_pickle=False) as data:
        if "version" not in data or int(data["version"]) != PARAMS_VERSION:
            raise BadMagic(f"{path}: unsupported params container version")
        sizes = tuple(int(s) for s in data["sizes"])
        linear = int(data["linear_layer"])
        depth = len(sizes) - 1
        weights = [data[f"w{i}"] for i in range(depth)]
        biases = [data[f"b{i}"] for i in range(depth)]
    return NetworkParams(sizes, weights, biases, None if linear < 0 else linear)


def save_receptive_fields(params: NetworkParams, layer: int, count: int, side: int, out_dir):
    """Dump rows of one weight matrix as 8-bit PGM images.

    Each row is mapped symmetrically: pixel = round((w + m) / (2m) * 255)
    with m the row's max |w|, so zero weights land mid-gray.  An all-zero
    row is written as uniform 128.
    """
    if not 1 <= layer <= params.depth:
        raise ShapeMismatch(f"layer {layer} out of range for depth {params.depth}")
    w = params.weights[layer - 1]
    if side * side != w.shape[1]:
        raise ShapeMismatch(f"side {side} does not square to fan-in {w.shape[1]}")
    if count > w.shape[0]:
        raise ShapeMismatch(f"asked for {count} fields, layer has {w.shape[0]} units")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{side} {side}\n255\n".encode("ascii")
    written = []
    for i in range(count):
        row = w[i]
        m = np.abs(row).max()
        if m > 0.0:
            pixels = np.rint((row + m) / (2.0 * m) * 255.0).astype(np.uint8)
        else:
            pixels = np.full(row.shape, 128, dtype=np.uint8)
        path = out_dir / f"field_{i:04d}.pgm"
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(pixels.tobytes())
        written.append(path)
    return written
