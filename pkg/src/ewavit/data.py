"""Datasets: a seeded synthetic image generator plus IDX and CSV readers.

Dataset specs are short strings, e.g.::

    synthetic:n=4096,classes=10,size=32,seed=7
    idx:images=train-images.idx3-ubyte,labels=train-labels.idx1-ubyte
    csv:path=train.csv,channels=1
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class ArrayDataset:
    images: np.ndarray  # [n, C, H, W] float64
    labels: np.ndarray  # [n] int64
    n_classes: int
    seed: int = 0

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [n, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError("image and label counts differ")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        return ((self.images[i], int(self.labels[i])) for i in self.epoch_order(0))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def epoch_order(self, epoch: int, shuffle: bool = True) -> np.ndarray:
        if not shuffle:
            return np.arange(len(self))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self))

    def batches(self, batch_size: int, epoch: int = 0,
                shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.epoch_order(epoch, shuffle)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def parse_spec(spec: str) -> tuple[str, dict[str, str]]:
    kind, _, rest = spec.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise DatasetError(f"malformed dataset spec item {item!r} in {spec!r}")
        params[key.strip()] = value.strip()
    return kind.strip(), params


def load_dataset(spec: str, base_dir: str | Path | None = None) -> ArrayDataset:
    kind, p = parse_spec(spec)
    shuffle_seed = int(p.pop("shuffle_seed", p.get("seed", 0)))

    def path(key):
        if key not in p:
            raise DatasetError(f"{kind} dataset spec needs {key}=...")
        f = Path(p[key])
        return f if f.is_absolute() or base_dir is None else Path(base_dir) / f

    if kind == "synthetic":
        known = {"n", "classes", "size", "channels", "seed", "template_seed", "noise", "max_shift",
                 "contrast"}
        unknown = set(p) - known
        if unknown:
            raise DatasetError(f"unknown synthetic parameters {sorted(unknown)}")
        return synthetic(
            n=int(p.get("n", 4096)), classes=int(p.get("classes", 10)), size=int(p.get("size", 32)),
            channels=int(p.get("channels", 3)), seed=int(p.get("seed", 0)),
            template_seed=int(p.get("template_seed", 0)), noise=float(p.get("noise", 1.0)),
            max_shift=int(p.get("max_shift", 2)), contrast=float(p.get("contrast", 0.3)))
    if kind == "idx":
        images = read_idx(path("images"))
        labels = read_idx(path("labels"))
        if images.ndim == 3:
            images = images[:, None]
        if labels.ndim != 1:
            raise DatasetError(f"label file must be 1-D, got shape {labels.shape}")
        scale = 255.0 if images.dtype == np.uint8 else 1.0
        return _finish(images.astype(np.float64) / scale, labels, p, shuffle_seed)
    if kind == "csv":
        images, labels = read_csv(path("path"), int(p.get("channels", 1)))
        return _finish(images, labels, p, shuffle_seed)
    raise DatasetError(f"unknown dataset kind {kind!r}")


def _finish(images, labels, p, seed) -> ArrayDataset:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0:
        raise DatasetError("negative label")
    n_classes = int(p.get("classes", int(labels.max(initial=0)) + 1))
    if labels.max(initial=0) >= n_classes:
        raise DatasetError(f"label {labels.max()} >= classes={n_classes}")
    return ArrayDataset(np.ascontiguousarray(images, dtype=np.float64), labels, n_classes, seed)


def class_templates(classes: int, size: int, channels: int, template_seed: int) -> np.ndarray:
    """Smooth random prototype image per class: a few oriented sinusoids plus a blob."""
    rng = np.random.default_rng([template_seed, 0x5eed])
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((classes, channels, size, size))
    for c in range(classes):
        for ch in range(channels):
            img = np.zeros((size, size))
            for _ in range(3):
                fx, fy = rng.uniform(-3, 3, 2)
                phase = rng.uniform(0, 2 * np.pi)
                img += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
            cx, cy = rng.uniform(0.2, 0.8, 2)
            img += 2.0 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.02) * rng.choice([-1.0, 1.0])
            out[c, ch] = img / img.std()
    return out


def synthetic(n: int = 4096, classes: int = 10, size: int = 32, channels: int = 3, seed: int = 0,
              template_seed: int = 0, noise: float = 1.0, max_shift: int = 2,
              contrast: float = 0.3) -> ArrayDataset:
    """Class-balanced noisy, shifted and rescaled copies of per-class templates.

    Labels are ``arange(n) % classes`` shuffled, so class counts differ by at most one.
    Train and test sets built with the same ``template_seed`` share their classes.
    """
    rng = np.random.default_rng([seed, 0xda7a])
    templates = class_templates(classes, size, channels, template_seed)
    labels = rng.permutation(np.arange(n) % classes)
    images = templates[labels].copy()
    if max_shift:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (dy, dx), axis=(1, 2))
    scale = 1.0 + contrast * rng.uniform(-1.0, 1.0, size=(n, 1, 1, 1))
    images = images * scale + noise * rng.standard_normal(images.shape)
    return ArrayDataset(images, labels.astype(np.int64), classes, seed)


# IDX: big-endian magic 0x0000 <dtype> <ndim>, then ndim big-endian u32 dims, then data.
_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header at byte offset {len(raw)}")
    zero, code, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0:
        raise DatasetError(f"{path}: bad IDX magic at byte offset 0 (first two bytes must be zero)")
    if code not in _IDX_TYPES:
        raise DatasetError(f"{path}: unknown IDX type code 0x{code:02x} at byte offset 2")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX dimensions at byte offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    dtype = _IDX_TYPES[code]
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != need:
        raise DatasetError(f"{path}: IDX payload size mismatch at byte offset {min(len(raw), need)}: "
                           f"expected {need} bytes total, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    codes = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    key = arr.dtype.newbyteorder("=")
    if key not in codes:
        raise DatasetError(f"dtype {arr.dtype} has no IDX code")
    code = codes[key]
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_TYPES[code]).tobytes())


def read_csv(path: str | Path, channels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``label,pixel,pixel,...`` with square images of ``channels`` planes."""
    labels, rows = [], []
    width = None
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            text = line.strip()
            if text:
                fields = text.split(b",")
                try:
                    label = int(fields[0])
                    pixels = [float(x) for x in fields[1:]]
                except ValueError as exc:
                    raise DatasetError(f"{path}: unparsable row at byte offset {offset}: {exc}") from None
                if width is None:
                    width = len(pixels)
                elif len(pixels) != width:
                    raise DatasetError(f"{path}: row at byte offset {offset} has {len(pixels)} pixels, "
                                       f"expected {width}")
                labels.append(label)
                rows.append(pixels)
            offset += len(line)
    if not rows:
        raise DatasetError(f"{path}: no rows")
    side = int(round((width / channels) ** 0.5))
    if channels * side * side != width:
        raise DatasetError(f"{path}: {width} pixels per row is not {channels} square planes")
    images = np.asarray(rows, dtype=np.float64).reshape(-1, channels, side, side)
    return images, np.asarray(labels, dtype=np.int64)
