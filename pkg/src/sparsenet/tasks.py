"""Datasets: the class-conditional rotate/shear image regression task and IDX files.

Sources are synthetic smooth blobs by default.  Each class owns a prototype
arrangement of 2-4 Gaussians and every example jitters it, so the class (and
hence its transform) can be read off the input, as with digit images.
"""
from __future__ import annotations

import csv
import gzip
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TransformTask:
    image_side: int = 12
    classes: int = 10
    train_per_class: int = 1000
    test_per_class: int = 200
    angle_step: float = 30.0
    max_shear: float = 0.6
    jitter: float = 1.7

    def __post_init__(self):
        if self.image_side < 4:
            raise ValueError("image_side must be >= 4")
        if self.classes < 1:
            raise ValueError("need at least one class")

    @property
    def dim(self) -> int:
        return self.image_side ** 2


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have the same number of rows")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.inputs[idx], self.targets[idx], self.split, labels, dict(self.meta))


# Image transforms -------------------------------------------------------------

def transform_image(img: np.ndarray, angle_deg: float, shear: float) -> np.ndarray:
    """Rotate about the centre, then shear, resampling bilinearly with zero padding.

    Coordinates are (row, col) offsets from the centre.  A positive angle turns
    the picture counter-clockwise as displayed (rows grow downwards); the shear
    maps ``col -> col + shear * row``.
    """
    img = np.asarray(img, dtype=np.float64)
    if angle_deg == 0 and shear == 0:
        return img.copy()
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    # forward map on (row, col): rotation, then shear
    rot = np.array([[c, -s], [s, c]])
    shr = np.array([[1.0, 0.0], [shear, 1.0]])
    fwd = shr @ rot
    inv = np.linalg.inv(fwd)
    centre = (np.array(img.shape, dtype=np.float64) - 1) / 2
    offset = centre - inv @ centre
    return ndimage.affine_transform(img, inv, offset=offset, order=1, mode="grid-constant",
                                   cval=0.0)


def class_transforms(task: TransformTask, seed: int) -> list[tuple[float, float]]:
    """(angle in degrees, shear) per class; angles are multiples of the step."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    shears = rng.uniform(-task.max_shear, task.max_shear, size=task.classes)
    return [(task.angle_step * k, float(shears[k])) for k in range(task.classes)]


def _blob_image(side: int, blobs: np.ndarray) -> np.ndarray:
    rr, cc = np.mgrid[0:side, 0:side].astype(np.float64)
    img = np.zeros((side, side))
    for r, c, sigma, amp in blobs:
        img += amp * np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * sigma ** 2))
    return img


def _prototypes(task: TransformTask, rng: np.random.Generator) -> list[np.ndarray]:
    side = task.image_side
    centre = (side - 1) / 2
    protos = []
    for _ in range(task.classes):
        k = int(rng.integers(2, 5))
        radius = rng.uniform(0, side / 4, size=k)
        theta = rng.uniform(0, 2 * np.pi, size=k)
        sigma = rng.uniform(side / 14, side / 8, size=k)
        amp = rng.uniform(0.5, 1.0, size=k)
        protos.append(np.column_stack([centre + radius * np.sin(theta),
                                       centre + radius * np.cos(theta), sigma, amp]))
    return protos


def _jitter(proto: np.ndarray, side: int, rng: np.random.Generator, scale: float) -> np.ndarray:
    b = proto.copy()
    b[:, :2] += rng.normal(0, scale * side / 24, size=(len(b), 2))
    b[:, 2] *= np.exp(rng.normal(0, 0.15 * scale, size=len(b)))
    b[:, 3] *= np.exp(rng.normal(0, 0.2 * scale, size=len(b)))
    return b


def generate_transform_task(task: TransformTask, seed: int = 0, source: Dataset | None = None
                            ) -> tuple[Dataset, Dataset]:
    """Train and test splits of (source image, transformed image) pairs.

    With ``source`` given (e.g. MNIST via :func:`load_idx`), its labelled images
    are used instead of blobs; they are resized to ``image_side`` if needed.
    """
    transforms = class_transforms(task, seed)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    side = task.image_side
    per_class = task.train_per_class + task.test_per_class

    if source is None:
        protos = _prototypes(task, rng)
        images = {k: [_blob_image(side, _jitter(protos[k], side, rng, task.jitter))
                      for _ in range(per_class)]
                  for k in range(task.classes)}
    else:
        images = _images_from_source(source, task, rng)

    splits = {"train": ([], [], []), "test": ([], [], [])}
    for k in range(task.classes):
        angle, shear = transforms[k]
        for i, img in enumerate(images[k]):
            split = "train" if i < task.train_per_class else "test"
            xs, ys, ls = splits[split]
            xs.append(img.ravel())
            ys.append(transform_image(img, angle, shear).ravel())
            ls.append(k)
    meta = {"order": "rotate-then-shear", "transforms": transforms, "seed": seed,
            "image_side": side}
    out = []
    for split in ("train", "test"):
        xs, ys, ls = splits[split]
        perm = rng.permutation(len(xs))
        out.append(Dataset(np.array(xs)[perm], np.array(ys)[perm], split,
                           np.array(ls, dtype=np.int64)[perm], dict(meta)))
    return out[0], out[1]


def _images_from_source(source: Dataset, task: TransformTask, rng) -> dict[int, list[np.ndarray]]:
    if source.labels is None:
        raise ValueError("source images need labels")
    n_side = int(round(math.sqrt(source.inputs.shape[1])))
    per_class = task.train_per_class + task.test_per_class
    images = {}
    for k in range(task.classes):
        idx = np.flatnonzero(source.labels == k)
        if len(idx) < per_class:
            raise ValueError(f"class {k}: need {per_class} source images, have {len(idx)}")
        idx = rng.choice(idx, size=per_class, replace=False)
        imgs = []
        for i in idx:
            img = source.inputs[i].reshape(n_side, n_side)
            if n_side != task.image_side:
                img = ndimage.zoom(img, task.image_side / n_side, order=1)
            imgs.append(img)
        images[k] = imgs
    return images


# IDX files --------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    return gzip.decompress(data) if path.suffix == ".gz" else data


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (magic 0x801 labels, 0x803 images)."""
    data = _read_bytes(path)
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset 0 ({len(data)} bytes)")
    (magic,) = struct.unpack(">I", data[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise IdxFormatError(f"{path}: bad magic number 0x{magic:08x} at offset 0")
    ndim = 3 if magic == IDX_IMAGES_MAGIC else 1
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise IdxFormatError(
            f"{path}: truncated payload at offset {len(data)}, expected {header + size} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(a.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D labels and 3-D images")
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())


def load_idx(images_path, labels_path=None) -> Dataset:
    """Images scaled to [0, 1], flattened; targets are one-hot labels when given."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: not an image file")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    if labels_path is None:
        return Dataset(x, np.zeros((len(x), 0)))
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: not a label file")
    if len(labels) != len(images):
        raise IdxFormatError(
            f"dimension mismatch: {len(images)} images but {len(labels)} labels")
    labels = labels.astype(np.int64)
    onehot = np.zeros((len(labels), int(labels.max()) + 1 if len(labels) else 0))
    onehot[np.arange(len(labels)), labels] = 1.0
    return Dataset(x, onehot, labels=labels)


# Export -------------------------------------------------------------------------

_CONTAINER_MAGIC = b"SNDSET01"


def save_dataset(path, ds: Dataset) -> None:
    """Binary container: magic, three little-endian u64 dims (rows, in, out), then
    inputs and targets as little-endian f64, row-major."""
    x = np.ascontiguousarray(ds.inputs, dtype="<f8")
    y = np.ascontiguousarray(ds.targets, dtype="<f8")
    with open(path, "wb") as f:
        f.write(_CONTAINER_MAGIC)
        f.write(struct.pack("<3Q", x.shape[0], x.shape[1], y.shape[1]))
        f.write(x.tobytes())
        f.write(y.tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    data = Path(path).read_bytes()
    if data[:8] != _CONTAINER_MAGIC:
        raise ValueError(f"{path}: not a dataset container")
    n, d, k = struct.unpack("<3Q", data[8:32])
    body = np.frombuffer(data, dtype="<f8", offset=32)
    if body.size != n * (d + k):
        raise ValueError(f"{path}: expected {n * (d + k)} values, found {body.size}")
    x = body[:n * d].reshape(n, d).astype(np.float64)
    y = body[n * d:].reshape(n, k).astype(np.float64)
    return Dataset(x, y, split)


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d, k = ds.inputs.shape[1], ds.targets.shape[1]
    w.writerow(["label"] + [f"x{i}" for i in range(d)] + [f"y{i}" for i in range(k)])
    for i in range(len(ds)):
        label = "" if ds.labels is None else int(ds.labels[i])
        w.writerow([label] + [repr(float(v)) for v in ds.inputs[i]]
                   + [repr(float(v)) for v in ds.targets[i]])
    return buf.getvalue()
