"""Datasets, file ingestion and corruption injection.

Three dataset sources are supported:

* ``csv``: header ``id,label,f0,...,f{d-1}``, UTF-8, decimal floats.
* ``idx``: the big-endian MNIST container (image magic 0x00000803, label
  magic 0x00000801); pixel bytes are scaled to [0, 1].
* ``blobs``: seeded isotropic Gaussian clusters.

Every corruption routine returns a :class:`CorruptionLog` from which the clean
dataset can be rebuilt exactly with :func:`restore`.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: tuple
    n_classes: int
    group_of: Optional[dict] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError(f"features must be a 2-d matrix, got shape {feats.shape}")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or (labels.size and not np.issubdtype(labels.dtype, np.integer)):
            raise DataError("labels must be a 1-d integer vector")
        labels = labels.astype(np.int64)
        ids = tuple(str(i) for i in self.ids)
        n = feats.shape[0]
        if labels.shape[0] != n or len(ids) != n:
            raise DataError(
                f"row count mismatch: features {n}, labels {labels.shape[0]}, ids {len(ids)}"
            )
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if n and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DataError(f"label out of range [0, {self.n_classes})")
        if not np.all(np.isfinite(feats)):
            raise DataError("non-finite feature value")
        if len(set(ids)) != n:
            raise DataError("ids must be pairwise distinct")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return Dataset(
            self.features[idx], self.labels[idx], tuple(self.ids[i] for i in idx), self.n_classes
        )

    def without(self, indices) -> "Dataset":
        keep = np.ones(self.n, dtype=bool)
        keep[np.asarray(indices, dtype=np.int64)] = False
        return self.subset(np.flatnonzero(keep))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.d != self.d or other.n_classes != self.n_classes:
            raise DataError("cannot concatenate datasets of different shape")
        return Dataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.ids + other.ids,
            self.n_classes,
        )

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.features, np.asarray(labels), self.ids, self.n_classes, self.group_of)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and self.ids == other.ids
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.features, other.features)
        )

    def index_of(self, ident: str) -> int:
        try:
            return self.ids.index(ident)
        except ValueError:
            raise DataError(f"unknown id {ident!r}") from None


# --- corruption records -------------------------------------------------------


@dataclass(frozen=True)
class CorruptionEntry:
    index: int
    original_label: int
    new_label: int
    kind: str  # "mislabel" | "leak"
    duplicate_of: Optional[str] = None

    def to_dict(self):
        out = {
            "index": self.index,
            "original_label": self.original_label,
            "new_label": self.new_label,
            "kind": "mislabel" if self.kind == "mislabel" else "leak-duplicate-of",
        }
        if self.duplicate_of is not None:
            out["duplicate_of"] = self.duplicate_of
        return out


@dataclass
class CorruptionLog:
    entries: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        for e in self.entries:
            if e.kind == "mislabel" and e.new_label == e.original_label:
                raise DataError(f"mislabel entry at {e.index} keeps its label")

    def mislabeled_indices(self) -> np.ndarray:
        return np.array([e.index for e in self.entries if e.kind == "mislabel"], dtype=np.int64)

    def leaked(self) -> dict:
        """Map of leaked train index to the id of the test point it copies."""
        return {e.index: e.duplicate_of for e in self.entries if e.kind == "leak"}

    def to_dict(self):
        return {"seed": self.seed, "entries": [e.to_dict() for e in self.entries]}


def restore(data: Dataset, log: CorruptionLog) -> Dataset:
    """Undo the corruption described by ``log``."""
    labels = data.labels.copy()
    for e in log.entries:
        if e.kind == "mislabel":
            labels[e.index] = e.original_label
    out = data.with_labels(labels)
    leaked = [e.index for e in log.entries if e.kind == "leak"]
    return out.without(leaked) if leaked else out


def flip_labels(labels, indices, n_classes, rng) -> np.ndarray:
    """New labels for ``indices``, uniform over the wrong classes."""
    offsets = rng.integers(1, n_classes, size=len(indices))
    return (np.asarray(labels)[indices] + offsets) % n_classes


def inject_mislabels(data: Dataset, ratio: float, seed: int):
    if not 0.0 <= ratio <= 1.0:
        raise DataError("mislabel ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    m = int(np.floor(ratio * data.n))
    idx = np.sort(rng.choice(data.n, size=m, replace=False))
    new = flip_labels(data.labels, idx, data.n_classes, rng)
    labels = data.labels.copy()
    labels[idx] = new
    entries = [
        CorruptionEntry(int(i), int(data.labels[i]), int(v), "mislabel") for i, v in zip(idx, new)
    ]
    return data.with_labels(labels), CorruptionLog(entries, seed)


def inject_leak(train: Dataset, test_pool: Dataset, n_leaks: int, seed: int):
    """Copy ``n_leaks`` test points into ``train``.

    Returns the enlarged train set, the test set made of exactly the leaked
    points, and the log mapping each leaked copy to its source id.
    """
    if n_leaks <= 0:
        raise DataError("no leak requested")
    if n_leaks > test_pool.n:
        raise DataError(f"cannot leak {n_leaks} points from a pool of {test_pool.n}")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(test_pool.n, size=n_leaks, replace=False))
    tst = test_pool.subset(pick)
    copies = Dataset(
        tst.features, tst.labels, tuple(f"{i}#leak" for i in tst.ids), train.n_classes
    )
    new_train = train.concat(copies)
    entries = [
        CorruptionEntry(train.n + k, int(tst.labels[k]), int(tst.labels[k]), "leak", tst.ids[k])
        for k in range(n_leaks)
    ]
    return new_train, tst, CorruptionLog(entries, seed)


# --- loaders ------------------------------------------------------------------


def make_blobs(n, d, n_classes, class_means_scale=1.0, seed=0, prefix="blob") -> Dataset:
    """Isotropic unit-variance clusters around means drawn from N(0, scale^2)."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_means_scale, size=(n_classes, d))
    labels = rng.permutation(np.arange(n) % n_classes)
    feats = means[labels] + rng.normal(size=(n, d))
    return Dataset(feats, labels, tuple(f"{prefix}-{i}" for i in range(n)), n_classes)


def read_csv(path, n_classes: Optional[int] = None) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 2
        expected = ["id", "label"] + [f"f{j}" for j in range(d)]
        if header != expected:
            raise DataError(f"{path}: header must be id,label,f0..f{{d-1}}, got {header[:4]}...")
        ids, labels, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DataError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            ids.append(row[0])
            try:
                labels.append(int(row[1]))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    labels = np.array(labels, dtype=np.int64)
    feats = np.array(rows, dtype=np.float64).reshape(len(ids), d)
    if n_classes is None:
        n_classes = max(int(labels.max()) + 1 if labels.size else 2, 2)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"{path}: label out of range [0, {n_classes})")
    return Dataset(feats, labels, tuple(ids), n_classes)


def write_csv(data: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"f{j}" for j in range(data.d)])
        for i in range(data.n):
            w.writerow([data.ids[i], int(data.labels[i])] + [repr(float(v)) for v in data.features[i]])


def _read_idx(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DataError(f"{path}: payload has {len(raw) - header} bytes, header declares {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(images_path, labels_path, n_classes=10, limit=None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"dimension mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    labels = labels.astype(np.int64)
    if labels.size and labels.max() >= n_classes:
        raise DataError(f"label out of range [0, {n_classes})")
    n = images.shape[0] if limit is None else min(limit, images.shape[0])
    feats = images[:n].reshape(n, -1).astype(np.float64) / 255.0
    return Dataset(feats, labels[:n], tuple(f"idx-{i}" for i in range(n)), n_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGE_MAGIC))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_LABEL_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


_INT_KEYS = {"n", "d", "C", "n_classes", "seed", "limit"}


def parse_descriptor(text: str) -> dict:
    """Parse a CLI descriptor such as ``blobs:n=200,d=2,C=2,seed=1``,
    ``csv:train.csv`` or ``idx:images.idx,labels.idx``."""
    kind, _, rest = text.partition(":")
    kind = kind.strip().lower()
    if kind == "blobs":
        desc = {"kind": "blobs"}
        for item in filter(None, rest.split(",")):
            key, eq, val = item.partition("=")
            if not eq:
                raise DataError(f"bad blobs option {item!r}")
            key = key.strip()
            desc[key] = int(val) if key in _INT_KEYS else float(val)
        return desc
    if kind == "csv" and rest:
        return {"kind": "csv", "path": rest}
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise DataError("idx descriptor needs images_path,labels_path")
        return {"kind": "idx", "images_path": parts[0], "labels_path": parts[1]}
    raise DataError(f"unrecognised dataset descriptor {text!r}")


def load_dataset(descriptor) -> Dataset:
    if isinstance(descriptor, str):
        descriptor = parse_descriptor(descriptor)
    desc = dict(descriptor)
    kind = desc.pop("kind", None)
    if kind == "blobs":
        try:
            return make_blobs(
                int(desc["n"]),
                int(desc["d"]),
                int(desc.get("C", desc.get("n_classes", 2))),
                float(desc.get("class_means_scale", 1.0)),
                int(desc.get("seed", 0)),
            )
        except KeyError as exc:
            raise DataError(f"blobs descriptor missing {exc}") from None
    if kind == "csv":
        return read_csv(desc["path"], desc.get("n_classes"))
    if kind == "idx":
        return read_idx(
            desc["images_path"], desc["labels_path"], desc.get("n_classes", 10), desc.get("limit")
        )
    raise DataError(f"unknown dataset kind {kind!r}")


def split(data: Dataset, sizes: Sequence[int], seed: int):
    """Seeded disjoint random split into pieces of the given sizes."""
    if sum(sizes) > data.n:
        raise DataError(f"split sizes {list(sizes)} exceed dataset size {data.n}")
    perm = np.random.default_rng(seed).permutation(data.n)
    out, start = [], 0
    for s in sizes:
        out.append(data.subset(np.sort(perm[start : start + s])))
        start += s
    return out
