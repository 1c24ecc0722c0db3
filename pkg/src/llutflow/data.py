"""Dataset ingestion: IDX images, schema-driven CSV tables, synthetic tasks.

CSV schemas are YAML mappings::

    label: {column: label, categories: [...]}   # or {onehot: [col, ...]}
    split_column: split                         # optional, values train/test
    columns:
      - {name: dur, kind: numeric}
      - {name: proto, kind: categorical, categories: auto, size: 32}
      - {name: sbytes, kind: threshold, bits: 14}
      - {name: is_ftp_login, kind: bit}

``numeric`` columns are kept as reals; ``categorical`` columns become one-hot
bits (``auto`` categories are the ``size - 1`` most frequent training values,
ties broken by name, plus one trailing "other" bit); ``threshold`` columns
become ``bits`` thermometer bits at training-split quantiles; ``bit`` columns
are 0/1 flags (non-zero means 1). The expanded feature count is fixed by the
schema alone.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np
import yaml

from .errors import DataError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


@dataclass
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    splits: dict = field(default_factory=dict)
    image_shape: Optional[tuple] = None
    feature_names: Optional[list] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"{self.name}: features must be a [rows, features] matrix")
        if len(self.labels) != len(self.features):
            raise DataError(f"{self.name}: {len(self.labels)} labels for {len(self.features)} rows")
        if not self.splits:
            self.splits = {"train": np.arange(len(self.labels))}
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}
        seen = np.zeros(len(self.labels), dtype=bool)
        for k, idx in self.splits.items():
            if np.any(seen[idx]):
                raise DataError(f"{self.name}: split {k!r} overlaps another split")
            seen[idx] = True

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise DataError(f"{self.name}: no split named {name!r}")
        idx = self.splits[name]
        return self.features[idx], self.labels[idx]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        for k in sorted(self.splits):
            h.update(k.encode())
            h.update(self.splits[k].tobytes())
        return h.hexdigest()


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> Dataset:
    """Deterministic random re-split of every row into train/test."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds.labels))
    n_test = int(round(len(order) * test_fraction))
    return Dataset(ds.name, ds.features, ds.labels,
                   {"train": np.sort(order[n_test:]), "test": np.sort(order[:n_test])},
                   ds.image_shape, ds.feature_names)


def subsample(ds: Dataset, split: str, rows: int, seed: int) -> Dataset:
    """Cap one split at ``rows`` rows (uniform without replacement)."""
    idx = ds.splits[split]
    if rows >= len(idx):
        return ds
    keep = np.sort(np.random.default_rng(seed).choice(idx, size=rows, replace=False))
    splits = dict(ds.splits)
    splits[split] = keep
    return Dataset(ds.name, ds.features, ds.labels, splits, ds.image_shape, ds.feature_names)


# ------------------------------------------------------------------ IDX files

def _read_bytes(path: Union[str, Path]) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int) -> tuple[tuple, bytes]:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at offset 0")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataError(f"{path}: bad magic {got} (expected {magic})")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise DataError(f"{path}: truncated data at offset {len(raw)} (expected {need} bytes)")
    return dims, raw[header:need]


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into 784-wide rows."""
    dims, body = _parse_idx(_read_bytes(images_path), images_path, IDX_IMAGES_MAGIC)
    (count,), lbody = _parse_idx(_read_bytes(labels_path), labels_path, IDX_LABELS_MAGIC)
    if dims[0] != count:
        raise DataError(f"{images_path} has {dims[0]} images but {labels_path} has {count} labels")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(dims[0], -1)
    labels = np.frombuffer(lbody, dtype=np.uint8)
    return Dataset(name, pixels.astype(np.float64), labels.astype(np.int64),
                   {split: np.arange(count)}, image_shape=tuple(dims[1:]))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``[n, rows, cols]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(directory) -> Dataset:
    """Combine the standard four MNIST IDX files of ``directory`` into train/test splits."""
    d = Path(directory)

    def find(stem):
        for cand in (d / stem, d / (stem + ".gz")):
            if cand.exists():
                return cand
        raise DataError(f"MNIST file {stem}[.gz] not found in {d}")

    tr = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    te = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    n = len(tr.labels)
    return Dataset("mnist", np.vstack([tr.features, te.features]),
                   np.concatenate([tr.labels, te.labels]),
                   {"train": np.arange(n), "test": np.arange(n, n + len(te.labels))},
                   image_shape=tr.image_shape)


# ------------------------------------------------------------------ CSV files

def load_schema(source) -> dict:
    """Read a schema mapping from a path, or a shipped schema by bare name."""
    if isinstance(source, dict):
        return source
    path = Path(source)
    if path.exists():
        text = path.read_text()
    else:
        shipped = resources.files("llutflow") / "schemas" / f"{source}.yaml"
        if not shipped.is_file():
            raise DataError(f"no schema file or shipped schema named {source!r}")
        text = shipped.read_text()
    schema = yaml.safe_load(text)
    if not isinstance(schema, dict) or "columns" not in schema or "label" not in schema:
        raise DataError(f"schema {source} needs 'columns' and 'label' entries")
    return schema


def schema_width(schema: dict) -> int:
    """Number of expanded features the schema produces."""
    total = 0
    for col in load_schema(schema)["columns"]:
        kind = col.get("kind", "numeric")
        if kind in ("numeric", "bit"):
            total += 1
        elif kind == "categorical":
            cats = col.get("categories", "auto")
            total += int(col["size"]) if cats == "auto" else len(cats) + 1
        elif kind == "threshold":
            total += int(col.get("bits", len(col.get("thresholds", []))))
        elif kind != "drop":
            raise DataError(f"column {col.get('name')}: unknown kind {kind!r}")
    return total


def _float(cell: str, column: str, row: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {column!r}: non-numeric value {cell!r} "
                        f"in a column not declared categorical") from None


def load_csv(path, schema, name: Optional[str] = None) -> Dataset:
    """Parse a headered CSV according to ``schema`` (see module docstring)."""
    schema = load_schema(schema)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not header:
        raise DataError(f"{path}: missing header row")
    header = [h.strip() for h in header]
    col_of = {h: i for i, h in enumerate(header)}

    def column(cname):
        if cname not in col_of:
            raise DataError(f"{path}: missing column {cname!r}")
        i = col_of[cname]
        return [r[i].strip() if i < len(r) else "" for r in rows]

    split_col = schema.get("split_column")
    if split_col:
        tags = column(split_col)
        bad = sorted(set(tags) - {"train", "test"})
        if bad:
            raise DataError(f"{path}: split column values must be train/test, got {bad[:3]}")
        train_mask = np.array([t == "train" for t in tags])
        splits = {"train": np.flatnonzero(train_mask), "test": np.flatnonzero(~train_mask)}
    else:
        train_mask = np.ones(len(rows), dtype=bool)
        splits = {"train": np.arange(len(rows))}

    label_spec = schema["label"]
    if "onehot" in label_spec:
        mat = np.array([[_float(v, c, r) for r, v in enumerate(column(c))]
                        for c in label_spec["onehot"]]).T
        labels = mat.argmax(axis=1) if len(rows) else np.zeros(0, dtype=np.int64)
    else:
        raw = column(label_spec["column"])
        cats = label_spec.get("categories")
        if cats:
            lookup = {str(c): i for i, c in enumerate(cats)}
            missing = sorted(set(raw) - set(lookup))
            if missing:
                raise DataError(f"{path}: unknown label values {missing[:3]}")
            labels = np.array([lookup[v] for v in raw], dtype=np.int64)
        else:
            labels = np.array([int(_float(v, label_spec["column"], r)) for r, v in enumerate(raw)],
                              dtype=np.int64)

    blocks, names = [], []
    for col in schema["columns"]:
        kind = col.get("kind", "numeric")
        if kind == "drop":
            continue
        values = column(col["name"])
        if kind == "numeric":
            blocks.append(np.array([[_float(v, col["name"], r)] for r, v in enumerate(values)]).reshape(-1, 1))
            names.append(col["name"])
        elif kind == "bit":
            blocks.append(np.array([_float(v, col["name"], r) != 0 for r, v in enumerate(values)],
                                   dtype=np.float64).reshape(-1, 1))
            names.append(col["name"])
        elif kind == "categorical":
            cats = col.get("categories", "auto")
            if cats == "auto":
                counts = Counter(v for v, t in zip(values, train_mask) if t)
                ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
                cats = [k for k, _ in ranked[: int(col["size"]) - 1]]
                width = int(col["size"])
            else:
                cats = [str(c) for c in cats]
                width = len(cats) + 1
            lookup = {c: i for i, c in enumerate(cats)}
            block = np.zeros((len(rows), width))
            block[np.arange(len(rows)), [lookup.get(v, width - 1) for v in values]] = 1.0
            blocks.append(block)
            names += [f"{col['name']}={c}" for c in cats]
            names += [f"{col['name']}=<other>"] * (width - len(cats))
        elif kind == "threshold":
            x = np.array([_float(v, col["name"], r) for r, v in enumerate(values)])
            if "thresholds" in col:
                th = np.asarray(col["thresholds"], dtype=np.float64)
            else:
                bits = int(col["bits"])
                ref = x[train_mask] if train_mask.any() else x
                qs = (np.arange(1, bits + 1)) / (bits + 1)
                th = np.quantile(ref, qs) if len(ref) else np.zeros(bits)
            blocks.append((x[:, None] > th[None, :]).astype(np.float64))
            names += [f"{col['name']}>{t:g}" for t in th]
        else:
            raise DataError(f"column {col['name']}: unknown kind {kind!r}")
    feats = np.hstack(blocks) if blocks else np.zeros((len(rows), 0))
    return Dataset(name or Path(path).stem, feats, labels, splits, feature_names=names)


def binarize_check(features: np.ndarray) -> bool:
    """True if every feature is already a 0/1 bit."""
    return bool(np.all((features == 0) | (features == 1)))


# ------------------------------------------------------------------ synthetic

def synthetic(kind: str, params: Optional[dict] = None, seed: int = 0) -> Dataset:
    """Generate an oracle dataset.

    ``parity``: ``features`` binary columns; label is the XOR of columns
    ``bits`` (default ``[0, 1]``). ``planted_relevance``: uniform [0, 1)
    features; label is 1 iff the sum over ``relevant`` (default ``[2, 5]``)
    exceeds half their count. ``identity``: a single feature drawn from
    ``[0, 2**bits)``; the label is that value.
    """
    p = dict(params or {})
    rng = np.random.default_rng(seed)
    rows = int(p.get("rows", 1024))
    test = float(p.get("test_fraction", 0.25))
    if kind == "parity":
        n = int(p.get("features", 4))
        bits = list(p.get("bits", [0, 1]))
        if p.get("exhaustive"):
            grid = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
            x = np.tile(grid, (max(rows // (1 << n), 1), 1)).astype(np.float64)
        else:
            x = rng.integers(0, 2, size=(rows, n)).astype(np.float64)
        y = np.bitwise_xor.reduce(x[:, bits].astype(np.int64), axis=1)
    elif kind == "planted_relevance":
        n = int(p.get("features", 8))
        rel = list(p.get("relevant", [2, 5]))
        x = rng.random((rows, n))
        y = (x[:, rel].sum(axis=1) > len(rel) / 2).astype(np.int64)
    elif kind == "identity":
        bits = int(p.get("bits", 8))
        x = rng.integers(0, 1 << bits, size=(rows, 1)).astype(np.float64)
        y = x[:, 0].astype(np.int64)
    elif kind == "random":
        n = int(p.get("features", 16))
        classes = int(p.get("classes", 2))
        x = rng.random((rows, n))
        w = rng.normal(size=(n, classes))
        y = np.argmax((x - 0.5) @ w + 0.1 * rng.normal(size=(rows, classes)), axis=1)
    else:
        raise DataError(f"unknown synthetic dataset kind {kind!r}")
    ds = Dataset(f"synthetic-{kind}", x, y)
    return train_test_split(ds, test, seed) if test > 0 else ds
