import gzip
import struct

import numpy as np
import pytest

from llutflow.data import (binarize_check, load_csv, load_idx, load_mnist, load_schema, schema_width,
                           subsample, synthetic, train_test_split, write_idx)
from llutflow.errors import DataError


def idx_bytes(images, labels):
    """Hand-packed IDX pair: big-endian u32 magic/dims, then raw bytes."""
    n, h, w = images.shape
    img = struct.pack(">IIII", 2051, n, h, w) + images.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 2049, n) + labels.astype(np.uint8).tobytes()
    return img, lab


@pytest.fixture
def idx_fixture(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (3, 28, 28))
    labels = np.array([7, 2, 1])
    img, lab = idx_bytes(images, labels)
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    return tmp_path, img, lab


def test_idx_fixture_shape(idx_fixture):
    d, _, _ = idx_fixture
    ds = load_idx(d / "img", d / "lab")
    assert ds.features.shape == (3, 784)
    assert ds.labels.tolist() == [7, 2, 1]
    assert ds.image_shape == (28, 28)


def test_idx_pixel_offsets(idx_fixture):
    d, img, _ = idx_fixture
    ds = load_idx(d / "img", d / "lab")
    rng = np.random.default_rng(1)
    for _ in range(200):
        r, i, j = int(rng.integers(3)), int(rng.integers(28)), int(rng.integers(28))
        raw = img[16 + r * 784 + i * 28 + j]
        assert ds.features[r, i * 28 + j] == raw


def test_idx_truncated_names_offset(idx_fixture):
    d, img, _ = idx_fixture
    (d / "short").write_bytes(img[:1000])
    with pytest.raises(DataError, match="offset 1000"):
        load_idx(d / "short", d / "lab")
    (d / "tiny").write_bytes(img[:10])
    with pytest.raises(DataError, match="truncated header"):
        load_idx(d / "tiny", d / "lab")


def test_idx_bad_magic_and_count(idx_fixture):
    d, img, lab = idx_fixture
    (d / "bad").write_bytes(struct.pack(">I", 1234) + img[4:])
    with pytest.raises(DataError, match="bad magic"):
        load_idx(d / "bad", d / "lab")
    (d / "lab2").write_bytes(struct.pack(">II", 2049, 2) + lab[8:10])
    with pytest.raises(DataError, match="3 images .* 2 labels"):
        load_idx(d / "img", d / "lab2")


def test_idx_gzip_and_write_roundtrip(tmp_path, idx_fixture):
    d, img, lab = idx_fixture
    (d / "img.gz").write_bytes(gzip.compress(img))
    a = load_idx(d / "img.gz", d / "lab")
    b = load_idx(d / "img", d / "lab")
    assert a.digest() == b.digest()
    write_idx(b.features.reshape(3, 28, 28), b.labels, tmp_path / "i2", tmp_path / "l2")
    assert (tmp_path / "i2").read_bytes() == img


def test_load_mnist_directory(tmp_path):
    rng = np.random.default_rng(2)
    for prefix, n in (("train", 4), ("t10k", 2)):
        img, lab = idx_bytes(rng.integers(0, 256, (n, 28, 28)), rng.integers(0, 10, n))
        (tmp_path / f"{prefix}-images-idx3-ubyte.gz").write_bytes(gzip.compress(img))
        (tmp_path / f"{prefix}-labels-idx1-ubyte").write_bytes(lab)
    ds = load_mnist(tmp_path)
    assert len(ds.splits["train"]) == 4 and len(ds.splits["test"]) == 2
    with pytest.raises(DataError, match="not found"):
        load_mnist(tmp_path / "nowhere")


JSC_COLUMNS = [c["name"] for c in load_schema("jsc_openml")["columns"]]


def write_jsc(path, rows=50, seed=0):
    rng = np.random.default_rng(seed)
    classes = "gqtwz"
    with open(path, "w") as fh:
        fh.write(",".join(JSC_COLUMNS + ["class"]) + "\n")
        for r in range(rows):
            vals = [f"{v:.6g}" for v in rng.normal(size=16)]
            fh.write(",".join(vals + [classes[r % 5]]) + "\n")


def test_jsc_fixture(tmp_path):
    write_jsc(tmp_path / "jsc.csv")
    ds = load_csv(tmp_path / "jsc.csv", "jsc_openml")
    assert ds.num_features == 16
    assert sorted(set(ds.labels.tolist())) == [0, 1, 2, 3, 4]
    assert ds.labels[:5].tolist() == [0, 1, 2, 3, 4]


def test_jsc_cernbox_onehot(tmp_path):
    schema = load_schema("jsc_cernbox")
    names = [c["name"] for c in schema["columns"]]
    onehot = schema["label"]["onehot"]
    with open(tmp_path / "c.csv", "w") as fh:
        fh.write(",".join(names + onehot) + "\n")
        for r in range(10):
            lab = ["1" if k == r % 5 else "0" for k in range(5)]
            fh.write(",".join(["0.5"] * len(names) + lab) + "\n")
    ds = load_csv(tmp_path / "c.csv", "jsc_cernbox")
    assert ds.num_features == 16 and ds.labels.tolist() == [0, 1, 2, 3, 4] * 2


def test_csv_errors(tmp_path):
    write_jsc(tmp_path / "jsc.csv")
    text = (tmp_path / "jsc.csv").read_text().replace("zlogz", "zlog", 1)
    (tmp_path / "m.csv").write_text(text)
    with pytest.raises(DataError, match="missing column 'zlogz'"):
        load_csv(tmp_path / "m.csv", "jsc_openml")
    lines = (tmp_path / "jsc.csv").read_text().splitlines()
    lines[3] = "abc" + lines[3][lines[3].index(","):]
    (tmp_path / "n.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="non-numeric value 'abc'"):
        load_csv(tmp_path / "n.csv", "jsc_openml")
    with pytest.raises(DataError, match="cannot read"):
        load_csv(tmp_path / "absent.csv", "jsc_openml")


def write_unsw(path, rows=400, seed=0):
    schema = load_schema("unsw_nb15")
    rng = np.random.default_rng(seed)
    cols = [c["name"] for c in schema["columns"]] + ["label"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in range(rows):
            cells = []
            for c in schema["columns"]:
                k = c["kind"]
                if k == "drop":
                    cells.append(str(r) if c["name"] == "id" else "Normal")
                elif k == "categorical":
                    cells.append(f"{c['name']}{int(rng.integers(0, 60))}")
                elif k == "bit":
                    cells.append(str(int(rng.integers(0, 2))))
                else:
                    cells.append(f"{rng.exponential(100):.4f}")
            cells.append(str(r % 2))
            fh.write(",".join(cells) + "\n")


def test_unsw_fixture_593_bits(tmp_path):
    assert schema_width(load_schema("unsw_nb15")) == 593
    write_unsw(tmp_path / "u.csv")
    a = load_csv(tmp_path / "u.csv", "unsw_nb15")
    assert a.num_features == 593
    assert binarize_check(a.features)
    assert len(a.feature_names) == 593
    assert np.all(a.features[:, :32].sum(axis=1) == 1)  # one-hot protocol block
    b = load_csv(tmp_path / "u.csv", "unsw_nb15")
    assert a.digest() == b.digest()


def test_threshold_uses_training_rows_only(tmp_path):
    schema = {"label": {"column": "y"}, "split_column": "split",
              "columns": [{"name": "x", "kind": "threshold", "bits": 1}]}
    rows = ["x,y,split"] + [f"{v},0,train" for v in (1, 2, 3)] + ["100,1,test", "200,1,test"]
    (tmp_path / "t.csv").write_text("\n".join(rows) + "\n")
    ds = load_csv(tmp_path / "t.csv", schema)
    assert ds.features[:, 0].tolist() == [0, 0, 1, 1, 1]  # median of training rows is 2
    assert ds.splits["test"].tolist() == [3, 4]


def test_synthetic_parity():
    ds = synthetic("parity", {"features": 2, "exhaustive": True, "rows": 4, "test_fraction": 0})
    lab = {tuple(int(v) for v in x): y for x, y in zip(ds.features, ds.labels)}
    assert lab == {(0, 0): 0, (1, 0): 1, (0, 1): 1, (1, 1): 0}


def test_synthetic_planted_relevance_ignores_others():
    ds = synthetic("planted_relevance", {"features": 8, "rows": 500, "test_fraction": 0}, 3)
    x = ds.features.copy()
    rng = np.random.default_rng(0)
    for c in (0, 1, 3, 4, 6, 7):
        x[:, c] = rng.permutation(x[:, c])
    y = (x[:, [2, 5]].sum(axis=1) > 1).astype(int)
    assert np.array_equal(y, ds.labels)


def test_synthetic_determinism_and_splits():
    a = synthetic("random", {"rows": 200}, 4)
    assert a.digest() == synthetic("random", {"rows": 200}, 4).digest()
    assert a.digest() != synthetic("random", {"rows": 200}, 5).digest()
    assert len(a.splits["test"]) == 50
    ident = synthetic("identity", {"bits": 3, "rows": 20, "test_fraction": 0})
    assert np.array_equal(ident.features[:, 0], ident.labels)
    with pytest.raises(DataError):
        synthetic("nope")


def test_split_helpers():
    ds = synthetic("random", {"rows": 100, "test_fraction": 0}, 0)
    s = train_test_split(ds, 0.2, 1)
    assert len(s.splits["train"]) == 80
    assert not set(s.splits["train"]) & set(s.splits["test"])
    sub = subsample(s, "train", 30, 0)
    assert len(sub.splits["train"]) == 30 and set(sub.splits["train"]) <= set(s.splits["train"])
    assert subsample(s, "train", 500, 0) is s
    with pytest.raises(DataError, match="overlaps"):
        type(ds)("x", ds.features, ds.labels, {"train": [0, 1], "test": [1]})
