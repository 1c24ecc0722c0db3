import hashlib

import numpy as np
import pytest

from llutflow.compiler import (MAX_INDEX_BITS, TruthTable, compile_network, enumerate_layer,
                               enumerate_unit, export_tables, group_by_layer, import_tables,
                               manifest_digest, pack_index, unpack_index)
from llutflow.config import ModelConfig, load_config
from llutflow.errors import CompileError, TableFormatError
from llutflow.model import build_network

from conftest import randomized_network
from oracles import table_entry
from test_model import identity_chain


def single_input_identity():
    """One layer, one unit, 1-bit in and out, passing its input through."""
    c = ModelConfig([1], [False], [1], [1], 1, 1, 1, 1, 1)
    net = build_network(c, 0)
    lay = net.layers[0]
    for W, b, _ in lay.hidden:
        W.data[:] = 0
    lay.out_w.data[:] = 1
    lay.out_b.data[:] = 0
    lay.scale.data = np.float32(1.0)
    lay.scale_ready = True
    return net


def test_identity_table_and_hex_dump():
    (t,) = compile_network(single_input_identity())
    assert t.entries.tolist() == [0, 1]
    assert t.body_hex() == "0\n1"


def test_entry_count_two_bit_pairs():
    c = ModelConfig([2], [False], [2], [2], 2, 1, 2, 1, 4)
    tables = compile_network(randomized_network(c, 0))
    assert [t.size for t in tables] == [16, 16]


def test_pack_unpack_roundtrip():
    idx = np.arange(1 << 12)
    codes = unpack_index(idx, 3, 4)
    assert codes.max() == 7
    assert np.array_equal(pack_index(codes, 3), idx)
    # input 0 occupies the low bits
    assert pack_index([1, 0, 0], 2) == 1 and pack_index([0, 0, 1], 2) == 16


@pytest.mark.parametrize("name", ["toy", "nid", "jsc_tree4x2"])
def test_random_entries_match_oracle(name):
    net = randomized_network(name, 11)
    tables = compile_network(net)
    rng = np.random.default_rng(0)
    for _ in range(1000 if name == "toy" else 300):
        t = tables[rng.integers(len(tables))]
        i = int(rng.integers(t.size))
        assert t.entries[i] == table_entry(net, t.layer, t.unit, i), (t.layer, t.unit, i)


def test_folded_layer_matches_unfolded_unit():
    net = randomized_network("jsc_tree2x4", 2)
    tables = group_by_layer(compile_network(net))
    for l in range(len(net.layers)):
        for u in (0, len(tables[l]) - 1):
            assert tables[l][u] == enumerate_unit(net, l, u)


def test_table_counts():
    assert len(compile_network(randomized_network("nid", 0))) == 93
    mnist = compile_network(randomized_network("mnist", 0, calib_rows=16))
    assert len(mnist) == 5110
    assert {t.size for t in mnist} == {64}


def test_empty_network():
    assert compile_network(None) == []


def test_size_guard():
    net = randomized_network("jsc_cernbox", 0, calib_rows=16)
    lay = net.layers[1]
    spec = net.in_spec(1)
    spec_big = type(spec)(bits=13, scale=spec.scale, signed=spec.signed)
    assert 13 * lay.fan_in > MAX_INDEX_BITS
    with pytest.raises(CompileError, match="exceeds 24"):
        enumerate_layer(lay, spec_big)


def test_export_import_roundtrip(tmp_path):
    tables = compile_network(randomized_network("toy", 1))
    export_tables(tables, tmp_path / "a")
    back = import_tables(tmp_path / "a")
    assert back == tables
    export_tables(back, tmp_path / "b")
    assert manifest_digest(tmp_path / "a") == manifest_digest(tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_compile_is_deterministic():
    a = compile_network(randomized_network("nid", 5))
    b = compile_network(randomized_network("nid", 5))
    assert [t.digest() for t in a] == [t.digest() for t in b]


def test_wrong_entry_count_names_unit(tmp_path):
    tables = compile_network(randomized_network("toy", 1))
    export_tables(tables, tmp_path)
    path = tmp_path / "layer1_unit2.lut"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(TableFormatError, match="layer 1 unit 2"):
        import_tables(tmp_path)


def test_tampered_entry_caught_by_digest(tmp_path):
    tables = compile_network(randomized_network("toy", 1))
    export_tables(tables, tmp_path)
    path = tmp_path / "layer0_unit0.lut"
    lines = path.read_text().splitlines()
    lines[1] = "3" if lines[1] != "3" else "2"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(TableFormatError, match="digest mismatch"):
        import_tables(tmp_path)
    assert len(import_tables(tmp_path, verify_digests=False)) == len(tables)


def test_truth_table_validation():
    with pytest.raises(TableFormatError, match="expected 4 entries"):
        TruthTable(0, 0, 1, 2, 1, [0, 1])
    with pytest.raises(TableFormatError, match="outside"):
        TruthTable(0, 0, 1, 1, 1, [0, 2])
    with pytest.raises(TableFormatError, match="bad header"):
        TruthTable.from_text("junk\n0\n")
    t = TruthTable(3, 4, 1, 1, 2, [2, 3])
    assert TruthTable.from_text(t.to_text()) == t
    assert t.digest() == hashlib.sha256(t.to_text().encode()).hexdigest()


def test_identity_chain_tables():
    tables = group_by_layer(compile_network(identity_chain()))
    for row in tables:
        assert row[0].entries.tolist() == list(range(256))


def test_group_by_layer_rejects_gaps():
    t = TruthTable(0, 1, 1, 1, 1, [0, 1])
    with pytest.raises(CompileError, match="unit ids"):
        group_by_layer([t])
