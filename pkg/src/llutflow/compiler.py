"""Exhaustive enumeration of trained units into truth tables.

Table index packing: ``index = sum_i code_i << (in_bits * i)`` where input
``i`` is the ``i``-th entry of the unit's (ascending) input mapping, so input
0 occupies the least significant bits.

Batch norm is folded into the preceding affine maps before enumeration. The
folded arithmetic can differ from the unfolded reference in the last few
ulps, which only matters for values sitting on a rounding boundary; those
entries are recomputed on the unfolded path, and a random sample of every
unit is cross-checked against it as well.

Table file (one per unit)::

    LLUT v1 layer=<l> unit=<u> fan_in=<F> in_bits=<bi> out_bits=<bo>
    <hex code of entry 0>
    <hex code of entry 1>
    ...

Codes are lowercase hex without padding. ``manifest.json`` next to the
tables lists every file with its sha256.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import BatchNormState, Parameter
from .errors import CompileError, TableFormatError
from .model import EVAL_DTYPE, LutLayer, Network
from .quant import QuantSpec, dequantize, quantize_codes

log = logging.getLogger(__name__)

MAX_INDEX_BITS = 24
VERIFY_SAMPLES = 256
# Distance (in quantization steps) from a rounding boundary below which a
# folded value is recomputed on the unfolded path.
BOUNDARY_GUARD = 1e-6
UNIT_CHUNK_ELEMENTS = 1 << 22

HEADER_RE = re.compile(r"^LLUT v1 layer=(\d+) unit=(\d+) fan_in=(\d+) in_bits=(\d+) out_bits=(\d+)$")


@dataclass
class TruthTable:
    layer: int
    unit: int
    fan_in: int
    in_bits: int
    out_bits: int
    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64)
        n = 1 << (self.in_bits * self.fan_in)
        if self.entries.shape != (n,):
            raise TableFormatError(f"layer {self.layer} unit {self.unit}: expected {n} entries, "
                                   f"got {self.entries.size}")
        if self.entries.size and (self.entries.min() < 0 or self.entries.max() >= 1 << self.out_bits):
            raise TableFormatError(f"layer {self.layer} unit {self.unit}: entry outside "
                                   f"[0, {1 << self.out_bits})")

    @property
    def size(self) -> int:
        return self.entries.size

    def header(self) -> str:
        return (f"LLUT v1 layer={self.layer} unit={self.unit} fan_in={self.fan_in} "
                f"in_bits={self.in_bits} out_bits={self.out_bits}")

    def to_text(self) -> str:
        return self.header() + "\n" + "".join(f"{int(v):x}\n" for v in self.entries)

    def body_hex(self) -> str:
        return "\n".join(f"{int(v):x}" for v in self.entries)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def lookup(self, input_codes) -> np.ndarray:
        return self.entries[pack_index(input_codes, self.in_bits)]

    def __eq__(self, other) -> bool:
        return (isinstance(other, TruthTable) and self.header() == other.header()
                and np.array_equal(self.entries, other.entries))

    @classmethod
    def from_text(cls, text: str, where: str = "<table>") -> "TruthTable":
        lines = text.splitlines()
        if not lines:
            raise TableFormatError(f"{where}: empty table file")
        m = HEADER_RE.match(lines[0].strip())
        if not m:
            raise TableFormatError(f"{where}: bad header {lines[0][:80]!r}")
        layer, unit, F, bi, bo = (int(g) for g in m.groups())
        body = [ln.strip() for ln in lines[1:] if ln.strip()]
        n = 1 << (bi * F)
        if len(body) != n:
            raise TableFormatError(f"{where}: layer {layer} unit {unit} has {len(body)} entries, "
                                   f"expected {n}")
        try:
            entries = np.array([int(v, 16) for v in body], dtype=np.int64)
        except ValueError as exc:
            raise TableFormatError(f"{where}: layer {layer} unit {unit}: {exc}") from None
        return cls(layer, unit, F, bi, bo, entries)


def pack_index(codes, in_bits: int) -> np.ndarray:
    """Pack ``codes[..., F]`` into table indices (input 0 in the low bits)."""
    codes = np.asarray(codes, dtype=np.int64)
    shifts = in_bits * np.arange(codes.shape[-1], dtype=np.int64)
    return (codes << shifts).sum(axis=-1)


def unpack_index(index, in_bits: int, fan_in: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    shifts = in_bits * np.arange(fan_in, dtype=np.int64)
    return (index[..., None] >> shifts) & ((1 << in_bits) - 1)


# ---------------------------------------------------------------- folding

@dataclass
class FoldedUnitStack:
    """Batch-norm-free parameters for a slice of a layer's units (float64)."""

    hidden: list  # (W[U,N,in], b[U,N])
    skips: list   # (W[U,N,in], b[U,N])
    out: tuple    # (W[U,1,N], b[U,1])


def _fold(W, b, bn, units: slice):
    inv = 1.0 / np.sqrt(bn.running_var[units].astype(EVAL_DTYPE) + bn.eps)
    g = bn.gain.data[units].astype(EVAL_DTYPE) * inv
    Wf = W.data[units].astype(EVAL_DTYPE) * g[..., None]
    bf = (b.data[units].astype(EVAL_DTYPE) - bn.running_mean[units].astype(EVAL_DTYPE)) * g \
        + bn.shift.data[units].astype(EVAL_DTYPE)
    return Wf, bf


def fold_layer(layer: LutLayer, units: slice = slice(None)) -> FoldedUnitStack:
    hidden = [_fold(W, b, bn, units) for W, b, bn in layer.hidden]
    skips = [(W.data[units].astype(EVAL_DTYPE), b.data[units].astype(EVAL_DTYPE))
             for W, b in layer.skips]
    return FoldedUnitStack(hidden, skips, _fold(layer.out_w, layer.out_b, layer.out_bn, units))


def _folded_eval(layer: LutLayer, f: FoldedUnitStack, x: np.ndarray) -> np.ndarray:
    """x[M, F] shared by all units in the slice -> real outputs [U, M]."""
    a = x[None]
    for blk, (sW, sb) in zip(layer.blocks, f.skips):
        block_in = a
        for j in blk:
            W, b = f.hidden[j]
            a = np.maximum(a @ np.swapaxes(W, -1, -2) + b[:, None, :], 0.0)
        a = a + (block_in @ np.swapaxes(sW, -1, -2) + sb[:, None, :])
    W, b = f.out
    z = (a @ np.swapaxes(W, -1, -2) + b[:, None, :])[..., 0]
    return np.maximum(z, 0.0) if layer.applies_activation else z


def _near_boundary(z: np.ndarray, spec: QuantSpec) -> np.ndarray:
    t = (np.clip(z, spec.low, spec.scale) - spec.low) / spec.step
    frac = t - np.floor(t)
    return np.abs(frac - 0.5) < BOUNDARY_GUARD


# ---------------------------------------------------------------- enumeration

def _check_size(layer_index: int, in_bits: int, fan_in: int, allow_large: bool) -> None:
    if in_bits * fan_in > MAX_INDEX_BITS and not allow_large:
        raise CompileError(f"layer {layer_index}: in_bits*fan_in = {in_bits * fan_in} exceeds "
                           f"{MAX_INDEX_BITS} ({1 << (in_bits * fan_in)} entries); "
                           f"pass allow_large=True to enumerate anyway")


def enumerate_layer(layer: LutLayer, in_spec: QuantSpec, allow_large: bool = False,
                    seed: int = 0) -> list[TruthTable]:
    """Truth tables of every unit of ``layer`` fed by values on ``in_spec``."""
    F, bi = layer.fan_in, in_spec.bits
    _check_size(layer.index, bi, F, allow_large)
    n = 1 << (bi * F)
    x = dequantize(unpack_index(np.arange(n), bi, F), in_spec)
    out_spec = layer.out_spec
    chunk = max(1, UNIT_CHUNK_ELEMENTS // max(n * layer.width, 1))
    rng = np.random.default_rng(seed)
    tables = []
    for start in range(0, layer.units, chunk):
        sl = slice(start, min(start + chunk, layer.units))
        z = _folded_eval(layer, fold_layer(layer, sl), x)
        codes = quantize_codes(z, out_spec)
        for k, u in enumerate(range(sl.start, sl.stop)):
            row = codes[k]
            risky = np.flatnonzero(_near_boundary(z[k], out_spec))
            sample = rng.choice(n, size=min(n, VERIFY_SAMPLES), replace=False)
            check = np.union1d(risky, sample)
            ref = _unfolded_codes(layer, u, x[check], out_spec)
            if not np.array_equal(ref, row[check]):
                bad = check[ref != row[check]]
                if not np.isin(bad, risky).all():
                    # folding disagreed away from a boundary: distrust the whole unit
                    log.warning("layer %d unit %d: folded evaluation mismatch at %d entries; "
                                "using the unfolded path", layer.index, u, bad.size)
                    row = _unfolded_codes(layer, u, x, out_spec)
                else:
                    row = row.copy()
                    row[check] = ref
            tables.append(TruthTable(layer.index, u, F, bi, layer.out_bits, row))
    return tables


def _unfolded_codes(layer: LutLayer, unit: int, x: np.ndarray, out_spec: QuantSpec) -> np.ndarray:
    z = _unit_real(layer, unit, x)
    return quantize_codes(z, out_spec)


def _unit_real(layer: LutLayer, unit: int, x: np.ndarray) -> np.ndarray:
    """Unfolded eval of one unit on x[M, F]; same arithmetic as ``LutLayer.eval_real``."""
    return _unit_view(layer, unit).eval_real(x[None].astype(EVAL_DTYPE))[0]


def _unit_view(layer: LutLayer, unit: int) -> LutLayer:
    """Shallow single-unit copy of ``layer`` sharing no mutable state."""
    view = copy.copy(layer)
    view.units = 1
    u = slice(unit, unit + 1)

    def p(t):
        return Parameter(t.data[u])

    def bn(s):
        return BatchNormState(p(s.gain), p(s.shift), s.running_mean[u], s.running_var[u], s.eps, s.momentum)

    view.hidden = [(p(W), p(b), bn(s)) for W, b, s in layer.hidden]
    view.skips = [(p(W), p(b)) for W, b in layer.skips]
    view.out_w, view.out_b, view.out_bn = p(layer.out_w), p(layer.out_b), bn(layer.out_bn)
    view.mapping = layer.mapping[u]
    return view


def enumerate_unit(network: Network, layer: int, unit: int, allow_large: bool = False) -> TruthTable:
    """Truth table of one unit (unfolded reference path, no batching)."""
    lay = network.layers[layer]
    in_spec = network.in_spec(layer)
    _check_size(layer, in_spec.bits, lay.fan_in, allow_large)
    n = 1 << (in_spec.bits * lay.fan_in)
    x = dequantize(unpack_index(np.arange(n), in_spec.bits, lay.fan_in), in_spec)
    return TruthTable(layer, unit, lay.fan_in, in_spec.bits, lay.out_bits,
                      _unfolded_codes(lay, unit, x, lay.out_spec))


def compile_network(network: Optional[Network], allow_large: bool = False) -> list[TruthTable]:
    """One table per unit, layer-major then unit order."""
    if network is None:
        return []
    tables = []
    for l, layer in enumerate(network.layers):
        tables += enumerate_layer(layer, network.in_spec(l), allow_large, seed=l)
    return tables


def group_by_layer(tables: list[TruthTable]) -> list[list[TruthTable]]:
    layers: dict[int, list] = {}
    for t in tables:
        layers.setdefault(t.layer, []).append(t)
    out = []
    for l in range(len(layers)):
        if l not in layers:
            raise CompileError(f"no tables for layer {l}")
        row = sorted(layers[l], key=lambda t: t.unit)
        if [t.unit for t in row] != list(range(len(row))):
            raise CompileError(f"layer {l}: unit ids are not 0..{len(row) - 1}")
        out.append(row)
    return out


# ---------------------------------------------------------------- files

def table_filename(t: TruthTable) -> str:
    return f"layer{t.layer}_unit{t.unit}.lut"


def export_tables(tables: list[TruthTable], path) -> Path:
    """Write one file per table plus ``manifest.json``; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in tables:
        text = t.to_text()
        (root / table_filename(t)).write_text(text)
        entries.append({"file": table_filename(t), "layer": t.layer, "unit": t.unit,
                        "sha256": hashlib.sha256(text.encode()).hexdigest()})
    manifest = {"format": "LLUT v1", "count": len(tables), "tables": entries}
    mpath = root / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return mpath


def manifest_digest(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


def import_tables(path, verify_digests: bool = True) -> list[TruthTable]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TableFormatError(f"{root}: unreadable manifest.json: {exc}") from exc
    tables = []
    for e in manifest.get("tables", []):
        fpath = root / e["file"]
        try:
            text = fpath.read_text()
        except OSError as exc:
            raise TableFormatError(f"layer {e.get('layer')} unit {e.get('unit')}: {exc}") from exc
        t = TruthTable.from_text(text, str(fpath))
        if verify_digests and hashlib.sha256(text.encode()).hexdigest() != e["sha256"]:
            raise TableFormatError(f"layer {t.layer} unit {t.unit}: digest mismatch in {fpath.name}")
        tables.append(t)
    if len(tables) != manifest.get("count", len(tables)):
        raise TableFormatError(f"{root}: manifest lists {len(tables)} tables, count says {manifest['count']}")
    return tables
