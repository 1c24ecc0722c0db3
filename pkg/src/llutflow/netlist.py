"""Pipelined L-LUT netlists: wiring, integer simulation, structural stats.

A wire is ``(-1, f)`` for input feature ``f`` or ``(l, u)`` for the output of
unit ``u`` in layer ``l``. Registers sit on whole layer boundaries; the
output boundary is always registered. Simulation is pure integer table
lookup.

Text format::

    NETLIST v1 features=<n> input_bits=<b> layers=<L> registers=<l,l,...>
    node <l>:<u> in=<wire>,<wire>,... in_bits=<bi> out_bits=<bo> sha256=<table digest>

with wires written ``i<f>`` (input feature) or ``<l>:<u>`` (unit output).
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import NetlistError

INPUT = -1


@dataclass(frozen=True)
class PipelinePolicy:
    every: Optional[int] = None  # None means a register after every layer

    def __post_init__(self):
        if self.every is not None and self.every < 1:
            raise NetlistError(f"pipeline period k must be >= 1, got {self.every}")

    @property
    def name(self) -> str:
        return "every-layer" if self.every is None else f"every-{self.every}"

    def registers(self, num_layers: int) -> list[int]:
        """Indices of the layers whose outputs are registered."""
        if num_layers == 0:
            return []
        k = 1 if self.every is None else self.every
        regs = {l for l in range(num_layers) if (l + 1) % k == 0}
        regs.add(num_layers - 1)
        return sorted(regs)

    @classmethod
    def parse(cls, text: str) -> "PipelinePolicy":
        if text == "every-layer":
            return cls(None)
        m = re.fullmatch(r"every-(\d+)", text)
        if not m:
            raise NetlistError(f"unknown pipeline policy {text!r} (use every-layer or every-<k>)")
        return cls(int(m.group(1)))


def EveryLayer() -> PipelinePolicy:
    return PipelinePolicy(None)


def EveryK(k: int) -> PipelinePolicy:
    return PipelinePolicy(k)


@dataclass
class LutNode:
    layer: int
    unit: int
    table: object  # TruthTable
    inputs: list  # wires

    @property
    def id(self) -> tuple:
        return (self.layer, self.unit)


@dataclass
class NetlistStats:
    l_lut_count: int
    total_table_bits: int
    register_bits: int
    combinational_depth: int
    stage_count: int

    def as_row(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LutNetlist:
    input_features: int
    input_bits: int
    layers: list  # list[list[LutNode]]
    registers: list
    policy: PipelinePolicy = field(default_factory=EveryLayer)
    _stacked: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def input_width(self) -> int:
        return self.input_features * self.input_bits

    @property
    def output_units(self) -> int:
        return len(self.layers[-1]) if self.layers else self.input_features

    @property
    def output_bits(self) -> int:
        return self.layers[-1][0].table.out_bits if self.layers else self.input_bits

    @property
    def output_width(self) -> int:
        return self.output_units * self.output_bits

    @property
    def stage_count(self) -> int:
        return len(self.registers)

    def layer_bits(self, l: int) -> int:
        return self.input_bits if l == INPUT else self.layers[l][0].table.out_bits

    def nodes(self) -> Iterable[LutNode]:
        for row in self.layers:
            yield from row

    def _layer_arrays(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        """(source index matrix [U, F], stacked table entries [U, E]) for layer ``l``."""
        if l not in self._stacked:
            row = self.layers[l]
            src = np.array([[w[1] for w in n.inputs] for n in row], dtype=np.int64)
            ent = np.stack([n.table.entries for n in row])
            self._stacked[l] = (src, ent)
        return self._stacked[l]

    def with_policy(self, policy: PipelinePolicy) -> "LutNetlist":
        return LutNetlist(self.input_features, self.input_bits, self.layers,
                          policy.registers(len(self.layers)), policy)


def build_netlist(tables: list, mappings: Sequence[np.ndarray], policy: PipelinePolicy,
                  input_features: int, input_bits: int) -> LutNetlist:
    """Wire ``tables`` (layer-major) according to per-layer input mappings."""
    by_layer: dict[int, dict[int, object]] = {}
    for t in tables:
        by_layer.setdefault(t.layer, {})[t.unit] = t
    layers = []
    prev_width, prev_bits = input_features, input_bits
    for l, mapping in enumerate(mappings):
        mapping = np.asarray(mapping, dtype=np.int64)
        have = by_layer.get(l, {})
        row = []
        for u in range(mapping.shape[0]):
            if u not in have:
                raise NetlistError(f"missing table for layer {l} unit {u}")
            t = have[u]
            if t.fan_in != mapping.shape[1]:
                raise NetlistError(f"layer {l} unit {u}: table fan-in {t.fan_in} != mapping width "
                                   f"{mapping.shape[1]}")
            if t.in_bits != prev_bits:
                raise NetlistError(f"layer {l} unit {u}: table expects {t.in_bits}-bit inputs but the "
                                   f"feeding boundary carries {prev_bits} bits")
            if mapping[u].min() < 0 or mapping[u].max() >= prev_width:
                raise NetlistError(f"layer {l} unit {u}: dangling wire (source index outside "
                                   f"[0, {prev_width}))")
            row.append(LutNode(l, u, t, [(l - 1 if l else INPUT, int(i)) for i in mapping[u]]))
        extra = sorted(set(have) - set(range(mapping.shape[0])))
        if extra:
            raise NetlistError(f"layer {l}: tables for units {extra[:5]} have no mapping row")
        bits = {n.table.out_bits for n in row}
        if len(bits) != 1:
            raise NetlistError(f"layer {l}: units disagree on output bit-width {sorted(bits)}")
        layers.append(row)
        prev_width, prev_bits = len(row), bits.pop()
    stray = sorted(set(by_layer) - set(range(len(mappings))))
    if stray:
        raise NetlistError(f"tables given for layers {stray} beyond the {len(mappings)} mapped layers")
    return LutNetlist(input_features, input_bits, layers, policy.registers(len(layers)), policy)


def _check_inputs(net: LutNetlist, codes) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None]
    if codes.ndim != 2 or codes.shape[1] != net.input_features:
        raise NetlistError(f"expected {net.input_features} input codes per sample, got {codes.shape}")
    if codes.dtype.kind not in "iu":
        raise NetlistError("input codes must be integers")
    if codes.size and (codes.min() < 0 or codes.max() >= 1 << net.input_bits):
        raise NetlistError(f"input code outside [0, {1 << net.input_bits})")
    return codes.astype(np.int64)


def _eval_layer(net: LutNetlist, l: int, prev: np.ndarray) -> np.ndarray:
    src, ent = net._layer_arrays(l)
    bits = net.layer_bits(l - 1 if l else INPUT)
    shifts = bits * np.arange(src.shape[1], dtype=np.int64)
    idx = (prev[:, src] << shifts).sum(axis=-1)  # [B, U]
    return np.take_along_axis(ent, idx.T, axis=1).T


def simulate(net: LutNetlist, codes) -> np.ndarray:
    """Combinational evaluation: output codes ``[B, out_units]`` (or ``[out_units]`` for one vector)."""
    single = np.asarray(codes).ndim == 1
    x = _check_inputs(net, codes)
    for l in range(len(net.layers)):
        x = _eval_layer(net, l, x)
    return x[0] if single else x


def simulate_layers(net: LutNetlist, codes) -> list[np.ndarray]:
    x = _check_inputs(net, codes)
    out = [x]
    for l in range(len(net.layers)):
        out.append(_eval_layer(net, l, out[-1]))
    return out


def simulate_stream(net: LutNetlist, inputs) -> list[tuple[int, np.ndarray]]:
    """Clocked simulation, one new input per cycle.

    Input ``t`` is applied during cycle ``t``; each register captures at the
    end of its cycle. Returns ``(cycle, output codes)`` for every input, in
    order, where ``cycle`` is the first cycle the final register shows it.
    """
    seq = _check_inputs(net, inputs) if len(inputs) else np.zeros((0, net.input_features), np.int64)
    stages = []
    start = 0
    for r in net.registers:
        stages.append(range(start, r + 1))
        start = r + 1
    regs: list[Optional[np.ndarray]] = [None] * len(stages)
    out = []
    cycle = 0
    n = len(seq)
    while len(out) < n:
        # combinational settle using the register contents from the previous edge
        nxt = []
        for s, layers in enumerate(stages):
            v = (seq[cycle:cycle + 1] if cycle < n else None) if s == 0 else regs[s - 1]
            if v is not None:
                for l in layers:
                    v = _eval_layer(net, l, v)
            nxt.append(v)
        regs = nxt  # clock edge
        cycle += 1
        if regs and regs[-1] is not None:
            out.append((cycle, regs[-1][0]))
        if not stages and cycle <= n:
            out.append((cycle - 1, seq[cycle - 1]))
    return out


def classify(codes, out_bits: int) -> np.ndarray:
    """Argmax class per row (lowest index on ties); one output means ``code >= 2**(bits-1)``."""
    codes = np.asarray(codes)
    single = codes.ndim == 1
    if single:
        codes = codes[None]
    if codes.shape[1] == 1:
        pred = (codes[:, 0] >= 1 << (out_bits - 1)).astype(np.int64)
    else:
        pred = np.argmax(codes, axis=1).astype(np.int64)
    return pred[0] if single else pred


def stats(net: LutNetlist) -> NetlistStats:
    luts = sum(len(row) for row in net.layers)
    bits = sum(n.table.size * n.table.out_bits for n in net.nodes())
    reg_bits = sum(len(net.layers[r]) * net.layer_bits(r) for r in net.registers)
    depth, prev = 0, -1
    for r in net.registers:
        depth = max(depth, r - prev)
        prev = r
    return NetlistStats(luts, bits, reg_bits, depth, net.stage_count)


def stats_table(rows: list[dict], fmt: str = "text") -> str:
    """Render a list of flat dicts as CSV or an aligned text table."""
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    cells = [[str(c) for c in cols]] + [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- text format

def _wire(w: tuple) -> str:
    return f"i{w[1]}" if w[0] == INPUT else f"{w[0]}:{w[1]}"


def _parse_wire(s: str) -> tuple:
    if s.startswith("i"):
        return (INPUT, int(s[1:]))
    l, u = s.split(":")
    return (int(l), int(u))


def dump_netlist(net: LutNetlist) -> str:
    lines = [f"NETLIST v1 features={net.input_features} input_bits={net.input_bits} "
             f"layers={len(net.layers)} registers={','.join(map(str, net.registers))} "
             f"policy={net.policy.name}"]
    for n in net.nodes():
        lines.append(f"node {n.layer}:{n.unit} in={','.join(_wire(w) for w in n.inputs)} "
                     f"in_bits={n.table.in_bits} out_bits={n.table.out_bits} sha256={n.table.digest()}")
    return "\n".join(lines) + "\n"


_HEAD = re.compile(r"NETLIST v1 features=(\d+) input_bits=(\d+) layers=(\d+) registers=([\d,]*) policy=(\S+)")
_NODE = re.compile(r"node (\d+):(\d+) in=(\S*) in_bits=(\d+) out_bits=(\d+) sha256=([0-9a-f]{64})")


def load_netlist(text: str, tables: list) -> LutNetlist:
    """Rebuild a netlist from its text form, checking every table digest."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    m = _HEAD.fullmatch(lines[0].strip()) if lines else None
    if not m:
        raise NetlistError("netlist text: bad header")
    feats, ibits, nlayers = int(m.group(1)), int(m.group(2)), int(m.group(3))
    regs = [int(v) for v in m.group(4).split(",") if v]
    policy = PipelinePolicy.parse(m.group(5))
    lookup = {(t.layer, t.unit): t for t in tables}
    layers: list[list[LutNode]] = [[] for _ in range(nlayers)]
    for ln in lines[1:]:
        nm = _NODE.fullmatch(ln.strip())
        if not nm:
            raise NetlistError(f"netlist text: bad node line {ln[:80]!r}")
        l, u = int(nm.group(1)), int(nm.group(2))
        t = lookup.get((l, u))
        if t is None:
            raise NetlistError(f"missing table for layer {l} unit {u}")
        if t.digest() != nm.group(6):
            raise NetlistError(f"layer {l} unit {u}: table digest does not match the netlist")
        wires = [_parse_wire(w) for w in nm.group(3).split(",") if w]
        for w in wires:
            if w[0] != l - 1 and not (l == 0 and w[0] == INPUT):
                raise NetlistError(f"layer {l} unit {u}: wire {_wire(w)} does not come from the previous layer")
        layers[l].append(LutNode(l, u, t, wires))
    for l, row in enumerate(layers):
        if [n.unit for n in row] != list(range(len(row))):
            raise NetlistError(f"layer {l}: node ids are not 0..{len(row) - 1} in order")
    mappings = [np.array([[w[1] for w in n.inputs] for n in row], dtype=np.int64) for row in layers]
    net = build_netlist([n.table for row in layers for n in row], mappings, policy, feats, ibits)
    if net.registers != regs:
        raise NetlistError(f"register list {regs} disagrees with policy {policy.name}")
    return net
