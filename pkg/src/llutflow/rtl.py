"""Verilog-2001 emission of a netlist plus golden stimulus/response vectors.

Every unit becomes a module holding one combinational ``case`` ROM over its
full input pattern space; the pattern uses the table index packing (input 0
in the least significant bits). A wrapper per layer wires its units, and the
top module adds the pipeline registers (single clock, no reset).

Buses pack feature/unit ``k`` at bits ``[k*b +: b]``. Golden vector lines are
``<input hex> <output hex>`` with the same packing, zero padded to whole
nibbles.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VerificationError
from .netlist import INPUT, LutNetlist, simulate


@dataclass
class RtlBundle:
    prefix: str
    files: dict = field(default_factory=dict)  # file name -> Verilog source
    module_count: int = 0
    top: str = ""
    input_width: int = 0
    output_width: int = 0
    table_digests: dict = field(default_factory=dict)  # "l:u" -> sha256

    def manifest(self) -> dict:
        return {
            "top": self.top,
            "input_width": self.input_width,
            "output_width": self.output_width,
            "module_count": self.module_count,
            "files": {k: hashlib.sha256(v.encode()).hexdigest() for k, v in sorted(self.files.items())},
            "tables": dict(sorted(self.table_digests.items())),
        }


def _bin(v: int, width: int) -> str:
    return f"{width}'b{int(v):0{width}b}"


def unit_module_name(prefix: str, layer: int, unit: int) -> str:
    return f"{prefix}_l{layer}_u{unit}"


def _unit_module(prefix: str, node) -> str:
    t = node.table
    iw = t.in_bits * t.fan_in
    name = unit_module_name(prefix, node.layer, node.unit)
    lines = [f"module {name} (",
             f"    input  wire [{iw - 1}:0] I,",
             f"    output reg  [{t.out_bits - 1}:0] O",
             ");",
             "    always @(*) begin",
             "        case (I)"]
    lines += [f"            {_bin(k, iw)}: O = {_bin(v, t.out_bits)};" for k, v in enumerate(t.entries)]
    lines += ["        endcase", "    end", "endmodule", ""]
    return "\n".join(lines)


def _layer_module(prefix: str, net: LutNetlist, l: int) -> str:
    row = net.layers[l]
    bi = net.layer_bits(l - 1 if l else INPUT)
    in_w = (len(net.layers[l - 1]) if l else net.input_features) * bi
    bo = net.layer_bits(l)
    lines = [f"module {prefix}_layer{l} (",
             f"    input  wire [{in_w - 1}:0] I,",
             f"    output wire [{len(row) * bo - 1}:0] O",
             ");"]
    for n in row:
        taps = ", ".join(f"I[{w[1] * bi} +: {bi}]" for w in reversed(n.inputs))
        lines.append(f"    {unit_module_name(prefix, l, n.unit)} u{n.unit} "
                     f"(.I({{{taps}}}), .O(O[{n.unit * bo} +: {bo}]));")
    lines += ["endmodule", ""]
    return "\n".join(lines)


def _top_module(prefix: str, net: LutNetlist) -> str:
    regs = set(net.registers)
    lines = [f"module {prefix}_top (",
             "    input  wire clk,",
             f"    input  wire [{net.input_width - 1}:0] in_data,",
             f"    output wire [{net.output_width - 1}:0] out_data",
             ");"]
    prev = "in_data"
    for l, row in enumerate(net.layers):
        w = len(row) * net.layer_bits(l)
        lines.append(f"    wire [{w - 1}:0] c{l};")
        lines.append(f"    {prefix}_layer{l} layer{l} (.I({prev}), .O(c{l}));")
        prev = f"c{l}"
        if l in regs:
            lines.append(f"    reg  [{w - 1}:0] r{l};")
            lines.append(f"    always @(posedge clk) r{l} <= c{l};")
            prev = f"r{l}"
    lines += [f"    assign out_data = {prev};", "endmodule", ""]
    return "\n".join(lines)


def emit_verilog(net: LutNetlist, prefix: str = "llut") -> RtlBundle:
    if not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", prefix):
        raise ValueError(f"module prefix {prefix!r} is not a Verilog identifier")
    b = RtlBundle(prefix, top=f"{prefix}_top", input_width=net.input_width,
                  output_width=net.output_width)
    for l, row in enumerate(net.layers):
        parts = [f"// layer {l}: {len(row)} units\n"]
        parts += [_unit_module(prefix, n) for n in row]
        parts.append(_layer_module(prefix, net, l))
        b.files[f"{prefix}_layer{l}.v"] = "\n".join(parts)
        for n in row:
            b.table_digests[f"{l}:{n.unit}"] = n.table.digest()
        b.module_count += len(row) + 1
    b.files[f"{prefix}_top.v"] = _top_module(prefix, net)
    b.module_count += 1
    return b


# ---------------------------------------------------------------- vectors

def pack_bus(codes: np.ndarray, bits: int) -> list[int]:
    """Pack each row of codes into one integer, element ``k`` at bit ``k*bits``."""
    out = []
    for row in np.asarray(codes, dtype=np.int64).reshape(len(codes), -1):
        v = 0
        for k, c in enumerate(row.tolist()):
            v |= int(c) << (k * bits)
        out.append(v)
    return out


def unpack_bus(value: int, count: int, bits: int) -> np.ndarray:
    mask = (1 << bits) - 1
    return np.array([(value >> (k * bits)) & mask for k in range(count)], dtype=np.int64)


def _hex(v: int, width: int) -> str:
    return f"{v:0{max(1, (width + 3) // 4)}x}"


def emit_golden_vectors(net: LutNetlist, inputs) -> str:
    inputs = np.asarray(inputs, dtype=np.int64).reshape(-1, net.input_features)
    lines = [f"# in_width={net.input_width} out_width={net.output_width} latency={net.stage_count}"]
    if len(inputs):
        outs = simulate(net, inputs)
        for a, z in zip(pack_bus(inputs, net.input_bits), pack_bus(outs, net.output_bits)):
            lines.append(f"{_hex(a, net.input_width)} {_hex(z, net.output_width)}")
    return "\n".join(lines) + "\n"


def parse_golden_vectors(text: str) -> list[tuple[int, int]]:
    rows = []
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        a, z = ln.split()
        rows.append((int(a, 16), int(z, 16)))
    return rows


def check_golden_vectors(net: LutNetlist, text: str) -> int:
    """Replay a vector file through the simulator; returns the mismatch count."""
    bad = 0
    for a, z in parse_golden_vectors(text):
        x = unpack_bus(a, net.input_features, net.input_bits)
        y = simulate(net, x)
        if pack_bus(y[None], net.output_bits)[0] != z:
            bad += 1
    return bad


# ---------------------------------------------------------------- parse-back

_MODULE = re.compile(r"module\s+(\w+)\s*\((.*?)endmodule", re.S)
_ARM = re.compile(r"(\d+)'b([01]+)\s*:\s*O\s*=\s*(\d+)'b([01]+)\s*;")


def parse_case_arms(source: str) -> dict[str, list[tuple[int, int]]]:
    """Map each module containing a case ROM to its ``(pattern, value)`` arms."""
    out = {}
    for m in _MODULE.finditer(source):
        arms = [(int(p, 2), int(v, 2)) for _, p, _, v in _ARM.findall(m.group(2))]
        if arms:
            out[m.group(1)] = arms
    return out


def check_fidelity(bundle: RtlBundle, net: LutNetlist) -> int:
    """Count case arms whose literal differs from the table (missing arms count too)."""
    arms = {}
    for src in bundle.files.values():
        arms.update(parse_case_arms(src))
    bad = 0
    for n in net.nodes():
        got = dict(arms.get(unit_module_name(bundle.prefix, n.layer, n.unit), []))
        for k, v in enumerate(n.table.entries.tolist()):
            if got.get(k) != v:
                bad += 1
    return bad


def write_bundle(bundle: RtlBundle, out_dir, golden: str = None) -> Path:
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for name, src in sorted(bundle.files.items()):
        (root / name).write_text(src)
    manifest = bundle.manifest()
    if golden is not None:
        (root / "golden_vectors.txt").write_text(golden)
        manifest["golden_vectors"] = hashlib.sha256(golden.encode()).hexdigest()
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def verify_bundle_dir(out_dir, net: LutNetlist) -> None:
    """Raise if files on disk disagree with their manifest or the netlist's tables."""
    root = Path(out_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    for name, digest in manifest["files"].items():
        if hashlib.sha256((root / name).read_bytes()).hexdigest() != digest:
            raise VerificationError(f"{name}: digest mismatch")
    for n in net.nodes():
        if manifest["tables"].get(f"{n.layer}:{n.unit}") != n.table.digest():
            raise VerificationError(f"layer {n.layer} unit {n.unit}: table digest mismatch")
