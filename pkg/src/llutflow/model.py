"""Tree-assembled networks of L-LUT units.

Every unit of a :class:`LutLayer` hides a small MLP: ``subnet_depth`` hidden
affine + batch-norm + ReLU layers of width ``subnet_width``, split into
blocks of ``skip_step`` layers, each block bypassed by a learnable affine skip
projection that is added after the block's last ReLU. An output affine and
batch norm reduce to one scalar per unit, which is then (optionally) passed
through ReLU and quantized.

Only the last layer of each tree group applies the ReLU; the others quantize
onto a signed grid instead, so a purely affine path runs from the inputs of
a tree to its output through the skip projections of every unit on the way.

All units of a layer are stored stacked (leading ``units`` axis) and run as
one batched matmul. Training runs in float32 on the autodiff tape;
:meth:`Network.forward` in eval mode runs in float64 with frozen statistics
and is the reference the compiled truth tables must reproduce.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .config import ModelConfig, activation_layers, tree_groups, validate_config
from .errors import ShapeError
from .quant import QuantSpec, dequantize, fake_quantize, quantize_codes

EVAL_DTYPE = np.float64
EVAL_CHUNK = 1024


def _uniform(rng: np.random.Generator, shape: tuple, fan: int) -> np.ndarray:
    bound = np.sqrt(1.0 / max(fan, 1))
    return rng.uniform(-bound, bound, size=shape).astype(ad.DTYPE)


def consecutive_mapping(units: int, fan_in: int) -> np.ndarray:
    return np.arange(units * fan_in, dtype=np.int64).reshape(units, fan_in)


def random_mapping(rng: np.random.Generator, units: int, fan_in: int, width: int) -> np.ndarray:
    """Distinct random inputs per unit, sorted ascending."""
    rows = [np.sort(rng.choice(width, size=fan_in, replace=False)) for _ in range(units)]
    return np.asarray(rows, dtype=np.int64).reshape(units, fan_in)


def _blocks(depth: int, step: int) -> list[range]:
    return [range(s, min(s + step, depth)) for s in range(0, depth, step)]


class LutLayer:
    """One layer of ``units`` L-LUTs sharing fan-in, bit-widths and sub-network shape."""

    def __init__(self, index: int, units: int, fan_in: int, in_width: int, out_bits: int,
                 depth: int, width: int, skip_step: int, is_assemble: bool,
                 applies_activation: bool, rng: np.random.Generator):
        self.index = index
        self.units = units
        self.fan_in = fan_in
        self.in_width = in_width
        self.out_bits = out_bits
        self.depth = depth
        self.width = width
        self.skip_step = skip_step
        self.is_assemble = is_assemble
        self.applies_activation = applies_activation

        if is_assemble:
            self.mapping = consecutive_mapping(units, fan_in)
        else:
            self.mapping = random_mapping(rng, units, fan_in, in_width)

        U, N, F = units, width, fan_in
        self.hidden = []
        for j in range(depth):
            fan = F if j == 0 else N
            self.hidden.append((Parameter(_uniform(rng, (U, N, fan), fan)),
                                Parameter(_uniform(rng, (U, N), fan), requires_decay=False),
                                BatchNormState.create((U, N))))
        self.blocks = _blocks(depth, skip_step)
        self.skips = []
        for blk in self.blocks:
            fan = F if blk.start == 0 else N
            if fan == N:
                w = np.broadcast_to(np.eye(N, dtype=ad.DTYPE), (U, N, N)).copy()
            else:
                w = _uniform(rng, (U, N, fan), fan)
            self.skips.append((Parameter(w), Parameter(np.zeros((U, N)), requires_decay=False)))
        self.out_w = Parameter(_uniform(rng, (U, 1, N), N))
        self.out_b = Parameter(_uniform(rng, (U, 1), N), requires_decay=False)
        self.out_bn = BatchNormState.create((U, 1))
        self.scale = Parameter(np.float32(1.0), requires_decay=False)
        self.scale_ready = False

    # -- bookkeeping -------------------------------------------------------

    @property
    def signed(self) -> bool:
        return not self.applies_activation

    @property
    def out_spec(self) -> QuantSpec:
        return QuantSpec(self.out_bits, float(self.scale.data), self.signed)

    def parameters(self) -> list[Parameter]:
        ps = []
        for W, b, bn in self.hidden:
            ps += [W, b, bn.gain, bn.shift]
        for W, b in self.skips:
            ps += [W, b]
        return ps + [self.out_w, self.out_b, self.out_bn.gain, self.out_bn.shift, self.scale]

    def state(self) -> dict:
        """Flat name -> array view of everything that defines the layer's function."""
        p = f"layer{self.index}."
        s = {p + "mapping": self.mapping}
        for j, (W, b, bn) in enumerate(self.hidden):
            s.update(_bn_state(p + f"hidden{j}.", W, b, bn))
        for k, (W, b) in enumerate(self.skips):
            s[p + f"skip{k}.weight"] = W.data
            s[p + f"skip{k}.bias"] = b.data
        s.update(_bn_state(p + "out.", self.out_w, self.out_b, self.out_bn))
        s[p + "scale"] = self.scale.data
        return s

    def load_state(self, s: dict) -> None:
        p = f"layer{self.index}."
        self.mapping = np.asarray(s[p + "mapping"], dtype=np.int64)
        for j, (W, b, bn) in enumerate(self.hidden):
            _load_bn_state(s, p + f"hidden{j}.", W, b, bn)
        for k, (W, b) in enumerate(self.skips):
            W.data = np.array(s[p + f"skip{k}.weight"], dtype=ad.DTYPE)
            b.data = np.array(s[p + f"skip{k}.bias"], dtype=ad.DTYPE)
        _load_bn_state(s, p + "out.", self.out_w, self.out_b, self.out_bn)
        self.scale.data = np.array(s[p + "scale"], dtype=ad.DTYPE).reshape(())
        self.scale_ready = True

    # -- training path -----------------------------------------------------

    def forward_train(self, x: Tensor, quantize: bool = True,
                      scale_percentile: float = 99.9) -> Tensor:
        """Run all units on ``x[B, in_width]`` in train mode; returns ``[B, units]``."""
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(f"layer {self.index}: expected input width {self.in_width}, got {x.shape}")
        a = ad.gather_columns(x, self.mapping)
        for blk, (sW, sb) in zip(self.blocks, self.skips):
            block_in = a
            for j in blk:
                W, b, bn = self.hidden[j]
                a = ad.relu(ad.batch_norm(ad.affine(a, W, b), bn, "train"))
            a = ad.add(a, ad.affine(block_in, sW, sb))
        z = ad.batch_norm(ad.affine(a, self.out_w, self.out_b), self.out_bn, "train")
        z = ad.transpose(ad.reshape(z, (self.units, x.shape[0])), (1, 0))
        if self.applies_activation:
            z = ad.relu(z)
        if not quantize:
            return z
        if not self.scale_ready:
            self.calibrate_scale(z.data, scale_percentile)
        return fake_quantize(z, self.out_spec, self.scale)

    def calibrate_scale(self, values: np.ndarray, percentile: float = 99.9) -> None:
        s = float(np.percentile(np.abs(values), percentile))
        self.scale.data = np.asarray(s if s > 1e-6 else 1.0, dtype=ad.DTYPE)
        self.scale_ready = True

    # -- eval path ---------------------------------------------------------

    def eval_real(self, inputs: np.ndarray) -> np.ndarray:
        """Pre-quantization unit outputs in float64 with frozen batch-norm.

        ``inputs`` is ``[units, M, fan_in]`` (each unit's own inputs) or
        ``[M, fan_in]`` (the same inputs broadcast to every unit).
        Returns ``[units, M]``.
        """
        a = np.asarray(inputs, dtype=EVAL_DTYPE)
        if a.ndim == 2:
            a = np.broadcast_to(a, (self.units,) + a.shape)
        for blk, (sW, sb) in zip(self.blocks, self.skips):
            block_in = a
            for j in blk:
                W, b, bn = self.hidden[j]
                a = np.maximum(_bn_eval(_affine64(a, W, b), bn), 0.0)
            a = a + _affine64(block_in, sW, sb)
        z = _bn_eval(_affine64(a, self.out_w, self.out_b), self.out_bn)[..., 0]
        if self.applies_activation:
            z = np.maximum(z, 0.0)
        return z

    def eval_codes(self, inputs: np.ndarray) -> np.ndarray:
        return quantize_codes(self.eval_real(inputs), self.out_spec)


def _affine64(x: np.ndarray, W: Parameter, b: Parameter) -> np.ndarray:
    return x @ np.swapaxes(W.data.astype(EVAL_DTYPE), -1, -2) + b.data.astype(EVAL_DTYPE)[..., None, :]


def _bn_eval(x: np.ndarray, bn: BatchNormState) -> np.ndarray:
    mean = bn.running_mean.astype(EVAL_DTYPE)[..., None, :]
    inv = 1.0 / np.sqrt(bn.running_var.astype(EVAL_DTYPE) + bn.eps)
    gain = bn.gain.data.astype(EVAL_DTYPE)[..., None, :]
    shift = bn.shift.data.astype(EVAL_DTYPE)[..., None, :]
    return (x - mean) * inv[..., None, :] * gain + shift


def _bn_state(prefix: str, W, b, bn: BatchNormState) -> dict:
    return {prefix + "weight": W.data, prefix + "bias": b.data,
            prefix + "bn_gain": bn.gain.data, prefix + "bn_shift": bn.shift.data,
            prefix + "bn_mean": bn.running_mean, prefix + "bn_var": bn.running_var}


def _load_bn_state(s: dict, prefix: str, W, b, bn: BatchNormState) -> None:
    W.data = np.array(s[prefix + "weight"], dtype=ad.DTYPE)
    b.data = np.array(s[prefix + "bias"], dtype=ad.DTYPE)
    bn.gain.data = np.array(s[prefix + "bn_gain"], dtype=ad.DTYPE)
    bn.shift.data = np.array(s[prefix + "bn_shift"], dtype=ad.DTYPE)
    bn.running_mean = np.array(s[prefix + "bn_mean"], dtype=ad.DTYPE)
    bn.running_var = np.array(s[prefix + "bn_var"], dtype=ad.DTYPE)


@dataclass
class ForwardResult:
    values: np.ndarray
    codes: Optional[np.ndarray] = None


class Network:
    def __init__(self, config: ModelConfig, layers: list[LutLayer]):
        self.config = config
        self.layers = layers
        self.groups = tree_groups(config)
        self.input_spec = QuantSpec(config.input_bits, 1.0)

    @property
    def input_specs(self) -> list[QuantSpec]:
        return [self.input_spec] * self.config.input_feature_count

    def in_spec(self, layer: int) -> QuantSpec:
        return self.input_spec if layer == 0 else self.layers[layer - 1].out_spec

    @property
    def out_spec(self) -> QuantSpec:
        return self.layers[-1].out_spec

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def mappings(self) -> list[np.ndarray]:
        return [layer.mapping for layer in self.layers]

    def set_mapping(self, layer: int, mapping: np.ndarray) -> None:
        lay = self.layers[layer]
        mapping = np.asarray(mapping, dtype=np.int64)
        if lay.is_assemble:
            raise ShapeError(f"layer {layer}: assemble layers keep their fixed grouping")
        if mapping.shape != (lay.units, lay.fan_in):
            raise ShapeError(f"layer {layer}: mapping shape {mapping.shape} != {(lay.units, lay.fan_in)}")
        if mapping.min() < 0 or mapping.max() >= lay.in_width:
            raise ShapeError(f"layer {layer}: mapping index out of range [0, {lay.in_width})")
        if any(len(set(row)) != lay.fan_in for row in mapping.tolist()):
            raise ShapeError(f"layer {layer}: mapping indices must be distinct within a unit")
        lay.mapping = np.sort(mapping, axis=1)

    def state(self) -> dict:
        s = {}
        for layer in self.layers:
            s.update(layer.state())
        return s

    def load_state(self, s: dict) -> None:
        for layer in self.layers:
            layer.load_state(s)

    def snapshot(self) -> dict:
        return copy.deepcopy(self.state())

    def check_codes(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        if codes.ndim != 2 or codes.shape[1] != self.config.input_feature_count:
            raise ShapeError(f"expected input codes of width {self.config.input_feature_count}, "
                             f"got shape {codes.shape}")
        if codes.size and (codes.min() < 0 or codes.max() >= self.input_spec.code_count):
            raise ShapeError(f"input codes must lie in [0, {self.input_spec.code_count})")
        return codes

    def dequantize_inputs(self, codes: np.ndarray, dtype=EVAL_DTYPE) -> np.ndarray:
        return dequantize(self.check_codes(codes), self.input_spec, dtype)

    def forward_train(self, codes: np.ndarray, scale_percentile: float = 99.9) -> Tensor:
        x = Tensor(self.dequantize_inputs(codes, ad.DTYPE))
        for layer in self.layers:
            x = layer.forward_train(x, scale_percentile=scale_percentile)
        return x

    def forward(self, codes: np.ndarray, mode: str = "eval") -> ForwardResult:
        """Quantized forward pass; eval mode also returns the output codes."""
        if mode == "train":
            return ForwardResult(self.forward_train(codes).data)
        if mode != "eval":
            raise ValueError(f"unknown mode {mode!r}")
        codes = self.check_codes(codes)
        chunks = [self._eval_chunk(codes[i:i + EVAL_CHUNK]) for i in range(0, len(codes), EVAL_CHUNK)]
        if not chunks:
            w = self.config.layer_widths[-1]
            return ForwardResult(np.zeros((0, w)), np.zeros((0, w), dtype=np.int64))
        out = np.concatenate(chunks)
        return ForwardResult(dequantize(out, self.out_spec), out)

    def _eval_chunk(self, codes: np.ndarray) -> np.ndarray:
        for l, layer in enumerate(self.layers):
            x = dequantize(codes, self.in_spec(l))
            codes = layer.eval_codes(x[:, layer.mapping].transpose(1, 0, 2)).T
        return codes

    def layer_codes(self, codes: np.ndarray) -> list[np.ndarray]:
        """Eval-mode codes at every layer boundary, input first."""
        out = [np.asarray(codes)]
        for l, layer in enumerate(self.layers):
            x = dequantize(out[-1], self.in_spec(l))
            out.append(layer.eval_codes(x[:, layer.mapping].transpose(1, 0, 2)).T)
        return out


def build_network(config: ModelConfig, seed: int = 0) -> Network:
    """Construct a freshly initialized network; identical seeds give identical weights."""
    validate_config(config)
    rng = np.random.default_rng(seed)
    acts = activation_layers(config)
    layers = []
    for l in range(config.num_layers):
        layers.append(LutLayer(
            index=l, units=config.layer_widths[l], fan_in=config.fan_ins[l],
            in_width=config.in_width(l), out_bits=config.layer_bits[l],
            depth=config.subnet_depth, width=config.subnet_width, skip_step=config.skip_step,
            is_assemble=config.assemble_flags[l], applies_activation=acts[l], rng=rng))
    return Network(config, layers)
