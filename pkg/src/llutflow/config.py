"""Model configuration: the tree-assembled network topology.

Key names follow the usual notation for these networks:

=================  =======================================================
layer_widths       w_l, number of L-LUT units in layer l
assemble_flags     a_l, true for layers wired as fixed consecutive groups
fan_ins            F_l, inputs per unit in layer l
layer_bits         beta_l, output bit-width of layer l
input_bits         bit-width of each quantized input feature
subnet_depth       L, hidden layers of the MLP inside every L-LUT
subnet_width       N, width of those hidden layers
skip_step          S, hidden layers bypassed by each skip projection
=================  =======================================================
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Union

import yaml

from .errors import ConfigError

KEYS = ("layer_widths", "assemble_flags", "fan_ins", "layer_bits", "input_bits",
        "subnet_depth", "subnet_width", "skip_step", "input_feature_count")


@dataclass
class ModelConfig:
    layer_widths: list
    assemble_flags: list
    fan_ins: list
    layer_bits: list
    input_bits: int
    subnet_depth: int
    subnet_width: int
    skip_step: int
    input_feature_count: int
    name: str = ""
    # False re-enables the activation at every L-LUT output, which confines
    # the linear skip paths to single L-LUTs (ablation).
    tree_skips: bool = True

    def __post_init__(self):
        self.assemble_flags = [bool(a) for a in self.assemble_flags]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths)

    def in_width(self, layer: int) -> int:
        return self.input_feature_count if layer == 0 else self.layer_widths[layer - 1]

    def in_bits(self, layer: int) -> int:
        return self.input_bits if layer == 0 else self.layer_bits[layer - 1]

    def table_entries(self, layer: int) -> int:
        return 1 << (self.in_bits(layer) * self.fan_ins[layer])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        missing = [k for k in KEYS if k not in d]
        if missing:
            raise ConfigError(f"config is missing keys: {', '.join(missing)}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(source: Union[str, Path]) -> ModelConfig:
    """Read a YAML config file, or a shipped config by bare name (e.g. ``"nid"``)."""
    path = Path(source)
    if not path.exists() and path.suffix == "" and "/" not in str(source):
        shipped = resources.files("llutflow") / "configs" / f"{source}.yaml"
        if not shipped.is_file():
            raise ConfigError(f"no config file or shipped config named {source!r}")
        text = shipped.read_text()
    else:
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {source} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {source} must be a mapping")
    data.setdefault("name", path.stem)
    cfg = ModelConfig.from_dict(data)
    validate_config(cfg)
    return cfg


def save_config(cfg: ModelConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def shipped_configs() -> list[str]:
    root = resources.files("llutflow") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def validate_config(cfg: ModelConfig) -> None:
    """Raise ConfigError listing every violated constraint, with layer indices."""
    errs = []
    n = len(cfg.layer_widths)
    lens = {k: len(getattr(cfg, k)) for k in ("assemble_flags", "fan_ins", "layer_bits")}
    for k, v in lens.items():
        if v != n:
            errs.append(f"{k} has {v} entries but layer_widths has {n}")
    if n == 0:
        errs.append("layer_widths must list at least one layer")
    for k in ("subnet_depth", "subnet_width", "input_bits", "input_feature_count"):
        if int(getattr(cfg, k)) < 1:
            errs.append(f"{k} must be >= 1")
    if not 1 <= cfg.skip_step <= max(cfg.subnet_depth, 1):
        errs.append(f"skip_step S={cfg.skip_step} must satisfy 1 <= S <= subnet_depth L={cfg.subnet_depth}")
    if errs and any("entries" in e for e in errs):
        raise ConfigError("; ".join(errs))
    for l in range(n):
        w, F, beta = cfg.layer_widths[l], cfg.fan_ins[l], cfg.layer_bits[l]
        if w < 1:
            errs.append(f"layer {l}: layer width w_{l}={w} must be >= 1")
        if F < 1:
            errs.append(f"layer {l}: fan-in F_{l}={F} must be >= 1")
        if beta < 1:
            errs.append(f"layer {l}: bit-width beta_{l}={beta} must be >= 1")
        prev = cfg.in_width(l)
        if cfg.assemble_flags[l]:
            if l == 0:
                errs.append("layer 0: the first layer cannot be an assemble layer (a_0 must be 0)")
            elif prev != w * F:
                errs.append(f"layer {l}: assemble layer needs w_{l - 1}={prev} == w_{l}*F_{l}={w}*{F}={w * F}")
        elif F > prev:
            errs.append(f"layer {l}: fan-in F_{l}={F} exceeds the {prev} available inputs")
    if errs:
        raise ConfigError("; ".join(errs))


@dataclass(frozen=True)
class TreeGroup:
    start: int
    end: int

    @property
    def layers(self) -> range:
        return range(self.start, self.end + 1)


def tree_groups(cfg_or_flags) -> list[TreeGroup]:
    """Partition layers into maximal runs ``[a=0, a=1, ..., a=1]``."""
    flags = cfg_or_flags.assemble_flags if isinstance(cfg_or_flags, ModelConfig) else cfg_or_flags
    flags = [bool(a) for a in flags]
    if flags and flags[0]:
        raise ConfigError("layer 0: the first layer cannot be an assemble layer")
    groups = []
    for l, a in enumerate(flags):
        if not a:
            groups.append([l, l])
        else:
            groups[-1][1] = l
    return [TreeGroup(s, e) for s, e in groups]


def activation_layers(cfg: ModelConfig) -> list[bool]:
    """Per layer, whether its units apply the activation (last layer of each tree group)."""
    if not cfg.tree_skips:
        return [True] * cfg.num_layers
    ends = {g.end for g in tree_groups(cfg)}
    return [l in ends for l in range(cfg.num_layers)]


def tree_shape(total_fan_in: int, per_level_fan_ins: list) -> tuple[list, int]:
    """Node count per level of a tree reducing ``total_fan_in`` inputs to one output.

    Returns ``(counts, total)``; level ``k`` has
    ``total_fan_in / prod(per_level_fan_ins[:k+1])`` nodes.
    """
    counts = []
    remaining = total_fan_in
    for k, f in enumerate(per_level_fan_ins):
        if f < 1 or remaining % f:
            raise ConfigError(f"tree level {k}: {remaining} inputs cannot be grouped by fan-in {f}")
        remaining //= f
        counts.append(remaining)
    if remaining != 1:
        raise ConfigError(f"fan-ins {per_level_fan_ins} multiply to "
                          f"{total_fan_in // remaining}, not {total_fan_in}")
    return counts, sum(counts)
