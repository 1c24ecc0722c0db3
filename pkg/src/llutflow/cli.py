"""Command-line toolflow: train -> compile -> verify -> emit -> report.

Every command works on a run directory (``--out``)::

    checkpoint.llck     trained network + config + input encoder
    metrics.csv         epoch, train_loss, test_accuracy
    test_split.npz      encoded test split used by verify
    tables/             one truth table per unit + manifest.json
    netlist-<policy>.txt, verify-<policy>.json
    rtl-<policy>/       Verilog + golden vectors + manifest.json
    manifest.json       run manifest; each stage records its upstream digests

Exit codes: 0 ok, 2 config, 3 data, 4 training, 5 verification/integrity.

Datasets (``--dataset``):

``synthetic:<kind>[?k=v&...]``
    generated on the fly (kinds: parity, planted_relevance, identity, random)
``mnist:<dir>``, ``csv:<path>:<schema>``
    files on disk
``mnist``, ``unsw_nb15``, ``jsc_openml``, ``jsc_cernbox``
    looked up under ``$LLUTFLOW_DATA`` (``mnist/``, ``<name>.csv``)
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qsl

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, file_digest, load_checkpoint, save_checkpoint
from .compiler import compile_network, export_tables, import_tables, manifest_digest
from .config import load_config
from .data import Dataset, load_csv, load_mnist, subsample, synthetic, train_test_split
from .errors import (CheckpointError, CompileError, ConfigError, DataError, LlutError, NetlistError,
                     TableFormatError, TrainingError, VerificationError)
from .netlist import (PipelinePolicy, build_netlist, classify, dump_netlist, simulate_layers, stats,
                      stats_table)
from .rtl import check_fidelity, emit_golden_vectors, emit_verilog, write_bundle
from .trainer import TaskData, TrainHyperparams, run_pipeline, write_history

log = logging.getLogger("llutflow")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_VERIFY = 0, 2, 3, 4, 5
DATA_ENV = "LLUTFLOW_DATA"
NAMED_CSV = {"unsw_nb15": "unsw_nb15", "jsc_openml": "jsc_openml", "jsc_cernbox": "jsc_cernbox"}
POLICIES = ("every-3", "every-layer")


@dataclass
class RunManifest:
    config_digest: str = ""
    dataset_digest: str = ""
    seed: int = 0
    config_name: str = ""
    dataset: str = ""
    flags: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        if not p.exists():
            return cls()
        return cls(**json.loads(p.read_text()))

    def save(self, run_dir) -> None:
        Path(run_dir, "manifest.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- datasets

def resolve_dataset(spec: str, cfg, seed: int) -> Dataset:
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        name, _, query = rest.partition("?")
        params = {}
        for k, v in parse_qsl(query):
            if "," in v or (k in ("bits", "relevant") and name != "identity"):
                params[k] = [int(x) for x in v.split(",")]
            else:
                params[k] = _num(v)
        params.setdefault("features", cfg.input_feature_count)
        if name == "random":
            params.setdefault("classes", max(2, cfg.layer_widths[-1]))
        return synthetic(name, params, seed)
    if kind == "mnist" and rest:
        return load_mnist(rest)
    if kind == "csv":
        path, _, schema = rest.rpartition(":")
        if not path:
            raise DataError("csv datasets are written csv:<path>:<schema>")
        return load_csv(path, schema)
    root = os.environ.get(DATA_ENV)
    if kind in ("mnist",) + tuple(NAMED_CSV):
        if not root:
            raise DataError(f"dataset {kind!r} needs ${DATA_ENV} pointing at a data directory")
        if kind == "mnist":
            return load_mnist(Path(root) / "mnist")
        path = Path(root) / f"{kind}.csv"
        if not path.exists():
            raise DataError(f"{path} not found (expected under ${DATA_ENV})")
        return load_csv(path, NAMED_CSV[kind], name=kind)
    raise DataError(f"unknown dataset spec {spec!r}")


def _num(v: str):
    try:
        return int(v)
    except ValueError:
        return float(v)


def prepare_dataset(spec: str, cfg, seed: int, subsample_rows: Optional[int]) -> Dataset:
    ds = resolve_dataset(spec, cfg, seed)
    if ds.num_features != cfg.input_feature_count:
        raise DataError(f"dataset {ds.name} has {ds.num_features} features but the config "
                        f"expects input_feature_count={cfg.input_feature_count}")
    if "test" not in ds.splits:
        ds = train_test_split(ds, 0.2, seed)
    if subsample_rows:
        ds = subsample(ds, "train", subsample_rows, seed)
    return ds


# ---------------------------------------------------------------- helpers

@contextlib.contextmanager
def _deterministic(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _run_dir(args) -> Path:
    p = Path(args.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_run_checkpoint(run: Path, manifest: RunManifest) -> Checkpoint:
    path = run / "checkpoint.llck"
    ck = load_checkpoint(path)
    want = manifest.stages.get("train", {}).get("checkpoint_sha256")
    if want and file_digest(path) != want:
        raise CheckpointError(f"{path}: digest does not match the run manifest; refusing to use it")
    return ck


def _load_run_tables(run: Path, manifest: RunManifest):
    tdir = run / "tables"
    want = manifest.stages.get("compile", {}).get("manifest_sha256")
    if want and manifest_digest(tdir) != want:
        raise TableFormatError(f"{tdir}: table manifest does not match the run manifest")
    return import_tables(tdir)


def _policy(name: str) -> PipelinePolicy:
    return PipelinePolicy.parse(name)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.no_tree_skips:
        cfg.tree_skips = False
    ds = prepare_dataset(args.dataset, cfg, args.seed, args.subsample)
    data = TaskData.from_dataset(ds, cfg.input_bits)
    hyper = TrainHyperparams(
        lr=args.lr, epochs=args.epochs, pretrain_epochs=args.pretrain_epochs,
        batch_size=args.batch_size, seed=args.seed, learned_mapping=not args.no_learned_mapping,
        augment=args.augment, eval_every=args.eval_every)
    run = _run_dir(args)
    t0 = time.time()
    with _deterministic(args.deterministic):
        result = run_pipeline(cfg, data, hyper)
    ck = Checkpoint(cfg, result.network.state(), data.encoder, hyper.to_dict(),
                    {"best_test_accuracy": result.best_accuracy, "best_epoch": result.best_epoch},
                    {"dataset": ds.name})
    digest = save_checkpoint(ck, run / "checkpoint.llck")
    write_history(run / "metrics.csv", result.history)
    np.savez(run / "test_split.npz", codes=data.test_codes, labels=data.test_labels)
    m = RunManifest(cfg.digest(), ds.digest(), args.seed, cfg.name, args.dataset,
                    {"learned_mapping": hyper.learned_mapping, "tree_skips": cfg.tree_skips,
                     "augment": hyper.augment, "epochs": hyper.epochs, "subsample": args.subsample})
    m.stages["train"] = {"checkpoint": "checkpoint.llck", "checkpoint_sha256": digest,
                         "metrics": "metrics.csv", "seconds": round(time.time() - t0, 1)}
    m.metrics = {"test_accuracy": result.best_accuracy, "best_epoch": result.best_epoch}
    m.save(run)
    print(f"trained {cfg.name}: best test accuracy {result.best_accuracy:.4f} "
          f"at epoch {result.best_epoch}; checkpoint {run / 'checkpoint.llck'}")
    return EXIT_OK


def cmd_compile(args) -> int:
    run = _run_dir(args)
    m = RunManifest.load(run)
    ck = load_checkpoint(args.checkpoint) if args.checkpoint else _load_run_checkpoint(run, m)
    tables = compile_network(ck.network(), allow_large=args.allow_large)
    export_tables(tables, run / "tables")
    m.stages["compile"] = {"tables": "tables", "count": len(tables),
                           "manifest_sha256": manifest_digest(run / "tables"),
                           "upstream_checkpoint_sha256": file_digest(args.checkpoint) if args.checkpoint
                           else m.stages.get("train", {}).get("checkpoint_sha256", "")}
    m.save(run)
    print(f"compiled {len(tables)} truth tables into {run / 'tables'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    run = _run_dir(args)
    m = RunManifest.load(run)
    ck = _load_run_checkpoint(run, m)
    net = ck.network()
    tables = _load_run_tables(run, m)
    policy = _policy(args.policy)
    nl = build_netlist(tables, net.mappings(), policy, net.config.input_feature_count, net.config.input_bits)
    rng = np.random.default_rng(args.seed)
    samples = rng.integers(0, 1 << net.config.input_bits, size=(args.samples, net.config.input_feature_count))
    split = run / "test_split.npz"
    test_codes = test_labels = None
    if split.exists():
        with np.load(split) as z:
            test_codes, test_labels = z["codes"], z["labels"]
        samples = np.vstack([test_codes, samples]) if len(test_codes) else samples
    # compare every layer boundary: a bad entry can be masked by later layers
    want_layers = net.layer_codes(samples)[1:]
    got_layers = simulate_layers(nl, samples)[1:]
    bad = np.zeros(len(samples), dtype=bool)
    for w, g in zip(want_layers, got_layers):
        bad |= np.any(w != g, axis=1)
    diff = np.flatnonzero(bad)
    want, got = want_layers[-1], got_layers[-1]
    st = stats(nl)
    report = {"policy": policy.name, "samples": int(len(samples)), "mismatches": int(diff.size),
              "stats": st.as_row(), "upstream_tables_sha256": manifest_digest(run / "tables")}
    if test_codes is not None and len(test_codes):
        pred = classify(got[:len(test_codes)], nl.output_bits)
        report["netlist_test_accuracy"] = float(np.mean(pred == test_labels))
    if diff.size:
        i = int(diff[0])
        l = next(l for l, (w, g) in enumerate(zip(want_layers, got_layers)) if np.any(w[i] != g[i]))
        u = int(np.flatnonzero(want_layers[l][i] != got_layers[l][i])[0])
        report["first_mismatch"] = {"index": i, "input": samples[i].tolist(), "layer": l, "unit": u,
                                    "model": want[i].tolist(), "netlist": got[i].tolist()}
    (run / f"netlist-{policy.name}.txt").write_text(dump_netlist(nl))
    (run / f"verify-{policy.name}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    m.stages.setdefault("verify", {})[policy.name] = report
    m.save(run)
    print(stats_table([{"policy": policy.name, "samples": len(samples), "mismatches": int(diff.size),
                        **st.as_row()}]), end="")
    if diff.size:
        f = report["first_mismatch"]
        print(f"first mismatch at sample {f['index']} (layer {f['layer']} unit {f['unit']}): "
              f"input={f['input']} model={f['model']} netlist={f['netlist']}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_emit(args) -> int:
    run = _run_dir(args)
    m = RunManifest.load(run)
    ck = _load_run_checkpoint(run, m)
    net = ck.network()
    tables = _load_run_tables(run, m)
    policy = _policy(args.policy)
    nl = build_netlist(tables, net.mappings(), policy, net.config.input_feature_count, net.config.input_bits)
    bundle = emit_verilog(nl, args.prefix)
    bad = check_fidelity(bundle, nl)
    if bad:
        raise VerificationError(f"{bad} emitted case arms disagree with their tables")
    rng = np.random.default_rng(args.seed)
    vec = rng.integers(0, 1 << nl.input_bits, size=(args.vectors, nl.input_features))
    out = run / f"rtl-{policy.name}"
    write_bundle(bundle, out, emit_golden_vectors(nl, vec))
    m.stages.setdefault("emit", {})[policy.name] = {
        "dir": out.name, "modules": bundle.module_count, "input_width": bundle.input_width,
        "output_width": bundle.output_width, "upstream_tables_sha256": manifest_digest(run / "tables")}
    m.save(run)
    print(f"wrote {len(bundle.files)} Verilog files ({bundle.module_count} modules) to {out}")
    return EXIT_OK


def report_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        m = RunManifest.load(p)
        base = {"run": Path(p).name if Path(p).is_dir() else Path(p).parent.name,
                "config": m.config_name, "seed": m.seed,
                "learned_mapping": m.flags.get("learned_mapping", ""),
                "tree_skips": m.flags.get("tree_skips", ""),
                "test_accuracy": m.metrics.get("test_accuracy", float("nan"))}
        verify = m.stages.get("verify", {})
        if not verify:
            rows.append(base)
        for policy in sorted(verify):
            rep = verify[policy]
            rows.append({**base, "policy": policy, "mismatches": rep["mismatches"], **rep["stats"]})
    return rows


def cmd_report(args) -> int:
    print(stats_table(report_rows(args.manifests), args.format), end="")
    return EXIT_OK


def cmd_run(args) -> int:
    for step in (cmd_train, cmd_compile):
        rc = step(args)
        if rc:
            return rc
    policies = ["every-layer", "every-3"] if args.policy == "both" else [args.policy]
    for p in policies:
        args.policy = p
        for step in (cmd_verify, cmd_emit):
            rc = step(args)
            if rc:
                return rc
    return cmd_report(argparse.Namespace(manifests=[args.out], format="text"))


# ---------------------------------------------------------------- parser

def _add_train_flags(p):
    p.add_argument("--config", required=True, help="config file or shipped config name")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--subsample", type=int, default=None, help="cap on training rows")
    p.add_argument("--no-learned-mapping", action="store_true", help="keep random input mappings")
    p.add_argument("--no-tree-skips", action="store_true",
                   help="activation after every layer (skips stay inside each L-LUT)")
    p.add_argument("--augment", action="store_true", help="shift/rotate image augmentation")


def _add_common(p, policy=True):
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    if policy:
        p.add_argument("--policy", choices=sorted(POLICIES), default="every-3")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="llutflow", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train, select mappings, retrain with QAT")
    _add_train_flags(p)
    _add_common(p, policy=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compile", help="enumerate every unit into a truth table")
    _add_common(p, policy=False)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--allow-large", action="store_true")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("verify", help="simulate the netlist against the model")
    _add_common(p)
    p.add_argument("--samples", type=int, default=10000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("emit", help="write Verilog and golden vectors")
    _add_common(p)
    p.add_argument("--prefix", default="llut")
    p.add_argument("--vectors", type=int, default=256)
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("report", help="tabulate one or more run manifests")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="train, compile, verify, emit and report in one go")
    _add_train_flags(p)
    _add_common(p, policy=False)
    p.add_argument("--policy", choices=sorted(POLICIES) + ["both"], default="both")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--allow-large", action="store_true")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--prefix", default="llut")
    p.add_argument("--vectors", type=int, default=256)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (VerificationError, CheckpointError, TableFormatError, NetlistError) as exc:
        print(f"verification error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except CompileError as exc:
        print(f"compile error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LlutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
