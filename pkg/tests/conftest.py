import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from llutflow.config import load_config  # noqa: E402
from llutflow.data import synthetic  # noqa: E402
from llutflow.model import build_network  # noqa: E402
from llutflow.trainer import TaskData, TrainHyperparams, run_pipeline  # noqa: E402


def randomized_network(cfg, seed=0, calib_rows=64):
    """Fresh network with non-trivial batch-norm state and calibrated scales."""
    if isinstance(cfg, str):
        cfg = load_config(cfg)
    net = build_network(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for layer in net.layers:
        for bn in [h[2] for h in layer.hidden] + [layer.out_bn]:
            shape = bn.gain.shape
            bn.gain.data = rng.uniform(0.5, 1.5, shape).astype(np.float32)
            bn.shift.data = rng.normal(0, 0.2, shape).astype(np.float32)
    codes = rng.integers(0, 1 << cfg.input_bits, size=(calib_rows, cfg.input_feature_count))
    net.forward_train(codes)
    return net


def train_small(cfg_name, seed=0, epochs=8, rows=1500, **kw):
    cfg = load_config(cfg_name)
    ds = synthetic("random", {"features": cfg.input_feature_count, "rows": rows,
                              "classes": max(2, cfg.layer_widths[-1])}, seed)
    data = TaskData.from_dataset(ds, cfg.input_bits)
    hyper = TrainHyperparams(epochs=epochs, pretrain_epochs=3, batch_size=128, seed=seed, **kw)
    return run_pipeline(cfg, data, hyper), data


@pytest.fixture(scope="session")
def trained_toy():
    return train_small("toy", epochs=15)


@pytest.fixture(scope="session")
def trained_nid():
    return train_small("nid", epochs=4, rows=2000)


# ------------------------------------------------------------ acceptance report

ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
