"""Three-stage training: dense proxy pre-training, fan-in selection, sparse QAT.

Stage 1 replaces every learned-mapping layer by a :class:`DenseProxyLayer`,
a plain affine map over *all* previous-layer outputs, and trains the proxy
with a group-lasso penalty on the weight of every (unit, input) pair. Stage
2 keeps the ``F`` inputs with the largest surviving weight per unit. Stage 3
builds a fresh network with those mappings and trains it with fake
quantization at every layer boundary.

Because each proxy group holds exactly one weight, the group-lasso term is
the L1 norm of the proxy weights. The relevance score of an input is the
magnitude of its weight after pre-training.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tape, Tensor
from .config import ModelConfig, activation_layers
from .data import Dataset
from .errors import ConfigError, DataError, TrainingError
from .model import LutLayer, Network, _uniform, build_network
from .netlist import classify
from .optim import AdamW, CosineWarmRestarts, optimizer_step
from .quant import FeatureEncoder

log = logging.getLogger(__name__)

# Quantized outputs span [0, s] (or [-s, s]); the loss rescales them so the
# logits span this many units regardless of the learned scale.
LOGIT_RANGE = 8.0


@dataclass
class TrainHyperparams:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    group_lambda: float = 1e-4
    epochs: int = 50
    pretrain_epochs: int = 10
    batch_size: int = 256
    t0: float = 50.0
    t_mult: float = 2.0
    seed: int = 0
    learned_mapping: bool = True
    augment: bool = False
    eval_every: int = 1

    def __post_init__(self):
        bad = [f.name for f in fields(self)
               if f.name in ("lr", "batch_size", "t0", "t_mult", "eval_every")
               and not getattr(self, f.name) > 0]
        bad += [n for n in ("weight_decay", "group_lambda", "epochs", "pretrain_epochs")
                if getattr(self, n) < 0]
        if bad:
            raise ConfigError(f"invalid training hyperparameters: {', '.join(bad)}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyperparams":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TaskData:
    """Encoded train/test splits plus what is needed to re-encode raw rows."""

    encoder: FeatureEncoder
    train_raw: np.ndarray
    train_codes: np.ndarray
    train_labels: np.ndarray
    test_codes: np.ndarray
    test_labels: np.ndarray
    image_shape: Optional[tuple] = None

    @classmethod
    def from_dataset(cls, ds: Dataset, input_bits: int) -> "TaskData":
        """Fit the input quantizer on the train split only, then encode both splits."""
        x_tr, y_tr = ds.split("train")
        if len(y_tr) == 0:
            raise DataError(f"{ds.name}: empty train split")
        x_te, y_te = ds.split("test") if "test" in ds.splits else (x_tr[:0], y_tr[:0])
        enc = FeatureEncoder.fit(x_tr, input_bits)
        return cls(enc, x_tr, enc.encode(x_tr), y_tr, enc.encode(x_te), y_te, ds.image_shape)


# ---------------------------------------------------------------- losses

def _task_loss(out: Tensor, labels: np.ndarray, scale: Optional[float]) -> Tensor:
    """BCE for a single output unit, otherwise softmax cross-entropy.

    With ``scale`` the outputs are quantized values in ``[0, scale]`` and are
    mapped to logits first; without it they are treated as raw logits.
    """
    if out.shape[1] == 1:
        z = ad.reshape(out, (out.shape[0],))
        if scale is not None:
            z = ad.scale_shift(z, LOGIT_RANGE / scale, -LOGIT_RANGE / 2)
        if np.any((labels != 0) & (labels != 1)):
            raise DataError("single-output networks need 0/1 labels")
        return ad.bce_with_logits(z, labels)
    if scale is not None:
        out = ad.scale_shift(out, LOGIT_RANGE / scale)
    return ad.cross_entropy(out, labels)


def _check_finite(loss: Tensor, stage: str, epoch: int, seed: int, cfg: ModelConfig) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"{stage} diverged at epoch {epoch} (loss={value}); "
                            f"seed={seed} config={cfg.name or cfg.digest()[:12]}")
    return value


def _check_params(params: list, stage: str, epoch: int, seed: int, cfg: ModelConfig) -> None:
    # catches overflow in weights whose effect on the loss is masked this step
    for p in params:
        if not np.isfinite(p.data).all():
            raise TrainingError(f"{stage} diverged at epoch {epoch} (non-finite parameters); "
                                f"seed={seed} config={cfg.name or cfg.digest()[:12]}")


def _batches(rng: np.random.Generator, n: int, batch: int):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        idx = order[i:i + batch]
        if len(idx) >= 2:  # batch-norm needs two samples
            yield idx


def _num_batches(n: int, batch: int) -> int:
    full, rest = divmod(n, batch)
    return full + (1 if rest >= 2 else 0)


# ---------------------------------------------------------------- stage 1

class DenseProxyLayer:
    """Affine scoring layer over every previous-layer output, one group per weight."""

    def __init__(self, units: int, in_width: int, applies_activation: bool, rng):
        self.units = units
        self.in_width = in_width
        self.applies_activation = applies_activation
        self.weight = Parameter(_uniform(rng, (units, in_width), in_width))
        self.bias = Parameter(np.zeros(units), requires_decay=False)
        self.bn = BatchNormState.create((units,))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias, self.bn.gain, self.bn.shift]

    def forward(self, x: Tensor) -> Tensor:
        z = ad.batch_norm(ad.affine(x, self.weight, self.bias), self.bn, "train")
        return ad.relu(z) if self.applies_activation else z

    def penalty(self) -> Tensor:
        return ad.group_l2_sum(self.weight, axis=())

    def scores(self) -> np.ndarray:
        return np.abs(self.weight.data).astype(np.float64)


def build_proxy(cfg: ModelConfig, seed: int) -> list:
    rng = np.random.default_rng(seed)
    acts = activation_layers(cfg)
    last = cfg.num_layers - 1
    layers = []
    for l in range(cfg.num_layers):
        act = acts[l] and l != last  # the final proxy layer emits logits
        if cfg.assemble_flags[l]:
            layers.append(LutLayer(l, cfg.layer_widths[l], cfg.fan_ins[l], cfg.in_width(l),
                                   cfg.layer_bits[l], cfg.subnet_depth, cfg.subnet_width,
                                   cfg.skip_step, True, act, rng))
        else:
            layers.append(DenseProxyLayer(cfg.layer_widths[l], cfg.in_width(l), act, rng))
    return layers


def _proxy_forward(layers: list, x: Tensor) -> Tensor:
    for layer in layers:
        x = layer.forward(x) if isinstance(layer, DenseProxyLayer) else layer.forward_train(x, quantize=False)
    return x


def group_penalty(layers: list) -> Optional[Tensor]:
    terms = [layer.penalty() for layer in layers if isinstance(layer, DenseProxyLayer)]
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def dense_pretrain(cfg: ModelConfig, data: TaskData, hyper: TrainHyperparams) -> dict:
    """Train the dense proxy; return ``{layer: scores[w_l, in_width]}`` for learned layers."""
    layers = build_proxy(cfg, hyper.seed)
    params = [p for layer in layers for p in layer.parameters()]
    opt = AdamW(params, hyper.weight_decay)
    sched = CosineWarmRestarts(hyper.lr, hyper.t0, hyper.t_mult)
    rng = np.random.default_rng(hyper.seed + 1)
    x_all = data.train_codes / float((1 << cfg.input_bits) - 1)
    n = len(data.train_labels)
    nb = _num_batches(n, hyper.batch_size)
    for epoch in range(hyper.pretrain_epochs):
        for i, idx in enumerate(_batches(rng, n, hyper.batch_size)):
            with Tape() as tape:
                out = _proxy_forward(layers, Tensor(x_all[idx]))
                loss = _task_loss(out, data.train_labels[idx], None)
                pen = group_penalty(layers)
                if pen is not None and hyper.group_lambda:
                    loss = ad.add(loss, ad.scale_shift(pen, hyper.group_lambda))
            _check_finite(loss, "dense pre-training", epoch, hyper.seed, cfg)
            opt.zero_grad()
            ad.backward(tape, loss)
            optimizer_step(opt, sched, epoch + i / max(nb, 1))
            _check_params(params, "dense pre-training", epoch, hyper.seed, cfg)
    return {l: layer.scores() for l, layer in enumerate(layers) if isinstance(layer, DenseProxyLayer)}


# ---------------------------------------------------------------- stage 2

def select_mapping(scores: np.ndarray, fan_in: int) -> np.ndarray:
    """Per row, the ``fan_in`` highest scores (lower index wins ties), sorted ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[None, :]
    if fan_in > scores.shape[1]:
        raise ConfigError(f"fan-in {fan_in} exceeds the {scores.shape[1]} candidate inputs")
    if fan_in < 1:
        raise ConfigError("fan-in must be >= 1")
    top = np.argsort(-scores, axis=1, kind="stable")[:, :fan_in]
    return np.sort(top, axis=1).astype(np.int64)


# ---------------------------------------------------------------- stage 3

@dataclass
class TrainResult:
    network: Network
    history: list = field(default_factory=list)  # (epoch, train_loss, test_accuracy)
    best_epoch: int = 0
    best_accuracy: float = float("nan")
    scores: dict = field(default_factory=dict)


def evaluate(network: Network, codes: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the quantized eval-mode network."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot evaluate on an empty split")
    out = network.forward(codes, "eval").codes
    return float(np.mean(classify(out, network.out_spec.bits) == labels))


def _calibrate(network: Network, codes: np.ndarray, batch: int) -> None:
    # One untaped pass fixes every output scale and seeds batch-norm statistics.
    if len(codes) >= 2 and not all(layer.scale_ready for layer in network.layers):
        network.forward_train(codes[:max(batch, 2)])


def train_sparse(network: Network, data: TaskData, hyper: TrainHyperparams,
                 augment_fn: Optional[Callable] = None) -> TrainResult:
    """QAT training of ``network`` with its mappings frozen; keeps the best epoch."""
    cfg = network.config
    mappings = [m.copy() for m in network.mappings()]
    _calibrate(network, data.train_codes, hyper.batch_size)
    opt = AdamW(network.parameters(), hyper.weight_decay)
    sched = CosineWarmRestarts(hyper.lr, hyper.t0, hyper.t_mult)
    rng = np.random.default_rng(hyper.seed + 2)
    has_test = len(data.test_labels) > 0
    eval_codes = data.test_codes if has_test else data.train_codes
    eval_labels = data.test_labels if has_test else data.train_labels
    n = len(data.train_labels)
    nb = _num_batches(n, hyper.batch_size)

    result = TrainResult(network)
    best_state = network.snapshot()
    result.best_accuracy = evaluate(network, eval_codes, eval_labels) if len(eval_labels) else float("nan")
    for epoch in range(hyper.epochs):
        total, count = 0.0, 0
        for i, idx in enumerate(_batches(rng, n, hyper.batch_size)):
            if augment_fn is not None:
                codes = augment_fn(idx, rng)
            else:
                codes = data.train_codes[idx]
            with Tape() as tape:
                out = network.forward_train(codes)
                loss = _task_loss(out, data.train_labels[idx], float(network.layers[-1].scale.data))
            total += _check_finite(loss, "sparse training", epoch, hyper.seed, cfg) * len(idx)
            count += len(idx)
            opt.zero_grad()
            ad.backward(tape, loss)
            optimizer_step(opt, sched, epoch + i / max(nb, 1))
            _check_params(opt.params, "sparse training", epoch, hyper.seed, cfg)
            for layer in network.layers:
                # keep scales strictly positive
                layer.scale.data = np.maximum(layer.scale.data, np.float32(1e-4))
        last = epoch == hyper.epochs - 1
        acc = float("nan")
        if (epoch + 1) % hyper.eval_every == 0 or last:
            acc = evaluate(network, eval_codes, eval_labels)
            if acc > result.best_accuracy or math.isnan(result.best_accuracy):
                result.best_accuracy, result.best_epoch = acc, epoch + 1
                best_state = network.snapshot()
        result.history.append((epoch + 1, total / max(count, 1), acc))
        log.info("epoch %d loss %.5f acc %.4f", epoch + 1, total / max(count, 1), acc)
    network.load_state(best_state)
    for got, want in zip(network.mappings(), mappings):
        assert np.array_equal(got, want), "training changed a mapping"
    return result


# ---------------------------------------------------------------- augmentation

def transform_images(images: np.ndarray, shape: tuple, dx: np.ndarray, dy: np.ndarray,
                     angle_deg: np.ndarray) -> np.ndarray:
    """Rotate about the centre then translate, nearest-neighbour, zero fill.

    ``dx`` moves content right (+column), ``dy`` moves it down (+row).
    """
    images = np.asarray(images)
    h, w = shape
    b = images.shape[0]
    imgs = images.reshape(b, h, w)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(np.asarray(angle_deg, dtype=np.float64)).reshape(b, 1, 1)
    # inverse map: output pixel -> source pixel
    yo = rows[None] - np.asarray(dy).reshape(b, 1, 1) - cy
    xo = cols[None] - np.asarray(dx).reshape(b, 1, 1) - cx
    ys = np.cos(th) * yo - np.sin(th) * xo + cy
    xs = np.sin(th) * yo + np.cos(th) * xo + cx
    ys = np.floor(ys + 0.5).astype(np.int64)
    xs = np.floor(xs + 0.5).astype(np.int64)
    valid = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    bi = np.broadcast_to(np.arange(b).reshape(b, 1, 1), ys.shape)
    out = np.zeros_like(imgs)
    out[valid] = imgs[bi[valid], ys[valid], xs[valid]]
    return out.reshape(images.shape)


def augment(images: np.ndarray, rng: np.random.Generator, image_shape: Optional[tuple],
            max_shift: int = 2, max_rotation: float = 10.0) -> np.ndarray:
    """Random shift in ``[-max_shift, max_shift]`` pixels and rotation within ``+-max_rotation`` degrees."""
    if image_shape is None or len(image_shape) != 2:
        raise ConfigError("augmentation needs an image dataset (2-D image_shape)")
    if np.asarray(images).shape[1] != image_shape[0] * image_shape[1]:
        raise ConfigError(f"rows of width {np.asarray(images).shape[1]} are not {image_shape} images")
    b = len(images)
    dx = rng.integers(-max_shift, max_shift + 1, size=b)
    dy = rng.integers(-max_shift, max_shift + 1, size=b)
    ang = rng.uniform(-max_rotation, max_rotation, size=b) if max_rotation else np.zeros(b)
    return transform_images(images, image_shape, dx, dy, ang)


def image_augmenter(data: TaskData) -> Callable:
    """Batch hook for :func:`train_sparse`: augment raw rows, then encode them."""
    if data.image_shape is None:
        raise ConfigError("augmentation needs an image dataset")

    def fn(idx, rng):
        return data.encoder.encode(augment(data.train_raw[idx], rng, data.image_shape))

    return fn


# ---------------------------------------------------------------- pipeline

def run_pipeline(cfg: ModelConfig, data: TaskData, hyper: TrainHyperparams) -> TrainResult:
    """Pre-train, select mappings, retrain from scratch."""
    scores = {}
    if hyper.learned_mapping and hyper.pretrain_epochs > 0:
        scores = dense_pretrain(cfg, data, hyper)
    network = build_network(cfg, hyper.seed)
    for l, s in scores.items():
        network.set_mapping(l, select_mapping(s, cfg.fan_ins[l]))
    aug = image_augmenter(data) if hyper.augment else None
    result = train_sparse(network, data, hyper, aug)
    result.scores = scores
    return result


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_accuracy"])
        for epoch, loss, acc in history:
            w.writerow([epoch, repr(float(loss)), repr(float(acc))])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(e), float(l), float(a)) for e, l, a in rows]
