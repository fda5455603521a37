"""Per-feature-vector estimator network and its training loop.

The estimator is a stack of affine layers with leaky-ReLU activations,
applied to each feature vector independently (the 1x1-convolution property:
no cross-pixel mixing), with either an evidential two-logit head or a
single-logit sigmoid head. Training is mini-batch Adam, fully deterministic
given the config seed, with optional early stopping on held-out rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import evidential as ev
from .numkernel import Rng

__all__ = [
    "HEAD_WIDTHS",
    "Estimator",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "init_model",
    "forward",
    "train",
    "predict_map",
    "save_model",
    "load_model",
]

HEAD_WIDTHS = {"evidential": 2, "sigmoid": 1}
CHECKPOINT_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears during training."""


@dataclass
class Estimator:
    layer_dims: list[int]
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]
    slope: float = 0.01
    head: str = "evidential"

    def copy(self) -> "Estimator":
        return Estimator(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.slope,
            self.head,
        )


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-5
    batch_size: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    head: str = "evidential"
    early_stopping: bool = False
    patience: int = 5
    val_fraction: float = 0.1


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    epochs_run: int = 0
    stopped_epoch: int | None = None
    best_epoch: int | None = None
    n_train: int = 0
    n_val: int = 0


def _check_head(head: str) -> None:
    if head not in HEAD_WIDTHS:
        raise ValueError(f"unknown head kind: {head!r}")


def init_model(
    layer_dims, seed: int, head: str = "evidential", slope: float = 0.01
) -> Estimator:
    """Seeded fan-in-scaled uniform init: W ~ U(-sqrt(6/fan_in), +...), b = 0."""
    dims = [int(d) for d in layer_dims]
    _check_head(head)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError(f"invalid layer dims: {dims}")
    if dims[-1] != HEAD_WIDTHS[head]:
        raise ValueError(
            f"final width {dims[-1]} incompatible with head {head!r} "
            f"(needs {HEAD_WIDTHS[head]})"
        )
    rng = Rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform_range(fan_in * fan_out, -bound, bound)
        weights.append(w.reshape(fan_in, fan_out))
        biases.append(np.zeros(fan_out))
    return Estimator(dims, weights, biases, slope=slope, head=head)


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0.0, 1.0, slope)


def _forward_cached(model: Estimator, x: np.ndarray):
    acts = [x]
    pres = []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pres.append(z)
        h = _leaky(z, model.slope) if i < last else z
        acts.append(h)
    return acts, pres


def forward(model: Estimator, features) -> np.ndarray:
    """Row-wise logits for an (N, D) batch of feature vectors."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ValueError(
            f"forward: expected (N, {model.layer_dims[0]}) input, got {x.shape}"
        )
    acts, _ = _forward_cached(model, x)
    return acts[-1]


def _backward(model: Estimator, acts, pres, dlogits):
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * _leaky_grad(
                pres[i - 1], model.slope
            )
    return grads_w, grads_b


def _batch_loss_grads(model: Estimator, xb, y_onehot, epoch: int):
    """Mean loss over the batch, its term breakdown, and parameter grads."""
    acts, pres = _forward_cached(model, xb)
    logits = acts[-1]
    n = xb.shape[0]
    if model.head == "evidential":
        alpha = ev.dirichlet_from_evidence(ev.evidence_from_logits(logits))
        parts = ev.edl_total_loss(alpha, y_onehot, epoch)
        loss = float(np.mean(parts.total))
        terms = {
            "log_loss": float(np.mean(parts.log_loss)),
            "kl_reg": float(np.mean(parts.kl_reg)),
        }
        dlogits = ev.edl_loss_grad(logits, y_onehot, epoch) / n
    else:
        z = logits[:, 0]
        y1 = y_onehot[:, 1]
        loss = float(np.mean(ev.bce_loss_from_logit(z, y1)))
        terms = {"bce": loss}
        dlogits = (ev.bce_grad_from_logit(z, y1) / n)[:, None]
    grads_w, grads_b = _backward(model, acts, pres, dlogits)
    return loss, terms, grads_w, grads_b


def _fit_loss(model: Estimator, x, y_onehot) -> float:
    """Classification-fit loss only (no regularizer): the validation metric.

    The annealed KL weight changes across epochs, which would make total
    losses incomparable between epochs; the fit term is the stable yardstick.
    """
    logits = forward(model, x)
    if model.head == "evidential":
        alpha = ev.dirichlet_from_evidence(ev.evidence_from_logits(logits))
        return float(np.mean(ev.edl_log_loss(alpha, y_onehot)))
    return float(np.mean(ev.bce_loss_from_logit(logits[:, 0], y_onehot[:, 1])))


class _Adam:
    def __init__(self, model: Estimator, cfg: TrainConfig):
        self.m = [np.zeros_like(p) for p in model.weights + model.biases]
        self.v = [np.zeros_like(p) for p in model.weights + model.biases]
        self.t = 0
        self.cfg = cfg

    def step(self, model: Estimator, grads_w, grads_b) -> None:
        self.t += 1
        cfg = self.cfg
        params = model.weights + model.biases
        grads = grads_w + grads_b
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def train(model: Estimator, features, labels, cfg: TrainConfig):
    """Mini-batch Adam on the mean per-row loss. Returns (model, report).

    Deterministic given cfg.seed: the validation split (when early stopping
    is enabled) and every epoch's shuffle come from one seeded stream. Early
    stopping restores the parameters of the best validation epoch.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2:
        raise ValueError(f"train: features must be (N, D), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError("train: labels must be one row label per feature row")
    if model.head != cfg.head:
        raise ValueError(f"model head {model.head!r} != config head {cfg.head!r}")
    if x.shape[0] < cfg.batch_size:
        raise ValueError(
            f"train: need at least batch_size={cfg.batch_size} rows, "
            f"got {x.shape[0]}"
        )
    if cfg.epochs < 1:
        raise ValueError("train: epochs must be >= 1")
    y_onehot = ev.one_hot(y)

    rng = Rng(cfg.seed)
    n = x.shape[0]
    if cfg.early_stopping:
        if not 0.0 < cfg.val_fraction < 1.0:
            raise ValueError("train: val_fraction must be in (0, 1)")
        split = rng.permutation(n)
        n_val = max(1, int(round(n * cfg.val_fraction)))
        val_idx, train_idx = split[:n_val], split[n_val:]
    else:
        n_val = 0
        val_idx = np.empty(0, dtype=np.intp)
        train_idx = np.arange(n, dtype=np.intp)

    x_train, y_train = x[train_idx], y_onehot[train_idx]
    x_val, y_val = x[val_idx], y_onehot[val_idx]
    n_train = x_train.shape[0]

    report = TrainReport(n_train=n_train, n_val=n_val)
    opt = _Adam(model, cfg)
    best_val = np.inf
    best_params: Estimator | None = None
    since_best = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, terms, gw, gb = _batch_loss_grads(
                model, x_train[batch], y_train[batch], epoch
            )
            if not np.isfinite(loss):
                detail = ", ".join(f"{k}={val:.6g}" for k, val in terms.items())
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, "
                    f"batch {start // cfg.batch_size} ({detail})"
                )
            opt.step(model, gw, gb)
            epoch_loss += loss * len(batch)
        report.train_loss.append(epoch_loss / n_train)
        report.lambdas.append(ev.lambda_schedule(epoch))
        report.epochs_run = epoch + 1

        if cfg.early_stopping:
            val = _fit_loss(model, x_val, y_val)
            report.val_loss.append(val)
            if val < best_val:
                best_val = val
                best_params = model.copy()
                report.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    report.stopped_epoch = epoch
                    break

    if cfg.early_stopping and best_params is not None:
        model.layer_dims = best_params.layer_dims
        model.weights = best_params.weights
        model.biases = best_params.biases
    return model, report


def predict_map(model: Estimator, fmap):
    """Apply the estimator to every pixel of an (H, W, D) feature map.

    Evidential head: returns the (H, W, 2) Dirichlet concentration map.
    Sigmoid head: returns the (H, W) out-of-distribution probability map.
    """
    fm = np.asarray(fmap, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[2] != model.layer_dims[0]:
        raise ValueError(
            f"predict_map: expected (H, W, {model.layer_dims[0]}), got {fm.shape}"
        )
    h, w, d = fm.shape
    logits = forward(model, fm.reshape(h * w, d))
    if model.head == "evidential":
        alpha = ev.dirichlet_from_evidence(ev.evidence_from_logits(logits))
        return alpha.reshape(h, w, 2)
    return ev.sigmoid(logits[:, 0]).reshape(h, w)


def save_model(path, model: Estimator) -> None:
    """Checkpoint: one tensor record per parameter plus a JSON header record."""
    from .data import write_tensor_file

    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_dims": model.layer_dims,
        "slope": model.slope,
        "head": model.head,
    }
    records: dict[str, np.ndarray] = {
        "header": np.frombuffer(
            json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    }
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        records[f"w{i}"] = w
        records[f"b{i}"] = b
    write_tensor_file(path, records)


def load_model(path) -> Estimator:
    from .data import DataError, read_tensor_file

    records = read_tensor_file(path)
    if "header" not in records:
        raise DataError(f"{path}: checkpoint is missing its header record")
    try:
        header = json.loads(bytes(records["header"]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported checkpoint format version "
            f"{header.get('format_version')!r}"
        )
    dims = [int(d) for d in header["layer_dims"]]
    head = header["head"]
    _check_head(head)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        for key, shape, store in (
            (f"w{i}", (fan_in, fan_out), weights),
            (f"b{i}", (fan_out,), biases),
        ):
            if key not in records:
                raise DataError(f"{path}: checkpoint is missing record {key!r}")
            arr = records[key]
            if arr.shape != shape:
                raise DataError(
                    f"{path}: record {key!r} has shape {arr.shape}, "
                    f"expected {shape}"
                )
            store.append(np.asarray(arr, dtype=np.float64))
    return Estimator(dims, weights, biases, slope=float(header["slope"]), head=head)
