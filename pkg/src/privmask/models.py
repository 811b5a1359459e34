"""Small feedforward classifiers with exact per-sample gradients.

Plain numpy MLPs: hidden layers with relu or tanh, softmax output,
cross-entropy loss. Per-sample gradients are materialized explicitly because
differentially private training clips each sample's gradient before
aggregation. A finite-difference oracle in the test suite checks the
backward pass.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

# Confidence floor applied before any logit transform; log(q/(1-q)) diverges at {0,1}.
CONFIDENCE_FLOOR = 1e-12

_ACTIVATIONS = ("relu", "tanh")

MODEL_SNAPSHOT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a training run produces a non-finite loss or parameters."""


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Architecture knob: hidden widths and activation."""

    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be positive")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    early_stop_patience: int = 0  # 0 disables early stopping

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.early_stop_patience < 0:
            raise ValueError("invalid training configuration")


@dataclasses.dataclass
class MlpModel:
    layer_dims: tuple[int, ...]            # [K, h1, ..., num_classes]
    weights: list[np.ndarray]              # weights[l]: (dims[l+1], dims[l])
    biases: list[np.ndarray]               # biases[l]: (dims[l+1],)
    activation: str = "relu"
    train_seed: int | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError(f"bad layer dims {dims}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l} parameter shapes inconsistent with dims {dims}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")
        self.layer_dims = dims

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.activation, self.train_seed)


def init_model(num_features: int, num_classes: int, spec: ModelSpec, seed: int) -> MlpModel:
    """Symmetric uniform init scaled by 1/sqrt(fan_in), fully seeded."""
    if num_classes < 2:
        raise ValueError("need at least 2 output classes")
    dims = (num_features, *spec.hidden_dims, num_classes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(len(dims) - 1):
        bound = 1.0 / np.sqrt(dims[l])
        weights.append(rng.uniform(-bound, bound, size=(dims[l + 1], dims[l])))
        biases.append(rng.uniform(-bound, bound, size=dims[l + 1]))
    return MlpModel(dims, weights, biases, spec.activation, train_seed=seed)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(z.dtype) if kind == "relu" else 1.0 - a * a


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_cached(model: MlpModel, x: np.ndarray):
    """Returns (probs, pre-activations, activations incl. input)."""
    zs, activations = [], [x]
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if l == last else _act(z, model.activation)
        activations.append(a)
    return _softmax(zs[-1]), zs, activations


def predict_proba(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a (B, K) batch or a single K-vector."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} features, got {batch.shape[1]}")
    if not np.all(np.isfinite(batch)):
        raise ValueError("input contains non-finite values")
    probs, _, _ = _forward_cached(model, batch)
    return probs[0] if single else probs


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Probability vector over classes for a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single feature vector; use predict_proba for batches")
    return predict_proba(model, x)


def clamp_confidence(q):
    """Clamp confidences away from {0,1} so the logit transform stays finite."""
    return np.clip(q, CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR)


def confidence_for_labels(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """q = model probability assigned to each sample's own label, clamped."""
    probs = predict_proba(model, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    return clamp_confidence(probs[np.arange(len(labels)), labels])


def _check_batch(model, x, labels):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if x.shape[0] != labels.shape[0]:
        raise ValueError("feature/label count mismatch")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("label out of range for model output width")
    if x.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} features, got {x.shape[1]}")
    return x, labels


def _backward_deltas(model, zs, activations, dlogits):
    """Per-layer (dz, a_prev) pairs from output deltas, in layer order."""
    pairs = [None] * len(model.weights)
    dz = dlogits
    for l in range(len(model.weights) - 1, -1, -1):
        pairs[l] = (dz, activations[l])
        if l > 0:
            da = dz @ model.weights[l]
            dz = da * _act_grad(zs[l - 1], activations[l], model.activation)
    return pairs


def mean_cross_entropy(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> float:
    x, labels = _check_batch(model, x, labels)
    _, zs, _ = _forward_cached(model, x)
    logits = zs[-1]
    logp = logits - _logsumexp(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def _logsumexp(logits):
    m = logits.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def loss_and_per_sample_grads(model: MlpModel, x: np.ndarray,
                              labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the (B, P) matrix of flattened per-sample gradients.

    Gradients are of each sample's own loss (not the batch mean), so callers
    can clip per sample before averaging. Flattening order matches
    ``flatten_params`` / ``unflatten_params``.
    """
    x, labels = _check_batch(model, x, labels)
    b = x.shape[0]
    probs, zs, activations = _forward_cached(model, x)
    logp = zs[-1] - _logsumexp(zs[-1])
    loss = float(-logp[np.arange(b), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    pairs = _backward_deltas(model, zs, activations, dlogits)
    parts = []
    for dz, a_prev in pairs:
        parts.append(np.einsum("bo,bi->boi", dz, a_prev).reshape(b, -1))
        parts.append(dz)
    return loss, np.concatenate(parts, axis=1)


def _mean_grads(model, x, labels):
    """Batch-averaged gradients as per-layer arrays (fast path for plain SGD)."""
    b = x.shape[0]
    probs, zs, activations = _forward_cached(model, x)
    dlogits = probs
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    pairs = _backward_deltas(model, zs, activations, dlogits)
    return [(dz.T @ a_prev, dz.sum(axis=0)) for dz, a_prev in pairs]


def flatten_params(model: MlpModel) -> np.ndarray:
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def unflatten_params(model: MlpModel, flat: np.ndarray) -> MlpModel:
    """New model with parameters taken from a flat vector (same layout)."""
    weights, biases, i = [], [], 0
    dims = model.layer_dims
    for l in range(len(dims) - 1):
        n_w = dims[l + 1] * dims[l]
        weights.append(flat[i:i + n_w].reshape(dims[l + 1], dims[l]).copy())
        i += n_w
        biases.append(flat[i:i + dims[l + 1]].copy())
        i += dims[l + 1]
    if i != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, model needs {i}")
    return MlpModel(dims, weights, biases, model.activation, model.train_seed)


def accuracy(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions (argmax ties go to the lowest class)."""
    x, labels = _check_batch(model, x, labels)
    preds = predict_proba(model, x).argmax(axis=1)
    return float((preds == labels).mean())


def train_plain(features: np.ndarray, labels: np.ndarray, model_spec: ModelSpec,
                config: TrainConfig, num_classes: int | None = None) -> MlpModel:
    """Minibatch SGD with cross-entropy; optional early stopping on a held-out
    10% validation slice (patience > 0). Deterministic per config.seed."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    model = init_model(features.shape[1], num_classes, model_spec, config.seed)
    if config.epochs == 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))

    n = features.shape[0]
    val_idx = np.array([], dtype=np.int64)
    if config.early_stop_patience > 0 and n >= 10:
        perm = rng.permutation(n)
        n_val = max(1, n // 10)
        val_idx, fit_idx = perm[:n_val], perm[n_val:]
    else:
        fit_idx = np.arange(n)
    x_fit, y_fit = features[fit_idx], labels[fit_idx]

    best_loss, best_params, stale = np.inf, None, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_fit))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            grads = _mean_grads(model, x_fit[batch], y_fit[batch])
            for (gw, gb), w, b in zip(grads, model.weights, model.biases):
                w -= config.learning_rate * gw
                b -= config.learning_rate * gb
        if val_idx.size:
            val_loss = mean_cross_entropy(model, features[val_idx], labels[val_idx])
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"validation loss non-finite at epoch {epoch}")
            if val_loss < best_loss - 1e-12:
                best_loss, best_params, stale = val_loss, flatten_params(model), 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    break
        elif not all(np.all(np.isfinite(w)) for w in model.weights):
            raise TrainingDiverged(f"parameters non-finite after epoch {epoch}")
    if best_params is not None:
        model = unflatten_params(model, best_params)
    if not np.all(np.isfinite(flatten_params(model))):
        raise TrainingDiverged("final parameters non-finite")
    return model


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def save_model(model: MlpModel, path) -> None:
    doc = {
        "version": MODEL_SNAPSHOT_VERSION,
        "layer_dims": list(model.layer_dims),
        "activation": model.activation,
        "train_seed": model.train_seed,
        "params": flatten_params(model).tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> MlpModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != MODEL_SNAPSHOT_VERSION:
        raise ValueError(f"unsupported model snapshot version {doc.get('version')!r}")
    dims = tuple(doc["layer_dims"])
    template = MlpModel(
        dims,
        [np.zeros((dims[l + 1], dims[l])) for l in range(len(dims) - 1)],
        [np.zeros(dims[l + 1]) for l in range(len(dims) - 1)],
        doc["activation"],
        doc.get("train_seed"),
    )
    return unflatten_params(template, np.asarray(doc["params"], dtype=np.float64))
