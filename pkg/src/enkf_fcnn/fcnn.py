"""Fully connected ReLU network that predicts the small-ensemble analysis correction.

Hidden layers use ReLU, the output layer is affine. Inputs and targets are
standardized with training-set statistics that are stored in the model, so
:func:`forward` maps raw features to raw corrections. Training minimizes the
mean squared error in the standardized space with mini-batch Adam.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import artifacts
from .errors import (
    ContractViolation,
    CorruptFileError,
    ShapeMismatchError,
    TrainingDivergedError,
    TrainingError,
    VersionMismatchError,
)
from .numerics import RngStream

MODEL_FORMAT = "enkf-fcnn-model"
MODEL_VERSION = 1
INPUT_LAYOUT = "members-column-major,obs-mean,prev-analysis-mean"

#: Hidden layer sizes per model (input and output sizes follow the data layout).
PRESET_HIDDEN_SIZES = {"lorenz63": (60, 15, 7), "lorenz96": (200, 100, 40)}


@dataclass(frozen=True)
class FcnnConfig:
    layer_sizes: tuple
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 500
    patience: int = 50
    seed: int = 0
    activation: str = "relu"
    loss: str = "mse"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ContractViolation(f"need >= 2 layers of size >= 1, got {sizes}")
        if self.activation != "relu" or self.loss != "mse":
            raise ContractViolation("only ReLU hidden activations with MSE loss are supported")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ContractViolation("batch_size and patience must be >= 1, epochs >= 0")
        if not self.learning_rate > 0:
            raise ContractViolation("learning rate must be positive")

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]


def input_size(ensemble_size, state_dim, obs_dim):
    return ensemble_size * state_dim + obs_dim + state_dim


def build_input_vector(S_a_small, obs_mean, prev_analysis_mean):
    """Concatenate the small analysis ensemble, the measurement mean and the previous mean.

    ``S_a_small`` is ``d x N``; members are laid out one after another
    (column-major), member 0 first.
    """
    S = np.asarray(getattr(S_a_small, "members", S_a_small), dtype=np.float64)
    obs_mean = np.asarray(obs_mean, dtype=np.float64)
    prev = np.asarray(prev_analysis_mean, dtype=np.float64)
    if S.ndim != 2 or obs_mean.ndim != 1 or prev.ndim != 1:
        raise ContractViolation("expected a d x N ensemble and two vectors")
    if prev.shape[0] != S.shape[0]:
        raise ContractViolation(f"previous mean has {prev.shape[0]} components, ensemble has {S.shape[0]}")
    return np.concatenate([S.ravel(order="F"), obs_mean, prev])


@dataclass
class FcnnModel:
    config: FcnnConfig
    weights: list
    biases: list
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray
    input_constant: list = field(default_factory=list)
    output_constant: list = field(default_factory=list)
    layout: dict = field(default_factory=dict)
    training_meta: dict = field(default_factory=dict)
    #: per-epoch losses of the training run; not serialized
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        sizes = self.config.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeMismatchError(f"expected {len(sizes) - 1} layers, got {len(self.weights)} weights")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ShapeMismatchError(
                    f"layer {k}: weight {W.shape} / bias {b.shape}, expected ({sizes[k + 1]}, {sizes[k]})"
                )
        for name, vec, n in (
            ("input_mean", self.input_mean, sizes[0]),
            ("input_std", self.input_std, sizes[0]),
            ("output_mean", self.output_mean, sizes[-1]),
            ("output_std", self.output_std, sizes[-1]),
        ):
            if vec.shape != (n,):
                raise ShapeMismatchError(f"{name} has shape {vec.shape}, expected ({n},)")
        if not (np.all(self.input_std > 0) and np.all(self.output_std > 0)):
            raise ContractViolation("normalization std values must be positive")

    @property
    def n_params(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


def he_uniform(layer_sizes, rng):
    """Weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` drawn layer by layer, zero biases."""
    weights, biases = [], []
    for k in range(len(layer_sizes) - 1):
        fan_in, fan_out = layer_sizes[k], layer_sizes[k + 1]
        limit = math.sqrt(6.0 / fan_in)
        u = rng.uniforms(fan_in * fan_out).reshape(fan_out, fan_in)
        weights.append((2.0 * u - 1.0) * limit)
        biases.append(np.zeros(fan_out))
    return weights, biases


def init_model(config, layout=None):
    """Untrained He-initialized model with identity normalization."""
    weights, biases = he_uniform(config.layer_sizes, RngStream(config.seed).derive("init"))
    return _identity_model(config, weights, biases, layout)


def zero_model(config, layout=None):
    """Model whose output is identically zero."""
    sizes = config.layer_sizes
    weights = [np.zeros((sizes[k + 1], sizes[k])) for k in range(len(sizes) - 1)]
    biases = [np.zeros(sizes[k + 1]) for k in range(len(sizes) - 1)]
    return _identity_model(config, weights, biases, layout)


def _identity_model(config, weights, biases, layout):
    n_in, n_out = config.n_inputs, config.n_outputs
    return FcnnModel(
        config, weights, biases,
        np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out),
        layout=dict(layout or {}),
    )


def relu(x):
    return np.maximum(x, 0.0)


def _forward_cache(weights, biases, Z):
    """Pre-activations and activations for a batch ``Z`` of normalized inputs."""
    acts = [Z]
    pres = []
    a = Z
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W.T + b
        pres.append(z)
        a = z if k == last else relu(z)
        acts.append(a)
    return pres, acts


def forward_normalized(model, Z):
    return _forward_cache(model.weights, model.biases, np.atleast_2d(Z))[1][-1]


def forward(model, x):
    """Correction for one raw input vector, or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.config.n_inputs:
        raise ContractViolation(f"input has {X.shape[1]} features, model expects {model.config.n_inputs}")
    if not np.all(np.isfinite(X)):
        raise ContractViolation("non-finite network input")
    Z = (X - model.input_mean) / model.input_std
    Y = forward_normalized(model, Z) * model.output_std + model.output_mean
    return Y[0] if single else Y


def loss_mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractViolation(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def _gradients(weights, biases, Z, T):
    """MSE loss and its gradients for normalized inputs ``Z`` and targets ``T``."""
    pres, acts = _forward_cache(weights, biases, Z)
    diff = acts[-1] - T
    loss = float(np.mean(diff * diff))
    delta = (2.0 / diff.size) * diff
    gW = [None] * len(weights)
    gb = [None] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ weights[k]) * (pres[k - 1] > 0)
    return loss, gW, gb


def backward(model, x, target):
    """Gradients of the normalized-space MSE with respect to every weight and bias.

    Returns ``(weight_grads, bias_grads)``, lists aligned with the layers. A
    batch of inputs averages the loss over all samples and outputs.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    T = np.atleast_2d(np.asarray(target, dtype=np.float64))
    Z = (X - model.input_mean) / model.input_std
    Tn = (T - model.output_mean) / model.output_std
    _, gW, gb = _gradients(model.weights, model.biases, Z, Tn)
    return gW, gb


def standardization(X):
    """Per-column mean and std; zero-variance columns get std 1 and are reported."""
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    constant = np.flatnonzero(~(std > 0))
    std = np.where(std > 0, std, 1.0)
    return mean, std, [int(i) for i in constant]


def _as_pairs(pairs, n_in, n_out, name):
    X, Y = pairs
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] != Y.shape[0]:
        raise ContractViolation(f"{name}: {X.shape[0]} inputs but {Y.shape[0]} targets")
    if X.shape[0] and (X.shape[1] != n_in or Y.shape[1] != n_out):
        raise ContractViolation(
            f"{name}: pairs are {X.shape[1]} -> {Y.shape[1]}, network is {n_in} -> {n_out}"
        )
    return X, Y


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(config, train_pairs, test_pairs=None, val_pairs=None, layout=None, log=None):
    """Fit a network with mini-batch Adam.

    Parameters
    ----------
    config : FcnnConfig
    train_pairs, test_pairs, val_pairs : tuple of (inputs, targets)
        Raw (unnormalized) arrays, one row per pair. Normalization statistics
        come from ``train_pairs`` only. When ``val_pairs`` is given, training
        stops after ``config.patience`` epochs without improvement of the
        validation loss and the best weights are kept.
    layout : dict, optional
        Input layout description stored with the model.
    log : callable, optional
        Called with one dict per epoch.

    Returns
    -------
    FcnnModel
        ``training_meta`` holds the dataset hash and final train/test MSE in
        physical units; ``history`` holds per-epoch losses.
    """
    n_in, n_out = config.n_inputs, config.n_outputs
    X, Y = _as_pairs(train_pairs, n_in, n_out, "train")
    if X.shape[0] == 0:
        raise TrainingError("empty training set")
    in_mean, in_std, in_const = standardization(X)
    out_mean, out_std, out_const = standardization(Y)
    Z = (X - in_mean) / in_std
    T = (Y - out_mean) / out_std
    if val_pairs is not None:
        Xv, Yv = _as_pairs(val_pairs, n_in, n_out, "validation")
        Zv, Tv = (Xv - in_mean) / in_std, (Yv - out_mean) / out_std
        if Zv.shape[0] == 0:
            val_pairs = None

    root = RngStream(config.seed)
    weights, biases = he_uniform(config.layer_sizes, root.derive("init"))
    params = weights + biases
    L = len(weights)
    opt = _Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)

    n = Z.shape[0]
    bs = config.batch_size
    history = []
    best = (math.inf, -1, [p.copy() for p in params])
    for epoch in range(config.epochs):
        perm = root.derive("shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            loss, gW, gb = _gradients(weights, biases, Z[idx], T[idx])
            total += loss * len(idx)
            opt.step(params, gW + gb)
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch, epoch_loss)
        record = {"epoch": epoch, "train_loss": epoch_loss}
        monitor = epoch_loss
        if val_pairs is not None:
            val_loss = loss_mse(_forward_cache(weights, biases, Zv)[1][-1], Tv)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(epoch, val_loss)
            record["val_loss"] = val_loss
            monitor = val_loss
        history.append(record)
        if log is not None:
            log(record)
        if monitor < best[0]:
            best = (monitor, epoch, [p.copy() for p in params])
        elif epoch - best[1] >= config.patience:
            break

    if best[1] >= 0:
        params = best[2]
    model = FcnnModel(
        config, params[:L], params[L:], in_mean, in_std, out_mean, out_std,
        input_constant=in_const, output_constant=out_const, layout=dict(layout or {}),
        history=history,
    )
    meta = {
        "dataset_sha256": artifacts.array_sha256(X, Y),
        "n_train": int(n),
        "epochs_run": len(history),
        "best_epoch": int(best[1]),
        "final_train_mse": loss_mse(forward(model, X), Y),
    }
    if val_pairs is not None:
        meta["n_val"] = int(Zv.shape[0])
        meta["final_val_mse"] = loss_mse(forward(model, Xv), Yv)
    if test_pairs is not None:
        Xt, Yt = _as_pairs(test_pairs, n_in, n_out, "test")
        if Xt.shape[0]:
            meta["n_test"] = int(Xt.shape[0])
            meta["final_test_mse"] = loss_mse(forward(model, Xt), Yt)
            meta["test_target_variance"] = float(np.mean(np.var(Yt, axis=0)))
    model.training_meta = meta
    return model


def model_document(model):
    cfg = asdict(model.config)
    cfg["layer_sizes"] = list(model.config.layer_sizes)
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": cfg,
        "layout": model.layout,
        "layers": [{"weight": W, "bias": b} for W, b in zip(model.weights, model.biases)],
        "normalization": {
            "input": {"mean": model.input_mean, "std": model.input_std, "constant_features": model.input_constant},
            "output": {"mean": model.output_mean, "std": model.output_std, "constant_features": model.output_constant},
        },
        "training": model.training_meta,
    }


def save_model(model, path):
    return artifacts.write_json(path, model_document(model))


def _array(doc, key, where, ndim):
    try:
        a = np.asarray(doc[key], dtype=np.float64)
    except KeyError:
        raise CorruptFileError(f"{where}: missing '{key}'") from None
    except (TypeError, ValueError) as exc:
        raise CorruptFileError(f"{where}.{key}: not a numeric array ({exc})") from None
    if a.ndim != ndim:
        raise ShapeMismatchError(f"{where}.{key}: expected {ndim}-d array, got shape {a.shape}")
    return a


def model_from_document(doc, source="model"):
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise CorruptFileError(f"{source}: not an {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise VersionMismatchError(f"{source}: version {doc.get('version')!r}, expected {MODEL_VERSION}")
    for key in ("config", "layers", "normalization"):
        if key not in doc:
            raise CorruptFileError(f"{source}: missing '{key}' block")
    try:
        config = FcnnConfig(**doc["config"])
    except TypeError as exc:
        raise CorruptFileError(f"{source}: bad config block ({exc})") from None
    layers = doc["layers"]
    weights = [_array(layer, "weight", f"layers[{k}]", 2) for k, layer in enumerate(layers)]
    biases = [_array(layer, "bias", f"layers[{k}]", 1) for k, layer in enumerate(layers)]
    norm = doc["normalization"]
    if not isinstance(norm, dict) or "input" not in norm or "output" not in norm:
        raise CorruptFileError(f"{source}: incomplete normalization block")
    nin, nout = norm["input"], norm["output"]
    return FcnnModel(
        config, weights, biases,
        _array(nin, "mean", "normalization.input", 1), _array(nin, "std", "normalization.input", 1),
        _array(nout, "mean", "normalization.output", 1), _array(nout, "std", "normalization.output", 1),
        input_constant=list(nin.get("constant_features", [])),
        output_constant=list(nout.get("constant_features", [])),
        layout=dict(doc.get("layout") or {}),
        training_meta=dict(doc.get("training") or {}),
    )


def load_model(path):
    return model_from_document(artifacts.read_json(path), source=str(path))
