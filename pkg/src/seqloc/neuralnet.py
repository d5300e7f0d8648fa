"""Feed-forward networks trained by backpropagation, written against numpy.

One network type serves every learning task in the package: binary split
classifiers, floor and building classifiers, and coordinate regressors.
Weights are stored as ``(fan_in, fan_out)`` matrices and samples are rows,
so a layer computes ``a @ W + b``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from seqloc.dataset import NONDETECT, RSSI_MAX
from seqloc.exceptions import InvalidArgumentError, TrainingDivergedError

ACTIVATIONS = ("relu", "identity", "softmax")
LOSSES = ("cross_entropy", "mean_squared_error")
OPTIMIZERS = ("sgd", "adam")
INPUT_SCALINGS = ("none", "rssi", "standard")
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str = "relu"

    def __post_init__(self):
        if int(self.width) < 1:
            raise InvalidArgumentError(f"layer width must be >= 1, got {self.width}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")


def validate_layers(layers) -> list[LayerSpec]:
    layers = [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in layers]
    if not layers:
        raise InvalidArgumentError("a network needs at least one layer")
    if any(l.activation == "softmax" for l in layers[:-1]):
        raise InvalidArgumentError("softmax is only allowed on the final layer")
    return layers


def classifier_layers(n_classes: int, hidden=(128, 64)) -> list[LayerSpec]:
    return [LayerSpec(h, "relu") for h in hidden] + [LayerSpec(n_classes, "softmax")]


def regressor_layers(n_outputs: int = 2, hidden=(128, 64)) -> list[LayerSpec]:
    return [LayerSpec(h, "relu") for h in hidden] + [LayerSpec(n_outputs, "identity")]


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "cross_entropy"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    patience: int = 10
    input_scaling: str = "none"
    scale_targets: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise InvalidArgumentError(f"unknown loss {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning rate must be > 0")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch size must be >= 1")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.input_scaling not in INPUT_SCALINGS:
            raise InvalidArgumentError(f"unknown input scaling {self.input_scaling!r}")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass(eq=False)
class MlpModel:
    layers: list[LayerSpec]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shift: np.ndarray
    input_scale: np.ndarray
    output_shift: np.ndarray = field(default=None)
    output_scale: np.ndarray = field(default=None)
    seed: int = 0

    def __post_init__(self):
        self.layers = validate_layers(self.layers)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
        n_out = self.layers[-1].width
        if self.output_shift is None:
            self.output_shift = np.zeros(n_out)
        if self.output_scale is None:
            self.output_scale = np.ones(n_out)
        self.output_shift = np.asarray(self.output_shift, dtype=np.float64)
        self.output_scale = np.asarray(self.output_scale, dtype=np.float64)

        if len(self.weights) != len(self.layers) or len(self.biases) != len(self.layers):
            raise InvalidArgumentError("one weight matrix and bias vector is needed per layer")
        fan_in = self.input_shift.shape[0]
        if self.input_scale.shape != (fan_in,):
            raise InvalidArgumentError("input shift and scale must have the same length")
        if np.any(self.input_scale <= 0):
            raise InvalidArgumentError("input scales must be strictly positive")
        for spec, w, b in zip(self.layers, self.weights, self.biases):
            if w.shape != (fan_in, spec.width) or b.shape != (spec.width,):
                raise InvalidArgumentError(
                    f"layer shapes do not chain: W {w.shape}, b {b.shape}, expected ({fan_in}, {spec.width})"
                )
            fan_in = spec.width
        if self.output_shift.shape != (n_out,) or self.output_scale.shape != (n_out,):
            raise InvalidArgumentError("output normalization must match the output width")
        if np.any(self.output_scale <= 0):
            raise InvalidArgumentError("output scales must be strictly positive")

    @property
    def n_inputs(self) -> int:
        return self.input_shift.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].width

    @property
    def is_classifier(self) -> bool:
        return self.layers[-1].activation == "softmax"

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "seed": int(self.seed),
            "layers": [{"width": l.width, "activation": l.activation} for l in self.layers],
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_shift": self.output_shift.tolist(),
            "output_scale": self.output_scale.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("format") != FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported model format {d.get('format')!r}")
        layers = [LayerSpec(l["width"], l["activation"]) for l in d["layers"]]
        weights = [np.array(w, dtype=np.float64).reshape(-1, l.width) for w, l in zip(d["weights"], layers)]
        return cls(
            layers=layers,
            weights=weights,
            biases=d["biases"],
            input_shift=d["input_shift"],
            input_scale=d["input_scale"],
            output_shift=d["output_shift"],
            output_scale=d["output_scale"],
            seed=d["seed"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))


def init_model(n_inputs: int, layers, seed: int = 0, input_shift=None, input_scale=None,
               output_shift=None, output_scale=None) -> MlpModel:
    """He-style uniform initialization, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    layers = validate_layers(layers)
    rng = np.random.default_rng(seed)
    weights, biases, fan_in = [], [], n_inputs
    for spec in layers:
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, spec.width)))
        biases.append(np.zeros(spec.width))
        fan_in = spec.width
    return MlpModel(
        layers=layers,
        weights=weights,
        biases=biases,
        input_shift=np.zeros(n_inputs) if input_shift is None else input_shift,
        input_scale=np.ones(n_inputs) if input_scale is None else input_scale,
        output_shift=output_shift,
        output_scale=output_scale,
        seed=seed,
    )


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z, name):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softmax":
        return _softmax(z)
    return z


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.n_inputs:
        raise InvalidArgumentError(f"expected inputs of width {model.n_inputs}, got shape {np.shape(x)}")
    return x, single


def _forward_normalized(model: MlpModel, xn: np.ndarray, keep=False):
    a = xn
    cache = [a]
    for spec, w, b in zip(model.layers, model.weights, model.biases):
        z = a @ w + b
        a = _activate(z, spec.activation)
        if keep:
            cache += [z, a]
    return a, cache


def _normalize_inputs(model, x):
    return (x - model.input_shift) / model.input_scale


def forward(model: MlpModel, x) -> np.ndarray:
    """Network output for one input vector or a batch of rows.

    Regression outputs are mapped back to target units; softmax outputs are
    probabilities.
    """
    x, single = _as_batch(model, x)
    out, _ = _forward_normalized(model, _normalize_inputs(model, x))
    if not model.is_classifier:
        out = out * model.output_scale + model.output_shift
    return out[0] if single else out


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return forward(model, x)


def predict_class(model: MlpModel, x):
    """Argmax of the softmax output; ``np.argmax`` already picks the lowest index on ties."""
    p = forward(model, x)
    if p.ndim == 1:
        return int(np.argmax(p))
    return np.argmax(p, axis=1)


def predict_vector(model: MlpModel, x) -> np.ndarray:
    return forward(model, x)


def _check_loss_head(loss, layers):
    last = layers[-1].activation
    if loss == "cross_entropy" and last != "softmax":
        raise InvalidArgumentError("cross_entropy needs a softmax output layer")
    if loss == "mean_squared_error" and last == "softmax":
        raise InvalidArgumentError("mean_squared_error needs a non-softmax output layer")


def _loss_and_delta(out, y, loss):
    """Batch-mean loss and its gradient w.r.t. the final pre-activation."""
    n = out.shape[0]
    if loss == "cross_entropy":
        value = -np.sum(y * np.log(np.clip(out, 1e-300, None))) / n
        return value, (out - y) / n
    diff = out - y
    return np.sum(diff * diff) / n, 2.0 * diff / n


def _normalized_targets(model, y, loss):
    if loss == "cross_entropy":
        return y
    return (y - model.output_shift) / model.output_scale


def loss_and_grads(model: MlpModel, x, y, loss: str):
    """Loss on a batch and the analytic gradient of every parameter (W0, b0, W1, b1, ...)."""
    x, _ = _as_batch(model, x)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _check_loss_head(loss, model.layers)
    out, cache = _forward_normalized(model, _normalize_inputs(model, x), keep=True)
    value, delta = _loss_and_delta(out, _normalized_targets(model, y, loss), loss)
    if model.layers[-1].activation == "relu":
        delta = delta * (cache[-2] > 0)
    grads = [None] * (2 * len(model.layers))
    for k in range(len(model.layers) - 1, -1, -1):
        a_prev = cache[2 * k]
        grads[2 * k] = a_prev.T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ model.weights[k].T
            if model.layers[k - 1].activation == "relu":
                delta = delta * (cache[2 * k - 1] > 0)
    return value, grads


def loss_value(model: MlpModel, x, y, loss: str) -> float:
    x, _ = _as_batch(model, x)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    out, _ = _forward_normalized(model, _normalize_inputs(model, x))
    value, _ = _loss_and_delta(out, _normalized_targets(model, y, loss), loss)
    return float(value)


def gradient_check(model: MlpModel, batch, loss: str, epsilon: float = 1e-5, grads=None,
                   floor: float = 1e-4) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The gap for one parameter is ``|g - g_fd| / max(|g| + |g_fd|, floor)``.
    A central difference of an O(1) loss carries about 1e-11 of rounding
    noise at ``epsilon=1e-5``, so gradients far below ``floor`` are compared
    in absolute terms instead. ``grads`` overrides the analytic gradients,
    which lets tests feed in a deliberately wrong set.
    """
    if not 0 < epsilon <= 1e-3:
        raise InvalidArgumentError("epsilon must be in (0, 1e-3]")
    x, y = _as_xy(batch)
    if grads is None:
        _, grads = loss_and_grads(model, x, y, loss)
    probe = model.copy()
    worst = 0.0
    for p, g in zip(probe.params(), grads):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_value(probe, x, y, loss)
            flat[i] = orig - epsilon
            down = loss_value(probe, x, y, loss)
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]) + abs(fd), floor)
            worst = max(worst, rel)
    return worst


def _as_xy(data):
    """Accept ``(X, Y)`` arrays or a sequence of ``(x, y)`` pairs."""
    if isinstance(data, tuple) and len(data) == 2 and np.ndim(data[0]) == 2:
        x, y = data
    else:
        pairs = list(data)
        if not pairs:
            raise InvalidArgumentError("training data is empty")
        x = np.array([p[0] for p in pairs], dtype=np.float64)
        y = np.array([np.atleast_1d(p[1]) for p in pairs], dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"inconsistent data shapes: x {x.shape}, y {y.shape}")
    if x.shape[0] == 0:
        raise InvalidArgumentError("training data is empty")
    return x, y


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def fit_input_norm(x: np.ndarray, scaling: str):
    n = x.shape[1]
    if scaling == "rssi":
        # one global affine map; the -105 non-detection code lands exactly on 0
        return np.full(n, float(NONDETECT)), np.full(n, float(RSSI_MAX - NONDETECT))
    if scaling == "standard":
        std = x.std(axis=0)
        return x.mean(axis=0), np.where(std > 0, std, 1.0)
    return np.zeros(n), np.ones(n)


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


def train(data, cfg: TrainConfig, spec, validation=None) -> MlpModel:
    """Fit a network by mini-batch gradient descent.

    ``data`` and ``validation`` are ``(X, Y)`` arrays or lists of ``(x, y)``
    pairs. With a validation set, training stops after ``cfg.patience``
    epochs without improvement in validation loss and the best weights are
    returned; otherwise all ``cfg.epochs`` run.
    """
    layers = validate_layers(spec)
    _check_loss_head(cfg.loss, layers)
    x, y = _as_xy(data)
    if y.shape[1] != layers[-1].width:
        raise InvalidArgumentError(f"targets have width {y.shape[1]}, network outputs {layers[-1].width}")
    if cfg.loss == "cross_entropy" and not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise InvalidArgumentError("cross_entropy targets must be one-hot")

    shift, scale = fit_input_norm(x, cfg.input_scaling)
    out_shift = out_scale = None
    if cfg.loss == "mean_squared_error" and cfg.scale_targets:
        out_shift = y.mean(axis=0)
        std = y.std(axis=0)
        out_scale = np.where(std > 0, std, 1.0)
    model = init_model(x.shape[1], layers, cfg.seed, shift, scale, out_shift, out_scale)

    if validation is not None:
        xv, yv = _as_xy(validation)
    params = model.params()
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else _Sgd(params, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    n = x.shape[0]
    best_val, best_params, stale = np.inf, None, 0
    # overflow shows up as a non-finite loss below, reported as TrainingDivergedError
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                value, grads = loss_and_grads(model, x[idx], y[idx], cfg.loss)
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, cfg.learning_rate)
                opt.step(params, grads)
            if validation is not None:
                v = loss_value(model, xv, yv, cfg.loss)
                if not np.isfinite(v):
                    raise TrainingDivergedError(epoch, cfg.learning_rate)
                if v < best_val:
                    best_val, best_params, stale = v, [p.copy() for p in params], 0
                else:
                    stale += 1
                    if cfg.patience > 0 and stale >= cfg.patience:
                        break
        final = loss_value(model, x, y, cfg.loss)
    if not np.isfinite(final):
        raise TrainingDivergedError(cfg.epochs, cfg.learning_rate)
    if best_params is not None:
        for p, best in zip(params, best_params):
            p[...] = best
    return model


def accuracy(model: MlpModel, x, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(predict_class(model, np.atleast_2d(x)) == labels))


@dataclass(frozen=True)
class NetConfig:
    """Architectures and optimizer settings for every network in a pipeline."""

    classifier_hidden: tuple[int, ...] = (128, 64)
    regressor_hidden: tuple[int, ...] = (128, 64)
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    classifier_epochs: int = 60
    regressor_epochs: int = 600
    patience: int = 40

    def classifier_cfg(self, seed: int) -> TrainConfig:
        return TrainConfig(
            loss="cross_entropy",
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.classifier_epochs,
            seed=seed,
            patience=self.patience,
            input_scaling="rssi",
        )

    def regressor_cfg(self, seed: int) -> TrainConfig:
        return TrainConfig(
            loss="mean_squared_error",
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.regressor_epochs,
            seed=seed,
            patience=self.patience,
            input_scaling="rssi",
        )
