"""Energy-regularized MLP classifier in plain numpy.

The network is an affine + ReLU stack with a linear output layer. Training
minimizes mean cross-entropy on labeled in-distribution data plus
``lam`` times a squared-hinge energy margin loss that pushes in-distribution
energies below ``m_in`` and unlabeled out-of-distribution energies above
``m_out``. Gradients are computed by hand; :func:`grad_check` compares them
against central finite differences.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DivergenceError, InputError

logger = logging.getLogger(__name__)


def softmax(logits, temperature=1.0):
    """Row-wise softmax of ``logits / temperature`` with max-shift."""
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def energy_score(logits, temperature=1.0):
    """``-T * log sum_y exp(f_y / T)``; one value per row."""
    z = np.asarray(logits, dtype=float)
    out = -temperature * logsumexp(z / temperature, axis=-1)
    return out if np.ndim(out) else float(out)


def energy_margin_loss(in_energies, out_energies, m_in, m_out):
    in_energies = np.asarray(in_energies, dtype=float).ravel()
    out_energies = np.asarray(out_energies, dtype=float).ravel()
    if in_energies.size == 0 or out_energies.size == 0:
        raise InputError("energy margin loss needs in- and out-of-distribution energies")
    in_term = np.mean(np.maximum(0.0, in_energies - m_in) ** 2)
    out_term = np.mean(np.maximum(0.0, m_out - out_energies) ** 2)
    return float(in_term + out_term)


@dataclass(frozen=True)
class EnergyConfig:
    lam: float = 0.01
    m_in: float = -5.0
    m_out: float = -35.0
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    hidden: tuple = (64, 8)
    temperature: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise InputError("lam must be nonnegative")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if not self.m_out < self.m_in:
            raise InputError("m_out must be below m_in")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")
        if not self.temperature > 0:
            raise InputError("temperature must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class EnergyMlp:
    """Weights are stored as ``(out, in)`` matrices; ``z = a @ W.T + b``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    temperature: float = 1.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InputError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InputError(f"layer {i} has inconsistent shapes")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InputError(f"layer {i} input width does not match layer {i - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InputError(f"layer {i} has non-finite parameters")
        if not self.temperature > 0:
            raise InputError("temperature must be positive")

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return EnergyMlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.temperature)

    def _forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.layer_dims[0]:
            raise InputError(f"expected inputs of width {self.layer_dims[0]}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("inputs contain non-finite values")
        acts, pre = [x], []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = acts[-1] @ w.T + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0))
        logits = acts[-1] @ self.weights[-1].T + self.biases[-1]
        return acts, pre, logits

    def forward(self, x):
        """Return ``(features, logits)`` for a batch; features are the last hidden layer."""
        acts, _, logits = self._forward(x)
        return acts[-1], logits

    def logits(self, x):
        return self._forward(x)[2]

    def predict_proba(self, x):
        return softmax(self.logits(x), self.temperature)

    def energy(self, x):
        return energy_score(self.logits(x), self.temperature)

    def to_dict(self):
        return {
            "layer_dims": self.layer_dims,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            model = cls([np.array(w, dtype=float).reshape(len(w), -1) for w in data["weights"]],
                        [np.array(b, dtype=float) for b in data["biases"]],
                        float(data.get("temperature", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed model file: {exc}") from exc
        if "layer_dims" in data and list(data["layer_dims"]) != model.layer_dims:
            raise InputError("layer_dims do not match the weight shapes")
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)


def mlp_forward(model: EnergyMlp, x):
    """Forward pass for a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("mlp_forward takes a single input vector")
    features, logits = model.forward(x[None, :])
    return features[0], logits[0]


def init_mlp(layer_dims: Sequence[int], seed=0, temperature=1.0):
    """Uniform initialization in ``[-s, s]`` with ``s = fan_in ** -0.5``."""
    if len(layer_dims) < 2 or any(int(d) < 1 for d in layer_dims):
        raise InputError(f"invalid layer dims {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        s = fan_in ** -0.5
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-s, s, size=fan_out))
    return EnergyMlp(weights, biases, temperature)


def _loss_terms(model, in_x, in_y, out_x, config, need_grad):
    in_x = np.asarray(in_x, dtype=float)
    in_y = np.asarray(in_y, dtype=int)
    if in_x.shape[0] == 0:
        raise InputError("in-distribution batch is empty")
    if in_y.shape != (in_x.shape[0],):
        raise InputError("labels do not match the in-distribution batch")
    if np.any(in_y < 0) or np.any(in_y >= model.n_classes):
        raise InputError("label outside the model's classes")
    use_out = config.lam > 0
    if use_out:
        out_x = np.asarray(out_x, dtype=float)
        if out_x.ndim != 2 or out_x.shape[0] == 0:
            raise InputError("out-of-distribution batch is empty but lam > 0")
        x = np.vstack([in_x, out_x])
    else:
        x = in_x
    n_in = in_x.shape[0]
    t = model.temperature

    acts, pre, logits = model._forward(x)
    scaled = logits / t
    lse = logsumexp(scaled, axis=1)
    energy = -t * lse
    probs = np.exp(scaled - lse[:, None])

    rows = np.arange(n_in)
    ce = float(np.mean(lse[:n_in] - scaled[rows, in_y]))
    reg = 0.0
    if use_out:
        reg = energy_margin_loss(energy[:n_in], energy[n_in:], config.m_in, config.m_out)
    loss = ce + config.lam * reg
    if not need_grad:
        return loss, None

    grad_logits = np.zeros_like(logits)
    onehot = np.zeros((n_in, logits.shape[1]))
    onehot[rows, in_y] = 1.0
    grad_logits[:n_in] = (probs[:n_in] - onehot) / (t * n_in)
    if use_out:
        n_out = x.shape[0] - n_in
        # dE/dlogits = -probs
        d_in = 2.0 * np.maximum(0.0, energy[:n_in] - config.m_in) / n_in
        d_out = -2.0 * np.maximum(0.0, config.m_out - energy[n_in:]) / n_out
        grad_logits[:n_in] -= config.lam * d_in[:, None] * probs[:n_in]
        grad_logits[n_in:] -= config.lam * d_out[:, None] * probs[n_in:]

    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    delta = grad_logits
    for layer in range(len(model.weights) - 1, -1, -1):
        grads_w[layer] = delta.T @ acts[layer]
        grads_b[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ model.weights[layer]) * (pre[layer - 1] > 0)
    return loss, (grads_w, grads_b)


def total_loss(in_batch, out_batch, model: EnergyMlp, config: EnergyConfig):
    """Mean cross-entropy plus ``lam`` times the energy margin loss.

    ``in_batch`` is ``(features, labels)``; ``out_batch`` is a feature matrix
    and may be ``None`` when ``config.lam == 0``.
    """
    in_x, in_y = in_batch
    return _loss_terms(model, in_x, in_y, out_batch, config, need_grad=False)[0]


def loss_and_grads(in_batch, out_batch, model: EnergyMlp, config: EnergyConfig):
    in_x, in_y = in_batch
    return _loss_terms(model, in_x, in_y, out_batch, config, need_grad=True)


def grad_check(model: EnergyMlp, in_batch, out_batch, config: EnergyConfig, eps=1e-5,
               floor=1e-6):
    """Largest relative gap between analytic and central-difference gradients.

    The relative error of one parameter is ``|a - n| / max(|a| + |n|, floor)``.
    """
    _, (gw, gb) = loss_and_grads(in_batch, out_batch, model, config)
    probe = model.copy()
    worst = 0.0
    for params, analytic in ((probe.weights, gw), (probe.biases, gb)):
        for p, g in zip(params, analytic):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = total_loss(in_batch, out_batch, probe, config)
                flat[i] = orig - eps
                down = total_loss(in_batch, out_batch, probe, config)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(gflat[i] - numeric) / max(abs(gflat[i]) + abs(numeric), floor)
                worst = max(worst, err)
    return worst


@dataclass
class TrainResult:
    model: EnergyMlp
    loss_trace: List[float] = field(default_factory=list)


def train_ebm(train_x, train_y, out_x, config: Optional[EnergyConfig] = None,
              n_classes=None, model: Optional[EnergyMlp] = None):
    """Minibatch gradient descent on :func:`total_loss`.

    Each in-distribution minibatch is paired with an equally sized batch drawn
    from ``out_x`` (with replacement when the pool is smaller). The in-batch
    shuffle and the out-batch draws use separate seeded streams, so a run with
    ``lam == 0`` follows exactly the same trajectory with or without a pool.
    """
    config = config or EnergyConfig()
    train_x = np.asarray(train_x, dtype=float)
    train_y = np.asarray(train_y, dtype=int)
    if train_x.ndim != 2 or train_x.shape[0] != train_y.shape[0] or train_x.shape[0] == 0:
        raise InputError("training features and labels do not line up")
    n_classes = int(n_classes or train_y.max() + 1)
    if np.unique(train_y).size < 2:
        raise InputError("training data must contain at least two classes")
    if config.lam > 0:
        out_x = np.asarray(out_x if out_x is not None else np.empty((0, train_x.shape[1])),
                           dtype=float)
        if out_x.ndim != 2 or out_x.shape[0] == 0:
            raise InputError("an unlabeled out-of-distribution pool is required when lam > 0")
        if out_x.shape[1] != train_x.shape[1]:
            raise InputError("unlabeled pool has the wrong feature width")

    if model is None:
        dims = [train_x.shape[1], *config.hidden, n_classes]
        model = init_mlp(dims, seed=config.seed, temperature=config.temperature)
    else:
        model = model.copy()
    in_rng = np.random.default_rng([config.seed, 1])
    out_rng = np.random.default_rng([config.seed, 2])
    n = train_x.shape[0]
    trace = []
    for epoch in range(config.epochs):
        order = in_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out_batch = None
            if config.lam > 0:
                pool = out_x.shape[0]
                pick = out_rng.choice(pool, size=idx.size, replace=pool < idx.size)
                out_batch = out_x[pick]
            loss, (gw, gb) = loss_and_grads((train_x[idx], train_y[idx]), out_batch, model, config)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, config.learning_rate)
            for w, g in zip(model.weights, gw):
                w -= config.learning_rate * g
            for b, g in zip(model.biases, gb):
                b -= config.learning_rate * g
            losses.append(loss)
        trace.append(float(np.mean(losses)))
        if not all(np.all(np.isfinite(w)) for w in model.weights):
            raise DivergenceError(epoch, config.learning_rate)
        logger.debug("epoch %d loss %.5f", epoch, trace[-1])
    return TrainResult(model=model, loss_trace=trace)
