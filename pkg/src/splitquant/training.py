"""Toy split pipeline: dense encoder -> quantizer -> dense decoder.

Gradients are written out by hand.  Rounding uses the straight-through
estimator: the forward pass rounds, the backward pass hands the upstream
gradient through unchanged.  For linear scaling the clip bounds, minimum and
maximum of a forward pass are held constant, so the scaling step back-props
as ``slope`` inside the clip range and zero outside it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .quantizer import (
    QuantizerConfig,
    Scaling,
    commitment_grad,
    commitment_loss,
    fit_linear_scale,
    quantize,
    round_half_away,
    scale,
)
from .tensor import as_features

_GELU_C = math.sqrt(2.0 / math.pi)


class Activation(enum.Enum):
    IDENTITY = "identity"
    GELU = "gelu"
    RELU = "relu"


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.activation = Activation(self.activation)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"weights {self.weights.shape} and bias {self.bias.shape} disagree")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass(frozen=True)
class TrainConfig:
    quantizer: QuantizerConfig
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 50
    alpha: float | None = None
    seed: int = 0
    task: str = "mse"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.task not in ("mse", "xent"):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def commit_weight(self) -> float:
        return self.quantizer.alpha if self.alpha is None else self.alpha


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    parameter_count: int
    perturbation: float


@dataclass
class TrainResult:
    encoder: list[DenseLayer]
    decoder: list[DenseLayer]
    history: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [h["loss"] for h in self.history]


# -- STE -----------------------------------------------------------------------

def ste_round_forward(x):
    return round_half_away(x)


def ste_round_backward(upstream):
    return upstream


# -- layers --------------------------------------------------------------------

def init_layer(in_dim: int, out_dim: int, activation=Activation.IDENTITY, rng=None) -> DenseLayer:
    rng = np.random.default_rng(rng)
    w = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim), activation)


def init_mlp(dims, activation=Activation.GELU, rng=None) -> list[DenseLayer]:
    """Dense stack through ``dims``; hidden layers use ``activation``, the last is linear."""
    rng = np.random.default_rng(rng)
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = Activation.IDENTITY if i == len(dims) - 2 else activation
        layers.append(init_layer(a, b, act, rng))
    return layers


def init_autoencoder(in_dim: int, code_dim: int, seed: int = 0, hidden=()):
    rng = np.random.default_rng(seed)
    enc = init_mlp([in_dim, *hidden, code_dim], rng=rng)
    dec = init_mlp([code_dim, *reversed(hidden), in_dim], rng=rng)
    return enc, dec


def _act(kind: Activation, a):
    if kind is Activation.RELU:
        return np.maximum(a, 0.0)
    if kind is Activation.GELU:
        return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a ** 3)))
    return a


def _act_grad(kind: Activation, a):
    if kind is Activation.RELU:
        return (a > 0).astype(np.float64)
    if kind is Activation.GELU:
        t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
    return np.ones_like(a)


def mlp_forward(layers, x):
    caches = []
    h = x
    for layer in layers:
        if h.shape[-1] != layer.in_dim:
            raise ValueError(f"shape mismatch: input has {h.shape[-1]} features, layer expects {layer.in_dim}")
        a = h @ layer.weights.T + layer.bias
        caches.append((h, a))
        h = _act(layer.activation, a)
    return h, caches


def mlp_backward(layers, caches, grad):
    """Return (grad wrt input, [(dW, db), ...])."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h, a = caches[i]
        ga = grad * _act_grad(layer.activation, a)
        ga2 = ga.reshape(-1, ga.shape[-1])
        grads[i] = (ga2.T @ h.reshape(-1, h.shape[-1]), ga2.sum(axis=0))
        grad = ga @ layer.weights
    return grad, grads


# -- losses --------------------------------------------------------------------

def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def task_loss(pred, target, task: str = "mse") -> float:
    if task == "mse":
        pred, target = np.asarray(pred), np.asarray(target)
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
        return float(np.mean((pred - target) ** 2))
    logits = np.asarray(pred).reshape(-1, np.shape(pred)[-1])
    labels = np.asarray(target, dtype=np.int64).reshape(-1)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def task_loss_grad(pred, target, task: str = "mse"):
    if task == "mse":
        return 2.0 * (pred - target) / pred.size
    logits = pred.reshape(-1, pred.shape[-1])
    labels = np.asarray(target, dtype=np.int64).reshape(-1)
    g = _softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return (g / len(labels)).reshape(pred.shape)


def total_loss(pred, target, commit: float, alpha: float, task: str = "mse") -> float:
    return task_loss(pred, target, task) + alpha * commit


# -- pipeline ------------------------------------------------------------------

@dataclass
class _Frozen:
    """Forward-pass constants held fixed by the straight-through surrogate."""

    linear: object
    levels: np.ndarray
    offset: np.ndarray


def _scale_forward(code, cfg: QuantizerConfig, frozen: _Frozen | None):
    if cfg.scaling is Scaling.TANH:
        e = np.tanh(code)
        return e, 1.0 - e * e, None
    lin = frozen.linear if frozen is not None else fit_linear_scale(code)
    inside = (code >= lin.lo) & (code <= lin.hi)
    if frozen is not None:
        e = lin.slope * np.clip(code, lin.lo, lin.hi) + lin.offset
    else:
        e = None
    return e, lin.slope * inside, lin


def _pipeline(x, enc, dec, cfg: QuantizerConfig, quantized=True, frozen: _Frozen | None = None):
    code, enc_cache = mlp_forward(enc, x)
    e, de_dcode, lin = _scale_forward(code, cfg, frozen)
    if frozen is not None:
        z = frozen.levels
        c = e + frozen.offset
        commit = commitment_loss(e, z, cfg.K, cfg.commitment_form)
    elif quantized:
        q = quantize(code, cfg)
        e, z, c, commit = q.scaled, q.levels, q.reconstructed, q.commit_loss
    else:
        e = scale(code, cfg.scaling)
        z, c, commit = None, e, 0.0
    out, dec_cache = mlp_forward(dec, c)
    cache = dict(enc=enc_cache, dec=dec_cache, e=e, z=z, c=c, de_dcode=de_dcode, lin=lin)
    return out, commit, cache


def forward_split(x, enc, dec, cfg: QuantizerConfig):
    """Encoder, quantize, reconstruct, decoder.  Returns (output, unweighted commitment loss)."""
    x = as_features(x)
    out, commit, _ = _pipeline(x, enc, dec, cfg)
    return out, commit


def _backward(enc, dec, cfg, cache, grad_out, alpha, quantized=True):
    grad_c, dec_grads = mlp_backward(dec, cache["dec"], grad_out)
    grad_e = ste_round_backward(grad_c)
    if quantized and alpha:
        grad_e = grad_e + alpha * commitment_grad(cache["e"], cache["z"], cfg.K, cfg.commitment_form)
    _, enc_grads = mlp_backward(enc, cache["enc"], grad_e * cache["de_dcode"])
    return enc_grads, dec_grads


def loss_and_grads(x, target, enc, dec, cfg: QuantizerConfig, alpha: float, task="mse", quantized=True):
    out, commit, cache = _pipeline(x, enc, dec, cfg, quantized)
    loss = total_loss(out, target, commit, alpha if quantized else 0.0, task)
    enc_g, dec_g = _backward(enc, dec, cfg, cache, task_loss_grad(out, target, task), alpha, quantized)
    return loss, commit, enc_g, dec_g


def evaluate(x, target, enc, dec, cfg: QuantizerConfig, alpha: float, task="mse", quantized=True) -> dict:
    out, commit, _ = _pipeline(x, enc, dec, cfg, quantized)
    t = task_loss(out, target, task)
    a = alpha if quantized else 0.0
    return {"loss": t + a * commit, "task": t, "commit": commit}


def train(data, cfg: TrainConfig, encoder, decoder, targets=None, quantized: bool = True) -> TrainResult:
    """Minibatch SGD through the straight-through quantizer.

    ``targets`` defaults to ``data`` (autoencoder).  ``history[0]`` is the loss
    before any update; entry ``i`` is the full-data loss after epoch ``i``.
    """
    x = as_features(data, name="data")
    y = x if targets is None else np.asarray(targets)
    if len(y) != len(x):
        raise ValueError("data and targets differ in length")
    enc = [layer.copy() for layer in encoder]
    dec = [layer.copy() for layer in decoder]
    qcfg, alpha = cfg.quantizer, cfg.commit_weight
    rng = np.random.default_rng(cfg.seed)
    history = [{"epoch": 0, **evaluate(x, y, enc, dec, qcfg, alpha, cfg.task, quantized)}]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, _, enc_g, dec_g = loss_and_grads(x[idx], y[idx], enc, dec, qcfg, alpha, cfg.task, quantized)
            for layer, (gw, gb) in zip(enc + dec, enc_g + dec_g):
                layer.weights -= cfg.learning_rate * gw
                layer.bias -= cfg.learning_rate * gb
        row = {"epoch": epoch, **evaluate(x, y, enc, dec, qcfg, alpha, cfg.task, quantized)}
        if not math.isfinite(row["loss"]):
            raise TrainingDiverged(epoch, row["loss"])
        history.append(row)
    return TrainResult(enc, dec, history)


def history_csv(history) -> str:
    lines = ["epoch,loss,task,commit"]
    lines += [f"{h['epoch']},{h['loss']:.8f},{h['task']:.8f},{h['commit']:.8f}" for h in history]
    return "\n".join(lines) + "\n"


# -- gradient check ------------------------------------------------------------

def _params(layers):
    for layer in layers:
        yield layer.weights
        yield layer.bias


def grad_check(enc, dec, cfg: QuantizerConfig, perturbation: float = 1e-4, x=None, target=None,
               alpha: float | None = None, task: str = "mse", seed: int = 0) -> GradCheckReport:
    """Compare straight-through gradients with central finite differences.

    The finite differences are taken on the surrogate in which rounding is the
    identity on the scaled values plus a constant offset ``C - e`` fixed at the
    current parameters, and scaling constants and levels are likewise fixed.
    That surrogate is smooth and its exact gradient is what the
    straight-through backward pass computes.
    """
    if not 1e-6 <= perturbation <= 1e-2:
        raise ValueError("perturbation must be in [1e-6, 1e-2]")
    rng = np.random.default_rng(seed)
    enc = [layer.copy() for layer in enc]
    dec = [layer.copy() for layer in dec]
    if x is None:
        x = rng.standard_normal((8, enc[0].in_dim))
    x = np.asarray(x, dtype=np.float64)
    if target is None:
        target = rng.standard_normal((len(x), dec[-1].out_dim)) if task == "mse" \
            else rng.integers(0, dec[-1].out_dim, len(x))
    alpha = cfg.alpha if alpha is None else alpha

    out, commit, cache = _pipeline(x, enc, dec, cfg)
    frozen = _Frozen(linear=cache["lin"], levels=cache["z"], offset=cache["c"] - cache["e"])
    enc_g, dec_g = _backward(enc, dec, cfg, cache, task_loss_grad(out, target, task), alpha)
    analytic = [g for pair in enc_g + dec_g for g in pair]

    def surrogate():
        o, cm, _ = _pipeline(x, enc, dec, cfg, frozen=frozen)
        return total_loss(o, target, cm, alpha, task)

    worst = 0.0
    count = 0
    for p, g in zip(_params(enc + dec), analytic):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + perturbation
            up = surrogate()
            flat[i] = old - perturbation
            down = surrogate()
            flat[i] = old
            num = (up - down) / (2 * perturbation)
            denom = max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(num - gflat[i]) / denom)
            count += 1
    return GradCheckReport(max_rel_error=worst, parameter_count=count, perturbation=perturbation)


# -- synthetic data ------------------------------------------------------------

def gaussian_mixture(n: int, dim: int = 4, latent_dim: int = 2, clusters: int = 4, spread: float = 0.1,
                     noise: float = 0.5, seed: int = 0) -> np.ndarray:
    """Gaussian mixture on a random ``latent_dim``-plane in ``dim`` dimensions.

    ``spread`` is the in-plane cluster std; ``noise`` is the std of the
    off-plane component, which no ``latent_dim`` bottleneck can recover.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-2.0, 2.0, size=(clusters, latent_dim))
    labels = rng.integers(0, clusters, n)
    latent = centers[labels] + spread * rng.standard_normal((n, latent_dim))
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    plane, normal = basis[:, :latent_dim], basis[:, latent_dim:]
    off = noise * rng.standard_normal((n, dim - latent_dim))
    return latent @ plane.T + off @ normal.T


def two_moons(n: int, noise: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    t = rng.uniform(0.0, math.pi, n)
    x = np.where(labels == 0, np.cos(t), 1.0 - np.cos(t))
    y = np.where(labels == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
    return pts, labels
