"""Minimal differentiable models with hand-derived gradients.

Two binary classifiers over flat real inputs:

* ``DiagonalLinearNetwork`` -- logit(x) = sum_j u_j * v_j * x_j, parameters
  stored as the concatenation [u, v].
* ``MultilayerPerceptron`` -- dense tanh layers with a single output logit.

Both are trained with binary cross-entropy on a sigmoid of the logit, and
both expose exact batch gradients, so no autodiff framework is involved.
The SGD step implements the recursion

    v <- grad + weight_decay * theta            (first local step)
    v <- grad + weight_decay * theta + mu * v   (later steps)
    theta <- theta - eta * v

with the momentum buffer reset to zero at the start of every local
training call (it is never carried across federated rounds).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, DivergenceError

__all__ = [
    "Dataset",
    "SgdConfig",
    "DiagonalLinearNetwork",
    "MultilayerPerceptron",
    "forward",
    "loss_and_grad",
    "sgd_step",
    "local_train",
]


@dataclass(frozen=True)
class Dataset:
    """A labelled sample set: inputs (n, d) float64, labels (n,) in {0, 1}."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ContractViolation("inputs must be (n, d), labels (n,)")
        if len(self.inputs) != len(self.labels):
            raise ContractViolation("inputs and labels length mismatch")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx])


@dataclass(frozen=True)
class SgdConfig:
    """Local-training hyperparameters: eta, mu, weight decay, epochs, batch size."""

    eta: float
    mu: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 1
    batch_size: int = 1

    def __post_init__(self):
        if self.eta < 0 or not math.isfinite(self.eta):
            raise ContractViolation(f"eta must be finite and >= 0, got {self.eta}")
        if not 0.0 <= self.mu < 1.0:
            raise ContractViolation(f"mu must be in [0, 1), got {self.mu}")
        if self.weight_decay < 0:
            raise ContractViolation(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")

    def steps_for(self, n_samples: int) -> int:
        """Local step count: epochs * floor(n_samples / batch_size)."""
        return self.epochs * (n_samples // self.batch_size)

    def with_eta(self, eta: float) -> "SgdConfig":
        return replace(self, eta=eta)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    # softplus(z) - y*z is the stable form of -[y log p + (1-y) log(1-p)];
    # overflow to inf is deliberate and caught by the divergence guard
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.mean(np.logaddexp(0.0, z) - y * z))


class DiagonalLinearNetwork:
    """Elementwise-product linear model: logit(x) = <u * v, x>."""

    kind = "dln"

    def __init__(self, dim: int, params: np.ndarray | None = None):
        if dim < 1:
            raise ContractViolation("dim must be >= 1")
        self.dim = dim
        if params is None:
            # unbiased start: logit identically zero, and u != v so every
            # effective weight u_j*v_j can reach either sign (a symmetric
            # init pins u_j = v_j forever, locking u_j*v_j >= 0)
            params = np.concatenate([np.full(dim, 0.5 / math.sqrt(dim)), np.zeros(dim)])
        params = np.asarray(params, dtype=np.float64).copy()
        if params.shape != (2 * dim,):
            raise ContractViolation(f"expected {2 * dim} parameters, got {params.shape}")
        self.params = params

    @property
    def n_params(self) -> int:
        return 2 * self.dim

    @property
    def input_dim(self) -> int:
        return self.dim

    def copy(self) -> "DiagonalLinearNetwork":
        return DiagonalLinearNetwork(self.dim, self.params)

    def logits(self, X: np.ndarray) -> np.ndarray:
        u = self.params[: self.dim]
        v = self.params[self.dim :]
        return X @ (u * v)

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        u = self.params[: self.dim]
        v = self.params[self.dim :]
        with np.errstate(over="ignore", invalid="ignore"):
            z = X @ (u * v)
            r = (_sigmoid(z) - y) / len(y)  # dL/dz per sample, mean folded in
            rx = X.T @ r
            grad = np.concatenate([rx * v, rx * u])
        return _bce_from_logits(z, y), grad


class MultilayerPerceptron:
    """Dense network with tanh hidden activations and one output logit."""

    kind = "mlp"

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None,
                 params: np.ndarray | None = None):
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or sizes[-1] != 1 or any(s < 1 for s in sizes):
            raise ContractViolation("layer_sizes must be (in, ..., 1) with positive sizes")
        self.layer_sizes = sizes
        self._shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        n = sum(o * i + o for o, i in self._shapes)
        if params is not None:
            params = np.asarray(params, dtype=np.float64).copy()
            if params.shape != (n,):
                raise ContractViolation(f"expected {n} parameters, got {params.shape}")
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            chunks = []
            for out_dim, in_dim in self._shapes:
                bound = math.sqrt(6.0 / (in_dim + out_dim))
                chunks.append(rng.uniform(-bound, bound, size=out_dim * in_dim))
                chunks.append(np.zeros(out_dim))
            params = np.concatenate(chunks)
        self.params = params

    @property
    def n_params(self) -> int:
        return len(self.params)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "MultilayerPerceptron":
        return MultilayerPerceptron(self.layer_sizes, params=self.params)

    def _unpack(self, params: np.ndarray):
        weights, biases, ofs = [], [], 0
        for out_dim, in_dim in self._shapes:
            weights.append(params[ofs : ofs + out_dim * in_dim].reshape(out_dim, in_dim))
            ofs += out_dim * in_dim
            biases.append(params[ofs : ofs + out_dim])
            ofs += out_dim
        return weights, biases

    def logits(self, X: np.ndarray) -> np.ndarray:
        weights, biases = self._unpack(self.params)
        a = X
        for W, b in zip(weights[:-1], biases[:-1]):
            a = np.tanh(a @ W.T + b)
        return (a @ weights[-1].T + biases[-1]).ravel()

    def loss_and_grad(self, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        weights, biases = self._unpack(self.params)
        activations = [X]
        a = X
        for W, b in zip(weights[:-1], biases[:-1]):
            a = np.tanh(a @ W.T + b)
            activations.append(a)
        z = (a @ weights[-1].T + biases[-1]).ravel()
        loss = _bce_from_logits(z, y)

        delta = ((_sigmoid(z) - y) / len(y))[:, None]  # (n, 1)
        grads_w = [None] * len(weights)
        grads_b = [None] * len(weights)
        for layer in range(len(weights) - 1, -1, -1):
            grads_w[layer] = delta.T @ activations[layer]
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                back = delta @ weights[layer]
                delta = back * (1.0 - activations[layer] ** 2)
        flat = []
        for gw, gb in zip(grads_w, grads_b):
            flat.append(gw.ravel())
            flat.append(gb)
        return loss, np.concatenate(flat)


def forward(model, x) -> float:
    """Single-input logit; classification probability is sigmoid(logit)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ContractViolation(
            f"input length {x.shape} does not match model dimension {model.input_dim}"
        )
    return float(model.logits(x[None, :])[0])


def _as_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, Dataset):
        return batch.inputs, batch.labels.astype(np.float64)
    X, y = batch
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)


def loss_and_grad(model, batch) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over the batch and its exact gradient."""
    X, y = _as_arrays(batch)
    if len(X) == 0:
        raise ContractViolation("batch must be non-empty")
    return model.loss_and_grad(X, y)


def sgd_step(params: np.ndarray, velocity: np.ndarray, grad: np.ndarray,
             cfg: SgdConfig, is_first_step: bool, step: int = 0):
    """One momentum/weight-decay SGD step; returns (params, velocity).

    On the first local step the momentum term is omitted (the buffer from
    any previous round is discarded).
    """
    if params.shape != grad.shape or params.shape != velocity.shape:
        raise ContractViolation("params, velocity and grad shapes must match")
    with np.errstate(over="ignore", invalid="ignore"):
        v = grad + cfg.weight_decay * params
        if not is_first_step:
            v = v + cfg.mu * velocity
        new_params = params - cfg.eta * v
    if not np.all(np.isfinite(new_params)):
        raise DivergenceError(step)
    return new_params, v


def local_train(model, dataset: Dataset, cfg: SgdConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Mini-batch SGD for ``cfg.epochs`` epochs; returns theta_final - theta_initial.

    Batches are drawn by reshuffling the dataset each epoch; a trailing
    partial batch is dropped, so the step count is epochs * floor(n / B).
    The momentum buffer starts at zero.
    """
    if len(dataset) < cfg.batch_size:
        raise ContractViolation(
            f"dataset size {len(dataset)} is smaller than batch size {cfg.batch_size}"
        )
    start = model.params.copy()
    work = model.copy()
    velocity = np.zeros_like(start)
    labels = dataset.labels.astype(np.float64)
    n_batches = len(dataset) // cfg.batch_size
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            _, grad = work.loss_and_grad(dataset.inputs[idx], labels[idx])
            work.params, velocity = sgd_step(
                work.params, velocity, grad, cfg, is_first_step=(step == 0), step=step
            )
            step += 1
    return work.params - start
