"""Regularized least-squares training of choke models.

The objective for a batch of ``n`` samples is::

    J = 1/n * sum_i (y_i - f(x_i; theta))^2 + 1/n * sum_j lam_j * (theta_j - mu_j)^2

Physical parameters get ``lam_j = sigma_eps^2 / sigma_j^2`` from their
Gaussian prior, which makes the minimizer the MAP estimate; network
parameters share ``lambda_nn`` and ``mu = 0``.  Both sums are divided by
the batch size, so the effective prior weight depends on ``B``.
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Node, StructuralError, Tape
from .data import SampleTable
from .evaluation import mae, rmse
from .models import ModelAssembly

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch, self.batch, self.value = epoch, batch, value
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 150
    lr: float = 0.01
    sigma_eps: float | None = None
    lambda_nn: float = 0.0
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    width: int = 20
    depth: int = 2
    snapshot_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.sigma_eps is not None and not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "TrainConfig":
        """Final hyperparameters of the case study for each model kind."""
        base = {
            "m": cls(epochs=5000, batch_size=150, lr=0.01, sigma_eps=25.0),
            "h": cls(epochs=2000, batch_size=32, lr=0.01, sigma_eps=10.0, lambda_nn=0.01, width=20, depth=2),
            "dd": cls(epochs=2000, batch_size=150, lr=0.01, lambda_nn=0.001, width=70, depth=2),
        }[kind]
        return replace(base, **overrides)


def compute_lambda(sigma_eps: float, sigma_i: float) -> float:
    """Regularization factor that turns the penalty into a Gaussian-prior MAP term."""
    if not (sigma_eps > 0 and sigma_i > 0):
        raise ValueError("both standard deviations must be positive")
    return sigma_eps**2 / sigma_i**2


def regularization(model: ModelAssembly, config: TrainConfig) -> tuple[dict[str, float], dict[str, float]]:
    """Per-parameter ``(lam, mu)`` maps for the model's parameter names."""
    lam, mu = {}, {}
    for name, prior in model.params.priors.items():
        if config.sigma_eps is None:
            raise ValueError(f"{model.kind}-model has physical priors; sigma_eps is required")
        lam[name] = compute_lambda(config.sigma_eps, prior.sigma)
        mu[name] = prior.mu
    if model.params.network is not None:
        for name in model.params.network.names:
            lam["nn." + name] = config.lambda_nn
            mu["nn." + name] = 0.0
    return lam, mu


def objective(prediction: Node, y, nodes: Mapping[str, Node], lam: Mapping[str, float], mu: Mapping[str, float]) -> Node:
    """Batch MSE plus the prior penalty, both divided by the batch size."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        raise StructuralError("empty batch")
    err = prediction - y
    J = ad.mean(ad.square(err))
    penalty = None
    for name, node in nodes.items():
        lj = lam.get(name, 0.0)
        if lj == 0.0:
            continue
        d = node - mu.get(name, 0.0)
        term = ad.total(ad.square(d)) * lj
        penalty = term if penalty is None else penalty + term
    if penalty is not None:
        J = J + penalty / n
    return J


def loss(model: ModelAssembly, batch: SampleTable, lam: Mapping[str, float], mu: Mapping[str, float], tape: Tape | None = None) -> Node:
    """Scalar objective node for ``batch``; parameter nodes are on ``J.tape`` by name."""
    tape = Tape() if tape is None else tape
    if batch.n_rows == 0:
        raise StructuralError("empty batch")
    nodes = {k: tape.param(v, k) for k, v in model.params.values().items()}
    pred = model.forward(nodes, model.inputs(batch))
    return objective(pred, batch["q_o"], nodes, lam, mu)


def sgd_step(theta, gradient, lr: float):
    """Plain gradient step ``theta - lr * g`` (arrays or dicts of arrays)."""
    if isinstance(theta, Mapping):
        return {k: sgd_step(v, gradient[k], lr) for k, v in theta.items()}
    theta, gradient = np.asarray(theta, dtype=np.float64), np.asarray(gradient, dtype=np.float64)
    if theta.shape != gradient.shape:
        raise StructuralError(f"parameter {theta.shape} and gradient {gradient.shape} shapes differ")
    return theta - lr * gradient


@dataclass
class OptimizerState:
    """Adam moment estimates per parameter name and the step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    k: int = 0


def adam_step(state: OptimizerState, theta: Mapping[str, np.ndarray], gradient: Mapping[str, np.ndarray],
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(state, theta)`` (state is updated in place)."""
    state.k += 1
    bc1 = 1.0 - beta1**state.k
    bc2 = 1.0 - beta2**state.k
    out = {}
    for name, value in theta.items():
        g = np.asarray(gradient[name], dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if g.shape != value.shape:
            raise StructuralError(f"{name}: gradient shape {g.shape} != parameter shape {value.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        out[name] = value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state, out


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    bound_violations: dict[str, float] = field(default_factory=dict)
    overfit: bool = False

    def __len__(self) -> int:
        return len(self.epoch)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("epoch,train_loss,val_rmse,val_mae\n")
        for row in zip(self.epoch, self.train_loss, self.val_rmse, self.val_mae):
            buf.write(f"{row[0]},{row[1]!r},{row[2]!r},{row[3]!r}\n")
        return buf.getvalue()


def overfit_flag(history: TrainHistory, tail: float = 0.1) -> bool:
    """Validation RMSE rose while training loss fell across the final ``tail`` of epochs."""
    n = len(history)
    k = max(2, int(math.ceil(tail * n)))
    if n < k or not history.val_rmse:
        return False
    v, t = history.val_rmse[-k:], history.train_loss[-k:]
    return v[-1] > v[0] and t[-1] < t[0]


def train(model: ModelAssembly, fit: SampleTable, val: SampleTable, config: TrainConfig):
    """Minibatch training of ``model`` in place; returns ``(model, history)``.

    ``model`` needs ``params``, ``inputs(table)`` and ``forward(nodes, inputs)``
    as on :class:`~grayvfm.models.ModelAssembly`.

    Each epoch reshuffles the fit rows with a generator seeded from
    ``config.seed``, walks batches of ``config.batch_size`` (the last partial
    batch included) and steps the optimizer after every batch.  Validation
    RMSE/MAE are recorded after each epoch.
    """
    if fit.n_rows == 0 or val.n_rows == 0:
        raise StructuralError("train and validation sets must be non-empty")
    lam, mu = regularization(model, config)
    rng = np.random.default_rng(config.seed)
    inputs = model.inputs(fit)
    val_inputs = model.inputs(val)
    y = np.asarray(fit["q_o"], dtype=np.float64)
    val_y = np.asarray(val["q_o"], dtype=np.float64)
    n = y.shape[0]
    theta = model.params.values()
    state = OptimizerState()
    history = TrainHistory()
    B = config.batch_size
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, n, B)):
            idx = order[lo : lo + B]
            tape = Tape()
            nodes = {k: tape.param(v, k) for k, v in theta.items()}
            pred = model.forward(nodes, {k: v[idx] for k, v in inputs.items()})
            J = objective(pred, y[idx], nodes, lam, mu)
            value = float(J.value)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, value)
            grads = ad.backward(J)
            g = {k: grads[node] for k, node in nodes.items()}
            if config.optimizer == "adam":
                state, theta = adam_step(state, theta, g, config.lr, *config.betas, config.eps)
            else:
                theta = sgd_step(theta, g, config.lr)
            total += value * idx.size
            count += idx.size
        model.params.assign(theta)
        vt = Tape()
        pv = np.asarray(model.forward({k: vt.const(v) for k, v in theta.items()}, val_inputs).value)
        history.epoch.append(epoch + 1)
        history.train_loss.append(total / count)
        history.val_rmse.append(rmse(val_y, pv))
        history.val_mae.append(mae(val_y, pv))
        if config.snapshot_every and (epoch + 1) % config.snapshot_every == 0:
            history.snapshots[epoch + 1] = {k: np.array(v) for k, v in theta.items()}
    model.params.assign(theta)
    history.overfit = overfit_flag(history)
    for name, prior in model.params.priors.items():
        value = model.params.physical[name]
        if not prior.contains(value):
            history.bound_violations[name] = value
    if history.bound_violations:
        log.warning("parameters outside prior bounds: %s", history.bound_violations)
    return model, history
