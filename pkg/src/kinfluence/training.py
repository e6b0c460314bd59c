"""Regularized empirical risk: value/gradient/HVP and full-batch training.

The risk is mean per-point loss plus (lambda/2) ||theta - c||^2, where the
center c is the linearization point in ``reference`` mode and 0 in ``origin``
mode. For linearized models the risk is quadratic in theta whenever the loss
is squared error, which is what makes the exact dense fit below a legitimate
retrain-from-scratch oracle.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .datasets import LabeledDataset
from .errors import DimensionMismatch, DivergenceDetected, EmptyDataset
from .kernels import KernelMatrix, empirical_ntk
from .losses import SQUARED, loss_grad_batch, loss_hess_batch, loss_value_batch
from .models import (
    LinearizedModel,
    Model,
    _spec_of,
    jacobian_point,
    jvp,
    model_outputs,
    vjp,
)

CENTER_REFERENCE = "reference"
CENTER_ORIGIN = "origin"


@dataclass(frozen=True)
class RiskConfig:
    lam: float
    loss: str = SQUARED
    center: str = CENTER_REFERENCE

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be strictly positive")
        if self.center not in (CENTER_REFERENCE, CENTER_ORIGIN):
            raise ValueError(f"unknown center {self.center!r}")


@dataclass(frozen=True)
class Optimizer:
    kind: str = "gd"  # gd | momentum
    lr: float = 0.1
    beta: float = 0.9

    def __post_init__(self):
        if self.kind not in ("gd", "momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class StopRule:
    max_epochs: int = 1000
    grad_tol: float = 1e-10


@dataclass
class TrainReport:
    final_params: np.ndarray
    epochs_run: int
    grad_norm_history: np.ndarray
    loss_history: np.ndarray
    wall_time: float = 0.0


def resolve_center(model: Model, cfg: RiskConfig, center: np.ndarray | None = None) -> np.ndarray:
    """The vector c in the (lambda/2)||theta - c||^2 term."""
    spec = _spec_of(model)
    if cfg.center == CENTER_ORIGIN:
        return np.zeros(spec.num_params)
    if isinstance(model, LinearizedModel):
        return model.theta_ref
    if center is None:
        raise ValueError("reference-centered risk on a raw network needs an explicit center")
    center = np.asarray(center, dtype=np.float64)
    if center.shape != (spec.num_params,):
        raise DimensionMismatch("center length mismatch")
    return center


def _check_ds(ds: LabeledDataset, model: Model) -> None:
    if ds.n < 1:
        raise EmptyDataset("risk needs a nonempty dataset")
    spec = _spec_of(model)
    if ds.d_in != spec.d_in or ds.d_out != spec.d_out:
        raise DimensionMismatch(
            f"dataset ({ds.d_in}->{ds.d_out}) incompatible with model ({spec.d_in}->{spec.d_out})"
        )


def risk_value(model: Model, theta: np.ndarray, ds: LabeledDataset, cfg: RiskConfig,
               center: np.ndarray | None = None) -> float:
    _check_ds(ds, model)
    f = model_outputs(model, theta, ds.features)
    c = resolve_center(model, cfg, center)
    return float(loss_value_batch(cfg.loss, f, ds.targets).mean()
                 + 0.5 * cfg.lam * np.sum((theta - c) ** 2))


def risk_value_and_grad(model: Model, theta: np.ndarray, ds: LabeledDataset, cfg: RiskConfig,
                        center: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    _check_ds(ds, model)
    theta = np.asarray(theta, dtype=np.float64)
    f = model_outputs(model, theta, ds.features)
    c = resolve_center(model, cfg, center)
    value = float(loss_value_batch(cfg.loss, f, ds.targets).mean()
                  + 0.5 * cfg.lam * np.sum((theta - c) ** 2))
    g_out = loss_grad_batch(cfg.loss, f, ds.targets).ravel()
    spec = _spec_of(model)
    grad = vjp(spec, jacobian_point(model, theta), ds.features, g_out) / ds.n + cfg.lam * (theta - c)
    return value, grad


def risk_grad(model: Model, theta: np.ndarray, ds: LabeledDataset, cfg: RiskConfig,
              center: np.ndarray | None = None) -> np.ndarray:
    return risk_value_and_grad(model, theta, ds, cfg, center)[1]


def risk_hvp(model: Model, theta: np.ndarray, ds: LabeledDataset, cfg: RiskConfig,
             v: np.ndarray, center: np.ndarray | None = None) -> np.ndarray:
    """Risk-Hessian vector product (1/N) J' B J v + lambda v.

    Exact for linearized models; for raw ReLU/identity networks the
    Gauss-Newton form with J at theta equals the Hessian almost everywhere
    (the model is piecewise linear in theta).
    """
    _check_ds(ds, model)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("hvp direction must be finite")
    spec = _spec_of(model)
    at = jacobian_point(model, theta)
    f = model_outputs(model, theta, ds.features)
    blocks = loss_hess_batch(cfg.loss, f, ds.targets)
    u = jvp(spec, at, ds.features, v).reshape(ds.n, ds.d_out)
    bu = np.einsum("nij,nj->ni", blocks, u).ravel()
    return vjp(spec, at, ds.features, bu) / ds.n + cfg.lam * v


def train(model: Model, ds: LabeledDataset, cfg: RiskConfig, opt: Optimizer, stop: StopRule,
          theta0: np.ndarray | None = None, center: np.ndarray | None = None) -> TrainReport:
    """Deterministic full-batch gradient descent / heavy-ball training."""
    spec = _spec_of(model)
    if theta0 is None:
        theta0 = model.theta_ref.copy() if isinstance(model, LinearizedModel) else spec.init_params()
    theta = np.asarray(theta0, dtype=np.float64).copy()
    if cfg.center == CENTER_REFERENCE and not isinstance(model, LinearizedModel) and center is None:
        center = theta.copy()  # regularize toward the starting point
    velocity = np.zeros_like(theta)
    losses, gnorms = [], []
    t0 = time.perf_counter()
    epochs = 0
    for epoch in range(stop.max_epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            value, grad = risk_value_and_grad(model, theta, ds, cfg, center)
        if not np.isfinite(value):
            raise DivergenceDetected(f"loss became non-finite at epoch {epoch}")
        gn = float(np.linalg.norm(grad))
        losses.append(value)
        gnorms.append(gn)
        epochs = epoch + 1
        if gn <= stop.grad_tol:
            break
        if opt.kind == "momentum":
            velocity = opt.beta * velocity - opt.lr * grad
            theta = theta + velocity
        else:
            theta = theta - opt.lr * grad
    if not np.all(np.isfinite(theta)):
        raise DivergenceDetected("parameters became non-finite")
    return TrainReport(theta, epochs, np.array(gnorms), np.array(losses),
                       time.perf_counter() - t0)


def fit_linearized_exact(lin: LinearizedModel, ds: LabeledDataset, cfg: RiskConfig,
                         kernel: KernelMatrix | None = None) -> np.ndarray:
    """Exact minimizer of the squared-error linearized risk (retraining oracle).

    Solves the dual system (K + lambda N I) beta = Y - f0 on the Gram side and
    maps back through J', so no d_theta x d_theta factorization is formed.
    Requires center == linearization point (origin mode needs theta_ref = 0).
    """
    if cfg.loss != SQUARED:
        raise ValueError("exact fit needs the squared-error risk (quadratic objective)")
    _check_ds(ds, lin)
    if cfg.center == CENTER_ORIGIN and np.any(lin.theta_ref != 0.0):
        raise ValueError("origin-centered risk requires linearization around 0")
    if kernel is None:
        kernel = empirical_ntk(lin.spec, lin.theta_ref, ds.features)
    k = kernel.to_dense()
    if k.shape[0] != ds.n * ds.d_out:
        raise DimensionMismatch("kernel does not match dataset size")
    f0 = model_outputs(lin, lin.theta_ref, ds.features).ravel()
    rhs = ds.targets_vec - f0
    sys = k + cfg.lam * ds.n * np.eye(k.shape[0])
    beta = scipy.linalg.solve(sys, rhs, assume_a="pos")
    return lin.theta_ref + vjp(lin.spec, lin.theta_ref, ds.features, beta)
