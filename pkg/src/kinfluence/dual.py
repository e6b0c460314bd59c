"""Kernel-space influence: the reduced coefficient system and its predictors.

Unlearning in coefficient space rests on the representer structure of the
linearized optimum: theta_hat - theta_ref = J' alpha with
alpha = -(1/lambda) grad_f risk. Removing the forget block fixes the forget
coefficients analytically, so only the retain-block system

    H_rr x = (|Df|/|D|) g_r - H_rf x_f

has to be solved, and every matrix in it is a slice of the precomputed kernel.
The same machinery runs against analytic infinite-width kernels, where model
outputs come from function-space training instead of a parameter vector.
"""

from __future__ import annotations

import time

import numpy as np
import scipy.linalg

from .datasets import SplitDataset
from .errors import DegenerateSplit, DimensionMismatch, NotAtOptimum
from .kernels import KernelMatrix, empirical_ntk, even_shards, sharded_matvec
from .losses import loss_grad_batch, loss_hess_batch
from .models import LinearizedModel, model_outputs, vjp
from .report import InfluenceReport, PerTestChange
from .solvers import CgOptions, cg_solve
from .training import CENTER_ORIGIN, RiskConfig, risk_grad

DENSE_SOLVE_MAX = 512
STATIONARITY_TOL = 1e-6


class DualCoefficients:
    """alpha_star and delta_alpha over the whole dataset, forget block first."""

    def __init__(self, alpha_star: np.ndarray, delta_alpha: np.ndarray,
                 d_out: int, n_forget: int):
        if alpha_star.shape != delta_alpha.shape:
            raise DimensionMismatch("alpha/delta length mismatch")
        self.alpha_star = alpha_star
        self.delta_alpha = delta_alpha
        self.d_out = d_out
        self.n_forget = n_forget

    @property
    def delta_forget(self) -> np.ndarray:
        return self.delta_alpha[: self.n_forget * self.d_out]

    @property
    def delta_retain(self) -> np.ndarray:
        return self.delta_alpha[self.n_forget * self.d_out:]


def alpha_star(lin: LinearizedModel, theta_hat: np.ndarray, ds, cfg: RiskConfig,
               tol: float = STATIONARITY_TOL) -> np.ndarray:
    """-(1/lambda) grad of the risk w.r.t. vectorized outputs at the optimum.

    Hard-errors when theta_hat is not stationary: the representer identity
    theta_hat - theta_ref = J' alpha fails away from the optimum.
    """
    if cfg.center == CENTER_ORIGIN and np.any(lin.theta_ref != 0.0):
        raise ValueError("origin-centered risk requires linearization around 0")
    gnorm = float(np.linalg.norm(risk_grad(lin, theta_hat, ds, cfg)))
    if gnorm > tol:
        raise NotAtOptimum(f"||grad|| = {gnorm:.3e} exceeds {tol}")
    f = model_outputs(lin, theta_hat, ds.features)
    g = loss_grad_batch(cfg.loss, f, ds.targets).ravel()
    # single fused denominator so -alpha's forget block reproduces the known
    # value grad/(N lam) bitwise
    return -g / (cfg.lam * ds.n)


def alpha_star_from_outputs(f_vec: np.ndarray, ds, cfg: RiskConfig) -> np.ndarray:
    """Same map given vectorized outputs directly (function-space callers)."""
    f = np.asarray(f_vec, dtype=np.float64).reshape(ds.n, ds.d_out)
    g = loss_grad_batch(cfg.loss, f, ds.targets).ravel()
    return -g / (cfg.lam * ds.n)


def representer_residual(lin: LinearizedModel, theta_hat: np.ndarray, ds,
                         alpha: np.ndarray) -> float:
    """Relative residual of theta_hat - theta_ref = J' alpha (rank diagnostic)."""
    lhs = theta_hat - lin.theta_ref
    rhs = vjp(lin.spec, lin.theta_ref, ds.features, alpha)
    denom = np.linalg.norm(lhs)
    return float(np.linalg.norm(lhs - rhs) / denom) if denom > 0 else float(np.linalg.norm(rhs))


def _apply_blockdiag(blocks: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """(blockdiag B) @ mat for per-point (d,d) blocks; mat has N*d rows."""
    n, d, _ = blocks.shape
    return np.einsum("nij,njc->nic", blocks, mat.reshape(n, d, -1)).reshape(n * d, -1)


def _apply_blockdiag_vec(blocks: np.ndarray, v: np.ndarray) -> np.ndarray:
    n, d, _ = blocks.shape
    return np.einsum("nij,nj->ni", blocks, v.reshape(n, d)).ravel()


def retain_hessian_blocks(f_vec: np.ndarray, split: SplitDataset, cfg: RiskConfig) -> np.ndarray:
    """Per-point output Hessians of the retain risk: (1/|Dr|) hess blocks."""
    retain = split.retain
    f = np.asarray(f_vec).reshape(split.n, split.full.d_out)[split.n_forget:]
    return loss_hess_batch(cfg.loss, f, retain.targets) / split.n_retain


def dual_hessian_block(kernel: KernelMatrix, b_r: np.ndarray, split: SplitDataset,
                       cfg: RiskConfig, i: str, j: str) -> np.ndarray:
    """Dense block H^{ij} = (|Dr|/|D|) (K_ir B_r K_rj + lambda K_ij)."""
    idx = {"f": np.arange(split.n_forget), "r": np.arange(split.n_forget, split.n)}
    if i not in idx or j not in idx:
        raise ValueError("block labels must be 'f' or 'r'")
    k_ir = kernel.submatrix(idx[i], idx["r"]).to_dense()
    k_rj = kernel.submatrix(idx["r"], idx[j]).to_dense()
    k_ij = kernel.submatrix(idx[i], idx[j]).to_dense()
    scale = split.n_retain / split.n
    return scale * (k_ir @ _apply_blockdiag(b_r, k_rj) + cfg.lam * k_ij)


def dual_rhs(kernel: KernelMatrix, f_vec: np.ndarray, split: SplitDataset,
             cfg: RiskConfig, i: str, alpha: np.ndarray | None = None) -> np.ndarray:
    """Block i of the reparameterized forget-risk gradient at 0:
    K_if grad_f(forget risk) + lambda K_i alpha."""
    if alpha is None:
        alpha = alpha_star_from_outputs(f_vec, split.full, cfg)
    idx = {"f": np.arange(split.n_forget), "r": np.arange(split.n_forget, split.n)}
    if i not in idx:
        raise ValueError("block label must be 'f' or 'r'")
    f = np.asarray(f_vec).reshape(split.n, split.full.d_out)
    g_f = loss_grad_batch(cfg.loss, f[: split.n_forget], split.forget.targets).ravel()
    g_f /= split.n_forget
    k_if = kernel.submatrix(idx[i], idx["f"])
    k_i = kernel.submatrix(idx[i], np.arange(split.n))
    return k_if.matvec(g_f) + cfg.lam * k_i.matvec(alpha)


class DualUnlearner:
    """Prepares kernel blocks once; repeated reduced solves reuse them.

    The retain-block system is solved densely when its size is at most
    ``dense_threshold``, otherwise by CG whose operator evaluates
    (|Dr|/|D|) (K_rr (B_r (K_rr v)) + lambda K_rr v); with
    ``materialize_hrr`` the same operator is applied through a precomputed
    dense H_rr (one gemv per iteration). ``shards`` routes K_rr matvecs
    through the deterministic sharded kernel.
    """

    def __init__(self, kernel: KernelMatrix, f_vec: np.ndarray, split: SplitDataset,
                 cfg: RiskConfig, opts: CgOptions = CgOptions(),
                 dense_threshold: int = DENSE_SOLVE_MAX, shards: int = 1,
                 materialize_hrr: bool = False):
        if split.n_forget < 1 or split.n_retain < 1:
            raise DegenerateSplit("both partitions must be nonempty")
        if kernel.n_rows != split.n or kernel.n_cols != split.n:
            raise DimensionMismatch("kernel size does not match the split")
        self.kernel = kernel
        self.f_vec = np.asarray(f_vec, dtype=np.float64)
        self.split = split
        self.cfg = cfg
        self.opts = opts
        self.dense_threshold = dense_threshold
        self.shards = max(1, int(shards))
        self.materialize_hrr = materialize_hrr
        self.diagnostics: dict = {}
        self._prepared = False

    # -- cold work ----------------------------------------------------------
    def prepare(self) -> None:
        split, cfg = self.split, self.cfg
        d = self.kernel.d_out
        self.alpha = alpha_star_from_outputs(self.f_vec, split.full, cfg)
        self.delta_f = -self.alpha[: split.n_forget * d]
        self.b_r = retain_hessian_blocks(self.f_vec, split, cfg)
        retain_idx = np.arange(split.n_forget, split.n)
        self.k_rr = self.kernel.submatrix(retain_idx, retain_idx).to_dense()
        rhs_r = dual_rhs(self.kernel, self.f_vec, split, cfg, "r", self.alpha)
        h_rf_df = self._h_rf_times(self.delta_f)
        self.rhs = (split.n_forget / split.n) * rhs_r - h_rf_df
        self.size = split.n_retain * d
        self.use_dense = self.size <= self.dense_threshold
        self._factor = None
        self._jitter = 0.0
        if self.use_dense or self.materialize_hrr:
            scale = split.n_retain / split.n
            self.h_rr = scale * (self.k_rr @ _apply_blockdiag(self.b_r, self.k_rr)
                                 + cfg.lam * self.k_rr)
        else:
            self.h_rr = None
        if self.use_dense:
            # the factorization is part of operator construction (cold work);
            # warm solves reuse it
            try:
                self._factor = scipy.linalg.cho_factor(self.h_rr)
            except np.linalg.LinAlgError:
                self._jitter = 1e-10 * float(np.trace(self.h_rr)) / max(self.size, 1)
                self._factor = scipy.linalg.cho_factor(
                    self.h_rr + self._jitter * np.eye(self.size))
        self._shard_spans = (even_shards(self.size, self.shards)
                             if self.shards > 1 else None)
        self._prepared = True

    def _h_rf_times(self, x_f: np.ndarray) -> np.ndarray:
        split, cfg = self.split, self.cfg
        fi = np.arange(split.n_forget)
        ri = np.arange(split.n_forget, split.n)
        k_rf = self.kernel.submatrix(ri, fi)
        t = k_rf.matvec(x_f)
        scale = split.n_retain / split.n
        return scale * (self.k_rr @ _apply_blockdiag_vec(self.b_r, t) + cfg.lam * t)

    def _krr_matvec(self, v: np.ndarray) -> np.ndarray:
        if self._shard_spans is not None:
            y, seconds = sharded_matvec(self.k_rr, v, self._shard_spans)
            self.diagnostics.setdefault("shard_seconds", []).append(seconds)
            return y
        return self.k_rr @ v

    def _operator(self):
        scale = self.split.n_retain / self.split.n
        lam = self.cfg.lam
        if self.h_rr is not None and not self.use_dense:
            h = self.h_rr
            if self._shard_spans is not None:
                return lambda v: sharded_matvec(h, v, self._shard_spans)[0]
            return lambda v: h @ v

        def apply_h(v: np.ndarray) -> np.ndarray:
            t = self._krr_matvec(v)
            return scale * (self._krr_matvec(_apply_blockdiag_vec(self.b_r, t)) + lam * t)

        return apply_h

    # -- warm work ----------------------------------------------------------
    def solve(self) -> DualCoefficients:
        if not self._prepared:
            self.prepare()
        split = self.split
        d = self.kernel.d_out
        if self.use_dense:
            x_r = scipy.linalg.cho_solve(self._factor, self.rhs)
            self.diagnostics.update({"solver": "dense", "jitter": self._jitter,
                                     "iters": 0, "residual": 0.0, "converged": True})
        else:
            res = cg_solve(self._operator(), self.rhs, self.opts)
            x_r = res.x
            self.diagnostics.update({"solver": "cg", "iters": res.iters,
                                     "residual": res.residual,
                                     "converged": res.converged, "jitter": 0.0})
        delta = np.concatenate([self.delta_f, x_r])
        return DualCoefficients(self.alpha, delta, d, split.n_forget)

    def run(self) -> tuple[DualCoefficients, float]:
        t0 = time.perf_counter()
        self.prepare()
        coeffs = self.solve()
        return coeffs, time.perf_counter() - t0


def solve_reduced(kernel: KernelMatrix, f_vec: np.ndarray, split: SplitDataset,
                  cfg: RiskConfig, opts: CgOptions = CgOptions(),
                  dense_threshold: int = DENSE_SOLVE_MAX, shards: int = 1) -> tuple[DualCoefficients, dict]:
    """One-shot reduced-system solve; returns coefficients and diagnostics."""
    solver = DualUnlearner(kernel, f_vec, split, cfg, opts, dense_threshold, shards)
    coeffs = solver.solve()
    return coeffs, solver.diagnostics


def map_to_params(lin: LinearizedModel, theta_hat: np.ndarray, delta_alpha: np.ndarray,
                  X: np.ndarray) -> np.ndarray:
    """theta_hat + J(theta_ref)' delta_alpha over the full training inputs."""
    if delta_alpha.shape[0] != X.shape[0] * lin.spec.d_out:
        raise DimensionMismatch("delta_alpha length does not match the dataset")
    return theta_hat + vjp(lin.spec, lin.theta_ref, X, delta_alpha)


def predict_changes_dual(k_test: KernelMatrix, kernel: KernelMatrix,
                         coeffs: DualCoefficients, f_test_vec: np.ndarray,
                         test_targets: np.ndarray, cfg: RiskConfig):
    """Vectorized output/loss changes at test points.

    Output changes are K_t delta; per-point loss changes row-sum the d_out
    consecutive entries of grad_f loss (*) (K_t delta) and the regularizer
    variant adds the constant lambda alpha' K delta.
    """
    d = kernel.d_out
    n_t = test_targets.shape[0]
    if k_test.shape != (n_t * d, coeffs.delta_alpha.shape[0]):
        raise DimensionMismatch("test kernel shape mismatch")
    df = k_test.matvec(coeffs.delta_alpha).reshape(n_t, d)
    f_t = np.asarray(f_test_vec).reshape(n_t, d)
    g_t = loss_grad_batch(cfg.loss, f_t, test_targets)
    raw = np.einsum("td,td->t", g_t, df)
    reg_term = cfg.lam * float(coeffs.alpha_star @ kernel.matvec(coeffs.delta_alpha))
    return df, raw, raw + reg_term


def unlearn_dual(lin: LinearizedModel, theta_hat: np.ndarray, split: SplitDataset,
                 cfg: RiskConfig, opts: CgOptions = CgOptions(),
                 kernel: KernelMatrix | None = None, test_ds=None,
                 dense_threshold: int = DENSE_SOLVE_MAX, shards: int = 1) -> InfluenceReport:
    """End-to-end coefficient-space unlearning for a linearized model."""
    t0 = time.perf_counter()
    notes = []
    if kernel is None:
        kernel = empirical_ntk(lin.spec, lin.theta_ref, split.full.features)
    gnorm = float(np.linalg.norm(risk_grad(lin, theta_hat, split.full, cfg)))
    if gnorm > STATIONARITY_TOL:
        raise NotAtOptimum(f"||grad|| = {gnorm:.3e} exceeds {STATIONARITY_TOL}")
    f_vec = model_outputs(lin, theta_hat, split.full.features).ravel()
    solver = DualUnlearner(kernel, f_vec, split, cfg, opts, dense_threshold, shards)
    coeffs = solver.solve()
    alpha = coeffs.alpha_star
    resid = representer_residual(lin, theta_hat, split.full, alpha)
    if resid > 1e-6:
        notes.append(f"representer identity residual {resid:.3e} (rank-deficiency diagnostic)")
    theta_u = map_to_params(lin, theta_hat, coeffs.delta_alpha, split.full.features)
    report = InfluenceReport(
        delta_theta=theta_u - theta_hat,
        residual=solver.diagnostics.get("residual", 0.0),
        iters=solver.diagnostics.get("iters", 0),
        wall_cold=time.perf_counter() - t0,
        converged=solver.diagnostics.get("converged", True),
        notes=notes,
    )
    if test_ds is not None:
        k_t = empirical_ntk(lin.spec, lin.theta_ref, test_ds.features, split.full.features)
        f_t = model_outputs(lin, theta_hat, test_ds.features).ravel()
        df, raw, reg = predict_changes_dual(k_t, kernel, coeffs, f_t, test_ds.targets, cfg)
        for i in range(test_ds.n):
            report.per_test.append(PerTestChange(df[i], float(raw[i]), float(reg[i])))
    return report
