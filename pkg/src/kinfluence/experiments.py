"""Benchmark harness: train, split, unlearn in both spaces, compare to
retraining and a norm-matched random perturbation.

Timing semantics follow the two-metric protocol: the kernel is a precomputed
stored artifact, cold runtime covers operator/right-hand-side construction
plus the first solve measured in a fresh process, warm runtime is the mean
and standard deviation over exactly five repeat solves that reuse the
prepared operator. Everything except wall-clock fields is deterministic for
fixed seeds.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass

import numpy as np

from .datasets import LabeledDataset, data_dir, load_cifar_binary, load_idx, make_blobs, split_forget
from .dual import DualUnlearner
from .errors import ConfigError
from .infinite import AnalyticNtkSpec, infinite_influence
from .kernels import KernelMatrix, empirical_ntk, read_kernel_cache, write_kernel_cache
from .losses import SQUARED
from .models import LinearizedModel, ModelSpec, model_outputs, save_params
from .primal import PrimalUnlearner, attach_test_predictions
from .report import (
    InfluenceReport,
    MetricsRow,
    PerTestChange,
    append_diagnostics,
    write_influence_csv,
    write_metrics_csv,
    write_train_csv,
)
from .solvers import CgOptions
from .training import Optimizer, RiskConfig, StopRule, fit_linearized_exact, risk_grad, train

WARM_REPEATS = 5

SPACE_THETA = "theta"
SPACE_DUAL = "dual"


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"            # blobs | mnist | cifar10
    classes: tuple = (0, 1)
    per_class: int = 100
    d_in: int = 20                 # blobs feature width
    noise: float = 0.12
    feature_scale: float = 1.0     # shrink features toward 0 (stability knob)
    targets: str = "onehot"        # onehot | pm1
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = DatasetConfig()
    widths: tuple = (20, 64, 2)
    activation: str = "relu"
    parameterization: str = "standard"
    init_seed: int = 0
    linearized: bool = True
    risk: RiskConfig = RiskConfig(lam=0.1)
    trainer: str = "direct"        # direct | gd | momentum
    opt: Optimizer = Optimizer()
    stop: StopRule = StopRule()
    percents: tuple = (10.0, 30.0, 50.0, 70.0, 90.0)
    scope: object = "all"
    space: str = "both"            # theta | dual | both
    shards: int = 1
    hessian_variant: str = "upweighted"
    cg: CgOptions = CgOptions()
    dense_threshold: int = 512
    materialize_hrr: bool = False
    cold: str = "subprocess"       # subprocess | inline | skip
    test_size: int = 50
    seeds: tuple = (0,)
    ntk_hidden_layers: int = 3
    ntk_sigma_w2: float = 2.0
    ntk_sigma_b2: float = 0.01
    ntk_lr: float | None = None
    ntk_epochs: int = 20000
    ntk_tol: float = 1e-6
    sweep_lambdas: tuple = (1e-3, 1e-1, 1e1)
    out_dir: str = "results"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.percents:
            raise ConfigError("removal percents must be nonempty")
        if any(not 0 < p < 100 for p in self.percents):
            raise ConfigError("removal percents must lie strictly inside (0, 100)")
        if self.space not in (SPACE_THETA, SPACE_DUAL, "both"):
            raise ConfigError(f"unknown space {self.space!r}")
        if self.trainer not in ("direct", "gd", "momentum"):
            raise ConfigError(f"unknown trainer {self.trainer!r}")
        if self.trainer == "direct" and (not self.linearized or self.risk.loss != SQUARED):
            raise ConfigError("direct trainer requires a linearized model with squared loss")
        if self.cold not in ("subprocess", "inline", "skip"):
            raise ConfigError(f"unknown cold mode {self.cold!r}")
        if not self.linearized and self.space != SPACE_THETA:
            raise ConfigError("coefficient-space unlearning requires a linearized model")

    def spaces(self) -> tuple:
        return (SPACE_THETA, SPACE_DUAL) if self.space == "both" else (self.space,)


# --------------------------------------------------------------------------
# Key-value config files
# --------------------------------------------------------------------------

_KNOWN_KEYS = {
    "experiment.name", "dataset.kind", "dataset.classes", "dataset.per_class",
    "dataset.d_in", "dataset.noise", "dataset.feature_scale", "dataset.targets",
    "dataset.seed", "model.widths", "model.activation", "model.parameterization",
    "model.init_seed", "model.linearized", "risk.lambda", "risk.loss", "risk.center",
    "train.kind", "opt.kind", "opt.lr", "opt.beta", "stop.max_epochs", "stop.grad_tol",
    "unlearn.percents", "unlearn.scope", "unlearn.space", "unlearn.shards",
    "unlearn.hessian", "cg.rel_tol", "cg.max_iters", "cg.preconditioner",
    "dual.dense_threshold", "dual.materialize_hrr", "bench.cold", "bench.test_size",
    "seed", "seeds", "ntk.hidden_layers", "ntk.sigma_w2", "ntk.sigma_b2", "ntk.lr",
    "ntk.epochs", "ntk.tol", "sweep.lambdas", "out",
}

# single-value spellings accepted as synonyms
_ALIASES = {"seed": "seeds", "opt.kind": "train.kind"}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[_ALIASES.get(key, key)] = val
    return values


def _floats(val: str) -> tuple:
    try:
        return tuple(float(v) for v in val.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"bad numeric list {val!r}") from e


def _ints(val: str) -> tuple:
    try:
        return tuple(int(v) for v in val.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"bad integer list {val!r}") from e


def _bool(val: str) -> bool:
    if val.lower() in ("true", "1", "yes"):
        return True
    if val.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"bad boolean {val!r}")


def config_from_values(values: dict) -> ExperimentConfig:
    g = values.get
    try:
        dataset = DatasetConfig(
            kind=g("dataset.kind", "blobs"),
            classes=_ints(g("dataset.classes", "0,1")),
            per_class=int(g("dataset.per_class", "100")),
            d_in=int(g("dataset.d_in", "20")),
            noise=float(g("dataset.noise", "0.12")),
            feature_scale=float(g("dataset.feature_scale", "1.0")),
            targets=g("dataset.targets", "onehot"),
            seed=int(g("dataset.seed", "0")),
        )
        scope_raw = g("unlearn.scope", "all")
        scope = "all" if scope_raw == "all" else int(scope_raw)
        ntk_lr = g("ntk.lr", "auto")
        cfg = ExperimentConfig(
            name=g("experiment.name", "experiment"),
            dataset=dataset,
            widths=_ints(g("model.widths", "20,64,2")),
            activation=g("model.activation", "relu"),
            parameterization=g("model.parameterization", "standard"),
            init_seed=int(g("model.init_seed", "0")),
            linearized=_bool(g("model.linearized", "true")),
            risk=RiskConfig(lam=float(g("risk.lambda", "0.1")),
                            loss=g("risk.loss", "squared"),
                            center=g("risk.center", "reference")),
            trainer=g("train.kind", "direct"),
            opt=Optimizer(kind="momentum" if g("train.kind", "direct") == "momentum" else "gd",
                          lr=float(g("opt.lr", "0.1")), beta=float(g("opt.beta", "0.9"))),
            stop=StopRule(max_epochs=int(g("stop.max_epochs", "1000")),
                          grad_tol=float(g("stop.grad_tol", "1e-10"))),
            percents=_floats(g("unlearn.percents", "10,30,50,70,90")),
            scope=scope,
            space=g("unlearn.space", "both"),
            shards=int(g("unlearn.shards", "1")),
            hessian_variant=g("unlearn.hessian", "upweighted"),
            cg=CgOptions(rel_tol=float(g("cg.rel_tol", "1e-10")),
                         max_iters=int(g("cg.max_iters", "10000")),
                         preconditioner=g("cg.preconditioner", "none")),
            dense_threshold=int(g("dual.dense_threshold", "512")),
            materialize_hrr=_bool(g("dual.materialize_hrr", "false")),
            cold=g("bench.cold", "subprocess"),
            test_size=int(g("bench.test_size", "50")),
            seeds=_ints(g("seeds", "0")),
            ntk_hidden_layers=int(g("ntk.hidden_layers", "3")),
            ntk_sigma_w2=float(g("ntk.sigma_w2", "2.0")),
            ntk_sigma_b2=float(g("ntk.sigma_b2", "0.01")),
            ntk_lr=None if ntk_lr == "auto" else float(ntk_lr),
            ntk_epochs=int(g("ntk.epochs", "20000")),
            ntk_tol=float(g("ntk.tol", "1e-6")),
            sweep_lambdas=_floats(g("sweep.lambdas", "1e-3,1e-1,1e1")),
            out_dir=g("out", "results"),
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    with open(path) as f:
        values = parse_config_text(f.read())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_values(values)


def dump_config(cfg: ExperimentConfig) -> str:
    scope = cfg.scope if cfg.scope == "all" else str(cfg.scope)
    lines = {
        "experiment.name": cfg.name,
        "dataset.kind": cfg.dataset.kind,
        "dataset.classes": ",".join(map(str, cfg.dataset.classes)),
        "dataset.per_class": cfg.dataset.per_class,
        "dataset.d_in": cfg.dataset.d_in,
        "dataset.noise": cfg.dataset.noise,
        "dataset.feature_scale": cfg.dataset.feature_scale,
        "dataset.targets": cfg.dataset.targets,
        "dataset.seed": cfg.dataset.seed,
        "model.widths": ",".join(map(str, cfg.widths)),
        "model.activation": cfg.activation,
        "model.parameterization": cfg.parameterization,
        "model.init_seed": cfg.init_seed,
        "model.linearized": str(cfg.linearized).lower(),
        "risk.lambda": cfg.risk.lam,
        "risk.loss": cfg.risk.loss,
        "risk.center": cfg.risk.center,
        "train.kind": cfg.trainer,
        "opt.lr": cfg.opt.lr,
        "opt.beta": cfg.opt.beta,
        "stop.max_epochs": cfg.stop.max_epochs,
        "stop.grad_tol": cfg.stop.grad_tol,
        "unlearn.percents": ",".join(f"{p:g}" for p in cfg.percents),
        "unlearn.scope": scope,
        "unlearn.space": cfg.space,
        "unlearn.shards": cfg.shards,
        "unlearn.hessian": cfg.hessian_variant,
        "cg.rel_tol": cfg.cg.rel_tol,
        "cg.max_iters": cfg.cg.max_iters,
        "cg.preconditioner": cfg.cg.preconditioner,
        "dual.dense_threshold": cfg.dense_threshold,
        "dual.materialize_hrr": str(cfg.materialize_hrr).lower(),
        "bench.cold": cfg.cold,
        "bench.test_size": cfg.test_size,
        "seeds": ",".join(map(str, cfg.seeds)),
        "ntk.hidden_layers": cfg.ntk_hidden_layers,
        "ntk.sigma_w2": cfg.ntk_sigma_w2,
        "ntk.sigma_b2": cfg.ntk_sigma_b2,
        "ntk.lr": "auto" if cfg.ntk_lr is None else cfg.ntk_lr,
        "ntk.epochs": cfg.ntk_epochs,
        "ntk.tol": cfg.ntk_tol,
        "sweep.lambdas": ",".join(f"{v:g}" for v in cfg.sweep_lambdas),
        "out": cfg.out_dir,
    }
    return "".join(f"{k} = {v}\n" for k, v in lines.items())


# --------------------------------------------------------------------------
# Data assembly
# --------------------------------------------------------------------------

def _scale_features(ds: LabeledDataset, scale: float) -> LabeledDataset:
    if scale == 1.0:
        return ds
    if not 0 < scale <= 1.0:
        raise ConfigError("dataset.feature_scale must lie in (0, 1]")
    return LabeledDataset(ds.features * scale, ds.targets, ds.labels, ds.name)


def make_experiment_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic train/test pair with a shared input distribution."""
    dc = cfg.dataset
    n_classes = len(dc.classes)
    if dc.kind == "blobs":
        test_pc = max(1, -(-cfg.test_size // n_classes))
        pool = make_blobs(dc.per_class + test_pc, n_classes, dc.d_in, seed=dc.seed,
                          noise=dc.noise, encoding=dc.targets, name="blobs")
        train_rows, test_rows = [], []
        for c in range(n_classes):
            members = np.flatnonzero(pool.labels == c)
            train_rows.append(members[: dc.per_class])
            test_rows.append(members[dc.per_class: dc.per_class + test_pc])
        train = pool.take(np.sort(np.concatenate(train_rows)), name="blobs/train")
        test = pool.take(np.sort(np.concatenate(test_rows)), name="blobs/test")
        return _scale_features(train, dc.feature_scale), _scale_features(test, dc.feature_scale)
    if dc.kind == "mnist":
        from .datasets import subset_per_class
        root = data_dir()
        full = load_idx(os.path.join(root, "train-images-idx3-ubyte"),
                        os.path.join(root, "train-labels-idx1-ubyte"), name="mnist")
        held = load_idx(os.path.join(root, "t10k-images-idx3-ubyte"),
                        os.path.join(root, "t10k-labels-idx1-ubyte"), name="mnist/test")
        train = subset_per_class(full, dc.classes, dc.per_class, dc.seed, dc.targets)
        test_pc = max(1, -(-cfg.test_size // n_classes))
        test = subset_per_class(held, dc.classes, test_pc, dc.seed + 1, dc.targets)
        return _scale_features(train, dc.feature_scale), _scale_features(test, dc.feature_scale)
    if dc.kind == "cifar10":
        from .datasets import subset_per_class
        root = os.path.join(data_dir(), "cifar-10-batches-bin")
        full = load_cifar_binary(os.path.join(root, "data_batch_1.bin"))
        held = load_cifar_binary(os.path.join(root, "test_batch.bin"))
        train = subset_per_class(full, dc.classes, dc.per_class, dc.seed, dc.targets)
        test_pc = max(1, -(-cfg.test_size // n_classes))
        test = subset_per_class(held, dc.classes, test_pc, dc.seed + 1, dc.targets)
        return _scale_features(train, dc.feature_scale), _scale_features(test, dc.feature_scale)
    raise ConfigError(f"unknown dataset kind {dc.kind!r}")


def accuracy(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Argmax match for one-hot targets, sign match for +-1 targets."""
    if targets.shape[1] == 1:
        return float(np.mean((outputs[:, 0] >= 0) == (targets[:, 0] > 0)))
    return float(np.mean(outputs.argmax(axis=1) == targets.argmax(axis=1)))


def random_perturbation_baseline(theta_hat: np.ndarray, theta_retrained: np.ndarray,
                                 seed: int) -> np.ndarray:
    """theta_hat plus spherical noise matching the true displacement norm."""
    radius = float(np.linalg.norm(theta_hat - theta_retrained))
    if radius == 0.0:
        return theta_hat.copy()
    direction = np.random.default_rng(seed).standard_normal(theta_hat.shape[0])
    return theta_hat + direction * (radius / np.linalg.norm(direction))


# --------------------------------------------------------------------------
# Unlearning experiment
# --------------------------------------------------------------------------

@dataclass
class _SeedContext:
    cfg: ExperimentConfig
    seed: int
    model: object
    theta_ref: np.ndarray
    theta_hat: np.ndarray
    train_ds: LabeledDataset
    test_ds: LabeledDataset
    kernel: KernelMatrix | None


def _split_seed(seed: int, percent: float) -> int:
    return seed * 100003 + int(round(percent * 10))


def _build_seed_context(cfg: ExperimentConfig, seed: int,
                        kernel_cache_path: str | None = None) -> _SeedContext:
    train_ds, test_ds = make_experiment_data(cfg)
    spec = ModelSpec(cfg.widths, activation=cfg.activation,
                     init_seed=cfg.init_seed + seed,
                     parameterization=cfg.parameterization)
    theta_ref = np.zeros(spec.num_params) if cfg.risk.center == "origin" else spec.init_params()
    model = LinearizedModel(spec, theta_ref) if cfg.linearized else spec
    kernel = None
    if cfg.linearized and (SPACE_DUAL in cfg.spaces() or cfg.trainer == "direct"):
        if kernel_cache_path and os.path.exists(kernel_cache_path):
            kernel = read_kernel_cache(kernel_cache_path, expect_hash=spec.spec_hash())
        else:
            kernel = empirical_ntk(spec, theta_ref, train_ds.features)
    if cfg.trainer == "direct":
        theta_hat = fit_linearized_exact(model, train_ds, cfg.risk, kernel=kernel)
    else:
        rep = train(model, train_ds, cfg.risk, cfg.opt, cfg.stop,
                    theta0=theta_ref.copy())
        theta_hat = rep.final_params
    return _SeedContext(cfg, seed, model, theta_ref, theta_hat, train_ds, test_ds, kernel)


def _retrain_oracle(ctx: _SeedContext, split) -> np.ndarray:
    cfg = ctx.cfg
    if cfg.trainer == "direct":
        sub = ctx.kernel.submatrix(split.permutation[split.n_forget:],
                                   split.permutation[split.n_forget:])
        return fit_linearized_exact(ctx.model, split.retain, cfg.risk, kernel=sub)
    rep = train(ctx.model, split.retain, cfg.risk, cfg.opt, cfg.stop,
                theta0=ctx.theta_ref.copy())
    return rep.final_params


def _make_unlearner(ctx: _SeedContext, split, space: str):
    cfg = ctx.cfg
    if space == SPACE_THETA:
        return PrimalUnlearner(ctx.model, ctx.theta_hat, split, cfg.risk, cfg.cg,
                               variant=cfg.hessian_variant,
                               center=None if cfg.linearized else ctx.theta_ref)
    k_perm = ctx.kernel.submatrix(split.permutation, split.permutation)
    f_vec = model_outputs(ctx.model, ctx.theta_hat, split.full.features).ravel()
    return DualUnlearner(k_perm, f_vec, split, cfg.risk, cfg.cg,
                         dense_threshold=cfg.dense_threshold, shards=cfg.shards,
                         materialize_hrr=cfg.materialize_hrr)


def _solve_to_theta(ctx: _SeedContext, split, space: str, unlearner) -> np.ndarray:
    if space == SPACE_THETA:
        res = unlearner.solve()
        return ctx.theta_hat + res.x
    coeffs = unlearner.solve()
    from .dual import map_to_params
    return map_to_params(ctx.model, ctx.theta_hat, coeffs.delta_alpha, split.full.features)


def measure_cold(cfg: ExperimentConfig, seed: int, percent: float, space: str,
                 kernel_cache_path: str | None = None) -> float:
    """Fresh-context cold runtime: operator construction + first solve."""
    ctx = _build_seed_context(cfg, seed, kernel_cache_path)
    split = split_forget(ctx.train_ds, percent, scope=cfg.scope,
                         seed=_split_seed(seed, percent))
    unlearner = _make_unlearner(ctx, split, space)
    t0 = time.perf_counter()
    unlearner.prepare()
    _ = unlearner.solve()
    return time.perf_counter() - t0


def _cold_runtime(cfg, seed, percent, space, out_dir, snapshot_path, kernel_cache_path):
    if cfg.cold == "skip":
        return float("nan")
    if cfg.cold == "inline":
        return measure_cold(cfg, seed, percent, space, kernel_cache_path)
    result_path = os.path.join(out_dir, f"cold_s{seed}_p{percent:g}_{space}.json")
    cmd = [sys.executable, "-m", "kinfluence", "unlearn",
           "--config", snapshot_path, "--cold",
           "--percent", f"{percent:g}", "--space", space, "--seed", str(seed),
           "--out", result_path]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"cold-start child failed (exit {proc.returncode}):\n{proc.stderr}"
        )
    with open(result_path) as f:
        return float(json.load(f)["cold_runtime_s"])


def run_unlearning_experiment(cfg: ExperimentConfig) -> list[MetricsRow]:
    """The full protocol: for each seed, percent, and space, unlearn, time,
    and compare against retraining and the random-perturbation baseline."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    snapshot_path = os.path.join(cfg.out_dir, "config.cfg")
    with open(snapshot_path, "w") as f:
        f.write(dump_config(cfg))
    all_rows: list[MetricsRow] = []
    for seed in cfg.seeds:
        seed_dir = os.path.join(cfg.out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        kernel_cache_path = None
        ctx = _build_seed_context(cfg, seed)
        if ctx.kernel is not None:
            kernel_cache_path = os.path.join(seed_dir, "kernel.bin")
            write_kernel_cache(kernel_cache_path, ctx.kernel)
        rows = []
        for percent in cfg.percents:
            split = split_forget(ctx.train_ds, percent, scope=cfg.scope,
                                 seed=_split_seed(seed, percent))
            theta_retrained = _retrain_oracle(ctx, split)
            retr_norm = float(np.linalg.norm(theta_retrained))
            baseline = random_perturbation_baseline(
                ctx.theta_hat, theta_retrained, seed=seed * 1009 + int(round(percent * 10)))
            baseline_rel = float(np.linalg.norm(baseline - theta_retrained)) / retr_norm
            forget_out_re = model_outputs(ctx.model, theta_retrained, split.forget.features)
            acc_retrained = accuracy(forget_out_re, split.forget.targets)
            for space in cfg.spaces():
                case_dir = os.path.join(seed_dir, f"p{percent:g}_{space}")
                os.makedirs(case_dir, exist_ok=True)
                cold = _cold_runtime(cfg, seed, percent, space, seed_dir,
                                     snapshot_path, kernel_cache_path)
                unlearner = _make_unlearner(ctx, split, space)
                unlearner.prepare()
                warm_times = []
                theta_u = None
                for _ in range(WARM_REPEATS):
                    t0 = time.perf_counter()
                    theta_u = _solve_to_theta(ctx, split, space, unlearner)
                    warm_times.append(time.perf_counter() - t0)
                rel_l2 = float(np.linalg.norm(theta_u - theta_retrained)) / retr_norm
                forget_out_u = model_outputs(ctx.model, theta_u, split.forget.features)
                row = MetricsRow(
                    seed=seed, percent=percent, space=space,
                    cold_runtime_s=cold,
                    warm_runtime_mean_s=float(np.mean(warm_times)),
                    warm_runtime_std_s=float(np.std(warm_times)),
                    rel_l2=rel_l2,
                    forget_acc_unlearned=accuracy(forget_out_u, split.forget.targets),
                    forget_acc_retrained=acc_retrained,
                    baseline_rel_l2=baseline_rel,
                )
                rows.append(row)
                report = _test_point_report(ctx, split, space, unlearner, theta_u)
                report.wall_cold = cold
                report.wall_warm = warm_times
                write_influence_csv(os.path.join(case_dir, "influence.csv"),
                                    report, ctx.train_ds.d_out)
                diag = {"seed": seed, "percent": percent, "space": space,
                        "rel_l2": rel_l2, "baseline_rel_l2": baseline_rel,
                        "residual": report.residual, "iters": report.iters,
                        "converged": report.converged, "notes": report.notes}
                if space == SPACE_DUAL:
                    diag.update({k: v for k, v in unlearner.diagnostics.items()
                                 if k != "shard_seconds"})
                append_diagnostics(os.path.join(case_dir, "diagnostics.jsonl"), diag)
        write_metrics_csv(os.path.join(seed_dir, "metrics.csv"), rows)
        all_rows.extend(rows)
    write_metrics_csv(os.path.join(cfg.out_dir, "metrics.csv"), all_rows)
    return all_rows


def _test_point_report(ctx: _SeedContext, split, space: str, unlearner, theta_u) -> InfluenceReport:
    cfg = ctx.cfg
    if space == SPACE_THETA:
        res = unlearner.solve()
        report = InfluenceReport(delta_theta=res.x, residual=res.residual,
                                 iters=res.iters, converged=res.converged,
                                 notes=list(unlearner.notes))
        attach_test_predictions(report, ctx.model, ctx.theta_hat, ctx.test_ds, cfg.risk,
                                center=None if cfg.linearized else ctx.theta_ref)
        return report
    coeffs = unlearner.solve()
    from .dual import predict_changes_dual
    k_t = empirical_ntk(ctx.model.spec, ctx.model.theta_ref, ctx.test_ds.features,
                        split.full.features)
    f_t = model_outputs(ctx.model, ctx.theta_hat, ctx.test_ds.features).ravel()
    df, raw, reg = predict_changes_dual(k_t, unlearner.kernel, coeffs, f_t,
                                        ctx.test_ds.targets, cfg.risk)
    report = InfluenceReport(delta_theta=theta_u - ctx.theta_hat,
                             residual=unlearner.diagnostics.get("residual", 0.0),
                             iters=unlearner.diagnostics.get("iters", 0),
                             converged=unlearner.diagnostics.get("converged", True))
    for i in range(ctx.test_ds.n):
        report.per_test.append(PerTestChange(df[i], float(raw[i]), float(reg[i])))
    return report


# --------------------------------------------------------------------------
# Training-dynamics sweep over regularization strengths
# --------------------------------------------------------------------------

SWEEP_HEADER = ["epoch", "rel_param_dist", "output_rmse",
                "acc_model", "acc_linear", "grad_norm_model", "grad_norm_linear"]


def run_lambda_sweep(cfg: ExperimentConfig, lambdas=None, record_every: int = 1) -> dict:
    """Train a raw network and its linearization side by side for each lambda.

    Both models share the initialization and the optimizer; per epoch the
    harness records the relative parameter distance, the output RMSE on the
    test set, both test accuracies, and both gradient norms.
    """
    lambdas = tuple(lambdas if lambdas is not None else cfg.sweep_lambdas)
    if len(lambdas) < 2:
        raise ConfigError("a lambda sweep needs at least two values")
    os.makedirs(cfg.out_dir, exist_ok=True)
    train_ds, test_ds = make_experiment_data(cfg)
    spec = ModelSpec(cfg.widths, activation=cfg.activation, init_seed=cfg.init_seed,
                     parameterization=cfg.parameterization)
    theta0 = spec.init_params()
    lin = LinearizedModel(spec, theta0)
    results = {}
    for lam in lambdas:
        risk = RiskConfig(lam=lam, loss=cfg.risk.loss, center="reference")
        theta_nl = theta0.copy()
        theta_li = theta0.copy()
        series = []
        from .training import risk_value_and_grad
        for epoch in range(cfg.stop.max_epochs):
            _, g_nl = risk_value_and_grad(spec, theta_nl, train_ds, risk, center=theta0)
            _, g_li = risk_value_and_grad(lin, theta_li, train_ds, risk)
            if epoch % record_every == 0 or epoch == cfg.stop.max_epochs - 1:
                out_nl = model_outputs(spec, theta_nl, test_ds.features)
                out_li = model_outputs(lin, theta_li, test_ds.features)
                series.append((
                    epoch,
                    float(np.linalg.norm(theta_nl - theta_li) / np.linalg.norm(theta_li)),
                    float(np.sqrt(np.mean((out_nl - out_li) ** 2))),
                    accuracy(out_nl, test_ds.targets),
                    accuracy(out_li, test_ds.targets),
                    float(np.linalg.norm(g_nl)),
                    float(np.linalg.norm(g_li)),
                ))
            theta_nl -= cfg.opt.lr * g_nl
            theta_li -= cfg.opt.lr * g_li
        arr = np.array(series)
        results[lam] = arr
        path = os.path.join(cfg.out_dir, f"sweep_lambda_{lam:g}.csv")
        with open(path, "w") as f:
            f.write(",".join(SWEEP_HEADER) + "\n")
            for row in series:
                f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return results


# --------------------------------------------------------------------------
# Infinite-width experiment
# --------------------------------------------------------------------------

INFINITE_OUT_HEADER = ["test_index", "output_dim", "est_output_change", "act_output_change"]
INFINITE_LOSS_HEADER = ["test_index", "est_loss_change_raw", "est_loss_change_reg",
                        "act_loss_change"]


def run_infinite_experiment(cfg: ExperimentConfig, percent: float | None = None):
    """Estimate-vs-actual table for the infinitely wide network."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    percent = cfg.percents[0] if percent is None else percent
    train_ds, test_ds = make_experiment_data(cfg)
    split = split_forget(train_ds, percent, scope=cfg.scope,
                         seed=_split_seed(cfg.seeds[0], percent))
    ntk_spec = AnalyticNtkSpec(hidden_layers=cfg.ntk_hidden_layers,
                               sigma_w2=cfg.ntk_sigma_w2, sigma_b2=cfg.ntk_sigma_b2,
                               d_out=train_ds.d_out)
    from .infinite import analytic_ntk
    write_kernel_cache(os.path.join(cfg.out_dir, "kernel.bin"),
                       analytic_ntk(ntk_spec, split.full.features))
    res = infinite_influence(ntk_spec, split, test_ds, cfg.risk, cfg.cg,
                             lr=cfg.ntk_lr, epochs=cfg.ntk_epochs, tol=cfg.ntk_tol,
                             dense_threshold=cfg.dense_threshold)
    with open(os.path.join(cfg.out_dir, "infinite_outputs.csv"), "w") as f:
        f.write(",".join(INFINITE_OUT_HEADER) + "\n")
        for t in range(test_ds.n):
            for k in range(train_ds.d_out):
                f.write(f"{t},{k},{float(res.est_output[t, k])!r},"
                        f"{float(res.act_output[t, k])!r}\n")
    with open(os.path.join(cfg.out_dir, "infinite_loss.csv"), "w") as f:
        f.write(",".join(INFINITE_LOSS_HEADER) + "\n")
        for t in range(test_ds.n):
            f.write(f"{t},{float(res.est_loss_raw[t])!r},{float(res.est_loss_reg[t])!r},"
                    f"{float(res.act_loss[t])!r}\n")
    append_diagnostics(os.path.join(cfg.out_dir, "diagnostics.jsonl"),
                       {"percent": percent, **res.diagnostics})
    return res


# --------------------------------------------------------------------------
# Train-only entry (checkpoint + history CSV)
# --------------------------------------------------------------------------

def run_training(cfg: ExperimentConfig):
    os.makedirs(cfg.out_dir, exist_ok=True)
    ctx = _build_seed_context(cfg, cfg.seeds[0])
    spec = ctx.model.spec if cfg.linearized else ctx.model
    save_params(os.path.join(cfg.out_dir, "theta_hat.bin"), spec, ctx.theta_hat)
    if cfg.trainer == "direct":
        gnorm = float(np.linalg.norm(risk_grad(ctx.model, ctx.theta_hat,
                                               ctx.train_ds, cfg.risk)))
        write_train_csv(os.path.join(cfg.out_dir, "train.csv"), [np.nan], [gnorm])
    else:
        rep = train(ctx.model, ctx.train_ds, cfg.risk, cfg.opt, cfg.stop,
                    theta0=ctx.theta_ref.copy())
        write_train_csv(os.path.join(cfg.out_dir, "train.csv"),
                        rep.loss_history, rep.grad_norm_history)
    return ctx
