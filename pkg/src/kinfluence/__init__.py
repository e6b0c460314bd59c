"""Influence-function unlearning in parameter space and in the dual kernel space."""

from .datasets import (
    LabeledDataset,
    SplitDataset,
    load_cifar_binary,
    load_idx,
    make_blobs,
    split_forget,
    subset_per_class,
    write_idx,
)
from .dual import (
    DualCoefficients,
    DualUnlearner,
    alpha_star,
    dual_hessian_block,
    dual_rhs,
    map_to_params,
    predict_changes_dual,
    solve_reduced,
    unlearn_dual,
)
from .infinite import (
    AnalyticNtkSpec,
    FunctionState,
    analytic_ntk,
    infinite_influence,
    infinite_predict,
    kgd_train,
)
from .kernels import (
    KernelMatrix,
    empirical_ntk,
    read_kernel_cache,
    sharded_matvec,
    write_kernel_cache,
)
from .losses import (
    CROSS_ENTROPY,
    SQUARED,
    loss_grad_out,
    loss_hess_out,
    loss_value,
)
from .models import (
    LinearizedModel,
    ModelSpec,
    batch_forward,
    forward,
    jacobian,
    jvp,
    linear_forward,
    load_params,
    save_params,
    stacked_jacobian,
    vjp,
)
from .primal import (
    PrimalUnlearner,
    influence_params_primal,
    predict_loss_change_primal,
    predict_output_change_primal,
    upweighted_hessian_op,
)
from .report import InfluenceReport, MetricsRow
from .solvers import CgOptions, CgResult, cg_solve
from .training import (
    Optimizer,
    RiskConfig,
    StopRule,
    TrainReport,
    fit_linearized_exact,
    risk_grad,
    risk_hvp,
    risk_value,
    train,
)

__version__ = "0.1.0"
