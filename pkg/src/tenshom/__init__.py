"""tenshom: tensor-product neural correctors with separable quadrature for
elliptic multiscale homogenization, plus finite-element reference oracles."""

__version__ = "0.1.0"

from .quadrature import (  # noqa: F401
    CompositeGaussRule,
    DimTag,
    Interval1D,
    TensorGrid,
    build_gauss_rule,
    build_grid,
    integrate_1d,
)
from .separable import (  # noqa: F401
    Factor1D,
    FactorTable,
    SeparableFunction,
    combine,
    dense_eval_oracle,
    derivative,
    l2_inner,
    l2_norm,
    multiply,
    partial_integrate,
)
from .tnn import (  # noqa: F401
    DirichletMask,
    SubnetworkSpec,
    TnnModel,
    apply_dirichlet_mask,
    apply_mean_zero,
    eval_factor_tables,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sine_mask,
)
from .coeffs import (  # noqa: F401
    SampledCoefficient,
    TensorCoefficient,
    builtin,
    harmonic_homogenized_1d,
)
from .training import TrainConfig  # noqa: F401
from .homogenize import (  # noqa: F401
    CellProblem,
    CellSolution,
    assemble_cell_loss,
    compute_homogenized_coefficient,
    homogenize_recursive,
    train_cell,
)
from .macro_solver import (  # noqa: F401
    MacroProblem,
    MultiscaleSolution,
    assemble_macro_loss,
    gradient_field,
    reconstruct,
    train_macro,
)
from .config import PipelineConfig, config_from_dict, config_to_dict, load_config  # noqa: F401
from .pipeline import run_pipeline  # noqa: F401
