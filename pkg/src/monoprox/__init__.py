"""Stochastic proximal-point methods for finite-sum monotone inclusions.

Find ``x*`` with ``0 in A(x*)`` where ``A = sum_i w_i A_i`` using SPPM and its
variance-reduced variants SPPM-OC, L-SVRP and Point-SAGA.
"""

from .algorithms import (
    Algorithm,
    RunConfig,
    Trace,
    lsvrp_step,
    point_saga_step,
    run,
    sppm_oc_step,
    sppm_step,
)
from .operators import (
    AffineOperator,
    OperatorEnsemble,
    PiecewiseScalarOperator,
    ShiftedScalingOperator,
    resolvent,
)
from .problems import SaddleSpec, build_tightness_instance, build_two_piece_example, generate_saddle_instance

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "RunConfig",
    "Trace",
    "run",
    "sppm_step",
    "sppm_oc_step",
    "lsvrp_step",
    "point_saga_step",
    "AffineOperator",
    "OperatorEnsemble",
    "PiecewiseScalarOperator",
    "ShiftedScalingOperator",
    "resolvent",
    "SaddleSpec",
    "generate_saddle_instance",
    "build_two_piece_example",
    "build_tightness_instance",
]
