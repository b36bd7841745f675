"""
revsde 对外入口。

建议只 import 这里的符号：

    from revsde import Event, catalog, classify, GibbsSpec, GridSpec, MeasureMode

    fields = catalog.f1()
    verdict = classify(fields, 1.0, GibbsSpec(MeasureMode.FLAT, fields), GridSpec((-3,), (3,), 200))

    @Event.on(Event.StageFinished)
    def on_stage(e):
        ...
"""

from __future__ import annotations

__version__ = "0.1.0"

from dataclasses import dataclass

from . import catalog
from .averaging import AveragingResult
from .averaging import EffectiveDynamics
from .averaging import QuadratureSpec
from .averaging import average_on_grid
from .averaging import dirichlet_isometry_gap
from .averaging import effective_diffusion_matrix
from .averaging import effective_drift
from .averaging import effective_sigma
from .averaging import klimontovich_identity_residual
from .averaging import marginal_partition
from .averaging import matrix_average_sigma
from .config import RunConfig
from .config import load_config
from .core import RuntimeCore
from .core import thread_scope
from .diagnostics import EmpiricalDensity
from .diagnostics import TabulatedDensity
from .diagnostics import averaging_convergence_study
from .diagnostics import detailed_balance_test
from .diagnostics import gibbs_density
from .diagnostics import ks_distance
from .diagnostics import wasserstein1
from .errors import ConditioningError
from .errors import ConfigError
from .errors import DiagnosticsError
from .errors import ExpressionSyntaxError
from .errors import FieldDomainError
from .errors import FieldSpecError
from .errors import QuadratureError
from .errors import RevsdeError
from .errors import RevsdeWarning
from .errors import SimulationError
from .errors import StiffnessError
from .exprfield import FieldSet
from .exprfield import RotatedDiagonalSpec
from .exprfield import assemble_rotated_diagonal
from .exprfield import eval_with_derivatives
from .exprfield import make_fieldset
from .exprfield import parse_expression
from .geometry import cancellation_gap
from .geometry import geometry_at
from .geometry import graham_correction
from .geometry import laplace_beltrami_drift
from .geometry import row_cov_div_matrix
from .geometry import row_euclid_div_matrix
from .models import BatchFinished
from .models import DerivativeMode
from .models import DivergenceVariant
from .models import MeasureMode
from .models import ReversibilityVerdict
from .models import StageFinished
from .reversibility import GibbsSpec
from .reversibility import GridSpec
from .reversibility import NoiseConvention
from .reversibility import classify
from .reversibility import drift_convert
from .reversibility import generator_gap
from .reversibility import lambda_residual
from .reversibility import reversible_generator_drift
from .reversibility import sde_generator_drift
from .sde import SdeSystem
from .sde import SlowFastSystem
from .sde import assemble_slow_fast
from .sde import euler_maruyama
from .sde import simulate_ensemble
from .sde import to_ito


core = RuntimeCore()


@dataclass(frozen=True)
class _EventNamespace:
    """Event.BatchFinished / Event.StageFinished 这样的命名空间。"""

    BatchFinished = BatchFinished
    StageFinished = StageFinished

    def on(self, event_type, *, background: bool = False):
        return core.events.on(event_type, background=background)

    def subscribe(self, fn=None, *, event_type=None, background: bool = False, priority: int = 0):
        return core.events.subscribe(
            fn,
            event_type=event_type,
            background=background,
            priority=priority,
        )


Event = _EventNamespace()

__all__ = [
    "__version__",
    "AveragingResult",
    "BatchFinished",
    "ConditioningError",
    "ConfigError",
    "DerivativeMode",
    "DiagnosticsError",
    "DivergenceVariant",
    "EffectiveDynamics",
    "EmpiricalDensity",
    "Event",
    "ExpressionSyntaxError",
    "FieldDomainError",
    "FieldSet",
    "FieldSpecError",
    "GibbsSpec",
    "GridSpec",
    "MeasureMode",
    "NoiseConvention",
    "QuadratureError",
    "QuadratureSpec",
    "ReversibilityVerdict",
    "RevsdeError",
    "RevsdeWarning",
    "RotatedDiagonalSpec",
    "RunConfig",
    "RuntimeCore",
    "SdeSystem",
    "SimulationError",
    "SlowFastSystem",
    "StageFinished",
    "StiffnessError",
    "TabulatedDensity",
    "assemble_rotated_diagonal",
    "assemble_slow_fast",
    "average_on_grid",
    "averaging_convergence_study",
    "cancellation_gap",
    "catalog",
    "classify",
    "core",
    "detailed_balance_test",
    "dirichlet_isometry_gap",
    "drift_convert",
    "effective_diffusion_matrix",
    "effective_drift",
    "effective_sigma",
    "euler_maruyama",
    "eval_with_derivatives",
    "generator_gap",
    "geometry_at",
    "gibbs_density",
    "graham_correction",
    "klimontovich_identity_residual",
    "ks_distance",
    "lambda_residual",
    "laplace_beltrami_drift",
    "load_config",
    "make_fieldset",
    "marginal_partition",
    "matrix_average_sigma",
    "parse_expression",
    "reversible_generator_drift",
    "row_cov_div_matrix",
    "row_euclid_div_matrix",
    "sde_generator_drift",
    "simulate_ensemble",
    "thread_scope",
    "to_ito",
    "wasserstein1",
]
