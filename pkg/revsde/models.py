"""
revsde 数据模型层。

该模块只定义"标准化的数据结构"，用于：
- 对外返回的判定结果与报告（CLI 直接序列化为 JSON）
- 事件总线事件载体（跨线程传递的数据必须是纯数据对象）

设计约束：
- 这里不 import 数值模块（避免循环依赖）
- 含 numpy 数组的结果类型放在各自模块里，用 frozen dataclass
"""

from __future__ import annotations

from enum import Enum
from typing import List
from typing import Optional

from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field


class MeasureMode(str, Enum):
    FLAT = "flat"
    RIEMANNIAN = "riemannian"


class DivergenceVariant(str, Enum):
    COVARIANT = "covariant"
    EUCLIDEAN = "euclidean"


class DerivativeMode(str, Enum):
    ANALYTIC = "analytic"
    FINITE_DIFFERENCE = "finite_difference"


class QuadratureRule(str, Enum):
    ADAPTIVE = "adaptive"
    SIMPSON = "simpson"


def variant_for(mode: MeasureMode) -> DivergenceVariant:
    """黎曼体积 Gibbs 测度配协变散度，平直测度配欧氏散度。"""

    return DivergenceVariant.COVARIANT if mode == MeasureMode.RIEMANNIAN else DivergenceVariant.EUCLIDEAN


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ReversibilityVerdict(_Record):
    max_residual: float = Field(ge=0.0)
    argmax_point: List[float]
    n_points: int
    tolerance: float
    reversible: bool
    variant: DivergenceVariant
    generator_gap_max: float = Field(ge=0.0)
    convention: float
    measure_mode: MeasureMode


class CheckReport(_Record):
    """cmd_check 的完整输出：匹配测度的判定 + 两种散度下的残差。"""

    verdict: ReversibilityVerdict
    covariant_max_residual: float
    covariant_argmax_point: List[float]
    euclidean_max_residual: float
    euclidean_argmax_point: List[float]


class BalanceReport(_Record):
    lag: float
    lag_steps: int
    bins: int
    max_flux_asymmetry: float = Field(ge=0.0)
    argmax_pair: List[int]
    occupancy_floor: int
    contributing_pairs: int
    n_transitions: int
    stderr_estimate: float
    null_level: float
    null_resamples: int
    degenerate: bool


class SimulationReport(_Record):
    n_traj: int
    rejected: int
    dt: float
    T: float
    seed: int
    burn_in: float
    degenerate_noise: bool
    ks_statistic: Optional[float] = None
    wasserstein1: Optional[float] = None
    balance: Optional[BalanceReport] = None


class AveragingSummary(_Record):
    n_points: int
    max_identity_residual: Optional[float] = None
    min_effective_sigma: Optional[float] = None
    mu_inf_mass: Optional[float] = None
    preservation_max_residual: Optional[float] = None
    preservation_passed: Optional[bool] = None
    min_effective_eigenvalue: Optional[float] = None


class StudyRow(_Record):
    timescale: float
    distance: float
    bootstrap_std: float
    n_samples: int


class StudyReport(_Record):
    rows: List[StudyRow]
    T: float
    dt: float
    seed: int
    bootstrap_resamples: int
    noise_floor: float
    monotone_within_error: bool


class BatchFinished(_Record):
    stage: str
    index: int
    total: int


class StageFinished(_Record):
    stage: str
    detail: str = ""
