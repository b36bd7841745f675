"""
运行配置（revsde.config）。

配置是一个 JSON 文档，由 RunConfig 校验：
- 未知键一律拒绝（extra="forbid"），避免 λ、容差等键名拼错后被静默忽略
- JSON 语法错误报告行号/列号，字段错误报告点分路径
- resolved() 把默认值全部展开，CLI 原样写进 manifest.json

build_* 函数把配置块翻译成数值模块的对象；表达式错误在这里以 ExpressionSyntaxError 抛出。
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any
from typing import Dict
from typing import List
from typing import Literal
from typing import Optional
from typing import Tuple
from typing import Union

import numpy as np
from pydantic import BaseModel
from pydantic import ConfigDict
from pydantic import Field
from pydantic import ValidationError
from pydantic import model_validator

from .averaging import QuadratureSpec
from .errors import ConfigError
from .exprfield import FieldSet
from .exprfield import MatrixField
from .exprfield import RotatedDiagonalSpec
from .exprfield import assemble_rotated_diagonal
from .exprfield import diagonal_from_sources
from .exprfield import matrix_from_sources
from .exprfield import parse_expression
from .models import DerivativeMode
from .models import MeasureMode
from .models import QuadratureRule
from .reversibility import GibbsSpec
from .reversibility import GridSpec
from .sde import ExpressionDrift
from .sde import SdeSystem
from .sde import SlowFastSystem
from .sde import gibbs_system


logger = logging.getLogger(__name__)


class _Block(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class RotatedDiagonalConfig(_Block):
    U: List[List[float]]
    diagonal: List[str] = Field(min_length=1)


class VolatilityConfig(_Block):
    """三选一：entries（逐分量）、diagonal（对角）、rotated_diagonal（U Λ Uᵀ）。"""

    entries: Optional[List[List[str]]] = None
    diagonal: Optional[List[str]] = None
    rotated_diagonal: Optional[RotatedDiagonalConfig] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "VolatilityConfig":
        given = [k for k in ("entries", "diagonal", "rotated_diagonal") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"entries / diagonal / rotated_diagonal 必须恰好给一个，实际为 {given or '无'}")
        return self


class ProblemConfig(_Block):
    dimension: int = Field(ge=1)
    potential: str
    volatility: VolatilityConfig
    drift: Optional[List[str]] = None
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    fd_step: Optional[float] = Field(default=None, gt=0.0)


class GibbsConfig(_Block):
    measure_mode: MeasureMode = MeasureMode.FLAT
    beta: float = Field(default=1.0, gt=0.0)


class GridConfig(_Block):
    lower: List[float] = Field(min_length=1)
    upper: List[float] = Field(min_length=1)
    resolution: int = Field(default=101, ge=1)

    @model_validator(mode="after")
    def _ordered(self) -> "GridConfig":
        if len(self.lower) != len(self.upper):
            raise ValueError("lower 与 upper 的长度不一致")
        if any(a >= b for a, b in zip(self.lower, self.upper)):
            raise ValueError("lower 必须逐分量严格小于 upper")
        return self


class BalanceConfig(_Block):
    bins: int = Field(default=20, ge=1)
    lag: float = Field(default=0.1, gt=0.0)
    floor: int = Field(default=50, ge=1)
    lower: Optional[List[float]] = None
    upper: Optional[List[float]] = None
    null_resamples: int = Field(default=200, ge=1)


class SimulationConfig(_Block):
    dt: float = Field(gt=0.0)
    T: float = Field(gt=0.0)
    n_traj: int = Field(ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    save_stride: int = Field(default=1, ge=1)
    x0: Optional[List[float]] = None
    method: Literal["euler", "heun"] = "euler"
    burn_in: Optional[float] = Field(default=None, ge=0.0)
    density_resolution: int = Field(default=2001, ge=3)
    balance: Optional[BalanceConfig] = None


class SlowFastConfig(_Block):
    """慢-快系统：所有表达式定义在联合变量 x1..x(d+m) 上（d+m ≤ 2 时可用 x, y）。"""

    slow_dimension: int = Field(default=1, ge=1)
    fast_dimension: int = Field(default=1, ge=1)
    potential: str
    sigma_slow: VolatilityConfig
    sigma_fast: VolatilityConfig
    timescale: float = Field(default=1.0, ge=1.0)
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    fd_step: Optional[float] = Field(default=None, gt=0.0)


class AveragingConfig(_Block):
    slow_grid: GridConfig
    rule: QuadratureRule = QuadratureRule.ADAPTIVE
    panels: int = Field(default=400, ge=2)
    abs_tol: float = Field(default=1e-10, gt=0.0)
    rel_tol: float = Field(default=1e-8, gt=0.0)
    eps_cut: float = Field(default=1e-12, gt=0.0, lt=1.0)
    initial_width: float = Field(default=1.0, gt=0.0)
    max_doublings: int = Field(default=40, ge=1)
    preservation_tolerance: float = Field(default=1e-6, gt=0.0)
    identity_tolerance: float = Field(default=1e-6, gt=0.0)


class StudyConfig(_Block):
    n_list: List[float] = Field(min_length=1)
    T: float = Field(gt=0.0)
    dt: float = Field(gt=0.0)
    n_traj: int = Field(ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    x0: List[float]
    bootstrap: int = Field(default=200, ge=2)


class OutputConfig(_Block):
    directory: str = "revsde-out"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class RunConfig(_Block):
    problem: Optional[ProblemConfig] = None
    convention: float = Field(default=1.0, ge=0.0, le=1.0)
    gibbs: GibbsConfig = Field(default_factory=GibbsConfig)
    grid: Optional[GridConfig] = None
    tolerance: Optional[float] = Field(default=None, gt=0.0)
    simulation: Optional[SimulationConfig] = None
    slow_fast: Optional[SlowFastConfig] = None
    averaging: Optional[AveragingConfig] = None
    study: Optional[StudyConfig] = None
    outputs: OutputConfig = Field(default_factory=OutputConfig)

    def resolved(self) -> Dict[str, Any]:
        """默认值全部展开后的配置字典。"""

        return self.model_dump(mode="json")

    def require(self, *blocks: str) -> None:
        missing = [b for b in blocks if getattr(self, b) is None]
        if missing:
            raise ConfigError(f"该命令需要配置块：{', '.join(missing)}")


def _format_validation(err: ValidationError) -> str:
    lines = []
    for item in err.errors():
        loc = ".".join(str(p) for p in item.get("loc", ())) or "<root>"
        lines.append(f"{loc}: {item.get('msg', '')}")
    return "; ".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: JSON 语法错误：{e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: 顶层必须是 JSON 对象")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_format_validation(e)}") from e


def load_config(path: Union[str, Path]) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"无法读取配置文件 {p}：{e}") from e
    cfg = parse_config(text, str(p))
    logger.info("已加载配置 %s", p)
    return cfg


# ---------------------------------------------------------------------------
# 构造
# ---------------------------------------------------------------------------


def build_rotated_spec(rc: RotatedDiagonalConfig, d: int) -> RotatedDiagonalSpec:
    return RotatedDiagonalSpec(np.asarray(rc.U, dtype=float), tuple(parse_expression(s, d) for s in rc.diagonal))


def build_volatility(vc: VolatilityConfig, d: int) -> MatrixField:
    """d 是表达式的变量个数；矩阵的行列数由配置本身决定。"""

    if vc.entries is not None:
        return matrix_from_sources(vc.entries, d)
    if vc.diagonal is not None:
        return diagonal_from_sources(vc.diagonal, d)
    return assemble_rotated_diagonal(build_rotated_spec(vc.rotated_diagonal, d))


def build_fields(problem: ProblemConfig) -> FieldSet:
    d = problem.dimension
    return FieldSet(
        d,
        parse_expression(problem.potential, d),
        build_volatility(problem.volatility, d),
        problem.derivative_mode,
        problem.fd_step,
    )


def build_gibbs(cfg: RunConfig, fields: FieldSet) -> GibbsSpec:
    return GibbsSpec(cfg.gibbs.measure_mode, fields, cfg.gibbs.beta)


def build_grid(gc: GridConfig) -> GridSpec:
    return GridSpec(tuple(gc.lower), tuple(gc.upper), gc.resolution)


def build_quadrature(ac: AveragingConfig) -> QuadratureSpec:
    return QuadratureSpec(
        rule=ac.rule,
        panels=ac.panels,
        abs_tol=ac.abs_tol,
        rel_tol=ac.rel_tol,
        eps_cut=ac.eps_cut,
        initial_width=ac.initial_width,
        max_doublings=ac.max_doublings,
    )


def build_slow_fast(sfc: SlowFastConfig) -> Tuple[SlowFastSystem, Optional[RotatedDiagonalSpec]]:
    """返回慢-快系统；σ1 为 rotated_diagonal 时一并返回其规格供保持性检查。"""

    joint = sfc.slow_dimension + sfc.fast_dimension
    rotated = None
    if sfc.sigma_slow.rotated_diagonal is not None:
        rotated = build_rotated_spec(sfc.sigma_slow.rotated_diagonal, joint)
        sigma_slow: MatrixField = assemble_rotated_diagonal(rotated)
    else:
        sigma_slow = build_volatility(sfc.sigma_slow, joint)
    sf = SlowFastSystem(
        sfc.slow_dimension,
        sfc.fast_dimension,
        parse_expression(sfc.potential, joint),
        sigma_slow,
        build_volatility(sfc.sigma_fast, joint),
        sfc.timescale,
        sfc.derivative_mode,
        sfc.fd_step,
    )
    return sf, rotated


def build_simulation_system(cfg: RunConfig, fields: FieldSet) -> SdeSystem:
    """problem.drift 给出时用显式漂移，否则用闭式 Gibbs 漂移 −βσσᵀ∇V。"""

    problem = cfg.problem
    if problem is None or problem.drift is None:
        return gibbs_system(fields, cfg.convention, cfg.gibbs.beta)
    d = problem.dimension
    if len(problem.drift) != d:
        raise ConfigError(f"problem.drift 需要 {d} 个分量，实际 {len(problem.drift)}")
    drift = ExpressionDrift(tuple(parse_expression(s, d) for s in problem.drift))
    return SdeSystem(d, drift, fields.volatility, cfg.convention, fields.derivative_mode, fields.fd_step)
