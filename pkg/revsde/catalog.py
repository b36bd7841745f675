"""
内置测试场（revsde.catalog）。

单系统场（FieldSet）：
- F1  一维，V = x²/2，σ = 2 + sin x
- F2  二维对角，V = (x² + y²)/2，σ = diag(2 + sin x, 1)
- F3  二维耦合高斯，V = (x² + y² + xy)/2，σ = I
- F4  二维旋转对角，U = rot(π/4)，Λ = (2 + sin x, 1.5 + ½cos y)
- F5  二维随位置旋转，σ = R(x) diag(2, 1) R(x)ᵀ（逐分量给出）
- F6  二维多项式-三角混合的下三角 σ

慢-快系统（SlowFastSystem）：
- SF2 σ1 = 2 + sin x，σ2 = 1，V = (x² + y²)/2
- SF3 σ1 = σ2 = 1，V = (x² + y² + xy)/2
- 旋转对角 σ1 的两个规格：二维慢变量 + 一个快变量，三维慢变量 + 一个快变量
"""

from __future__ import annotations

import math
from typing import Callable
from typing import Dict

import numpy as np

from .exprfield import FieldSet
from .exprfield import RotatedDiagonalSpec
from .exprfield import assemble_rotated_diagonal
from .exprfield import diagonal_from_sources
from .exprfield import make_fieldset
from .exprfield import matrix_from_sources
from .exprfield import parse_expression
from .models import DerivativeMode
from .sde import SlowFastSystem


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def orthogonal_3d() -> np.ndarray:
    """固定的三维正交矩阵：绕 z、x 两次旋转的乘积。"""

    a, b = 0.4, -1.1
    rz = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(b), -math.sin(b)], [0.0, math.sin(b), math.cos(b)]])
    return rz @ rx


def f1(mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    return make_fieldset("x^2/2", matrix_from_sources([["2+sin(x)"]], 1), derivative_mode=mode)


def f2(mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    return make_fieldset("(x^2+y^2)/2", diagonal_from_sources(["2+sin(x)", "1"], 2), derivative_mode=mode)


def f3(mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    return make_fieldset("(x^2+y^2+x*y)/2", diagonal_from_sources(["1", "1"], 2), derivative_mode=mode)


def f4_spec() -> RotatedDiagonalSpec:
    return RotatedDiagonalSpec(
        rotation(math.pi / 4),
        (parse_expression("2+sin(x)", 2), parse_expression("1.5+0.5*cos(y)", 2)),
    )


def f4(mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    return make_fieldset("(x^2+y^2)/2", assemble_rotated_diagonal(f4_spec()), derivative_mode=mode)


def f5(mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    entries = [
        ["2*cos(x)^2+sin(x)^2", "cos(x)*sin(x)"],
        ["cos(x)*sin(x)", "2*sin(x)^2+cos(x)^2"],
    ]
    return make_fieldset("(x^2+y^2)/2", matrix_from_sources(entries, 2), derivative_mode=mode)


def f6(mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    entries = [
        ["1.5+0.5*sin(x+0.3*y)", "0"],
        ["0.25*sin(x)*cos(y)", "1.2+0.4*cos(0.7*x-y)"],
    ]
    return make_fieldset(
        "0.5*x^2+0.5*y^2+0.1*x^4+0.2*x*y", matrix_from_sources(entries, 2), derivative_mode=mode
    )


FIELDS: Dict[str, Callable[..., FieldSet]] = {
    "F1": f1,
    "F2": f2,
    "F3": f3,
    "F4": f4,
    "F5": f5,
    "F6": f6,
}


def field(name: str, mode: DerivativeMode = DerivativeMode.ANALYTIC) -> FieldSet:
    try:
        factory = FIELDS[name.upper()]
    except KeyError:
        raise KeyError(f"未知的内置场 {name!r}，可选：{', '.join(FIELDS)}") from None
    return factory(mode)


# ---------------------------------------------------------------------------
# 慢-快系统
# ---------------------------------------------------------------------------


def sf2(timescale: float = 1.0) -> SlowFastSystem:
    return SlowFastSystem(
        1,
        1,
        parse_expression("(x^2+y^2)/2", 2),
        matrix_from_sources([["2+sin(x)"]], 2),
        matrix_from_sources([["1"]], 2),
        timescale,
    )


def sf3(timescale: float = 1.0) -> SlowFastSystem:
    return SlowFastSystem(
        1,
        1,
        parse_expression("(x^2+y^2+x*y)/2", 2),
        matrix_from_sources([["1"]], 2),
        matrix_from_sources([["1"]], 2),
        timescale,
    )


def sf_decoupled(timescale: float = 1.0) -> SlowFastSystem:
    """慢变量与 y 无关：σ1 = 1，V 可分离，平均化在每个 n 下都精确。"""

    return SlowFastSystem(
        1,
        1,
        parse_expression("(x^2+y^2)/2", 2),
        matrix_from_sources([["1"]], 2),
        matrix_from_sources([["1"]], 2),
        timescale,
    )


def rotated_spec_2d() -> RotatedDiagonalSpec:
    """慢变量 (x1, x2)、快变量 x3 上的 U = rot(π/4) 规格。"""

    return RotatedDiagonalSpec(
        rotation(math.pi / 4),
        (
            parse_expression("2+sin(x1)+0.3*cos(x3)", 3),
            parse_expression("1+0.5*x3^2+0.2*sin(x2)", 3),
        ),
    )


def rotated_potential_2d():
    return parse_expression("(x1^2+x2^2+x3^2)/2+0.3*x1*x3", 3)


def rotated_spec_3d() -> RotatedDiagonalSpec:
    """慢变量 (x1, x2, x3)、快变量 x4 上的固定三维正交 U。"""

    return RotatedDiagonalSpec(
        orthogonal_3d(),
        (
            parse_expression("1.5+0.5*sin(x1+x4)", 4),
            parse_expression("2+0.5*cos(x2)*cos(x4)", 4),
            parse_expression("1+0.25*x4^2", 4),
        ),
    )


def rotated_potential_3d():
    return parse_expression("(x1^2+x2^2+x3^2+x4^2)/2+0.2*x2*x4", 4)


def rotated_slow_fast(spec: RotatedDiagonalSpec, potential, timescale: float = 1.0) -> SlowFastSystem:
    d = len(spec.diagonal)
    joint = spec.dimension
    return SlowFastSystem(
        d,
        joint - d,
        potential,
        assemble_rotated_diagonal(spec),
        diagonal_from_sources(["1"] * (joint - d), joint),
        timescale,
    )
