"""
revsde 异常层级。

约定：
- 所有可预期的失败都抛 RevsdeError 子类，CLI 的 guard 据此映射退出码
- 用户输入类错误（表达式语法、定义域、配置）同时继承 ValueError
"""

from __future__ import annotations

from typing import Optional
from typing import Sequence


class RevsdeError(Exception):
    """revsde 所有异常的基类。"""


class RevsdeWarning(UserWarning):
    """不会中断计算的告警（步长过大、区域外质量等）。"""


class ExpressionSyntaxError(RevsdeError, ValueError):
    """表达式解析失败。

    Attributes:
        kind: syntax / unknown_identifier / variable_index / non_constant_exponent
        offset: 出错位置（UTF-8 字节偏移）
    """

    def __init__(self, message: str, *, offset: int, kind: str = "syntax") -> None:
        super().__init__(f"{message}（偏移 {offset}）")
        self.offset = int(offset)
        self.kind = kind


class FieldDomainError(RevsdeError, ValueError):
    """在定义域之外求值（log 非正数、sqrt 负数、除零、非有限结果）。"""

    def __init__(
        self,
        message: str,
        *,
        index: Optional[int] = None,
        point: Optional[Sequence[float]] = None,
    ) -> None:
        super().__init__(message)
        self.reason = message
        self.index = index
        self.point = None if point is None else tuple(float(v) for v in point)

    def at(self, point: Sequence[float]) -> "FieldDomainError":
        err = FieldDomainError(
            f"{self.reason}，位置 x={tuple(round(float(v), 12) for v in point)}",
            index=self.index,
            point=point,
        )
        err.reason = self.reason
        return err


class ConditioningError(RevsdeError):
    """σ(x) 奇异或 M(x) 不是正定矩阵。"""

    def __init__(self, message: str, *, point: Optional[Sequence[float]] = None) -> None:
        super().__init__(message)
        self.point = None if point is None else tuple(float(v) for v in point)


class QuadratureError(RevsdeError):
    """快变量截断搜索失败或积分未收敛。"""


class SimulationError(RevsdeError):
    """轨道被拒绝比例过高等模拟失败。"""


class StiffnessError(SimulationError):
    """快变量块刚性导致步长 dt 不可接受。"""


class DiagnosticsError(RevsdeError):
    """经验检验的输入不足（样本过少、所有箱对都低于占用下限等）。"""


class ConfigError(RevsdeError, ValueError):
    """配置文件解析或校验失败。"""


class FieldSpecError(RevsdeError, ValueError):
    """场的构造参数不合法（维度不匹配、U 不正交等）。"""
