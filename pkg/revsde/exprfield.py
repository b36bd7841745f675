"""
表达式场（revsde.exprfield）。

职责：
- 解析一个小型算术表达式语言（V 和 σ 的各个分量都用它书写）
- 用二阶前向模式对偶数（Jet）求精确的值/梯度/Hessian，全部带批量维
- 提供中心差分版本作为对照（derivative_mode = finite_difference）
- 把标量表达式组装成矩阵场：逐分量矩阵、U Λ(x) Uᵀ 旋转对角、转置、σσᵀ、分块对角

语法（EBNF）：
    expr     := term (('+'|'-') term)*
    term     := unary (('*'|'/') unary)*
    unary    := '-' unary | power
    power    := atom ('^' exponent)?
    exponent := ['-'] atom              # 必须是常数
    atom     := number | ident | ident '(' expr ')' | '(' expr ')'

变量写作 x1..xd（d ≤ 2 时也可以用 x, y），常数 pi。
所有 AST 与 FieldSet 构造后不可变，可以跨线程共享求值。
"""

from __future__ import annotations

import math
import re
from abc import ABC
from abc import abstractmethod
from dataclasses import dataclass
from dataclasses import field
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple

import numpy as np

from .errors import ConditioningError
from .errors import ExpressionSyntaxError
from .errors import FieldDomainError
from .errors import FieldSpecError
from .models import DerivativeMode


FUNCTIONS = ("sin", "cos", "exp", "log", "tanh", "sqrt", "abs")
CONSTANTS = {"pi": math.pi}

DET_FLOOR = 1e-12
EIG_FLOOR = 1e-10
ORTHO_TOL = 1e-12
FD_REL_STEP = 1e-5
FD_HESS_REL_STEP = 1e-4


def as_points(x, dimension: int) -> Tuple[np.ndarray, bool]:
    """把单点 (d,) 或批量 (N, d) 统一成 (N, d)，并返回是否为单点。"""

    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    single = arr.ndim == 1
    pts = arr.reshape(1, -1) if single else arr
    if pts.ndim != 2 or pts.shape[1] != dimension:
        raise FieldSpecError(f"点的形状 {arr.shape} 与维度 {dimension} 不匹配")
    return pts, single


def _domain_check(bad: np.ndarray, message: str) -> None:
    if np.any(bad):
        raise FieldDomainError(message, index=int(np.flatnonzero(bad)[0]))


# ---------------------------------------------------------------------------
# 二阶对偶数
# ---------------------------------------------------------------------------


class Jet:
    """二阶前向模式对偶数：val (N,)，grad (N, d)，hess (N, d, d)。

    order 0 时 grad/hess 为 None，order 1 时 hess 为 None。
    """

    __slots__ = ("val", "grad", "hess")

    def __init__(self, val: np.ndarray, grad: Optional[np.ndarray] = None, hess: Optional[np.ndarray] = None) -> None:
        self.val = val
        self.grad = grad
        self.hess = hess

    @property
    def order(self) -> int:
        if self.grad is None:
            return 0
        return 1 if self.hess is None else 2

    @classmethod
    def constant(cls, c: float, n: int, d: int, order: int) -> "Jet":
        return cls(
            np.full(n, float(c)),
            np.zeros((n, d)) if order >= 1 else None,
            np.zeros((n, d, d)) if order >= 2 else None,
        )

    @classmethod
    def variable(cls, values: np.ndarray, index: int, d: int, order: int) -> "Jet":
        n = values.shape[0]
        grad = None
        if order >= 1:
            grad = np.zeros((n, d))
            grad[:, index] = 1.0
        return cls(np.array(values, dtype=float), grad, np.zeros((n, d, d)) if order >= 2 else None)

    def _chain(
        self,
        f: np.ndarray,
        d1: Callable[[], np.ndarray],
        d2: Callable[[], np.ndarray],
    ) -> "Jet":
        if self.grad is None:
            return Jet(f)
        f1 = d1()
        grad = f1[:, None] * self.grad
        if self.hess is None:
            return Jet(f, grad)
        g = self.grad
        hess = f1[:, None, None] * self.hess + d2()[:, None, None] * (g[:, :, None] * g[:, None, :])
        return Jet(f, grad, hess)

    def __add__(self, other: "Jet") -> "Jet":
        return Jet(
            self.val + other.val,
            None if self.grad is None else self.grad + other.grad,
            None if self.hess is None else self.hess + other.hess,
        )

    def __sub__(self, other: "Jet") -> "Jet":
        return Jet(
            self.val - other.val,
            None if self.grad is None else self.grad - other.grad,
            None if self.hess is None else self.hess - other.hess,
        )

    def __neg__(self) -> "Jet":
        return Jet(
            -self.val,
            None if self.grad is None else -self.grad,
            None if self.hess is None else -self.hess,
        )

    def __mul__(self, other: "Jet") -> "Jet":
        u, v = self.val, other.val
        if self.grad is None:
            return Jet(u * v)
        gu, gv = self.grad, other.grad
        grad = u[:, None] * gv + v[:, None] * gu
        if self.hess is None:
            return Jet(u * v, grad)
        cross = gu[:, :, None] * gv[:, None, :] + gv[:, :, None] * gu[:, None, :]
        hess = u[:, None, None] * other.hess + v[:, None, None] * self.hess + cross
        return Jet(u * v, grad, hess)

    def reciprocal(self) -> "Jet":
        v = self.val
        _domain_check(v == 0.0, "除以零")
        inv = 1.0 / v
        return self._chain(inv, lambda: -inv * inv, lambda: 2.0 * inv * inv * inv)

    def __truediv__(self, other: "Jet") -> "Jet":
        return self * other.reciprocal()

    def power(self, p: float) -> "Jet":
        u = self.val
        if p == 0.0:
            return Jet.constant(1.0, u.shape[0], self._dim(), self.order)
        if p == 1.0:
            return self
        integral = float(p).is_integer()
        if not integral:
            _domain_check(u < 0.0, f"负数的非整数次幂 ^{p}")
        if p < 0.0 or (not integral and p < 2.0 and self.order >= 1):
            _domain_check(u == 0.0, f"零的 ^{p} 不可微")
        f = np.power(u, p)
        return self._chain(
            f,
            lambda: p * np.power(u, p - 1.0),
            lambda: p * (p - 1.0) * np.power(u, p - 2.0),
        )

    def _dim(self) -> int:
        return 0 if self.grad is None else self.grad.shape[1]

    def apply(self, func: str) -> "Jet":
        u = self.val
        if func == "sin":
            s, c = np.sin(u), np.cos(u)
            return self._chain(s, lambda: c, lambda: -s)
        if func == "cos":
            s, c = np.sin(u), np.cos(u)
            return self._chain(c, lambda: -s, lambda: -c)
        if func == "exp":
            e = np.exp(u)
            return self._chain(e, lambda: e, lambda: e)
        if func == "log":
            _domain_check(u <= 0.0, "log 的参数必须为正")
            return self._chain(np.log(u), lambda: 1.0 / u, lambda: -1.0 / (u * u))
        if func == "tanh":
            t = np.tanh(u)
            return self._chain(t, lambda: 1.0 - t * t, lambda: -2.0 * t * (1.0 - t * t))
        if func == "sqrt":
            _domain_check(u < 0.0, "sqrt 的参数为负")
            if self.order >= 1:
                _domain_check(u == 0.0, "sqrt 在 0 处不可微")
            r = np.sqrt(u)
            return self._chain(r, lambda: 0.5 / r, lambda: -0.25 / (r * u))
        if func == "abs":
            return self._chain(np.abs(u), lambda: np.sign(u), lambda: np.zeros_like(u))
        raise FieldDomainError(f"未知函数 {func}")


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


class _Env:
    __slots__ = ("points", "order", "n", "d")

    def __init__(self, points: np.ndarray, order: int) -> None:
        self.points = points
        self.order = order
        self.n, self.d = points.shape


class Node(ABC):
    @abstractmethod
    def jet(self, env: _Env) -> Jet: ...

    @abstractmethod
    def to_source(self) -> str: ...

    @abstractmethod
    def variables(self) -> Set[int]: ...


@dataclass(frozen=True)
class Const(Node):
    value: float

    def jet(self, env: _Env) -> Jet:
        return Jet.constant(self.value, env.n, env.d, env.order)

    def to_source(self) -> str:
        return repr(float(self.value))

    def variables(self) -> Set[int]:
        return set()


@dataclass(frozen=True)
class Var(Node):
    index: int

    def jet(self, env: _Env) -> Jet:
        return Jet.variable(env.points[:, self.index], self.index, env.d, env.order)

    def to_source(self) -> str:
        return f"x{self.index + 1}"

    def variables(self) -> Set[int]:
        return {self.index}


@dataclass(frozen=True)
class Neg(Node):
    operand: Node

    def jet(self, env: _Env) -> Jet:
        return -self.operand.jet(env)

    def to_source(self) -> str:
        return f"(-{self.operand.to_source()})"

    def variables(self) -> Set[int]:
        return self.operand.variables()


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node

    def jet(self, env: _Env) -> Jet:
        a = self.left.jet(env)
        b = self.right.jet(env)
        if self.op == "+":
            return a + b
        if self.op == "-":
            return a - b
        if self.op == "*":
            return a * b
        return a / b

    def to_source(self) -> str:
        return f"({self.left.to_source()} {self.op} {self.right.to_source()})"

    def variables(self) -> Set[int]:
        return self.left.variables() | self.right.variables()


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: float

    def jet(self, env: _Env) -> Jet:
        return self.base.jet(env).power(self.exponent)

    def to_source(self) -> str:
        return f"({self.base.to_source()})^({float(self.exponent)!r})"

    def variables(self) -> Set[int]:
        return self.base.variables()


@dataclass(frozen=True)
class Call(Node):
    func: str
    arg: Node

    def jet(self, env: _Env) -> Jet:
        return self.arg.jet(env).apply(self.func)

    def to_source(self) -> str:
        return f"{self.func}({self.arg.to_source()})"

    def variables(self) -> Set[int]:
        return self.arg.variables()


@dataclass(frozen=True)
class Expression:
    """解析后的标量表达式（ExpressionAST）：根节点 + 变量维数 d。"""

    root: Node
    dimension: int
    source: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        bad = [i for i in self.root.variables() if i >= self.dimension or i < 0]
        if bad:
            raise FieldSpecError(f"变量下标 {bad} 超出维度 {self.dimension}")

    def jet(self, points, order: int = 2) -> Jet:
        pts, _ = as_points(points, self.dimension)
        env = _Env(pts, order)
        try:
            with np.errstate(all="ignore"):
                out = self.root.jet(env)
                bad = ~np.isfinite(out.val)
                if out.grad is not None:
                    bad |= ~np.all(np.isfinite(out.grad), axis=1)
                if out.hess is not None:
                    bad |= ~np.all(np.isfinite(out.hess), axis=(1, 2))
            _domain_check(bad, "求值结果不是有限实数")
        except FieldDomainError as e:
            if e.index is not None and e.point is None:
                raise e.at(pts[e.index]) from None
            raise
        return out

    def value(self, x) -> float:
        return float(self.jet(x, order=0).val[0])

    def to_source(self) -> str:
        return self.root.to_source()

    def is_constant(self) -> bool:
        return not self.root.variables()


# ---------------------------------------------------------------------------
# 解析器
# ---------------------------------------------------------------------------


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^()−])
    """,
    re.VERBOSE,
)
_VAR_RE = re.compile(r"x(\d+)")


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


class _Parser:
    def __init__(self, src: str, dimension: int) -> None:
        self.src = src
        self.dimension = dimension
        self.tokens = self._tokenize(src)
        self.i = 0

    def offset(self, pos: int) -> int:
        return len(self.src[:pos].encode("utf-8"))

    def error(self, message: str, pos: int, kind: str = "syntax") -> ExpressionSyntaxError:
        return ExpressionSyntaxError(message, offset=self.offset(pos), kind=kind)

    def _tokenize(self, src: str) -> List[_Token]:
        out: List[_Token] = []
        pos = 0
        while pos < len(src):
            m = _TOKEN_RE.match(src, pos)
            if m is None:
                raise self.error(f"无法识别的字符 {src[pos]!r}", pos)
            kind = m.lastgroup or ""
            text = m.group()
            if kind == "op" and text == "−":
                text = "-"
            if kind != "ws":
                out.append(_Token(kind, text, pos))
            pos = m.end()
        out.append(_Token("eof", "", len(src)))
        return out

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> None:
        if not self.accept(text):
            raise self.error(f"期望 {text!r}，实际为 {self._describe(self.tok)}", self.tok.pos)

    @staticmethod
    def _describe(tok: _Token) -> str:
        return "输入结尾" if tok.kind == "eof" else repr(tok.text)

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "eof":
            raise self.error(f"多余的输入 {self._describe(self.tok)}", self.tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.accept("-"):
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.accept("^"):
            start = self.tok.pos
            negative = self.accept("-")
            exp_node = self.atom()
            if exp_node.variables():
                raise self.error("指数必须是常数", start, kind="non_constant_exponent")
            value = float(exp_node.jet(_Env(np.zeros((1, self.dimension)), 0)).val[0])
            if not math.isfinite(value):
                raise self.error("指数不是有限常数", start)
            return Pow(base, -value if negative else value)
        return base

    def atom(self) -> Node:
        tok = self.tok
        if tok.kind == "number":
            value = float(tok.text)
            if not math.isfinite(value):
                raise self.error(f"数值字面量 {tok.text!r} 超出双精度范围", tok.pos)
            self.i += 1
            return Const(value)
        if tok.kind == "ident":
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                if tok.text not in FUNCTIONS:
                    raise self.error(f"未知函数 {tok.text!r}", tok.pos, kind="unknown_identifier")
                self.i += 1
                arg = self.expr()
                self.expect(")")
                return Call(tok.text, arg)
            return self._identifier(tok)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        raise self.error(f"意外的 {self._describe(tok)}", tok.pos)

    def _identifier(self, tok: _Token) -> Node:
        name = tok.text
        if name in CONSTANTS:
            return Const(CONSTANTS[name])
        if name in FUNCTIONS:
            raise self.error(f"函数 {name} 后缺少 '('", self.tok.pos)
        index: Optional[int] = None
        m = _VAR_RE.fullmatch(name)
        if m is not None:
            index = int(m.group(1)) - 1
        elif self.dimension <= 2 and name in ("x", "y"):
            index = 0 if name == "x" else 1
        if index is None:
            raise self.error(f"未知标识符 {name!r}", tok.pos, kind="unknown_identifier")
        if index < 0 or index >= self.dimension:
            raise self.error(f"变量 {name} 超出维度 d={self.dimension}", tok.pos, kind="variable_index")
        return Var(index)


def parse_expression(src: str, d: int) -> Expression:
    """把源文本解析成 d 元表达式。"""

    if d < 1:
        raise FieldSpecError(f"维度必须为正整数，实际为 {d}")
    if src is None or not str(src).strip():
        raise ExpressionSyntaxError("表达式为空", offset=0)
    root = _Parser(str(src), d).parse()
    return Expression(root=root, dimension=d, source=str(src))


def constant_expression(value: float, d: int) -> Expression:
    return Expression(root=Const(float(value)), dimension=d, source=repr(float(value)))


# ---------------------------------------------------------------------------
# 逐点求导
# ---------------------------------------------------------------------------


def eval_with_derivatives(ast: Expression, x) -> Tuple[float, np.ndarray, np.ndarray]:
    """单点求值：(值, 梯度 (d,), Hessian (d, d))，解析精确。"""

    pts, _ = as_points(x, ast.dimension)
    if pts.shape[0] != 1:
        raise FieldSpecError("eval_with_derivatives 只接受单个点")
    j = ast.jet(pts, order=2)
    return float(j.val[0]), j.grad[0].copy(), j.hess[0].copy()


def _fd_steps(pts: np.ndarray, h: Optional[float], rel: float) -> np.ndarray:
    scale = np.maximum(1.0, np.abs(pts))
    if h is None:
        return rel * scale
    if h <= 0:
        raise FieldSpecError(f"差分步长必须为正，实际为 {h}")
    return np.full_like(pts, float(h))


def fd_jet(ast: Expression, points, order: int = 2, h: Optional[float] = None) -> Jet:
    """中心差分版本的 Jet。Hessian 的步长下限为 1e-4·max(1,|x_i|)。"""

    pts, _ = as_points(points, ast.dimension)
    n, d = pts.shape

    def f(p: np.ndarray) -> np.ndarray:
        return ast.jet(p, order=0).val

    val = f(pts)
    if order == 0:
        return Jet(val)
    steps = _fd_steps(pts, h, FD_REL_STEP)
    grad = np.empty((n, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        hi = steps[:, i : i + 1]
        grad[:, i] = (f(pts + hi * e) - f(pts - hi * e)) / (2.0 * hi[:, 0])
    if order == 1:
        return Jet(val, grad)
    hsteps = np.maximum(steps, FD_HESS_REL_STEP * np.maximum(1.0, np.abs(pts)))
    hess = np.empty((n, d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = 1.0
        hi = hsteps[:, i : i + 1]
        hess[:, i, i] = (f(pts + hi * ei) - 2.0 * val + f(pts - hi * ei)) / (hi[:, 0] ** 2)
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = 1.0
            hj = hsteps[:, j : j + 1]
            mixed = (
                f(pts + hi * ei + hj * ej)
                - f(pts + hi * ei - hj * ej)
                - f(pts - hi * ei + hj * ej)
                + f(pts - hi * ei - hj * ej)
            ) / (4.0 * hi[:, 0] * hj[:, 0])
            hess[:, i, j] = mixed
            hess[:, j, i] = mixed
    return Jet(val, grad, hess)


def fd_derivatives(ast: Expression, x, h: Optional[float] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """单点中心差分：(值, 梯度, Hessian)，O(h²) 精度，用作解析导数的对照。"""

    pts, _ = as_points(x, ast.dimension)
    j = fd_jet(ast, pts, order=2, h=h)
    return float(j.val[0]), j.grad[0].copy(), j.hess[0].copy()


def expression_jet(
    ast: Expression,
    points: np.ndarray,
    order: int,
    mode: DerivativeMode = DerivativeMode.ANALYTIC,
    step: Optional[float] = None,
) -> Jet:
    if mode == DerivativeMode.FINITE_DIFFERENCE and order > 0:
        return fd_jet(ast, points, order=order, h=step)
    return ast.jet(points, order=order)


# ---------------------------------------------------------------------------
# 矩阵场
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatrixJet:
    """矩阵场在一批点上的值与一阶导：value (N, r, c)，grad (N, r, c, d)，grad[n,i,j,k] = ∂_k A_ij。"""

    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def transpose(self) -> "MatrixJet":
        return MatrixJet(
            np.swapaxes(self.value, 1, 2),
            None if self.grad is None else np.swapaxes(self.grad, 1, 2),
        )

    def matmul(self, other: "MatrixJet") -> "MatrixJet":
        value = self.value @ other.value
        if self.grad is None or other.grad is None:
            return MatrixJet(value)
        grad = np.einsum("nikd,nkj->nijd", self.grad, other.value) + np.einsum(
            "nik,nkjd->nijd", self.value, other.grad
        )
        return MatrixJet(value, grad)

    def scale(self, factor: float) -> "MatrixJet":
        return MatrixJet(self.value * factor, None if self.grad is None else self.grad * factor)


class MatrixField(ABC):
    """ℝ^dimension → ℝ^{rows×cols} 的矩阵场。"""

    dimension: int
    shape: Tuple[int, int]

    @abstractmethod
    def jet(
        self,
        points: np.ndarray,
        order: int = 1,
        mode: DerivativeMode = DerivativeMode.ANALYTIC,
        step: Optional[float] = None,
    ) -> MatrixJet: ...

    def value(self, x) -> np.ndarray:
        pts, single = as_points(x, self.dimension)
        v = self.jet(pts, order=0).value
        return v[0] if single else v


@dataclass(frozen=True)
class ExpressionMatrix(MatrixField):
    """逐分量给出的矩阵场。"""

    entries: Tuple[Tuple[Expression, ...], ...]
    dimension: int

    def __post_init__(self) -> None:
        widths = {len(row) for row in self.entries}
        if not self.entries or len(widths) != 1:
            raise FieldSpecError("矩阵各行长度必须一致且非空")
        for row in self.entries:
            for e in row:
                if e.dimension != self.dimension:
                    raise FieldSpecError(f"分量维度 {e.dimension} 与矩阵场维度 {self.dimension} 不一致")

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        return len(self.entries), len(self.entries[0])

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        pts, _ = as_points(points, self.dimension)
        n = pts.shape[0]
        r, c = self.shape
        value = np.empty((n, r, c))
        grad = np.empty((n, r, c, self.dimension)) if order >= 1 else None
        for i, row in enumerate(self.entries):
            for j, e in enumerate(row):
                jt = expression_jet(e, pts, min(order, 1), mode, step)
                value[:, i, j] = jt.val
                if grad is not None:
                    grad[:, i, j, :] = jt.grad
        return MatrixJet(value, grad)


@dataclass(frozen=True)
class RotatedDiagonalSpec:
    """σ(x) = U Λ(x) Uᵀ：U 为常数正交矩阵，Λ 的对角元为表达式 ℓ_k(x)。"""

    U: np.ndarray
    diagonal: Tuple[Expression, ...]

    def __post_init__(self) -> None:
        U = np.asarray(self.U, dtype=float)
        k = len(self.diagonal)
        if U.shape != (k, k):
            raise FieldSpecError(f"U 的形状 {U.shape} 与对角元个数 {k} 不匹配")
        err = float(np.max(np.abs(U.T @ U - np.eye(k))))
        if err >= ORTHO_TOL:
            raise FieldSpecError(f"U 不是正交矩阵：‖UᵀU − I‖∞ = {err:.3e}")
        dims = {e.dimension for e in self.diagonal}
        if len(dims) != 1:
            raise FieldSpecError("对角元表达式的维度不一致")
        object.__setattr__(self, "U", U)

    @property
    def dimension(self) -> int:
        return self.diagonal[0].dimension


@dataclass(frozen=True)
class RotatedDiagonalVolatility(MatrixField):
    spec: RotatedDiagonalSpec

    @property
    def dimension(self) -> int:  # type: ignore[override]
        return self.spec.dimension

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        k = len(self.spec.diagonal)
        return k, k

    def diagonal_jets(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> List[Jet]:
        pts, _ = as_points(points, self.dimension)
        return [expression_jet(e, pts, min(order, 1), mode, step) for e in self.spec.diagonal]

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        U = self.spec.U
        jets = self.diagonal_jets(points, order, mode, step)
        lam = np.stack([j.val for j in jets], axis=1)
        value = np.einsum("ik,nk,jk->nij", U, lam, U)
        if order < 1:
            return MatrixJet(value)
        dlam = np.stack([j.grad for j in jets], axis=1)
        grad = np.einsum("ik,nkd,jk->nijd", U, dlam, U)
        return MatrixJet(value, grad)

    def as_expression_matrix(self) -> ExpressionMatrix:
        """显式分量 σ_ij = Σ_k U_ik ℓ_k U_jk（跳过零系数）。"""

        U = self.spec.U
        k = len(self.spec.diagonal)
        rows = []
        for i in range(k):
            row = []
            for j in range(k):
                node: Optional[Node] = None
                for m, ell in enumerate(self.spec.diagonal):
                    coef = float(U[i, m] * U[j, m])
                    if coef == 0.0:
                        continue
                    term = BinOp("*", Const(abs(coef)), ell.root)
                    if node is None:
                        node = term if coef > 0 else Neg(term)
                    else:
                        node = BinOp("+" if coef > 0 else "-", node, term)
                expr = Expression(node if node is not None else Const(0.0), self.dimension)
                row.append(Expression(expr.root, self.dimension, source=expr.to_source()))
            rows.append(tuple(row))
        return ExpressionMatrix(tuple(rows), self.dimension)


def assemble_rotated_diagonal(spec: RotatedDiagonalSpec) -> RotatedDiagonalVolatility:
    """把 U 与 Λ 组装成波动率场，导数线性复合。"""

    return RotatedDiagonalVolatility(spec)


@dataclass(frozen=True)
class TransposedField(MatrixField):
    base: MatrixField

    @property
    def dimension(self) -> int:  # type: ignore[override]
        return self.base.dimension

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        r, c = self.base.shape
        return c, r

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        return self.base.jet(points, order, mode, step).transpose()


@dataclass(frozen=True)
class DiffusionField(MatrixField):
    """M = σσᵀ。"""

    base: MatrixField

    @property
    def dimension(self) -> int:  # type: ignore[override]
        return self.base.dimension

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        r, _ = self.base.shape
        return r, r

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        s = self.base.jet(points, order, mode, step)
        return s.matmul(s.transpose())


@dataclass(frozen=True)
class ScaledField(MatrixField):
    base: MatrixField
    factor: float

    @property
    def dimension(self) -> int:  # type: ignore[override]
        return self.base.dimension

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        return self.base.shape

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        return self.base.jet(points, order, mode, step).scale(self.factor)


@dataclass(frozen=True)
class BlockDiagonalField(MatrixField):
    """diag(A_1, A_2, ...)，各块定义在同一组变量上。"""

    blocks: Tuple[MatrixField, ...]

    def __post_init__(self) -> None:
        dims = {b.dimension for b in self.blocks}
        if len(dims) != 1:
            raise FieldSpecError("分块的变量维度不一致")
        for b in self.blocks:
            if b.shape[0] != b.shape[1]:
                raise FieldSpecError(f"分块必须是方阵，实际为 {b.shape}")

    @property
    def dimension(self) -> int:  # type: ignore[override]
        return self.blocks[0].dimension

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        k = sum(b.shape[0] for b in self.blocks)
        return k, k

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        pts, _ = as_points(points, self.dimension)
        n = pts.shape[0]
        k = self.shape[0]
        value = np.zeros((n, k, k))
        grad = np.zeros((n, k, k, self.dimension)) if order >= 1 else None
        off = 0
        for b in self.blocks:
            m = b.shape[0]
            bj = b.jet(pts, order, mode, step)
            value[:, off : off + m, off : off + m] = bj.value
            if grad is not None:
                grad[:, off : off + m, off : off + m, :] = bj.grad
            off += m
        return MatrixJet(value, grad)


def matrix_from_sources(entries: Sequence[Sequence[str]], d: int) -> ExpressionMatrix:
    return ExpressionMatrix(tuple(tuple(parse_expression(s, d) for s in row) for row in entries), d)


def diagonal_from_sources(diagonal: Sequence[str], d: int) -> ExpressionMatrix:
    k = len(diagonal)
    zero = constant_expression(0.0, d)
    rows = []
    for i, s in enumerate(diagonal):
        rows.append(tuple(parse_expression(s, d) if j == i else zero for j in range(k)))
    return ExpressionMatrix(tuple(rows), d)


# ---------------------------------------------------------------------------
# FieldSet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldSet:
    """势函数 V 与波动率 σ 的组合，带统一的导数模式。"""

    dimension: int
    potential: Expression
    volatility: MatrixField
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    fd_step: Optional[float] = None

    def __post_init__(self) -> None:
        d = self.dimension
        if d < 1:
            raise FieldSpecError(f"维度必须为正整数，实际为 {d}")
        if self.potential.dimension != d:
            raise FieldSpecError(f"V 的维度 {self.potential.dimension} ≠ {d}")
        if self.volatility.dimension != d or tuple(self.volatility.shape) != (d, d):
            raise FieldSpecError(f"σ 必须是 ℝ^{d} → ℝ^({d}×{d}) 的矩阵场")
        object.__setattr__(self, "derivative_mode", DerivativeMode(self.derivative_mode))

    @property
    def analytic(self) -> bool:
        return self.derivative_mode == DerivativeMode.ANALYTIC

    def potential_jet(self, points, order: int = 2) -> Jet:
        pts, _ = as_points(points, self.dimension)
        return expression_jet(self.potential, pts, order, self.derivative_mode, self.fd_step)

    def volatility_jet(self, points, order: int = 1) -> MatrixJet:
        pts, _ = as_points(points, self.dimension)
        return self.volatility.jet(pts, order, self.derivative_mode, self.fd_step)

    def matrix_jet(self, A: MatrixField, points, order: int = 1) -> MatrixJet:
        pts, _ = as_points(points, self.dimension)
        return A.jet(pts, order, self.derivative_mode, self.fd_step)

    @property
    def diffusion(self) -> DiffusionField:
        return DiffusionField(self.volatility)

    @property
    def volatility_transpose(self) -> TransposedField:
        return TransposedField(self.volatility)

    def check(self, points) -> None:
        """在探测点上检查 |det σ| > 1e-12 且 λ_min(σσᵀ) > 1e-10。"""

        pts, _ = as_points(points, self.dimension)
        sigma = self.volatility_jet(pts, order=0).value
        check_volatility(sigma, pts)


def check_volatility(sigma: np.ndarray, points: np.ndarray) -> None:
    det = np.linalg.det(sigma)
    bad = np.abs(det) <= DET_FLOOR
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ConditioningError(f"σ(x) 奇异：|det σ| = {abs(det[i]):.3e}", point=points[i])
    eig = np.linalg.eigvalsh(sigma @ np.swapaxes(sigma, 1, 2))[:, 0]
    bad = eig <= EIG_FLOOR
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ConditioningError(f"M(x) 条件数过差：最小特征值 {eig[i]:.3e}", point=points[i])


def make_fieldset(
    potential: str,
    volatility: MatrixField,
    *,
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC,
    fd_step: Optional[float] = None,
) -> FieldSet:
    d = volatility.dimension
    return FieldSet(d, parse_expression(potential, d), volatility, derivative_mode, fd_step)
