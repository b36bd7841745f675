"""
慢-快系统的平均化（revsde.averaging）。

对每个慢变量点 x，在快变量 y 上对条件 Gibbs 权重 e^{−V(x,y)} 求积：
    Z_V(x) = ∫ e^{−V} dy
    Σ̄(x)  = Z_V⁻¹ ∫ σ1σ1ᵀ e^{−V} dy            （d=1 时 σ̄₁ = √Σ̄）
    b̄(x)  = Z_V⁻¹ ∫ (∇_x·(σ1σ1ᵀ) − σ1σ1ᵀ∇_xV) e^{−V} dy

截断：先用 scipy.optimize.minimize 找 V(x,·) 的极小点，再向外成倍扩张盒子，
直到盒子边界上的相对权重 e^{−(V−V_min)} 低于 eps_cut。

求积规则：
- adaptive：scipy.integrate.quad_vec（GK21，所有分量一次积完），仅限 1 个快变量
- simpson：scipy.integrate.simpson 复合 Simpson；2 个快变量时用张量积 Simpson
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from scipy.integrate import quad_vec
from scipy.integrate import simpson
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize

from .core import RuntimeCore
from .core import thread_scope
from .errors import ConditioningError
from .errors import FieldSpecError
from .errors import QuadratureError
from .exprfield import Expression
from .exprfield import MatrixField
from .exprfield import MatrixJet
from .exprfield import RotatedDiagonalSpec
from .exprfield import as_points
from .exprfield import expression_jet
from .models import AveragingSummary
from .models import DerivativeMode
from .models import QuadratureRule
from .models import StageFinished
from .reversibility import GridSpec
from .reversibility import euclidean_residual_from_jet
from .sde import ITO
from .sde import KLIMONTOVICH
from .sde import CallableDrift
from .sde import SdeSystem
from .sde import SlowFastSystem


logger = logging.getLogger(__name__)

MAX_FAST_DIMENSION = 2
IDENTITY_FD_STEP = 1e-4
UNBOUNDED_RADIUS = 1e6


@dataclass(frozen=True)
class QuadratureSpec:
    rule: QuadratureRule = QuadratureRule.ADAPTIVE
    panels: int = 400
    abs_tol: float = 1e-10
    rel_tol: float = 1e-8
    eps_cut: float = 1e-12
    initial_width: float = 1.0
    max_doublings: int = 40
    face_samples: int = 33

    def __post_init__(self) -> None:
        object.__setattr__(self, "rule", QuadratureRule(self.rule))
        if self.panels < 2 or self.panels % 2:
            raise FieldSpecError(f"Simpson 面板数必须是 ≥ 2 的偶数，实际为 {self.panels}")
        if not 0.0 < self.eps_cut < 1.0:
            raise FieldSpecError(f"eps_cut 必须在 (0, 1) 内，实际为 {self.eps_cut}")
        if self.abs_tol <= 0 or self.rel_tol <= 0 or self.initial_width <= 0:
            raise FieldSpecError("求积容差与初始宽度必须为正")


@dataclass(frozen=True)
class FastBox:
    """快变量截断盒子；shift 是权重里减去的 V(x, y*)。"""

    y_star: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    shift: float


def _joint(x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return np.hstack([np.broadcast_to(x, (ys.shape[0], x.shape[0])), ys])


def _potential_values(potential: Expression, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return potential.jet(_joint(x, ys), order=0).val


def _face_points(lower: np.ndarray, upper: np.ndarray, axis: int, side: int, samples: int) -> np.ndarray:
    m = lower.shape[0]
    fixed = upper[axis] if side else lower[axis]
    if m == 1:
        return np.array([[fixed]])
    other = 1 - axis
    pts = np.empty((samples, 2))
    pts[:, axis] = fixed
    pts[:, other] = np.linspace(lower[other], upper[other], samples)
    return pts


def fast_box(potential: Expression, slow_dimension: int, x, quad: QuadratureSpec) -> FastBox:
    """定位 V(x,·) 的极小点并向外成倍扩张，直到边界权重 < eps_cut。

    V 在快变量方向不受约束时抛 QuadratureError。
    """

    x = np.asarray(x, dtype=float).reshape(-1)
    m = potential.dimension - slow_dimension
    if x.shape[0] != slow_dimension or m < 1:
        raise FieldSpecError(f"慢变量点维度 {x.shape[0]} 与 d={slow_dimension} 不匹配")
    if m > MAX_FAST_DIMENSION:
        raise FieldSpecError(f"快变量维数 {m} 超过求积支持的上限 {MAX_FAST_DIMENSION}")

    def objective(y: np.ndarray) -> Tuple[float, np.ndarray]:
        j = potential.jet(_joint(x, y.reshape(1, -1)), order=1)
        return float(j.val[0]), j.grad[0, slow_dimension:]

    res = minimize(objective, np.zeros(m), jac=True, method="BFGS")
    y_star = np.asarray(res.x, dtype=float)
    if not math.isfinite(float(res.fun)) or np.linalg.norm(y_star) > UNBOUNDED_RADIUS:
        raise QuadratureError(f"x={tuple(x)} 处 V(x,·) 在快变量方向不受约束，无法截断")
    shift = float(res.fun)

    dist_lo = np.full(m, quad.initial_width)
    dist_hi = np.full(m, quad.initial_width)
    for _ in range(quad.max_doublings):
        grew = False
        lower, upper = y_star - dist_lo, y_star + dist_hi
        for k in range(m):
            for side in (0, 1):
                face = _face_points(lower, upper, k, side, quad.face_samples)
                v = _potential_values(potential, x, face)
                if np.max(np.exp(-(v - shift))) > quad.eps_cut:
                    if side:
                        dist_hi[k] *= 2.0
                    else:
                        dist_lo[k] *= 2.0
                    grew = True
        if not grew:
            logger.debug("fast_box x=%s: [%s, %s]", x, lower, upper)
            return FastBox(y_star, lower, upper, shift)
    raise QuadratureError(
        f"x={tuple(x)} 处截断搜索在 {quad.max_doublings} 次扩张后仍未使权重低于 {quad.eps_cut:g}"
    )


def integrate_fast(
    integrand: Callable[[np.ndarray], np.ndarray],
    box: FastBox,
    quad: QuadratureSpec,
) -> np.ndarray:
    """∫_box integrand(y) dy；integrand 接受 (K, m) 返回 (K, P)，结果为 (P,)。"""

    m = box.lower.shape[0]
    if m == 1 and quad.rule == QuadratureRule.ADAPTIVE:
        res, err, info = quad_vec(
            lambda y: integrand(np.array([[y]]))[0],
            float(box.lower[0]),
            float(box.upper[0]),
            epsabs=quad.abs_tol,
            epsrel=quad.rel_tol,
            norm="max",
            quadrature="gk21",
            full_output=True,
        )
        if not info.success:
            raise QuadratureError(f"自适应求积未收敛：{info.message}（误差估计 {err:.3e}）")
        return np.asarray(res, dtype=float)
    axes = [np.linspace(box.lower[k], box.upper[k], quad.panels + 1) for k in range(m)]
    if m == 1:
        vals = integrand(axes[0].reshape(-1, 1))
        return simpson(vals, x=axes[0], axis=0)
    mesh = np.meshgrid(*axes, indexing="ij")
    ys = np.stack([g.ravel() for g in mesh], axis=1)
    vals = integrand(ys).reshape(len(axes[0]), len(axes[1]), -1)
    return simpson(simpson(vals, x=axes[1], axis=1), x=axes[0], axis=0)


# ---------------------------------------------------------------------------
# 慢块的快变量平均
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FastAverage:
    """一个慢变量点上的快变量积分（权重 e^{−(V − shift)}）。"""

    x: np.ndarray
    box: FastBox
    Z0: float
    G: np.ndarray
    S: np.ndarray
    D: np.ndarray
    H: np.ndarray
    drift_integral: np.ndarray

    @property
    def log_partition(self) -> float:
        return -self.box.shift + math.log(self.Z0)

    @property
    def partition(self) -> float:
        return math.exp(self.log_partition)

    @property
    def dlog_partition(self) -> np.ndarray:
        """∇_x log Z_V = −⟨∇_xV⟩。"""

        return -self.G / self.Z0

    @property
    def diffusion(self) -> np.ndarray:
        return self.S / self.Z0

    @property
    def drift(self) -> np.ndarray:
        return self.drift_integral / self.Z0

    @property
    def diffusion_divergence(self) -> np.ndarray:
        """∇_x·Σ̄，在积分号下求导。"""

        return (self.D - self.H) / self.Z0 + self.diffusion @ self.G / self.Z0

    @property
    def integral_identity_residual(self) -> np.ndarray:
        """积分号下求导的恒等式残差。

        b̄ 与 ∇_x·Σ̄ 由同一被积函数得到，结果只反映求积舍入，用作交叉核对。
        """

        return self.diffusion_divergence - self.drift + self.diffusion @ self.dlog_partition


def _slow_block_integrand(sf: SlowFastSystem, x: np.ndarray, shift: float) -> Callable[[np.ndarray], np.ndarray]:
    d = sf.slow_dimension
    mode, step = sf.derivative_mode, sf.fd_step

    def integrand(ys: np.ndarray) -> np.ndarray:
        pts = _joint(x, ys)
        vj = expression_jet(sf.potential, pts, 1, mode, step)
        w = np.exp(-(vj.val - shift))
        dV = vj.grad[:, :d]
        sj = sf.sigma_slow.jet(pts, 1, mode, step)
        Mj = sj.matmul(sj.transpose())
        M = Mj.value
        div_M = np.einsum("njii->nj", Mj.grad[..., :d])
        M_dV = np.einsum("nji,ni->nj", M, dV)
        cols = [
            w[:, None],
            w[:, None] * dV,
            w[:, None] * M.reshape(len(w), -1),
            w[:, None] * div_M,
            w[:, None] * M_dV,
            w[:, None] * (div_M - M_dV),
        ]
        return np.concatenate(cols, axis=1)

    return integrand


def fast_average(
    sf: SlowFastSystem,
    x,
    quad: QuadratureSpec,
    box: Optional[FastBox] = None,
) -> FastAverage:
    x = np.asarray(x, dtype=float).reshape(-1)
    d = sf.slow_dimension
    if box is None:
        box = fast_box(sf.potential, d, x, quad)
    v = integrate_fast(_slow_block_integrand(sf, x, box.shift), box, quad)
    return _unpack_average(x, box, v, d)


def _block_width(d: int) -> int:
    return 1 + d * d + 4 * d


def _unpack_average(x: np.ndarray, box: FastBox, v: np.ndarray, d: int) -> FastAverage:
    Z0 = float(v[0])
    if not Z0 > 0.0:
        raise QuadratureError(f"x={tuple(x)} 处 Z_V 不为正（{Z0:.3e}）")
    o = 1
    G = v[o : o + d]
    o += d
    S = v[o : o + d * d].reshape(d, d)
    o += d * d
    D = v[o : o + d]
    o += d
    H = v[o : o + d]
    o += d
    return FastAverage(x, box, Z0, G, S, D, H, v[o : o + d])


@dataclass(frozen=True)
class StencilAverage:
    """x 与 x ± h·e_i 上的快变量平均，共用 x 处的盒子和同一组求积节点。"""

    center: FastAverage
    plus: Tuple[FastAverage, ...]
    minus: Tuple[FastAverage, ...]
    step: float

    def identity_residual(self) -> np.ndarray:
        """∇_x·Σ̄ − b̄ + Σ̄ ∇_x log Z_V，∇_x 取中心差分，b̄ 取 x 处的积分。"""

        h2 = 2.0 * self.step
        d = len(self.plus)
        div = np.zeros(d)
        dlogZ = np.zeros(d)
        for i, (p, m) in enumerate(zip(self.plus, self.minus)):
            div += (p.diffusion[:, i] - m.diffusion[:, i]) / h2
            dlogZ[i] = (p.log_partition - m.log_partition) / h2
        return div - self.center.drift + self.center.diffusion @ dlogZ


def stencil_average(sf: SlowFastSystem, x, quad: QuadratureSpec, step: float = IDENTITY_FD_STEP) -> StencilAverage:
    x = np.asarray(x, dtype=float).reshape(-1)
    d = sf.slow_dimension
    if not step > 0.0:
        raise FieldSpecError(f"差分步长必须为正，实际为 {step}")
    box = fast_box(sf.potential, d, x, quad)
    offsets = [np.zeros(d)]
    for i in range(d):
        e = np.zeros(d)
        e[i] = step
        offsets += [e, -e]
    parts = [_slow_block_integrand(sf, x + o, box.shift) for o in offsets]
    v = integrate_fast(lambda ys: np.concatenate([p(ys) for p in parts], axis=1), box, quad)
    w = _block_width(d)
    avgs = [_unpack_average(x + o, box, v[k * w : (k + 1) * w], d) for k, o in enumerate(offsets)]
    return StencilAverage(avgs[0], tuple(avgs[1::2]), tuple(avgs[2::2]), float(step))


def _scalar_or_vector(values: np.ndarray) -> Union[float, np.ndarray]:
    return float(values[0]) if values.shape == (1,) else values


def _slow_point(sf: SlowFastSystem, x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(sf.slow_dimension)


def marginal_partition(sf: SlowFastSystem, x, quad: QuadratureSpec) -> float:
    """Z_V(x) = ∫ e^{−V(x,y)} dy。"""

    return fast_average(sf, _slow_point(sf, x), quad).partition


def effective_drift(sf: SlowFastSystem, x, quad: QuadratureSpec):
    """b̄(x)；d=1 时返回标量。"""

    return _scalar_or_vector(fast_average(sf, _slow_point(sf, x), quad).drift)


def effective_diffusion_matrix(sf: SlowFastSystem, x, quad: QuadratureSpec) -> np.ndarray:
    """Z_V⁻¹∫σ1σ1ᵀe^{−V}dy，检查对称正定。"""

    avg = fast_average(sf, _slow_point(sf, x), quad)
    return _checked_spd(avg.diffusion, avg.x)


def _checked_spd(S: np.ndarray, x: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    eig = np.linalg.eigvalsh(S)
    if not eig[0] > 0.0:
        raise ConditioningError(f"平均扩散矩阵不是正定的（最小特征值 {eig[0]:.3e}）", point=x)
    return S


def _sqrt_spd(S: np.ndarray) -> np.ndarray:
    eig, vec = np.linalg.eigh(S)
    return (vec * np.sqrt(eig)) @ vec.T


def effective_sigma(sf: SlowFastSystem, x, quad: QuadratureSpec):
    """σ̄₁；d=1 为标量 √Σ̄，d>1 为 Σ̄ 的对称平方根。"""

    avg = fast_average(sf, _slow_point(sf, x), quad)
    S = _checked_spd(avg.diffusion, avg.x)
    if sf.slow_dimension == 1:
        return math.sqrt(float(S[0, 0]))
    return _sqrt_spd(S)


def klimontovich_identity_residual(
    sf: SlowFastSystem,
    x,
    quad: QuadratureSpec,
    fd_step: Optional[float] = IDENTITY_FD_STEP,
):
    """∇_x·Σ̄ − b̄ + Σ̄ ∇_x log Z_V。

    默认对 Σ̄ 与 log Z_V 做中心差分（同一盒子、同一组求积节点）；fd_step=None 时在积分号下
    求导，见 FastAverage.integral_identity_residual。
    """

    x = _slow_point(sf, x)
    if fd_step is None:
        return _scalar_or_vector(fast_average(sf, x, quad).integral_identity_residual)
    return _scalar_or_vector(stencil_average(sf, x, quad, float(fd_step)).identity_residual())


# ---------------------------------------------------------------------------
# 旋转对角 σ1 = U Λ(x, y) Uᵀ 的矩阵平均
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RotatedAverage:
    x: np.ndarray
    U: np.ndarray
    mean_square: np.ndarray
    mean_square_grad: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return (self.U * np.sqrt(self.mean_square)) @ self.U.T

    def jet(self) -> MatrixJet:
        """σ̄ 在 x 处的值与对慢变量的导数。"""

        root = np.sqrt(self.mean_square)
        dlam = self.mean_square_grad / (2.0 * root[:, None])
        grad = np.einsum("ik,kl,jk->ijl", self.U, dlam, self.U)
        return MatrixJet(self.sigma[None], grad[None])


def rotated_average(
    spec: RotatedDiagonalSpec,
    potential: Expression,
    x,
    quad: QuadratureSpec,
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC,
    fd_step: Optional[float] = None,
) -> RotatedAverage:
    d = len(spec.diagonal)
    if spec.dimension != potential.dimension:
        raise FieldSpecError("Λ 与 V 必须定义在同一组联合变量上")
    x = np.asarray(x, dtype=float).reshape(d)
    box = fast_box(potential, d, x, quad)

    def integrand(ys: np.ndarray) -> np.ndarray:
        pts = _joint(x, ys)
        vj = expression_jet(potential, pts, 1, derivative_mode, fd_step)
        w = np.exp(-(vj.val - box.shift))
        dV = vj.grad[:, :d]
        lam = [expression_jet(e, pts, 1, derivative_mode, fd_step) for e in spec.diagonal]
        sq = np.stack([j.val**2 for j in lam], axis=1)
        dsq = np.stack([2.0 * j.val[:, None] * j.grad[:, :d] for j in lam], axis=1)
        sq_dV = sq[:, :, None] * dV[:, None, :]
        n = len(w)
        return np.concatenate(
            [
                w[:, None],
                w[:, None] * dV,
                w[:, None] * sq,
                w[:, None] * dsq.reshape(n, -1),
                w[:, None] * sq_dV.reshape(n, -1),
            ],
            axis=1,
        )

    v = integrate_fast(integrand, box, quad)
    Z0 = float(v[0])
    G = v[1 : 1 + d]
    L = v[1 + d : 1 + 2 * d] / Z0
    DL = v[1 + 2 * d : 1 + 2 * d + d * d].reshape(d, d)
    LV = v[1 + 2 * d + d * d :].reshape(d, d)
    if np.any(L <= 0.0):
        raise ConditioningError("Λ² 的平均值不为正", point=x)
    dL = (DL - LV) / Z0 + L[:, None] * G[None, :] / Z0
    return RotatedAverage(x, spec.U, L, dL)


def matrix_average_sigma(spec: RotatedDiagonalSpec, potential: Expression, x, quad: QuadratureSpec) -> np.ndarray:
    """σ̄₁ = U (Z_V⁻¹∫Λ²e^{−V}dy)^{1/2} Uᵀ，平方根在 U 的特征框架里取。"""

    return rotated_average(spec, potential, x, quad).sigma


def preservation_residual(spec: RotatedDiagonalSpec, potential: Expression, x, quad: QuadratureSpec) -> np.ndarray:
    """平均后 σ̄₁ 的欧氏 Klimontovich 残差（λ=1）。"""

    return euclidean_residual_from_jet(rotated_average(spec, potential, x, quad).jet(), 1.0)[0]


# ---------------------------------------------------------------------------
# 网格汇总
# ---------------------------------------------------------------------------


def tensor_simpson(values: np.ndarray, axes: Sequence[np.ndarray]) -> float:
    """在张量网格上逐轴 Simpson；只有一个节点的轴按单位宽度计。"""

    out = values
    for ax in reversed(axes):
        out = out[..., 0] if len(ax) == 1 else simpson(out, x=ax, axis=-1)
    return float(out)


@dataclass(frozen=True)
class AveragingResult:
    axes: Tuple[np.ndarray, ...]
    x_grid: np.ndarray
    Zv: np.ndarray
    b_eff: np.ndarray
    sigma_eff: np.ndarray
    diffusion: np.ndarray
    identity_residual: np.ndarray
    mu_inf: np.ndarray
    preservation_residual: Optional[np.ndarray] = None

    @property
    def slow_dimension(self) -> int:
        return self.x_grid.shape[1]

    def summary(self, tolerance: float = 1e-6) -> AveragingSummary:
        shape = tuple(len(a) for a in self.axes)
        mass = tensor_simpson(self.mu_inf.reshape(shape), self.axes)
        eig = np.linalg.eigvalsh(self.diffusion)
        pres = None if self.preservation_residual is None else float(np.max(np.abs(self.preservation_residual)))
        return AveragingSummary(
            n_points=int(self.x_grid.shape[0]),
            max_identity_residual=float(np.max(np.abs(self.identity_residual))),
            min_effective_sigma=float(np.min(np.sqrt(eig))),
            mu_inf_mass=mass,
            preservation_max_residual=pres,
            preservation_passed=None if pres is None else bool(pres < tolerance),
            min_effective_eigenvalue=float(np.min(eig)),
        )


def effective_potential(result: AveragingResult) -> np.ndarray:
    """U_eff(x) = −log Z_V(x)；平均后的方程写成 Klimontovich 形式时的势。"""

    return -np.log(result.Zv)


def average_on_grid(
    sf: SlowFastSystem,
    grid: GridSpec,
    quad: QuadratureSpec,
    *,
    rotated: Optional[RotatedDiagonalSpec] = None,
    identity_step: float = IDENTITY_FD_STEP,
    threads: Optional[int] = None,
) -> AveragingResult:
    """在慢变量网格上逐点求积，按网格顺序组装。

    恒等式残差列对 Σ̄ 与 log Z_V 做步长 identity_step 的中心差分，与 b̄ 的积分相互独立。
    """

    if grid.dimension != sf.slow_dimension:
        raise FieldSpecError(f"慢变量网格维度 {grid.dimension} ≠ d={sf.slow_dimension}")
    points = grid.points()
    axes = tuple(grid.axes())

    def run(x: np.ndarray) -> Tuple[StencilAverage, Optional[np.ndarray]]:
        avg = stencil_average(sf, x, quad, identity_step)
        pres = None
        if rotated is not None:
            ra = rotated_average(rotated, sf.potential, x, quad, sf.derivative_mode, sf.fd_step)
            pres = euclidean_residual_from_jet(ra.jet(), 1.0)[0]
        return avg, pres

    logger.info("average_on_grid: %d 个慢变量点, 规则=%s", points.shape[0], quad.rule.value)
    with thread_scope(threads) as pool:
        parts = pool.map_ordered(run, list(points))

    stencils = [p[0] for p in parts]
    avgs = [s.center for s in stencils]
    log_Z = np.array([a.log_partition for a in avgs])
    diffusion = np.stack([_checked_spd(a.diffusion, a.x) for a in avgs])
    sigma_eff = np.stack([_sqrt_spd(S) for S in diffusion])
    shape = tuple(len(a) for a in axes)
    rel = np.exp(log_Z - np.max(log_Z))
    mass = tensor_simpson(rel.reshape(shape), axes)
    pres = None if rotated is None else np.stack([p[1] for p in parts])
    RuntimeCore().events.emit(StageFinished(stage="average", detail=f"{points.shape[0]} points"))
    return AveragingResult(
        axes=axes,
        x_grid=points,
        Zv=np.exp(log_Z),
        b_eff=np.stack([a.drift for a in avgs]),
        sigma_eff=sigma_eff,
        diffusion=diffusion,
        identity_residual=np.stack([s.identity_residual() for s in stencils]),
        mu_inf=rel / mass,
        preservation_residual=pres,
    )


# ---------------------------------------------------------------------------
# Dirichlet 形式等距
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirichletForms:
    energy_tensor: float
    energy_iterated: float
    energy_effective: float

    @property
    def gap(self) -> float:
        return abs(self.energy_tensor - self.energy_effective)

    @property
    def fubini_gap(self) -> float:
        return abs(self.energy_tensor - self.energy_iterated)


def dirichlet_forms(
    sf: SlowFastSystem,
    f: Expression,
    quad2d: QuadratureSpec,
    quad1d: QuadratureSpec,
    slow_box: Tuple[float, float] = (-8.0, 8.0),
) -> DirichletForms:
    """E_n(Φ_n f) 的二维张量求积、y 在内层的迭代求积，以及 E(f) = ∫(f′)²σ̄₁²μ∞dx。"""

    if sf.slow_dimension != 1 or sf.fast_dimension != 1:
        raise FieldSpecError("Dirichlet 等距检查只支持一个慢变量和一个快变量")
    if f.dimension != 1:
        raise FieldSpecError("测试函数 f 必须是一元表达式")
    xs = np.linspace(slow_box[0], slow_box[1], quad2d.panels + 1)
    fprime2 = f.jet(xs.reshape(-1, 1), order=1).grad[:, 0] ** 2

    avgs = [fast_average(sf, np.array([x]), quad1d) for x in xs]
    shift = min(a.box.shift for a in avgs)
    scale = np.array([math.exp(-(a.box.shift - shift)) for a in avgs])
    Z0 = np.array([a.Z0 for a in avgs]) * scale
    S = np.array([a.S[0, 0] for a in avgs]) * scale

    # 1) 迭代求积：内层 y，外层 x
    energy_iterated = float(simpson(fprime2 * S, x=xs) / simpson(Z0, x=xs))

    # 2) 平均化后的一维形式
    sigma_bar2 = S / Z0
    mu_inf = Z0 / simpson(Z0, x=xs)
    energy_effective = float(simpson(fprime2 * sigma_bar2 * mu_inf, x=xs))

    # 3) 二维张量 Simpson
    y_lo = min(float(a.box.lower[0]) for a in avgs)
    y_hi = max(float(a.box.upper[0]) for a in avgs)
    ys = np.linspace(y_lo, y_hi, quad2d.panels + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    v = expression_jet(sf.potential, pts, 0, sf.derivative_mode, sf.fd_step).val
    w = np.exp(-(v - shift)).reshape(X.shape)
    s1 = sf.sigma_slow.jet(pts, 0, sf.derivative_mode, sf.fd_step).value[:, 0, 0].reshape(X.shape)
    num = simpson(simpson(s1**2 * fprime2[:, None] * w, x=ys, axis=1), x=xs)
    den = simpson(simpson(w, x=ys, axis=1), x=xs)
    energy_tensor = float(num / den)

    logger.debug(
        "dirichlet_forms: tensor=%.12g iterated=%.12g effective=%.12g",
        energy_tensor,
        energy_iterated,
        energy_effective,
    )
    return DirichletForms(energy_tensor, energy_iterated, energy_effective)


def dirichlet_isometry_gap(
    sf: SlowFastSystem,
    f: Expression,
    quad2d: QuadratureSpec,
    quad1d: QuadratureSpec,
    slow_box: Tuple[float, float] = (-8.0, 8.0),
) -> float:
    """|E_n(Φ_n f) − E(f)|，与时间尺度 n 无关。"""

    return dirichlet_forms(sf, f, quad2d, quad1d, slow_box).gap


# ---------------------------------------------------------------------------
# 平均后的有效 SDE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplineVolatility(MatrixField):
    """由三次样条给出的一维 σ̄(x)。"""

    spline: CubicSpline
    dimension: int = 1

    @property
    def shape(self) -> Tuple[int, int]:  # type: ignore[override]
        return 1, 1

    def jet(self, points, order=1, mode=DerivativeMode.ANALYTIC, step=None) -> MatrixJet:
        pts, _ = as_points(points, 1)
        x = pts[:, 0]
        value = self.spline(x)[:, None, None]
        grad = self.spline(x, 1)[:, None, None, None] if order >= 1 else None
        return MatrixJet(value, grad)


class EffectiveDynamics:
    """一维慢变量的有效 SDE，系数由网格表的三次样条插值得到。

    - ito_system：dX̄ = b̄ dt + √2 σ̄ dW
    - klimontovich_system：dX̄ = −σ̄² U_eff′ dt + √2 σ̄ ∘_K dW，U_eff = −log Z_V
    两者换成 Itô 后漂移一致。

    样条不外推：网格外系数为 NaN，走出 slow_grid 的轨道按非有限状态被拒绝。
    """

    def __init__(self, result: AveragingResult) -> None:
        if result.slow_dimension != 1:
            raise FieldSpecError("有效 SDE 只对一维慢变量构造")
        xs = result.axes[0]
        if len(xs) < 4:
            raise FieldSpecError("慢变量网格至少需要 4 个点才能做三次样条")
        self.lower, self.upper = float(xs[0]), float(xs[-1])
        self.drift_spline = CubicSpline(xs, result.b_eff[:, 0], extrapolate=False)
        self.sigma_spline = CubicSpline(xs, result.sigma_eff[:, 0, 0], extrapolate=False)
        self.potential_spline = CubicSpline(xs, effective_potential(result), extrapolate=False)

    def _drift(self, points: np.ndarray) -> np.ndarray:
        return self.drift_spline(points[:, 0])[:, None]

    def _recast_drift(self, points: np.ndarray) -> np.ndarray:
        x = points[:, 0]
        return (-(self.sigma_spline(x) ** 2) * self.potential_spline(x, 1))[:, None]

    def ito_system(self) -> SdeSystem:
        return SdeSystem(1, CallableDrift(self._drift), SplineVolatility(self.sigma_spline), ITO)

    def klimontovich_system(self) -> SdeSystem:
        return SdeSystem(1, CallableDrift(self._recast_drift), SplineVolatility(self.sigma_spline), KLIMONTOVICH)
