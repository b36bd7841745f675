"""
λ-约定 SDE 的模拟（revsde.sde）。

所有约定都先用漂移字典换成 Itô 形式，再做定步长 Euler–Maruyama：
    x_{k+1} = x_k + B(x_k) dt + √2 σ(x_k) ξ_k √dt

随机数：
- 轨道按 BATCH_SIZE 条一组，第 b 组用 Generator(Philox(key=(seed, b)))
- 组的划分只取决于 n_traj，与线程数无关，所以结果逐位可复现
- 多个组合成一个工作单元一起推进（向量化），单元内逐组抽随机数

慢-快系统 (X, Y) 组装成联合 Klimontovich SDE，波动率为 diag(σ1, √n σ2)。
"""

from __future__ import annotations

import logging
import math
import warnings
from abc import ABC
from abc import abstractmethod
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from .core import RuntimeCore
from .core import thread_scope
from .errors import FieldSpecError
from .errors import RevsdeWarning
from .errors import SimulationError
from .errors import StiffnessError
from .exprfield import BlockDiagonalField
from .exprfield import Expression
from .exprfield import FieldSet
from .exprfield import MatrixField
from .exprfield import MatrixJet
from .exprfield import ScaledField
from .exprfield import as_points
from .exprfield import expression_jet
from .geometry import noise_correction_from_jet
from .models import BatchFinished
from .models import DerivativeMode


logger = logging.getLogger(__name__)

BATCH_SIZE = 512
BATCHES_PER_UNIT = 16
MAX_NORM = 1e8
MAX_REJECTED_FRACTION = 0.01
STIFFNESS_CONSTANT = 0.1

ITO = 0.0
STRATONOVICH = 0.5
KLIMONTOVICH = 1.0


# ---------------------------------------------------------------------------
# 随机数流
# ---------------------------------------------------------------------------


def batch_generator(seed: int, batch_index: int) -> np.random.Generator:
    """第 batch_index 组轨道的计数器型随机数流。"""

    key = np.array([int(seed) % (1 << 64), int(batch_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, tag: int) -> int:
    """从主种子派生子种子（研究中每个时间尺度一个）。"""

    ss = np.random.SeedSequence(int(seed), spawn_key=(int(tag),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# 漂移场
# ---------------------------------------------------------------------------


class DriftField(ABC):
    """批量漂移：evaluate(points (N, d), sigma) -> (N, d)。

    sigma 是同一批点上 σ 的 MatrixJet；needs_sigma_grad 为真时带一阶导。
    """

    needs_sigma_grad: bool = False

    @abstractmethod
    def evaluate(self, points: np.ndarray, sigma: MatrixJet) -> np.ndarray: ...


@dataclass(frozen=True)
class GibbsDrift(DriftField):
    """−β σσᵀ ∇V。"""

    potential: Expression
    beta: float = 1.0
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    fd_step: Optional[float] = None

    def evaluate(self, points: np.ndarray, sigma: MatrixJet) -> np.ndarray:
        grad_V = expression_jet(self.potential, points, 1, self.derivative_mode, self.fd_step).grad
        s = sigma.value
        return -self.beta * np.einsum("nij,nkj,nk->ni", s, s, grad_V)


@dataclass(frozen=True)
class ExpressionDrift(DriftField):
    components: Tuple[Expression, ...]

    def evaluate(self, points: np.ndarray, sigma: MatrixJet) -> np.ndarray:
        return np.stack([e.jet(points, order=0).val for e in self.components], axis=1)


@dataclass(frozen=True)
class CallableDrift(DriftField):
    """用户给出的批量漂移函数 fn(points) -> (N, d)。"""

    fn: Callable[[np.ndarray], np.ndarray]

    def evaluate(self, points: np.ndarray, sigma: MatrixJet) -> np.ndarray:
        return np.asarray(self.fn(points), dtype=float).reshape(points.shape)


@dataclass(frozen=True)
class ZeroDrift(DriftField):
    def evaluate(self, points: np.ndarray, sigma: MatrixJet) -> np.ndarray:
        return np.zeros_like(points)


@dataclass(frozen=True)
class CorrectedDrift(DriftField):
    """B + scale·(∇·(σσᵀ) − σ∇·σᵀ)，scale = 2(λ−γ)。"""

    base: DriftField
    scale: float
    needs_sigma_grad: bool = field(default=True, init=False)

    def evaluate(self, points: np.ndarray, sigma: MatrixJet) -> np.ndarray:
        return self.base.evaluate(points, sigma) + self.scale * noise_correction_from_jet(sigma)


# ---------------------------------------------------------------------------
# 系统
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdeSystem:
    """dX = B(X) dt + √2 σ(X) ∘_λ dW。"""

    dimension: int
    drift: DriftField
    volatility: MatrixField
    convention: float = ITO
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    fd_step: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0.0 <= float(self.convention) <= 1.0:
            raise FieldSpecError(f"λ 必须在 [0, 1] 内，实际为 {self.convention}")
        if self.volatility.dimension != self.dimension or self.volatility.shape[0] != self.dimension:
            raise FieldSpecError(
                f"σ 的形状 {self.volatility.shape} 与系统维度 {self.dimension} 不匹配"
            )
        object.__setattr__(self, "convention", float(self.convention))

    @property
    def noise_dimension(self) -> int:
        return self.volatility.shape[1]

    def sigma_jet(self, points: np.ndarray, order: int = 0) -> MatrixJet:
        return self.volatility.jet(points, order, self.derivative_mode, self.fd_step)

    def coefficients(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """一次求出 (漂移 (N, d), σ (N, d, m))，σ 的导数只在需要时计算。"""

        sj = self.sigma_jet(points, 1 if self.drift.needs_sigma_grad else 0)
        return self.drift.evaluate(points, sj), sj.value

    def drift_at(self, x) -> np.ndarray:
        pts, single = as_points(x, self.dimension)
        b, _ = self.coefficients(pts)
        return b[0] if single else b


def gibbs_system(fields: FieldSet, convention: float, beta: float = 1.0) -> SdeSystem:
    """闭式漂移 −βσσᵀ∇V 的 λ-SDE。"""

    drift = GibbsDrift(fields.potential, beta, fields.derivative_mode, fields.fd_step)
    return SdeSystem(
        fields.dimension,
        drift,
        fields.volatility,
        convention,
        fields.derivative_mode,
        fields.fd_step,
    )


def convert_convention(system: SdeSystem, gamma: float) -> SdeSystem:
    """换成路径等价的 γ-约定系统；漂移修正在求值时才计算。"""

    scale = 2.0 * (system.convention - float(gamma))
    if scale == 0.0:
        return system
    return replace(system, drift=CorrectedDrift(system.drift, scale), convention=float(gamma))


def to_ito(system: SdeSystem) -> SdeSystem:
    return convert_convention(system, ITO)


# ---------------------------------------------------------------------------
# 积分器
# ---------------------------------------------------------------------------


def _rejected_rows(x: np.ndarray) -> np.ndarray:
    finite = np.all(np.isfinite(x), axis=1)
    with np.errstate(invalid="ignore", over="ignore"):
        big = np.linalg.norm(np.where(np.isfinite(x), x, 0.0), axis=1) > MAX_NORM
    return ~finite | big


def save_indices(n_steps: int, stride: int) -> np.ndarray:
    """保存的步号：0, stride, 2·stride, …，末步总是包含在内。"""

    if stride < 1:
        raise FieldSpecError("save_stride 必须 ≥ 1")
    idx = list(range(0, n_steps + 1, stride))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    return np.asarray(idx, dtype=int)


@dataclass
class _BatchRun:
    states: np.ndarray
    rejected_step: np.ndarray


def _integrate(
    system: SdeSystem,
    x0: np.ndarray,
    dt: float,
    n_steps: int,
    noise: Callable[[int], np.ndarray],
    saves: np.ndarray,
    method: str,
) -> _BatchRun:
    """同时推进一批轨道；noise(m) 返回本步的 (N, m) 标准正态数。

    被拒绝的轨道从出错那一步起冻结为 NaN，不再参与求值。
    """

    n, d = x0.shape
    x = np.array(x0, dtype=float)
    out = np.full((n, len(saves), d), np.nan)
    rejected = np.full(n, -1, dtype=int)
    alive = ~_rejected_rows(x)
    rejected[~alive] = 0
    root = math.sqrt(2.0 * dt)
    save_pos = 0
    if saves[0] == 0:
        out[:, 0] = np.where(alive[:, None], x, np.nan)
        save_pos = 1
    m = system.noise_dimension
    for k in range(1, n_steps + 1):
        xi = noise(m)
        live = np.flatnonzero(alive)
        if live.size:
            xl = x[live]
            dW = root * xi[live]
            b, s = system.coefficients(xl)
            if method == "heun":
                pred = xl + b * dt + np.einsum("nij,nj->ni", s, dW)
                ok = ~_rejected_rows(pred)
                b2 = np.zeros_like(b)
                s2 = np.zeros_like(s)
                if np.any(ok):
                    b2[ok], s2[ok] = system.coefficients(pred[ok])
                new = xl + 0.5 * (b + b2) * dt + 0.5 * np.einsum("nij,nj->ni", s + s2, dW)
                new[~ok] = np.nan
            else:
                new = xl + b * dt + np.einsum("nij,nj->ni", s, dW)
            bad = _rejected_rows(new)
            x[live] = new
            if np.any(bad):
                dead = live[bad]
                rejected[dead] = k
                alive[dead] = False
                x[dead] = np.nan
        if save_pos < len(saves) and saves[save_pos] == k:
            out[:, save_pos] = x
            save_pos += 1
    return _BatchRun(out, rejected)


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    rejected_step: Optional[int] = None

    @property
    def rejected(self) -> bool:
        return self.rejected_step is not None


def _single(
    system: SdeSystem,
    x0,
    dt: float,
    n_steps: int,
    rng: np.random.Generator,
    method: str,
) -> Trajectory:
    if dt <= 0:
        raise FieldSpecError(f"dt 必须为正，实际为 {dt}")
    pts, _ = as_points(x0, system.dimension)
    saves = np.arange(n_steps + 1)
    run = _integrate(system, pts[:1], dt, n_steps, lambda m: rng.standard_normal((1, m)), saves, method)
    step = int(run.rejected_step[0])
    return Trajectory(saves * dt, run.states[0], None if step < 0 else step)


def euler_maruyama(system_ito: SdeSystem, x0, dt: float, n_steps: int, rng: np.random.Generator) -> Trajectory:
    """单条 Euler–Maruyama 轨道（系统必须已是 Itô 约定）。"""

    if system_ito.convention != ITO:
        raise FieldSpecError("euler_maruyama 需要 Itô 系统，请先调用 to_ito")
    return _single(system_ito, x0, dt, n_steps, rng, "euler")


def stochastic_heun(system_strat: SdeSystem, x0, dt: float, n_steps: int, rng: np.random.Generator) -> Trajectory:
    """Stratonovich 系统的随机 Heun 格式，用来交叉检验 λ=½ 的 Itô 换算路径。"""

    if system_strat.convention != STRATONOVICH:
        raise FieldSpecError("stochastic_heun 需要 Stratonovich 系统（λ=0.5）")
    return _single(system_strat, x0, dt, n_steps, rng, "heun")


# ---------------------------------------------------------------------------
# 系综
# ---------------------------------------------------------------------------


X0Sampler = Union[Sequence[float], np.ndarray, Callable[[np.random.Generator, int], np.ndarray]]


@dataclass(frozen=True)
class EnsembleResult:
    """保存下来的系综状态；被拒绝的轨道不在 states 里。"""

    n_traj: int
    times: np.ndarray
    states: np.ndarray
    traj_ids: np.ndarray
    seed: int
    dt: float
    rejected_steps: int
    rejected_ids: Tuple[int, ...] = ()

    @property
    def dimension(self) -> int:
        return self.states.shape[2]

    def final_states(self) -> np.ndarray:
        return self.states[:, -1, :]

    def after(self, burn_in: float) -> np.ndarray:
        """t ≥ burn_in 的全部保存状态，形状 (K, d)。"""

        keep = self.times >= burn_in - 1e-12
        return self.states[:, keep, :].reshape(-1, self.dimension)


def _initial_states(x0: X0Sampler, rng: np.random.Generator, count: int, d: int) -> np.ndarray:
    if callable(x0):
        pts = np.asarray(x0(rng, count), dtype=float).reshape(count, d)
    else:
        pts = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (count, d)).copy()
    return pts


def n_steps_for(T: float, dt: float) -> int:
    if dt <= 0 or T <= 0:
        raise FieldSpecError(f"需要 T > 0 且 dt > 0，实际为 T={T}, dt={dt}")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise FieldSpecError(f"T={T} 不是 dt={dt} 的整数倍")
    return n


def simulate_ensemble(
    system: SdeSystem,
    x0_sampler: X0Sampler,
    dt: float,
    T: float,
    n_traj: int,
    seed: int,
    save_stride: int = 1,
    *,
    method: str = "euler",
    threads: Optional[int] = None,
    stage: str = "simulate",
) -> EnsembleResult:
    """模拟 n_traj 条轨道。

    method="euler" 时先换成 Itô 形式；method="heun" 要求 Stratonovich 系统并直接积分。
    超过 1% 的轨道被拒绝时抛 SimulationError。
    """

    if n_traj < 1:
        raise FieldSpecError("n_traj 必须 ≥ 1")
    if method not in ("euler", "heun"):
        raise FieldSpecError(f"未知积分格式 {method!r}")
    if method == "euler":
        work = to_ito(system)
    elif system.convention != STRATONOVICH:
        raise FieldSpecError("heun 格式需要 Stratonovich 系统（λ=0.5）")
    else:
        work = system
    n_steps = n_steps_for(T, dt)
    saves = save_indices(n_steps, save_stride)
    d = work.dimension

    n_batches = -(-n_traj // BATCH_SIZE)
    units: List[List[int]] = [
        list(range(u, min(u + BATCHES_PER_UNIT, n_batches))) for u in range(0, n_batches, BATCHES_PER_UNIT)
    ]
    bus = RuntimeCore().events

    def run_unit(item: Tuple[int, List[int]]) -> _BatchRun:
        unit_index, batches = item
        gens = [batch_generator(seed, b) for b in batches]
        sizes = [min(BATCH_SIZE, n_traj - b * BATCH_SIZE) for b in batches]
        x0 = np.concatenate([_initial_states(x0_sampler, g, c, d) for g, c in zip(gens, sizes)])

        def noise(m: int) -> np.ndarray:
            return np.concatenate([g.standard_normal((c, m)) for g, c in zip(gens, sizes)])

        run = _integrate(work, x0, dt, n_steps, noise, saves, method)
        bus.emit(BatchFinished(stage=stage, index=unit_index, total=len(units)))
        return run

    logger.info(
        "simulate_ensemble: n_traj=%d dt=%g T=%g 组数=%d 方法=%s", n_traj, dt, T, n_batches, method
    )
    with thread_scope(threads) as pool:
        runs = pool.map_ordered(run_unit, list(enumerate(units)))

    states = np.concatenate([r.states for r in runs])
    rejected_at = np.concatenate([r.rejected_step for r in runs])
    bad = rejected_at >= 0
    rejected_ids = tuple(int(i) for i in np.flatnonzero(bad))
    if rejected_ids:
        logger.warning("%d/%d 条轨道因非有限或范数 > %.0e 被拒绝", len(rejected_ids), n_traj, MAX_NORM)
    if len(rejected_ids) > MAX_REJECTED_FRACTION * n_traj:
        raise SimulationError(
            f"被拒绝的轨道过多：{len(rejected_ids)}/{n_traj}（上限 {MAX_REJECTED_FRACTION:.0%}），"
            f"首条 traj {rejected_ids[0]} 于第 {int(rejected_at[rejected_ids[0]])} 步"
        )
    keep = ~bad
    return EnsembleResult(
        n_traj=n_traj,
        times=saves * dt,
        states=states[keep],
        traj_ids=np.flatnonzero(keep),
        seed=int(seed),
        dt=float(dt),
        rejected_steps=len(rejected_ids),
        rejected_ids=rejected_ids,
    )


# ---------------------------------------------------------------------------
# 慢-快系统
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlowFastSystem:
    """慢变量 x ∈ ℝ^d、快变量 y ∈ ℝ^m；所有场都定义在联合变量 (x, y) 上。"""

    slow_dimension: int
    fast_dimension: int
    potential: Expression
    sigma_slow: MatrixField
    sigma_fast: MatrixField
    timescale: float = 1.0
    derivative_mode: DerivativeMode = DerivativeMode.ANALYTIC
    fd_step: Optional[float] = None

    def __post_init__(self) -> None:
        d, m = self.slow_dimension, self.fast_dimension
        if d < 1 or m < 1:
            raise FieldSpecError("慢、快变量维数都必须 ≥ 1")
        if not self.timescale >= 1.0:
            raise FieldSpecError(f"时间尺度 n 必须 ≥ 1，实际为 {self.timescale}")
        if self.potential.dimension != d + m:
            raise FieldSpecError(f"V 必须是 d+m={d + m} 元函数")
        if tuple(self.sigma_slow.shape) != (d, d) or self.sigma_slow.dimension != d + m:
            raise FieldSpecError(f"σ1 必须是 ℝ^{d + m} → ℝ^({d}×{d}) 的矩阵场")
        if tuple(self.sigma_fast.shape) != (m, m) or self.sigma_fast.dimension != d + m:
            raise FieldSpecError(f"σ2 必须是 ℝ^{d + m} → ℝ^({m}×{m}) 的矩阵场")

    @property
    def dimension(self) -> int:
        return self.slow_dimension + self.fast_dimension

    def with_timescale(self, n: float) -> "SlowFastSystem":
        return replace(self, timescale=float(n))

    def joint_volatility(self) -> BlockDiagonalField:
        return BlockDiagonalField((self.sigma_slow, ScaledField(self.sigma_fast, math.sqrt(self.timescale))))

    def joint_fields(self) -> FieldSet:
        return FieldSet(
            self.dimension, self.potential, self.joint_volatility(), self.derivative_mode, self.fd_step
        )


def assemble_slow_fast(sf: SlowFastSystem) -> SdeSystem:
    """联合 Klimontovich SDE：漂移 (−σ1σ1ᵀ∇_xV, −nσ2σ2ᵀ∇_yV)，波动率 diag(σ1, √nσ2)。"""

    drift = GibbsDrift(sf.potential, 1.0, sf.derivative_mode, sf.fd_step)
    return SdeSystem(
        sf.dimension,
        drift,
        sf.joint_volatility(),
        KLIMONTOVICH,
        sf.derivative_mode,
        sf.fd_step,
    )


def stiffness_limit(sf: SlowFastSystem, probe_points: np.ndarray, c: float = STIFFNESS_CONSTANT) -> float:
    """dt 上限 c / max λ(n σ2σ2ᵀ)，在探测点上取最大特征值。"""

    pts, _ = as_points(probe_points, sf.dimension)
    s2 = sf.sigma_fast.jet(pts, 0, sf.derivative_mode, sf.fd_step).value
    eig = np.linalg.eigvalsh(sf.timescale * (s2 @ np.swapaxes(s2, 1, 2)))
    top = float(np.max(eig))
    return math.inf if top <= 0.0 else c / top


def check_stiffness(
    sf: SlowFastSystem,
    dt: float,
    probe_points: np.ndarray,
    *,
    strict: bool = False,
    c: float = STIFFNESS_CONSTANT,
) -> float:
    """dt 超过刚性上限时告警（strict 时抛 StiffnessError）；返回上限。"""

    limit = stiffness_limit(sf, probe_points, c)
    # dt 恰好等于上限（差在舍入以内）时按通过处理
    if dt > limit * (1.0 + 1e-12):
        message = f"dt={dt:g} 超过快变量刚性上限 {limit:.3g}（n={sf.timescale:g}）"
        if strict:
            raise StiffnessError(message)
        logger.warning(message)
        warnings.warn(message, RevsdeWarning, stacklevel=2)
    return limit
