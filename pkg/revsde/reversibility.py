"""
λ-约定 SDE 的可逆性判定（revsde.reversibility）。

λ-SDE：dX = −β M∇V dt + √2 σ ∘_λ dW，其中 λ=0 为 Itô、½ 为 Stratonovich、1 为 Klimontovich。

两种判定途径：
1) 代数残差 R = (2λ−1)·D(σσᵀ) − 2λ·σ·D(σᵀ)，D 取协变散度或欧氏散度
2) 生成元漂移之差：λ-SDE 的一阶系数减去对给定 Gibbs 测度可逆的生成元的一阶系数

协变残差与黎曼体积测度配对，欧氏残差与平直测度配对；classify 会同时检查两者。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable
from typing import ClassVar
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from .core import thread_scope
from .errors import FieldSpecError
from .exprfield import FieldSet
from .exprfield import MatrixJet
from .exprfield import as_points
from .geometry import GeometryBatch
from .geometry import cov_div
from .geometry import euclid_div
from .geometry import geometry_batch
from .geometry import graham_correction_batch
from .geometry import harmonic_defect_batch
from .geometry import sigma_divergence_terms
from .models import CheckReport
from .models import DivergenceVariant
from .models import MeasureMode
from .models import ReversibilityVerdict
from .models import variant_for


logger = logging.getLogger(__name__)

ANALYTIC_TOLERANCE = 1e-6
FD_TOLERANCE = 1e-4
CHUNK_SIZE = 2048


@dataclass(frozen=True)
class NoiseConvention:
    """随机积分约定 λ ∈ [0, 1]。"""

    lam: float

    ITO: ClassVar["NoiseConvention"]
    STRATONOVICH: ClassVar["NoiseConvention"]
    KLIMONTOVICH: ClassVar["NoiseConvention"]

    def __post_init__(self) -> None:
        lam = float(self.lam)
        if not 0.0 <= lam <= 1.0:
            raise FieldSpecError(f"λ 必须在 [0, 1] 内，实际为 {self.lam}")
        object.__setattr__(self, "lam", lam)

    def __float__(self) -> float:
        return self.lam


NoiseConvention.ITO = NoiseConvention(0.0)
NoiseConvention.STRATONOVICH = NoiseConvention(0.5)
NoiseConvention.KLIMONTOVICH = NoiseConvention(1.0)

ConventionLike = Union[NoiseConvention, float]


def as_lambda(value: ConventionLike) -> float:
    return NoiseConvention(float(value)).lam


@dataclass(frozen=True)
class GibbsSpec:
    """参考 Gibbs 测度：flat 为 e^{−βV}dx，riemannian 为 e^{−βV}√ω_M dx。"""

    measure_mode: MeasureMode
    fields: FieldSet
    beta: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "measure_mode", MeasureMode(self.measure_mode))
        if not self.beta > 0.0:
            raise FieldSpecError(f"β 必须为正，实际为 {self.beta}")

    @property
    def variant(self) -> DivergenceVariant:
        return variant_for(self.measure_mode)


@dataclass(frozen=True)
class GridSpec:
    """轴对齐盒子上的张量网格，每个维度 resolution 个点（含端点）。"""

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    resolution: int

    def __post_init__(self) -> None:
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise FieldSpecError("网格上下界的维数不一致")
        if any(a >= b for a, b in zip(lo, hi)):
            raise FieldSpecError(f"网格下界必须严格小于上界：{lo} / {hi}")
        if self.resolution < 1:
            raise FieldSpecError("网格分辨率必须 ≥ 1")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dimension(self) -> int:
        return len(self.lower)

    def axes(self) -> List[np.ndarray]:
        if self.resolution == 1:
            return [np.array([0.5 * (a + b)]) for a, b in zip(self.lower, self.upper)]
        return [np.linspace(a, b, self.resolution) for a, b in zip(self.lower, self.upper)]

    def points(self) -> np.ndarray:
        """按字典序排列的网格点 (resolution^d, d)。"""

        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def default_tolerance(fields: FieldSet) -> float:
    return ANALYTIC_TOLERANCE if fields.analytic else FD_TOLERANCE


# ---------------------------------------------------------------------------
# 批量内核
# ---------------------------------------------------------------------------


def noise_correction_batch(geom: GeometryBatch) -> np.ndarray:
    """∇·(σσᵀ) − σ∇·σᵀ（欧氏散度），漂移字典中的约定修正量。"""

    div_M, s_div_sT = sigma_divergence_terms(geom, covariant=False)
    return div_M - s_div_sT


def lambda_residual_batch(geom: GeometryBatch, lam: float, variant: DivergenceVariant) -> np.ndarray:
    covariant = DivergenceVariant(variant) == DivergenceVariant.COVARIANT
    d_M, s_d_sT = sigma_divergence_terms(geom, covariant=covariant)
    return (2.0 * lam - 1.0) * d_M - 2.0 * lam * s_d_sT


def euclidean_residual_from_jet(sigma: MatrixJet, lam: float) -> np.ndarray:
    """只由 σ 的值与导数计算欧氏残差，σ 不必来自 FieldSet（平均化后的 σ̄ 用它）。"""

    sT = sigma.transpose()
    d_M = euclid_div(sigma.matmul(sT))
    s_d_sT = np.einsum("nij,nj->ni", sigma.value, euclid_div(sT))
    return (2.0 * lam - 1.0) * d_M - 2.0 * lam * s_d_sT


def _potential_drift(fields: FieldSet, geom: GeometryBatch, beta: float) -> np.ndarray:
    grad_V = fields.potential_jet(geom.points, order=1).grad
    return -beta * np.einsum("nij,nj->ni", geom.M, grad_V)


def sde_drift_batch(fields: FieldSet, geom: GeometryBatch, lam: float, beta: float = 1.0) -> np.ndarray:
    return _potential_drift(fields, geom, beta) + 2.0 * lam * noise_correction_batch(geom)


def reversible_drift_batch(fields: FieldSet, geom: GeometryBatch, gibbs: GibbsSpec) -> np.ndarray:
    Mj = geom.diffusion_jet
    if gibbs.measure_mode == MeasureMode.RIEMANNIAN:
        div = cov_div(geom, Mj)
    else:
        div = euclid_div(Mj)
    return _potential_drift(fields, geom, gibbs.beta) + div


def generator_gap_batch(fields: FieldSet, geom: GeometryBatch, lam: float, gibbs: GibbsSpec) -> np.ndarray:
    return sde_drift_batch(fields, geom, lam, gibbs.beta) - reversible_drift_batch(fields, geom, gibbs)


# ---------------------------------------------------------------------------
# 逐点接口（x 可以是单点或 (N, d) 批量）
# ---------------------------------------------------------------------------


def _prepare(fields: FieldSet, x) -> Tuple[GeometryBatch, bool]:
    pts, single = as_points(x, fields.dimension)
    return geometry_batch(fields, pts), single


def _out(values: np.ndarray, single: bool) -> np.ndarray:
    return values[0] if single else values


def lambda_residual(
    fields: FieldSet,
    lam: ConventionLike,
    x,
    variant: DivergenceVariant = DivergenceVariant.COVARIANT,
) -> np.ndarray:
    """R = (2λ−1)·D(σσᵀ) − 2λ·σ·D(σᵀ)。"""

    geom, single = _prepare(fields, x)
    return _out(lambda_residual_batch(geom, as_lambda(lam), variant), single)


def sde_generator_drift(fields: FieldSet, lam: ConventionLike, x, beta: float = 1.0) -> np.ndarray:
    """λ-SDE 生成元的一阶系数 −βM∇V + 2λ(∇·M − σ∇·σᵀ)；二阶系数恒为 M。"""

    geom, single = _prepare(fields, x)
    return _out(sde_drift_batch(fields, geom, as_lambda(lam), beta), single)


def reversible_generator_drift(fields: FieldSet, gibbs: GibbsSpec, x) -> np.ndarray:
    geom, single = _prepare(fields, x)
    return _out(reversible_drift_batch(fields, geom, gibbs), single)


def generator_gap(fields: FieldSet, lam: ConventionLike, gibbs: GibbsSpec, x) -> np.ndarray:
    geom, single = _prepare(fields, x)
    return _out(generator_gap_batch(fields, geom, as_lambda(lam), gibbs), single)


DriftLike = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, Sequence[float], float]


def _evaluate_drift(B: DriftLike, pts: np.ndarray) -> np.ndarray:
    if callable(B):
        out = np.asarray(B(pts), dtype=float)
    else:
        out = np.asarray(B, dtype=float)
    return np.broadcast_to(out, pts.shape).astype(float)


def drift_convert(
    B: DriftLike,
    fields: FieldSet,
    from_lambda: ConventionLike,
    to_gamma: ConventionLike,
    x,
) -> np.ndarray:
    """把 λ-约定的漂移 B 换成路径等价的 γ-约定漂移：B + 2(λ−γ)(∇·M − σ∇·σᵀ)。

    B 可以是在 x 处的取值，也可以是接受 (N, d) 点批量的可调用对象。
    """

    lam, gamma = as_lambda(from_lambda), as_lambda(to_gamma)
    pts, single = as_points(x, fields.dimension)
    base = _evaluate_drift(B, pts)
    if lam == gamma:
        return _out(base.copy(), single)
    corr = noise_correction_batch(geometry_batch(fields, pts))
    return _out(base + 2.0 * (lam - gamma) * corr, single)


def graham_ito_drift(B: DriftLike, fields: FieldSet, x) -> np.ndarray:
    """Graham 噪声 SDE 的 Itô 表示漂移 B − (1/√ω)∂_α(√ω M^{αμ})。"""

    pts, single = as_points(x, fields.dimension)
    base = _evaluate_drift(B, pts)
    return _out(base - graham_correction_batch(geometry_batch(fields, pts)), single)


def harmonic_equivalence(fields: FieldSet, x, tol: float) -> Tuple[bool, bool]:
    """λ=0 协变残差为零 与 调和坐标缺陷为零，两者分别独立判定。"""

    geom, _ = _prepare(fields, x)
    ito_max = np.max(np.abs(lambda_residual_batch(geom, 0.0, DivergenceVariant.COVARIANT)))
    harmonic = np.max(np.abs(harmonic_defect_batch(geom)))
    return bool(ito_max < tol), bool(harmonic < tol)


def block_residuals(
    fields: FieldSet,
    block_sizes: Sequence[int],
    x,
    lam: ConventionLike = 1.0,
    variant: DivergenceVariant = DivergenceVariant.EUCLIDEAN,
) -> List[np.ndarray]:
    """分块对角 σ 的联合系统按块切分的 λ 残差（默认 Klimontovich + 欧氏散度）。"""

    if sum(block_sizes) != fields.dimension:
        raise FieldSpecError(f"分块大小 {tuple(block_sizes)} 之和不等于维度 {fields.dimension}")
    res = lambda_residual(fields, lam, x, variant)
    out: List[np.ndarray] = []
    off = 0
    for size in block_sizes:
        out.append(res[..., off : off + size])
        off += size
    return out


# ---------------------------------------------------------------------------
# 网格判定
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _ChunkMax:
    residual_max: float
    residual_index: int
    gap_max: float


def _grid_scan(
    fields: FieldSet,
    points: np.ndarray,
    kernel: Callable[[GeometryBatch], Tuple[np.ndarray, np.ndarray]],
    threads: Optional[int],
) -> Tuple[float, int, float]:
    chunks = [(s, points[s : s + CHUNK_SIZE]) for s in range(0, points.shape[0], CHUNK_SIZE)]

    def run(item: Tuple[int, np.ndarray]) -> _ChunkMax:
        start, pts = item
        res, gap = kernel(geometry_batch(fields, pts))
        res_norm = np.max(np.abs(res), axis=1)
        i = int(np.argmax(res_norm))
        return _ChunkMax(float(res_norm[i]), start + i, float(np.max(np.abs(gap))))

    with thread_scope(threads) as pool:
        parts = pool.map_ordered(run, chunks)
    best = parts[0]
    for p in parts[1:]:
        # 严格大于：并列时保留字典序更小的点
        if p.residual_max > best.residual_max:
            best = _ChunkMax(p.residual_max, p.residual_index, best.gap_max)
    gap_max = max(p.gap_max for p in parts)
    return best.residual_max, best.residual_index, gap_max


def classify(
    fields: FieldSet,
    lam: ConventionLike,
    gibbs: GibbsSpec,
    grid: GridSpec,
    tol: Optional[float] = None,
    *,
    threads: Optional[int] = None,
) -> ReversibilityVerdict:
    """在网格上判定 λ-SDE 对 gibbs 是否可逆。

    残差变体与测度配对（riemannian↔covariant，flat↔euclidean）；
    reversible ⟺ 残差与生成元漂移差都低于容差。任一点求值失败都会带位置中止。
    """

    if grid.dimension != fields.dimension:
        raise FieldSpecError(f"网格维度 {grid.dimension} 与场维度 {fields.dimension} 不一致")
    lam_v = as_lambda(lam)
    tol_v = default_tolerance(fields) if tol is None else float(tol)
    variant = gibbs.variant
    points = grid.points()

    def kernel(geom: GeometryBatch) -> Tuple[np.ndarray, np.ndarray]:
        return (
            lambda_residual_batch(geom, lam_v, variant),
            generator_gap_batch(fields, geom, lam_v, gibbs),
        )

    res_max, idx, gap_max = _grid_scan(fields, points, kernel, threads)
    verdict = ReversibilityVerdict(
        max_residual=res_max,
        argmax_point=[float(v) for v in points[idx]],
        n_points=int(points.shape[0]),
        tolerance=tol_v,
        reversible=bool(res_max < tol_v and gap_max < tol_v),
        variant=variant,
        generator_gap_max=gap_max,
        convention=lam_v,
        measure_mode=gibbs.measure_mode,
    )
    logger.info(
        "classify λ=%.3g %s: max|R|=%.3e max|gap|=%.3e reversible=%s",
        lam_v,
        gibbs.measure_mode.value,
        res_max,
        gap_max,
        verdict.reversible,
    )
    return verdict


def max_residual_on_grid(
    fields: FieldSet,
    lam: ConventionLike,
    grid: GridSpec,
    variant: DivergenceVariant,
    *,
    threads: Optional[int] = None,
) -> Tuple[float, List[float]]:
    lam_v = as_lambda(lam)
    points = grid.points()

    def kernel(geom: GeometryBatch) -> Tuple[np.ndarray, np.ndarray]:
        res = lambda_residual_batch(geom, lam_v, variant)
        return res, np.zeros_like(res)

    res_max, idx, _ = _grid_scan(fields, points, kernel, threads)
    return res_max, [float(v) for v in points[idx]]


def check_report(
    fields: FieldSet,
    lam: ConventionLike,
    gibbs: GibbsSpec,
    grid: GridSpec,
    tol: Optional[float] = None,
    *,
    threads: Optional[int] = None,
) -> CheckReport:
    """匹配测度的判定，再附上协变、欧氏两种残差的网格最大值。"""

    verdict = classify(fields, lam, gibbs, grid, tol, threads=threads)
    cov, cov_at = max_residual_on_grid(fields, lam, grid, DivergenceVariant.COVARIANT, threads=threads)
    eu, eu_at = max_residual_on_grid(fields, lam, grid, DivergenceVariant.EUCLIDEAN, threads=threads)
    return CheckReport(
        verdict=verdict,
        covariant_max_residual=cov,
        covariant_argmax_point=cov_at,
        euclidean_max_residual=eu,
        euclidean_argmax_point=eu_at,
    )
