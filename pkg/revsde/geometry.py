"""
σ 诱导的黎曼几何（revsde.geometry）。

度量 g = M⁻¹（M = σσᵀ），体积密度 ω_M = det g，Christoffel 符号
    Γ^k_ij = ½ M^{kℓ}(∂_i g_jℓ + ∂_j g_iℓ − ∂_ℓ g_ij)，
其中 ∂g 由 ∂M 经 ∂g = −g(∂M)g 得到，只需要 σ 的一阶导数。

数组约定：
- christoffel[k, i, j] = Γ^k_ij
- contracted[k] = Γ^i_ik
- 矩阵场的导数 grad[..., i, j, ℓ] = ∂_ℓ A_ij

批量函数（*_batch）一次处理 (N, d) 个点；逐点函数只是它们的薄包装。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConditioningError
from .exprfield import EIG_FLOOR
from .exprfield import FieldSet
from .exprfield import MatrixField
from .exprfield import MatrixJet
from .exprfield import as_points
from .exprfield import check_volatility


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeometryPoint:
    x: np.ndarray
    M: np.ndarray
    g: np.ndarray
    omega: float
    sqrt_omega: float
    christoffel: np.ndarray
    contracted: np.ndarray
    dlog_omega: np.ndarray


@dataclass(frozen=True)
class GeometryBatch:
    """一批点上的几何量，同时保留 σ 及其导数供散度计算复用。"""

    points: np.ndarray
    sigma: np.ndarray
    dsigma: np.ndarray
    M: np.ndarray
    dM: np.ndarray
    g: np.ndarray
    omega: np.ndarray
    christoffel: np.ndarray
    contracted: np.ndarray
    dlog_omega: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def sqrt_omega(self) -> np.ndarray:
        return np.sqrt(self.omega)

    @property
    def sigma_jet(self) -> MatrixJet:
        return MatrixJet(self.sigma, self.dsigma)

    @property
    def diffusion_jet(self) -> MatrixJet:
        return MatrixJet(self.M, self.dM)

    def point(self, i: int) -> GeometryPoint:
        return GeometryPoint(
            x=self.points[i].copy(),
            M=self.M[i].copy(),
            g=self.g[i].copy(),
            omega=float(self.omega[i]),
            sqrt_omega=float(np.sqrt(self.omega[i])),
            christoffel=self.christoffel[i].copy(),
            contracted=self.contracted[i].copy(),
            dlog_omega=self.dlog_omega[i].copy(),
        )


def _squeeze(values: np.ndarray, single: bool) -> np.ndarray:
    return values[0] if single else values


def geometry_from_jet(points: np.ndarray, sigma: MatrixJet) -> GeometryBatch:
    """由 σ 的值与一阶导组装几何量。σ(x) 奇异或 M 病态时抛 ConditioningError。"""

    check_volatility(sigma.value, points)
    s, ds = sigma.value, sigma.grad
    M = s @ np.swapaxes(s, 1, 2)
    dM = np.einsum("nikl,njk->nijl", ds, s) + np.einsum("nik,njkl->nijl", s, ds)
    g = np.linalg.inv(M)
    # ∂_ℓ g = −g (∂_ℓ M) g
    dg = -np.einsum("nia,nabl,nbj->nijl", g, dM, g)
    sign, logdet = np.linalg.slogdet(g)
    if np.any(sign <= 0):
        i = int(np.flatnonzero(sign <= 0)[0])
        raise ConditioningError("度量 g 的行列式非正", point=points[i])
    omega = np.exp(logdet)
    # lowered[i, j, ℓ] = ∂_i g_jℓ + ∂_j g_iℓ − ∂_ℓ g_ij
    lowered = np.einsum("njli->nijl", dg) + np.einsum("nilj->nijl", dg) - dg
    christoffel = 0.5 * np.einsum("nkl,nijl->nkij", M, lowered)
    contracted = np.einsum("niik->nk", christoffel)
    # Jacobi：∂_j log det g = tr(g⁻¹ ∂_j g) = tr(M ∂_j g)
    dlog_omega = np.einsum("nab,nbaj->nj", M, dg)
    return GeometryBatch(
        points=points,
        sigma=s,
        dsigma=ds,
        M=M,
        dM=dM,
        g=g,
        omega=omega,
        christoffel=christoffel,
        contracted=contracted,
        dlog_omega=dlog_omega,
    )


def geometry_batch(fields: FieldSet, points) -> GeometryBatch:
    pts, _ = as_points(points, fields.dimension)
    logger.debug("geometry_batch: %d 个点, d=%d", pts.shape[0], fields.dimension)
    return geometry_from_jet(pts, fields.volatility_jet(pts, order=1))


def geometry_at(fields: FieldSet, x) -> GeometryPoint:
    """单点几何量。"""

    pts, _ = as_points(x, fields.dimension)
    if pts.shape[0] != 1:
        raise ValueError("geometry_at 只接受单个点，批量请用 geometry_batch")
    return geometry_batch(fields, pts).point(0)


# ---------------------------------------------------------------------------
# 散度
# ---------------------------------------------------------------------------


def euclid_div(A: MatrixJet) -> np.ndarray:
    """行散度 (∇·A)_j = Σ_i ∂_i A_ji。"""

    return np.einsum("njii->nj", A.grad)


def cov_div(geom: GeometryBatch, A: MatrixJet) -> np.ndarray:
    """行协变散度 (∇c·A)_j = Σ_i ∂_i A_ji + Σ_k Γ^i_ik A_jk。"""

    return euclid_div(A) + np.einsum("njk,nk->nj", A.value, geom.contracted)


def row_cov_div_matrix(fields: FieldSet, A: MatrixField, x) -> np.ndarray:
    pts, single = as_points(x, fields.dimension)
    geom = geometry_batch(fields, pts)
    return _squeeze(cov_div(geom, fields.matrix_jet(A, pts, order=1)), single)


def row_euclid_div_matrix(A: MatrixField, x, fields: Optional[FieldSet] = None) -> np.ndarray:
    """欧氏行散度；给了 fields 时沿用其导数模式。"""

    pts, single = as_points(x, A.dimension)
    jet = fields.matrix_jet(A, pts, order=1) if fields is not None else A.jet(pts, order=1)
    return _squeeze(euclid_div(jet), single)


def sigma_divergence_terms(geom: GeometryBatch, covariant: bool):
    """返回 (D(M), σ·D(σᵀ))，D 为协变或欧氏散度。"""

    sT = geom.sigma_jet.transpose()
    Mj = geom.diffusion_jet
    if covariant:
        dM, dsT = cov_div(geom, Mj), cov_div(geom, sT)
    else:
        dM, dsT = euclid_div(Mj), euclid_div(sT)
    return dM, np.einsum("nij,nj->ni", geom.sigma, dsT)


def cancellation_gap_batch(geom: GeometryBatch) -> np.ndarray:
    cov_M, cov_s = sigma_divergence_terms(geom, covariant=True)
    eu_M, eu_s = sigma_divergence_terms(geom, covariant=False)
    return (cov_M - cov_s) - (eu_M - eu_s)


def cancellation_gap(fields: FieldSet, x) -> np.ndarray:
    """[∇c·M − σ∇c·σᵀ] − [∇·M − σ∇·σᵀ]，应恒为零。"""

    pts, single = as_points(x, fields.dimension)
    return _squeeze(cancellation_gap_batch(geometry_batch(fields, pts)), single)


def graham_correction_batch(geom: GeometryBatch) -> np.ndarray:
    # (1/√ω) ∂_α(√ω M^{αμ}) = ∂_α M^{αμ} + M^{αμ} · ½ ∂_α log ω
    return euclid_div(geom.diffusion_jet) + 0.5 * np.einsum("nam,na->nm", geom.M, geom.dlog_omega)


def graham_correction(fields: FieldSet, x) -> np.ndarray:
    """Graham 协变修正项，与 ∇c·(σσᵀ) 相等。"""

    pts, single = as_points(x, fields.dimension)
    return _squeeze(graham_correction_batch(geometry_batch(fields, pts)), single)


def laplace_beltrami_drift_batch(geom: GeometryBatch) -> np.ndarray:
    return -np.einsum("nkj,nikj->ni", geom.M, geom.christoffel)


def laplace_beltrami_drift(fields: FieldSet, x) -> np.ndarray:
    """Δ_M 的一阶系数 −M^{kj}Γ^i_kj。"""

    pts, single = as_points(x, fields.dimension)
    return _squeeze(laplace_beltrami_drift_batch(geometry_batch(fields, pts)), single)


def harmonic_defect_batch(geom: GeometryBatch) -> np.ndarray:
    return np.einsum("nik,njik->nj", geom.M, geom.christoffel)


def harmonic_defect(fields: FieldSet, x) -> np.ndarray:
    """调和坐标缺陷 Γ^j_ik M^{ik}；为零当且仅当坐标是 de Donder 规范。"""

    pts, single = as_points(x, fields.dimension)
    return _squeeze(harmonic_defect_batch(geometry_batch(fields, pts)), single)


def metric_compatibility_residual(fields: FieldSet, x) -> np.ndarray:
    """∂_ℓ M^{ij} + Γ^i_ℓk M^{kj} + Γ^j_ℓk M^{ik}，形状 (d, d, d)，索引 [i, j, ℓ]。"""

    pts, single = as_points(x, fields.dimension)
    geom = geometry_batch(fields, pts)
    res = (
        geom.dM
        + np.einsum("nilk,nkj->nijl", geom.christoffel, geom.M)
        + np.einsum("njlk,nik->nijl", geom.christoffel, geom.M)
    )
    return _squeeze(res, single)


def trace_identity_residual(fields: FieldSet, x) -> np.ndarray:
    """Γ^i_ij − ½ ∂_j log ω_M。"""

    pts, single = as_points(x, fields.dimension)
    geom = geometry_batch(fields, pts)
    return _squeeze(geom.contracted - 0.5 * geom.dlog_omega, single)


def min_diffusion_eigenvalue(fields: FieldSet, points) -> float:
    pts, _ = as_points(points, fields.dimension)
    sigma = fields.volatility_jet(pts, order=0).value
    eig = np.linalg.eigvalsh(sigma @ np.swapaxes(sigma, 1, 2))
    value = float(np.min(eig))
    if value <= EIG_FLOOR:
        logger.debug("min_diffusion_eigenvalue=%.3e 低于下限", value)
    return value


def noise_correction_from_jet(sigma: MatrixJet) -> np.ndarray:
    """∇·(σσᵀ) − σ∇·σᵀ，只用欧氏散度，不要求 σ 可逆。"""

    M = sigma.matmul(sigma.transpose())
    return euclid_div(M) - np.einsum("nij,nj->ni", sigma.value, euclid_div(sigma.transpose()))
