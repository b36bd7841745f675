from __future__ import annotations

import math

import numpy as np
import pytest

from revsde import catalog
from revsde.core import RuntimeCore
from revsde.errors import FieldSpecError
from revsde.errors import RevsdeWarning
from revsde.errors import SimulationError
from revsde.errors import StiffnessError
from revsde.exprfield import matrix_from_sources
from revsde.exprfield import parse_expression
from revsde.models import BatchFinished
from revsde.sde import BATCH_SIZE
from revsde.sde import BATCHES_PER_UNIT
from revsde.sde import ITO
from revsde.sde import KLIMONTOVICH
from revsde.sde import STRATONOVICH
from revsde.sde import ExpressionDrift
from revsde.sde import SdeSystem
from revsde.sde import ZeroDrift
from revsde.sde import assemble_slow_fast
from revsde.sde import batch_generator
from revsde.sde import check_stiffness
from revsde.sde import convert_convention
from revsde.sde import euler_maruyama
from revsde.sde import gibbs_system
from revsde.sde import n_steps_for
from revsde.sde import save_indices
from revsde.sde import simulate_ensemble
from revsde.sde import stiffness_limit
from revsde.sde import stochastic_heun
from revsde.sde import to_ito


def _system_1d(drift: str, sigma: str, convention: float = ITO) -> SdeSystem:
    return SdeSystem(
        1,
        ExpressionDrift((parse_expression(drift, 1),)),
        matrix_from_sources([[sigma]], 1),
        convention,
    )


def test_deterministic_euler_matches_geometric_decay():
    traj = euler_maruyama(_system_1d("-x", "0"), [1.0], 0.01, 100, batch_generator(0, 0))
    assert traj.states[-1, 0] == pytest.approx(0.99**100, rel=1e-12)
    assert abs(traj.states[-1, 0] - math.exp(-1.0)) / math.exp(-1.0) < 0.006
    assert traj.times[-1] == pytest.approx(1.0)
    assert not traj.rejected


def test_stratonovich_correction_at_origin():
    strat = SdeSystem(1, ZeroDrift(), matrix_from_sources([["2+sin(x)"]], 1), STRATONOVICH)
    ito = to_ito(strat)
    assert ito.convention == ITO
    # ∇·(σσᵀ) − σ∇·σᵀ = σσ′ = 2
    np.testing.assert_allclose(ito.drift_at([0.0]), [2.0], atol=1e-12)
    klim = convert_convention(strat, KLIMONTOVICH)
    np.testing.assert_allclose(klim.drift_at([0.0]), [-2.0], atol=1e-12)
    assert convert_convention(strat, STRATONOVICH) is strat


def test_integrators_require_their_convention():
    system = gibbs_system(catalog.f1(), KLIMONTOVICH)
    with pytest.raises(FieldSpecError):
        euler_maruyama(system, [0.0], 0.01, 10, batch_generator(0, 0))
    with pytest.raises(FieldSpecError):
        stochastic_heun(system, [0.0], 0.01, 10, batch_generator(0, 0))
    with pytest.raises(FieldSpecError):
        simulate_ensemble(system, [0.0], 0.01, 0.1, 4, seed=0, method="heun")


def test_step_grid_helpers():
    assert n_steps_for(1.0, 0.01) == 100
    with pytest.raises(FieldSpecError):
        n_steps_for(1.0, 0.3)
    np.testing.assert_array_equal(save_indices(10, 4), [0, 4, 8, 10])
    np.testing.assert_array_equal(save_indices(6, 3), [0, 3, 6])


def test_ensemble_is_reproducible_and_thread_independent():
    system = gibbs_system(catalog.f1(), KLIMONTOVICH)
    n_traj = BATCH_SIZE * BATCHES_PER_UNIT + 700
    a = simulate_ensemble(system, [0.0], 0.01, 0.05, n_traj, seed=7, threads=1)
    b = simulate_ensemble(system, [0.0], 0.01, 0.05, n_traj, seed=7, threads=3)
    assert a.states.shape == (n_traj, 6, 1)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.times, b.times)
    c = simulate_ensemble(system, [0.0], 0.01, 0.05, n_traj, seed=8, threads=1)
    assert not np.array_equal(a.states, c.states)


def test_batch_streams_do_not_depend_on_ensemble_size():
    system = gibbs_system(catalog.f1(), KLIMONTOVICH)
    small = simulate_ensemble(system, [0.5], 0.01, 0.1, BATCH_SIZE, seed=3, threads=1)
    large = simulate_ensemble(system, [0.5], 0.01, 0.1, BATCH_SIZE + 40, seed=3, threads=1)
    assert np.array_equal(small.states, large.states[:BATCH_SIZE])


def test_save_stride_and_burn_in():
    system = gibbs_system(catalog.f1(), KLIMONTOVICH)
    ens = simulate_ensemble(system, [0.0], 0.01, 1.0, 10, seed=1, save_stride=30)
    np.testing.assert_allclose(ens.times, [0.0, 0.3, 0.6, 0.9, 1.0])
    assert ens.final_states().shape == (10, 1)
    assert ens.after(0.6).shape == (30, 1)


def test_callable_initial_sampler():
    system = gibbs_system(catalog.f2(), KLIMONTOVICH)
    ens = simulate_ensemble(
        system, lambda rng, count: rng.normal(size=(count, 2)), 0.01, 0.02, 20, seed=5, threads=1
    )
    again = simulate_ensemble(
        system, lambda rng, count: rng.normal(size=(count, 2)), 0.01, 0.02, 20, seed=5, threads=1
    )
    assert np.array_equal(ens.states[:, 0], again.states[:, 0])
    assert np.std(ens.states[:, 0, 0]) > 0.0


def test_divergent_trajectory_is_rejected():
    system = _system_1d("x^3", "0")
    traj = euler_maruyama(system, [10.0], 0.1, 10, batch_generator(0, 0))
    assert traj.rejected
    assert traj.rejected_step == 3
    with pytest.raises(SimulationError):
        simulate_ensemble(system, [10.0], 0.1, 1.0, 5, seed=0)


def test_heun_and_euler_agree_pathwise():
    system = _system_1d("-x", "1+0.2*sin(x)", STRATONOVICH)
    heun = simulate_ensemble(system, [0.5], 1e-4, 0.5, 200, seed=11, save_stride=5000, method="heun")
    euler = simulate_ensemble(system, [0.5], 1e-4, 0.5, 200, seed=11, save_stride=5000, method="euler")
    diff = np.abs(heun.final_states() - euler.final_states())
    assert float(np.mean(diff)) < 0.02


def test_ornstein_uhlenbeck_variance_smoke():
    system = _system_1d("-x", "1")
    ens = simulate_ensemble(system, [0.0], 0.01, 5.0, 4000, seed=2, save_stride=500)
    assert np.var(ens.final_states()[:, 0]) == pytest.approx(1.0, abs=0.1)


@pytest.mark.slow
def test_ornstein_uhlenbeck_variance():
    system = _system_1d("-x", "1")
    ens = simulate_ensemble(system, [0.0], 1e-3, 10.0, 100_000, seed=2, save_stride=10_000)
    assert np.var(ens.final_states()[:, 0]) == pytest.approx(1.0, rel=0.02)


def test_batch_events_are_emitted():
    bus = RuntimeCore().events
    seen = []

    def on_batch(e: BatchFinished) -> None:
        seen.append((e.stage, e.index, e.total))

    bus.on(BatchFinished)(on_batch)
    try:
        system = gibbs_system(catalog.f1(), KLIMONTOVICH)
        simulate_ensemble(system, [0.0], 0.01, 0.02, 10, seed=0, threads=1, stage="unit-test")
    finally:
        bus.unsubscribe(on_batch)
    assert seen == [("unit-test", 0, 1)]


def test_slow_fast_assembly():
    sf = catalog.sf2(timescale=100.0)
    joint = assemble_slow_fast(sf)
    assert joint.convention == KLIMONTOVICH
    sigma = joint.volatility.value([0.0, 0.3])
    np.testing.assert_allclose(sigma, np.diag([2.0, 10.0]), atol=1e-14)
    # 漂移 (−σ1²∂_xV, −nσ2²∂_yV)
    np.testing.assert_allclose(joint.drift_at([1.0, 0.3]), [-(2.0 + math.sin(1.0)) ** 2, -30.0], rtol=1e-13)
    with pytest.raises(FieldSpecError):
        sf.with_timescale(0.5)


def test_stiffness_guard():
    sf = catalog.sf3(timescale=1000.0)
    probes = np.array([[0.0, 0.0], [1.0, -1.0]])
    assert stiffness_limit(sf, probes) == pytest.approx(1e-4)
    assert check_stiffness(sf, 1e-4, probes) == pytest.approx(1e-4)
    with pytest.warns(RevsdeWarning):
        check_stiffness(sf, 1e-3, probes)
    with pytest.raises(StiffnessError):
        check_stiffness(sf, 1e-3, probes, strict=True)


@pytest.mark.slow
def test_coupled_gaussian_joint_law():
    sf = catalog.sf3(timescale=10.0)
    ens = simulate_ensemble(assemble_slow_fast(sf), [0.0, 0.0], 1e-3, 10.0, 20_000, seed=4, save_stride=10_000)
    cov = np.cov(ens.final_states().T)
    np.testing.assert_allclose(cov, [[4 / 3, -2 / 3], [-2 / 3, 4 / 3]], atol=0.06)
