import math

import numpy as np
import pytest

from fluidlob import (
    IntegrationError,
    IntegratorConfig,
    QueueState,
    SingularityError,
    StepInstabilityError,
    fluid_rhs,
    integrate,
    solve_equilibrium,
    workload_rhs,
)
from fluidlob.fluid import _integrate_batch, default_integrator_config

from helpers import make_config


FAST = IntegratorConfig(dt=0.01)


# ---------------------------------------------------------------------------
# fluid_rhs
# ---------------------------------------------------------------------------

def test_rhs_ref1(ref1):
    got = fluid_rhs(ref1, QueueState.of(ref1, [1.0, 1.0]))
    chi1 = math.exp(-0.75) - math.exp(-1.5)
    chi2 = math.exp(-1.5)
    want = [0.3 + chi1 - 2 / 3, 0.2 + chi2 - 1 / 3]
    assert got == pytest.approx(want, abs=1e-14)
    assert got == pytest.approx([-0.11743, 0.08980], abs=1e-5)


def test_rhs_vanishes_at_equilibrium(ref1):
    eq = solve_equilibrium(ref1)
    rhs = fluid_rhs(ref1, QueueState.of(ref1, eq.q_star))
    assert np.abs(rhs).max() < 1e-10


def test_rhs_ref2(ref2):
    got = fluid_rhs(ref2, QueueState.of(ref2, [1.0, 1.0, 1.0]))
    assert got[2] == pytest.approx(0.2 + math.exp(-0.75) - 1 / 3, abs=1e-14)
    assert got[2] == pytest.approx(0.33903, abs=1e-5)


def test_rhs_rejects_zero_workload(ref1):
    with pytest.raises(ValueError):
        fluid_rhs(ref1, QueueState.of(ref1, [0.0, 0.0]))


# ---------------------------------------------------------------------------
# integrate
# ---------------------------------------------------------------------------

def test_integrate_fixed_point(ref1):
    eq = solve_equilibrium(ref1)
    traj = integrate(ref1, eq.q_star, 25.0, FAST)
    assert np.abs(traj.states - eq.q_star).max() < 1e-9


def test_integrate_converges_to_equilibrium(ref1):
    eq = solve_equilibrium(ref1)
    traj = integrate(ref1, [1.0, 1.0], 200.0, FAST)
    assert np.abs(traj.states[-1] - eq.q_star).max() < 1e-6


def test_integrate_workload_stays_above_kappa(ref1, ref2):
    for cfg, q0 in ((ref1, [1.0, 1.0]), (ref2, [0.3, 0.2, 0.4])):
        traj = integrate(cfg, q0, 100.0, FAST)
        assert traj.min_workload > traj.kappa * (1 - 1e-6)
        assert traj.min_workload > 0
        assert np.all(traj.states >= 0)
        # workload column is consistent with the states
        recomputed = traj.states @ cfg.beta
        assert np.abs(recomputed - traj.workload).max() < 1e-12


def test_integrate_default_config(ref1):
    icfg = default_integrator_config(ref1)
    assert icfg.dt == pytest.approx(1e-3)
    traj = integrate(ref1, [1.0, 1.0], 1.0)
    assert traj.steps == 1000
    assert traj.times[-1] == pytest.approx(1.0)


def test_integrate_refine_check(ref1):
    traj = integrate(ref1, [1.0, 1.0], 2.0, IntegratorConfig(dt=0.01, refine_check=True))
    assert traj.max_refine_error < 1e-6


def test_semigroup_property(ref1):
    icfg = IntegratorConfig(dt=0.01)
    once = integrate(ref1, [1.0, 1.0], 8.0, icfg)
    first = integrate(ref1, [1.0, 1.0], 4.0, icfg)
    second = integrate(ref1, first.states[-1], 4.0, icfg)
    assert np.abs(second.states[-1] - once.states[-1]).max() < 1e-8


def test_step_halving_fourth_order(ref1):
    # Halving the step should shrink the deviation by at least 2^3.
    terminal = {}
    for dt in (0.2, 0.1, 0.05):
        terminal[dt] = integrate(ref1, [1.0, 1.0], 5.0, IntegratorConfig(dt=dt)).states[-1]
    d1 = np.abs(terminal[0.2] - terminal[0.1]).max()
    d2 = np.abs(terminal[0.1] - terminal[0.05]).max()
    assert d1 / d2 >= 8.0


def test_equal_beta_reduction(ref2):
    # For equal beta the workload along the full trajectory matches a scalar
    # integration of the summed field.
    dt = 0.01
    traj = integrate(ref2, [1.0, 0.5, 2.0], 20.0, IntegratorConfig(dt=dt))
    w = float(ref2.beta @ np.array([1.0, 0.5, 2.0]))
    scalar = [w]
    beta1 = float(ref2.beta[0])
    for _ in range(traj.steps):
        k1 = beta1 * workload_rhs(ref2, w)
        k2 = beta1 * workload_rhs(ref2, w + 0.5 * dt * k1)
        k3 = beta1 * workload_rhs(ref2, w + 0.5 * dt * k2)
        k4 = beta1 * workload_rhs(ref2, w + dt * k3)
        w = w + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        scalar.append(w)
    assert np.abs(traj.workload - np.array(scalar)).max() < 1e-8


def test_integrate_input_validation(ref1):
    with pytest.raises(ValueError):
        integrate(ref1, [0.0, 0.0], 1.0, FAST)
    with pytest.raises(ValueError):
        integrate(ref1, [1.0, -0.1], 1.0, FAST)
    with pytest.raises(ValueError):
        integrate(ref1, [1.0, 1.0], 0.0, FAST)
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError):
        IntegratorConfig(dt=0.1, workload_floor_factor=1.5)


def test_workload_floor_abort():
    # A pure-drain field pushes the workload to zero; the batch core must
    # abort once it crosses the configured floor.
    cfg = make_config(**{"lambda": [0.0, 0.0]}, big_lambda=0.0, beta=[1.0, 1.0])
    with pytest.raises(SingularityError):
        _integrate_batch(
            cfg,
            np.array([[1.0, 1.0]]),
            3.0,
            IntegratorConfig(dt=0.01),
            np.array([1.0]),
        )


def test_negative_undershoot_is_an_error():
    cfg = make_config(**{"lambda": [0.0, 0.0]}, big_lambda=0.0, beta=[1.0, 1.0])
    with pytest.raises(IntegrationError):
        _integrate_batch(
            cfg,
            np.array([[1.0, 1.0]]),
            3.0,
            IntegratorConfig(dt=0.5),
            np.array([1e-9]),
        )


def test_step_instability_detected():
    cfg = make_config(**{"lambda": [0.0, 0.0]}, big_lambda=0.0, beta=[1.0, 1.0])
    with pytest.raises(StepInstabilityError):
        _integrate_batch(
            cfg,
            np.array([[1.0, 1.0]]),
            3.0,
            IntegratorConfig(dt=0.5, refine_check=True),
            np.array([1e-12]),
        )


# ---------------------------------------------------------------------------
# workload_rhs
# ---------------------------------------------------------------------------

def test_workload_rhs_root_at_w_star(ref2):
    w_star = 4 * math.log(2.5)
    assert workload_rhs(ref2, w_star) == pytest.approx(0.0, abs=1e-12)


def test_workload_rhs_signs(ref2):
    w_star = 4 * math.log(2.5)
    assert workload_rhs(ref2, 0.5 * w_star) > 0
    assert workload_rhs(ref2, 2.0 * w_star) < 0


def test_workload_rhs_degenerate_lambda0(ref2):
    cfg = make_config(
        n_exchanges=3,
        beta=[1.0, 1.0, 1.0],
        **{"lambda": [0.2, 0.2, 0.2]},
        big_lambda=0.0,
        rebates=[1.0, 2.0, 3.0],
        b_dedicated=[1.0, 1.0, 1.0],
    )
    values = [workload_rhs(cfg, w) for w in (0.5, 2.0, 9.0)]
    assert values == pytest.approx([-0.4, -0.4, -0.4])


def test_workload_rhs_rejects_unequal_beta(ref1):
    with pytest.raises(ValueError):
        workload_rhs(ref1, 1.0)
