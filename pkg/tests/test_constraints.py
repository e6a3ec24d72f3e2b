"""Constraint terms, the combinator-tree penalty, and its analytic gradient."""

import numpy as np
import pytest

from gridssl.constraints import (
    ConstraintSpec,
    ConstraintTerm,
    KnownParams,
    default_constraint_spec,
    freq_sync,
    penalty,
    penalty_batch,
    penalty_grad,
    phase_cohesive,
    swing_residual,
    swing_residual_grad_batch,
    true_param_vector,
)
from gridssl.gridsim import integrate_rk4, load_case
from gridssl.numkit import Rng, finite_diff_grad


def flat_known(dt=0.05, theta_start=None):
    return KnownParams(M=np.array([0.1, 0.05, 0.02]), D=np.array([0.03, 0.02, 0.01]), dt=dt, theta_start=theta_start)


def sim_window(case, cls=0, window=60):
    """One simulated post-event window plus its exactly matching z vector."""
    sc = case.scenarios[cls]
    dt, steps, event = 1.0 / 600.0, 1800, 0.5
    tr = integrate_rk4(case.base, case.theta0, np.zeros(3), dt, steps, event=(event, sc.post_outage_model))
    event_step = int(round(event / dt))
    stride = (steps - event_step) // window
    idx = event_step + stride * np.arange(1, window + 1)
    known = KnownParams(M=case.base.M, D=case.base.D, dt=stride * dt, theta_start=tr.theta[idx[0]])
    return tr.omega[idx], true_param_vector(sc.post_outage_model), known


class TestSwingResidual:
    def test_stationary_balance_gives_zero(self):
        known = flat_known()
        w = np.zeros((10, 3))
        z = np.zeros(9)
        z[3:6] = [1.0, 0.5, 0.8]
        z[6:9] = [0.3, -0.2, 0.1]
        # p_i = sum_j P_ij sin(phi_ij) under omega == 0 (theta stays at anchor)
        p12, p13, p23 = z[3:6]
        f12, f13, f23 = z[6:9]
        z[0] = p12 * np.sin(f12) + p13 * np.sin(f13)
        z[1] = p12 * np.sin(f12) + p23 * np.sin(f23)
        z[2] = p13 * np.sin(f13) + p23 * np.sin(f23)
        assert swing_residual(w, z, known) < 1e-28

    def test_simulator_self_consistency(self):
        case = load_case()
        window, z, known = sim_window(case, cls=0)
        assert swing_residual(window, z, known) <= 1e-3

    def test_perturbed_parameters_strictly_worse(self):
        case = load_case()
        window, z, known = sim_window(case, cls=3)
        base = swing_residual(window, z, known)
        z_bad = z.copy()
        z_bad[3:6] *= 1.2
        assert swing_residual(window, z_bad, known) > base

    def test_window_too_short(self):
        with pytest.raises(ValueError):
            swing_residual(np.zeros((2, 3)), np.zeros(9), flat_known())

    def test_invariant_to_common_angle_shift(self):
        rng = Rng(31)
        w = rng.gaussian(12, 3)
        z = rng.gaussian(1, 9)[0]
        a = swing_residual(w, z, flat_known(theta_start=np.zeros(3)))
        b = swing_residual(w, z, flat_known(theta_start=np.full(3, 1.234)))
        assert abs(a - b) < 1e-12


class TestPredicates:
    def test_identical_channels_zero(self):
        w = np.repeat(Rng(1).gaussian(20, 1), 3, axis=1)
        assert freq_sync(w) == 0.0
        assert phase_cohesive(w, flat_known()) < 1e-15

    def test_constant_offset(self):
        w = np.zeros((15, 3))
        w[:, 0] = 0.2
        assert abs(freq_sync(w) - 0.2) < 1e-15

    def test_settle_skips_initial_transient(self):
        w = np.zeros((10, 3))
        w[0, 0] = 5.0
        assert freq_sync(w, settle=0) == 5.0
        assert freq_sync(w, settle=1) == 0.0

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            freq_sync(np.zeros((0, 3)))


class TestPenalty:
    def test_inactive_hinges_zero(self):
        spec = default_constraint_spec(c_swing=1.0, c_sync=1.0, c_phase=1.0, gamma=2.0)
        assert penalty(spec, [0.5, 0.9, 0.2]) == 0.0

    def test_single_term_arithmetic(self):
        spec = ConstraintSpec(terms=[ConstraintTerm("swing_residual", 1.0)], gamma=2.0, norm="l2")
        assert abs(penalty(spec, [2.0]) - 2.0) < 1e-15

    def test_or_node_takes_min(self):
        spec = ConstraintSpec(
            terms=[ConstraintTerm("freq_sync", 0.0), ConstraintTerm("phase_cohesive", 0.0)],
            tree=[["or", ["term", 0], ["term", 1]]],
            gamma=1.0,
        )
        assert penalty(spec, [0.5, 0.0]) == 0.0

    def test_and_node_sums(self):
        spec = ConstraintSpec(
            terms=[ConstraintTerm("freq_sync", 0.0), ConstraintTerm("phase_cohesive", 0.0)],
            tree=[["and", ["term", 0], ["term", 1]]],
            gamma=1.0,
        )
        assert abs(penalty(spec, [0.5, 0.25]) - 0.75) < 1e-15

    def test_gamma_scales_exactly(self):
        terms = [ConstraintTerm("swing_residual", 0.0), ConstraintTerm("freq_sync", 0.1)]
        vals = [0.7, 0.4]
        p1 = penalty(ConstraintSpec(terms=terms, gamma=1.0), vals)
        p5 = penalty(ConstraintSpec(terms=terms, gamma=5.0), vals)
        assert abs(p5 - 5.0 * p1) < 1e-12

    def test_nonnegative(self):
        rng = Rng(8)
        spec = default_constraint_spec(gamma=0.7)
        for _ in range(50):
            vals = rng.uniform(1, 3, 0.0, 2.0)[0]
            assert penalty(spec, vals) >= 0.0

    def test_l1_norm(self):
        spec = ConstraintSpec(
            terms=[ConstraintTerm("swing_residual", 0.0), ConstraintTerm("freq_sync", 0.0)],
            tree=[["term", 0], ["term", 1]],
            gamma=1.0,
            norm="l1",
        )
        assert abs(penalty(spec, [0.3, 0.4]) - 0.7) < 1e-15

    def test_malformed_tree_rejected(self):
        terms = [ConstraintTerm("swing_residual", 0.0)]
        with pytest.raises(ValueError):
            ConstraintSpec(terms=terms, tree=[["nand", ["term", 0]]])
        with pytest.raises(ValueError):
            ConstraintSpec(terms=terms, tree=[["term", 5]])
        with pytest.raises(ValueError):
            ConstraintSpec(terms=terms, tree=[["and"]])

    def test_serialization_round_trip(self):
        spec = default_constraint_spec(c_swing=0.01, c_sync=1.5, c_phase=0.8, gamma=0.3, sync_settle=10)
        again = ConstraintSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()


class TestPenaltyGrad:
    def setup_method(self):
        rng = Rng(17)
        self.known = flat_known()
        self.windows = rng.gaussian(4, 15 * 3).reshape(4, 15, 3)
        self.z = rng.gaussian(4, 9) * 0.5
        self.z[:, 3:6] = np.abs(self.z[:, 3:6]) + 0.5

    def test_inactive_hinge_zero_gradient(self):
        spec = default_constraint_spec(c_swing=1e9, c_sync=1e9, c_phase=1e9, gamma=1.0)
        grad = penalty_grad(spec, self.z, self.windows, self.known)
        assert np.all(grad == 0.0)

    @pytest.mark.parametrize("per_sample", [False, True])
    def test_matches_finite_differences(self, per_sample):
        spec = default_constraint_spec(c_swing=0.0, c_sync=0.0, c_phase=0.0, gamma=1.3, per_sample=per_sample)
        grad = penalty_grad(spec, self.z, self.windows, self.known)

        def value(zmat):
            total, _, _ = penalty_batch(spec, zmat, self.windows, self.known)
            return total

        fd = finite_diff_grad(value, self.z, 1e-6)
        assert np.max(np.abs(fd - grad) / np.maximum(np.abs(fd), 1e-7)) < 1e-5

    def test_effective_power_gradient_hand_formula(self):
        # single active swing term, l2 norm, batch of one: d penalty / d p_i
        # reduces to gamma * d E[res]/d p_i = -gamma * 2 * mean_t(r_i) / n_machines
        spec = ConstraintSpec(terms=[ConstraintTerm("swing_residual", 0.0)], gamma=1.0)
        w = self.windows[:1]
        z = self.z[:1]
        res, _ = swing_residual_grad_batch(w, z, self.known)
        grad = penalty_grad(spec, z, w, self.known)
        from gridssl.constraints import _residual_fields

        r, *_ = _residual_fields(w, z, self.known)
        for i in range(3):
            hand = -2.0 * r[0, :, i].mean() / 3.0
            assert abs(grad[0, i] - hand) < 1e-12
            assert np.sign(grad[0, i]) == -np.sign(r[0, :, i].mean())

    def test_directional_derivative_consistency(self):
        spec = default_constraint_spec(c_swing=0.0, c_sync=0.0, c_phase=0.0, gamma=0.9)
        direction = Rng(23).gaussian(*self.z.shape)
        grad = penalty_grad(spec, self.z, self.windows, self.known)
        eps = 1e-6

        def value(zmat):
            total, _, _ = penalty_batch(spec, zmat, self.windows, self.known)
            return total

        num = (value(self.z + eps * direction) - value(self.z - eps * direction)) / (2 * eps)
        ana = float((grad * direction).sum())
        assert abs(num - ana) / max(abs(num), 1e-9) < 1e-5


class TestTrueParamVector:
    def test_layout(self):
        case = load_case()
        z = true_param_vector(case.base)
        assert z.shape == (9,)
        p, phi = case.base.coupling()
        assert abs(z[3] - p[0, 1]) < 1e-15
        assert abs(z[8] - phi[1, 2]) < 1e-15
        assert np.allclose(z[0:3], case.base.P_m - case.base.E_mag**2 * np.diag(case.base.G))
