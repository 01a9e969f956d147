"""Entropic-risk control: objective, gradient, solver and FE bounds."""

import warnings

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from qmcratio import fem, ocp
from qmcratio.coefficient import constant_coefficient, sine_modes_16
from qmcratio.mesh import crosshatch_mesh, uniform_refine, unit_square_mesh
from qmcratio.qmc import LatticeRule, SpodWeights, ocp_weights


def _near_constant_coefficient(value=1.0):
    """One negligible mode so dimension-1 rules pair with a constant field."""
    from qmcratio.coefficient import AffineCoefficient, constant_mode

    return AffineCoefficient(
        psi0=constant_mode(value),
        modes=(constant_mode(1e-12),),
        kappa=value / 2.0,
    )


def _fixture_problem(n=8, m=3, coeff=None, **kwargs):
    coeff = coeff or sine_modes_16()
    mesh = crosshatch_mesh(n)
    rule = LatticeRule(dimension=coeff.dimension, weights=ocp_weights(coeff.b_seq))
    defaults = dict(
        mesh=mesh,
        coeff=coeff,
        rule=rule,
        level=m,
        u_hat=ocp.bump_target(mesh),
        alpha1=1.0,
        alpha2=0.1,
        theta=1.0,
        lower=-10.0,
        upper=10.0,
    )
    defaults.update(kwargs)
    return ocp.ControlProblem(**defaults)


class TestEntropicRisk:
    def test_constant_values(self):
        assert np.isclose(ocp.entropic_risk(np.full(16, 1.7), 2.0), 1.7)

    def test_two_point_example(self):
        # theta = 1, values {0, ln 3}: log((1 + 3)/2) = log 2
        val = ocp.entropic_risk(np.array([0.0, np.log(3.0)]), 1.0)
        assert np.isclose(val, np.log(2.0))

    def test_small_theta_tends_to_mean(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0.0, 2.0, 64)
        risk = ocp.entropic_risk(vals, 1e-6)
        assert abs(risk - np.mean(vals)) < 1e-6

    def test_translation_equivariance(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=32)
        for c in (-3.0, 0.5, 10.0):
            lhs = ocp.entropic_risk(vals + c, 1.3)
            rhs = ocp.entropic_risk(vals, 1.3) + c
            assert abs(lhs - rhs) < 1e-13

    def test_jensen_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            vals = rng.normal(size=16)
            assert ocp.entropic_risk(vals, 0.7) >= np.mean(vals) - 1e-13

    def test_large_values_stable(self):
        vals = np.array([500.0, 800.0, 790.0])
        risk = ocp.entropic_risk(vals, 1.0)
        assert np.isfinite(risk) and 790.0 < risk <= 800.01

    def test_invalid_theta(self):
        with pytest.raises(ValueError):
            ocp.entropic_risk(np.ones(4), 0.0)


class TestObjectiveAndGradient:
    def test_gradient_is_alpha2_f_when_target_matched(self):
        # choose u_hat as the attainable state for a known control
        coeff = _near_constant_coefficient(1.0)
        mesh = crosshatch_mesh(6)
        rule = LatticeRule(dimension=1, weights=SpodWeights(2, 2, 1.0, np.array([0.5])))
        f_known = np.ones(mesh.num_vertices)
        system = fem.StiffnessSystem(mesh, coeff, np.zeros(0))
        u_hat = system.solve(system.load_vector(f_known))
        prob = ocp.ControlProblem(
            mesh=mesh, coeff=coeff, rule=rule, level=0, u_hat=u_hat, alpha2=0.3
        )
        value, grad = ocp.objective_and_gradient(prob, f_known)
        assert np.allclose(grad, 0.3 * f_known, atol=1e-12)
        mass = fem.mass_matrix(mesh)
        assert np.isclose(value, 0.15 * f_known @ (mass @ f_known), atol=1e-12)

    def test_directional_derivative_oracle(self):
        prob = _fixture_problem(n=6, m=3)
        bank = ocp._SolverBank(prob)
        rng = np.random.default_rng(42)
        mass = fem.mass_matrix(prob.mesh)
        for trial in range(2):
            f = prob.project(rng.normal(size=prob.mesh.num_vertices))
            _, grad = ocp.objective_and_gradient(prob, f, bank)
            for _ in range(3):
                d = rng.normal(size=prob.mesh.num_vertices)
                eps = 1e-5
                jp, _ = ocp.objective_and_gradient(prob, f + eps * d, bank)
                jm, _ = ocp.objective_and_gradient(prob, f - eps * d, bank)
                fd = (jp - jm) / (2 * eps)
                an = float(grad @ (mass @ d))
                assert abs(fd - an) / max(abs(an), 1e-12) < 1e-4

    def test_weight_shift_invariance(self):
        vals = np.array([1.0, 3.0, 2.0, 4.0])
        w1 = ocp.softmax_weights(vals, 1.0)
        w2 = ocp.softmax_weights(vals + 100.0, 1.0)
        assert np.allclose(w1, w2, atol=1e-15)
        assert np.isclose(np.sum(w1), 1.0)


class TestSolveControl:
    def test_zero_minimizer_without_tracking(self):
        # alpha1 -> 0 not allowed; instead match the target exactly at zero
        # control: u_hat = 0 yields phi = 0 and the quadratic cost only
        prob = _fixture_problem(n=4, m=2, u_hat=np.zeros(crosshatch_mesh(4).num_vertices))
        # with u_hat = 0, the tracking term still couples; the minimizer is
        # close to but not exactly zero, so check the clamp-at-zero property
        # through the gradient step instead
        it = ocp.solve_control(prob, tol=1e-9, max_iter=150)
        assert it.converged
        res = ocp.fixed_point_residual(prob, it.control, it.gradient)
        assert res <= 1e-9

    def test_box_clamp_with_pure_quadratic(self):
        # target reachable by zero control and box excluding zero: the
        # minimizer sits on the box face
        coeff = _near_constant_coefficient(1.0)
        mesh = crosshatch_mesh(4)
        rule = LatticeRule(dimension=1, weights=SpodWeights(2, 2, 1.0, np.array([0.5])))
        prob = ocp.ControlProblem(
            mesh=mesh,
            coeff=coeff,
            rule=rule,
            level=0,
            u_hat=np.zeros(mesh.num_vertices),
            alpha1=1e-12,
            alpha2=1.0,
            lower=0.5,
            upper=2.0,
        )
        it = ocp.solve_control(prob, tol=1e-10, max_iter=100)
        assert np.allclose(it.control, 0.5, atol=1e-6)

    def test_strong_convexity_gap(self):
        prob = _fixture_problem(n=4, m=2)
        bank = ocp._SolverBank(prob)
        it = ocp.solve_control(prob, tol=1e-10, max_iter=200, bank=bank)
        mass = fem.mass_matrix(prob.mesh)
        rng = np.random.default_rng(3)
        for _ in range(10):
            f = prob.project(rng.normal(scale=0.5, size=prob.mesh.num_vertices))
            value, _ = ocp.objective_and_gradient(prob, f, bank)
            gap = value - it.objective
            dist2 = float((f - it.control) @ (mass @ (f - it.control)))
            assert gap >= 0.5 * prob.alpha2 * dist2 - 1e-8

    def test_matches_normal_equations_oracle(self):
        # single lattice point and (near-)constant coefficient: the problem
        # is linear-quadratic and solvable densely
        coeff = _near_constant_coefficient(1.0)
        mesh = crosshatch_mesh(4)
        rule = LatticeRule(dimension=1, weights=SpodWeights(2, 2, 1.0, np.array([0.5])))
        alpha1, alpha2 = 1.0, 0.2
        u_hat = ocp.bump_target(mesh)
        prob = ocp.ControlProblem(
            mesh=mesh,
            coeff=coeff,
            rule=rule,
            level=0,
            u_hat=u_hat,
            alpha1=alpha1,
            alpha2=alpha2,
            lower=-1e6,
            upper=1e6,
        )
        it = ocp.solve_control(prob, tol=1e-11, max_iter=300)

        # dense oracle: (alpha1 S^T M S + alpha2 M) f = alpha1 S^T M u_hat
        nv = mesh.num_vertices
        mass = fem.mass_matrix(mesh).toarray()
        system = fem.StiffnessSystem(mesh, coeff, np.zeros(0))
        free = system.free
        s_mat = np.zeros((nv, nv))
        a_ff = system.free_matrix.toarray()
        minv = np.linalg.solve(a_ff, mass[np.ix_(free, range(nv))])
        s_mat[free, :] = minv
        lhs = alpha1 * s_mat.T @ mass @ s_mat + alpha2 * mass
        rhs = alpha1 * s_mat.T @ mass @ u_hat
        f_star = np.linalg.solve(lhs, rhs)
        err = fem.l2_norm(mesh, it.control - f_star)
        assert err < 1e-6

    def test_max_iter_flag(self):
        prob = _fixture_problem(n=4, m=2)
        it = ocp.solve_control(prob, tol=1e-16, max_iter=2)
        assert not it.converged
        assert it.iterations == 2

    def test_residual_monotone_after_burn_in(self):
        # documented heuristic: warn instead of fail on violations
        prob = _fixture_problem(n=4, m=2)
        it = ocp.solve_control(prob, tol=1e-12, max_iter=60)
        residuals = [r for _, r in it.history]
        tail = residuals[5:]
        violations = sum(1 for a, b in zip(tail, tail[1:]) if b > a * 1.5)
        if violations:
            warnings.warn(f"fixed-point residual non-monotone {violations} times after burn-in")


class TestRiskSamples:
    def test_weight_one_and_adjoint_zero_when_matched(self):
        coeff = _near_constant_coefficient(1.0)
        mesh = crosshatch_mesh(5)
        rule = LatticeRule(dimension=1, weights=SpodWeights(2, 2, 1.0, np.array([0.5])))
        f = np.full(mesh.num_vertices, 0.8)
        system = fem.StiffnessSystem(mesh, coeff, np.zeros(0))
        u_hat = system.solve(system.load_vector(f))
        prob = ocp.ControlProblem(mesh=mesh, coeff=coeff, rule=rule, level=1, u_hat=u_hat)
        samples = ocp.risk_samples(prob, f, with_bounds=False)
        for s in samples:
            assert abs(s.log_weight) < 1e-18
            assert fem.l2_norm(mesh, s.adjoint) < 1e-12

    def test_joint_shift_leaves_ratio_invariant(self):
        prob = _fixture_problem(n=4, m=2)
        it = ocp.solve_control(prob, tol=1e-8, max_iter=100)
        samples = ocp.risk_samples(prob, it.control, with_bounds=True)
        shift_a = max(s.log_weight for s in samples)
        shift_b = shift_a + 3.0
        agg_a = ocp.aggregate_risk_samples(prob, samples, shift_a)
        agg_b = ocp.aggregate_risk_samples(prob, samples, shift_b)
        ratio_a = agg_a.num / agg_a.den
        ratio_b = agg_b.num / agg_b.den
        assert np.allclose(ratio_a, ratio_b, atol=1e-12)
        # scaled aggregates differ by exactly exp(3)
        assert np.isclose(agg_b.den * np.exp(3.0), agg_a.den, rtol=1e-12)

    def test_ratio_consistent_with_gradient(self):
        # two code paths: softmax-weighted adjoint average vs the shifted
        # aggregate ratio
        prob = _fixture_problem(n=4, m=3)
        bank = ocp._SolverBank(prob)
        it = ocp.solve_control(prob, tol=1e-9, max_iter=150, bank=bank)
        _, grad = ocp.objective_and_gradient(prob, it.control, bank)
        samples = ocp.risk_samples(prob, it.control, with_bounds=False, bank=bank)
        shift = max(s.log_weight for s in samples)
        agg = ocp.aggregate_risk_samples(prob, samples, shift, with_bounds=False)
        ratio_field = agg.num / agg.den
        expected = grad - prob.alpha2 * it.control
        assert np.max(np.abs(ratio_field - expected)) < 1e-12

    def test_zeta_zero_when_indicator_zero(self):
        prob = _fixture_problem(n=4, m=2)
        sample = ocp.RiskSample(
            y=np.zeros(16),
            log_weight=0.4,
            adjoint=np.zeros(prob.mesh.num_vertices),
            misfit_norm=0.1,
            eta=0.0,
            eta_dual=0.0,
            chi=0.0,
        )
        assert ocp.zeta_sample(prob, sample, shift=0.0) == 0.0
        assert ocp.zeta_prime_sample(prob, sample, shift=0.0) == 0.0

    def test_chi_monotone_in_indicator(self):
        prob = _fixture_problem(n=4, m=2)
        chis = [ocp.risk_weight_chi(prob, 0.5, eta) for eta in (0.0, 0.01, 0.1, 1.0)]
        assert all(b > a for a, b in zip(chis, chis[1:]))

    def test_zeta_prime_linear_in_dual_indicator(self):
        prob = _fixture_problem(n=4, m=2)

        def make(eta_dual):
            return ocp.RiskSample(
                y=np.zeros(16),
                log_weight=0.2,
                adjoint=np.zeros(prob.mesh.num_vertices),
                misfit_norm=0.3,
                eta=0.0,
                eta_dual=eta_dual,
                chi=0.0,
            )

        z1 = ocp.zeta_prime_sample(prob, make(0.1), shift=0.0)
        z2 = ocp.zeta_prime_sample(prob, make(0.2), shift=0.0)
        assert np.isclose(z2, 2.0 * z1)

    def test_bounds_hold_against_fine_reference(self):
        # the weight and weighted-adjoint bounds dominate the observed
        # two-levels-finer differences at the same control
        coeff = sine_modes_16()
        mesh = crosshatch_mesh(4)
        fine = uniform_refine(uniform_refine(mesh))
        rule = LatticeRule(dimension=16, weights=ocp_weights(coeff.b_seq))
        prob = ocp.ControlProblem(
            mesh=mesh, coeff=coeff, rule=rule, level=2, u_hat=ocp.bump_target(mesh)
        )
        it = ocp.solve_control(prob, tol=1e-8, max_iter=150)
        from qmcratio.mesh import prolong

        # the surrogate for the exact problem shares the coarse target
        # function; a separately interpolated target would add a data error
        # outside the bounds' scope
        prob_fine = ocp.ControlProblem(
            mesh=fine, coeff=coeff, rule=rule, level=2,
            u_hat=prolong(prob.u_hat, mesh, fine),
        )
        control_fine = prolong(it.control, mesh, fine)
        coarse = ocp.risk_samples(prob, it.control, with_bounds=True)
        ref = ocp.risk_samples(prob_fine, control_fine, with_bounds=False)
        shift = max(s.log_weight for s in coarse + ref)
        for sc, sr in zip(coarse, ref):
            theta_c = np.exp(sc.log_weight - shift)
            theta_r = np.exp(sr.log_weight - shift)
            zeta = ocp.zeta_sample(prob, sc, shift)
            assert abs(theta_r - theta_c) <= zeta + 1e-16
            wc = prolong(theta_c * sc.adjoint, mesh, fine)
            wr = theta_r * sr.adjoint
            diff = fem.l2_norm(fine, wc - wr)
            zeta_p = ocp.zeta_prime_sample(prob, sc, shift)
            assert diff <= zeta_p + 1e-16


class TestControlErrorBound:
    def test_zero(self):
        assert ocp.control_error_bound(0.0, 0.5) == 0.0

    def test_alpha2_scaling(self):
        assert np.isclose(
            ocp.control_error_bound(1.0, 0.2), 2.0 * ocp.control_error_bound(1.0, 0.4)
        )

    def test_invalid_alpha2(self):
        with pytest.raises(ValueError):
            ocp.control_error_bound(1.0, 0.0)


def test_bump_target_unit_maximum():
    mesh = crosshatch_mesh(16)
    target = ocp.bump_target(mesh)
    assert np.isclose(np.max(target), 1.0)
    assert np.min(target) >= 0.0


def test_history_csv_dump(tmp_path):
    prob = _fixture_problem(n=4, m=2)
    it = ocp.solve_control(prob, tol=1e-7, max_iter=50)
    path = tmp_path / "history.csv"
    ocp.write_history_csv(str(path), it)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,objective,residual"
    assert len(lines) == len(it.history) + 1
