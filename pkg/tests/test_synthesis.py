import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddism import synthesis
from ddism.experiment import DataMatrices, ExperimentConfig, collect_trajectories
from ddism.model import (Dictionary, NetworkModel, SinusoidalPerturbation, SubsystemModel, benchmark_dictionary,
                         benchmark_matrices, build_topology, custom_topology)
from ddism.synthesis import (FAMILIES, CertificateValidationError, IssCertificate, SynthesisInfeasible,
                             SynthesisOptions, coupling_gain, dissipation_check, iss_bounds, sample_ball,
                             synthesize_grid, synthesize_iss, validate_certificate)

ANTI = np.array([[0.0, 1.0], [1.0, 0.0]])


def _unit_cert(n=2, **kw):
    eye = np.eye(n)
    base = dict(P=eye, Phi=eye, Y=np.zeros((1, n)), G2=np.zeros((1, 0)), K=np.zeros((1, n)),
                F=np.zeros((n, n)), kappa=1.0, mu=1.0, alpha1=1.0, alpha2=1.0, rho=0.0)
    base.update(kw)
    return IssCertificate(**base)


@pytest.fixture(scope="module")
def scalar_data():
    # x' = -x + u sampled at three points; the zero-input run decays from the same start
    S = np.array([[1.0, 2.0, -1.0]])
    U = np.array([[0.5, -1.0, 2.0]])
    Sb = np.array([[1.0, 0.5, 0.25]])
    return DataMatrices(U, S, np.zeros((0, 3)), -S + U, S.copy(), Sb, np.zeros((0, 3)), -Sb, Sb.copy(),
                        x0=np.array([1.0]), tau=0.1)


@pytest.fixture(scope="module")
def linear_net():
    A = np.array([[1.0, 1.0], [0.0, 0.0]])
    sub = SubsystemModel(A, [[0.0], [1.0]], Dictionary.from_terms(2), SinusoidalPerturbation.zero(1))
    return NetworkModel([sub], custom_topology(1, []))


class TestIssBounds:
    @pytest.mark.parametrize("D,mu,rho", [
        (0.01 * ANTI, 1.0, 1e-4),
        (np.hstack([5e-4 * ANTI] * 999), 1.0, 999 * 5e-4 ** 2),
        (0.01 * ANTI, 0.7, 1e-4 / 0.7),
        (0.01 * ANTI, 1.2, 1e-4 / 1.2),
        (0.01 * ANTI, 0.15, 1e-4 / 0.15),
    ])
    def test_rho(self, D, mu, rho):
        a1, a2, r = iss_bounds(_unit_cert(), D, mu)
        assert r == pytest.approx(rho, rel=1e-12)
        assert a1 == a2 == 1.0

    def test_rayleigh(self):
        P = np.array([[2.0, 1.0], [1.0, 3.0]])
        a1, a2, _ = iss_bounds(_unit_cert(P=P, Phi=np.linalg.inv(P)), np.zeros((2, 0)))
        ev = np.linalg.eigvalsh(P)
        assert (a1, a2) == pytest.approx((ev[0], ev[1]), rel=1e-14)

    def test_uncoupled(self):
        assert coupling_gain(np.zeros((2, 0)), 1.0) == 0.0

    @given(st.floats(1e-4, 1.0), st.floats(0.05, 5.0), st.integers(1, 6))
    def test_operator_norm(self, w, mu, k):
        D = np.hstack([w * ANTI] * k)
        assert coupling_gain(D, mu) == pytest.approx(k * w * w / mu, rel=1e-10)


class TestSynthesis:
    def test_benchmark_feasible(self, ring10, ring_data):
        cert = synthesize_iss(ring_data, ring10.coupling_matrix(0), SynthesisOptions(kappa=2.0, mu=1.0))
        rep = validate_certificate(cert, ring_data, ring10.coupling_matrix(0), n_mc=1000, radius=10)
        assert rep.passed, rep.failures
        assert cert.rho == pytest.approx(1e-4, rel=1e-12)
        assert cert.alpha2 >= cert.alpha1 > 0

    def test_validation_thresholds(self, ring10, ring_cert, ring_data):
        rep = validate_certificate(ring_cert, ring_data, ring10.coupling_matrix(0), n_mc=10_000, radius=10)
        assert max(rep.residuals.values()) <= 1e-6
        assert rep.lmi_max_eig <= 1e-8
        assert rep.n_violations == 0 and rep.mc_max_violation < 0

    def test_gain_formula(self, ring_cert, ring_data):
        np.testing.assert_array_equal(ring_cert.K, ring_data.I @ ring_cert.G)

    def test_cancels_benchmark_nonlinearity(self, ring_cert, true_AB):
        # the closed loop keeps none of the nonlinear terms of the second row
        A, _ = true_AB
        np.testing.assert_allclose(ring_cert.K[0, 2:], -A[1, 2:], atol=1e-8)

    def test_P_inverse_of_Phi(self, ring_cert):
        np.testing.assert_allclose(ring_cert.P @ ring_cert.Phi, np.eye(2), atol=1e-10)
        np.testing.assert_array_equal(ring_cert.P, ring_cert.P.T)

    def test_scalar_linear(self, scalar_data):
        cert = synthesize_iss(scalar_data, None, SynthesisOptions(kappa=1.0, mu=1.0, n_mc=200))
        # closed loop a_cl = -1 + k; the LMI reads 2 a_cl phi + mu + kappa phi <= 0
        a_cl = -1.0 + cert.K[0, 0]
        phi = cert.Phi[0, 0]
        assert 2 * a_cl * phi + 1.0 + phi <= 0
        assert phi > 0

    def test_linear_oracle_lyapunov(self, linear_net):
        d = collect_trajectories(linear_net, 0, ExperimentConfig(T=6))
        kappa, mu = 1.5, 0.5
        cert = synthesize_iss(d, None, SynthesisOptions(kappa=kappa, mu=mu, n_mc=200))
        A = linear_net.subsystems[0].A
        B = linear_net.subsystems[0].B
        Acl = A + B @ cert.K
        P = cert.P
        lhs = Acl.T @ P + P @ Acl + kappa * P + mu * P @ P
        assert np.linalg.eigvalsh(lhs).max() <= 1e-6

    def test_unmatched_nonlinearity(self, ring10):
        # x1^2 moved into the unactuated channel
        A, B = benchmark_matrices()
        A = A.copy()
        A[0, 2] = 1.0
        sub = SubsystemModel(A, B, benchmark_dictionary(), SinusoidalPerturbation.zero(1))
        net = NetworkModel([sub] * 3, build_topology("ring", 3))
        d = collect_trajectories(net, 0, ExperimentConfig(x0_box=0.2))
        with pytest.raises(SynthesisInfeasible) as exc:
            synthesize_iss(d, net.coupling_matrix(0))
        assert exc.value.family == "nonlinearity-cancellation"
        assert "nonlinearity-cancellation" in str(exc.value)

    def test_overdemanding_decay(self, ring10, ring_data):
        with pytest.raises(SynthesisInfeasible) as exc:
            synthesize_iss(ring_data, ring10.coupling_matrix(0), SynthesisOptions(kappa=1e6))
        assert exc.value.family == "dissipation-lmi"

    def test_poor_data(self, ring10, ring_data):
        d = dataclasses.replace(ring_data, Delta=np.repeat(ring_data.Delta[:, :1], ring_data.T, axis=1))
        with pytest.raises(SynthesisInfeasible) as exc:
            synthesize_iss(d, ring10.coupling_matrix(0))
        assert exc.value.family == "dictionary-selection"

    def test_families(self):
        assert set(FAMILIES) == {"nonlinearity-cancellation", "dictionary-selection",
                                 "lyapunov-parametrization", "dissipation-lmi"}

    @pytest.mark.parametrize("objective", ["bounded_condition", "min_condition_number", "feasibility_only"])
    def test_objectives(self, ring10, ring_data, objective):
        cert = synthesize_iss(ring_data, ring10.coupling_matrix(0), SynthesisOptions(objective=objective))
        assert cert.meta["objective"] == objective

    def test_bounded_condition_trade_off(self, ring10, ring_data):
        D = ring10.coupling_matrix(0)
        a = synthesize_iss(ring_data, D, SynthesisOptions(objective="min_condition_number"))
        b = synthesize_iss(ring_data, D, SynthesisOptions(objective="bounded_condition"))
        lam_a = np.linalg.eigvalsh(a.Phi)
        lam_b = np.linalg.eigvalsh(b.Phi)
        assert lam_b[-1] <= 1.5 * lam_a[-1] * (1 + 1e-6)
        assert lam_b[-1] / lam_b[0] <= lam_a[-1] / lam_a[0] * (1 + 1e-6)

    def test_equalities_independent_of_kappa(self, ring10, ring_data):
        D = ring10.coupling_matrix(0)
        for kappa in (0.25, 1.0, 4.0):
            cert = synthesize_iss(ring_data, D, SynthesisOptions(kappa=kappa))
            rep = validate_certificate(cert, ring_data, D, n_mc=100)
            assert max(rep.residuals.values()) <= 1e-6

    def test_fail_closed(self, ring10, ring_data, monkeypatch):
        real = synthesis._solve_lmi

        def corrupt(red, opt, n):
            Phi, V = real(red, opt, n)
            return Phi, V + 1.0

        monkeypatch.setattr(synthesis, "_solve_lmi", corrupt)
        with pytest.raises(CertificateValidationError) as exc:
            synthesize_iss(ring_data, ring10.coupling_matrix(0))
        assert not exc.value.report.passed

    def test_coupling_shape_checked(self, ring_data):
        with pytest.raises(ValueError):
            synthesize_iss(ring_data, np.zeros((2, 3)))

    @pytest.mark.parametrize("kw", [dict(kappa=0.0), dict(mu=-1.0), dict(eps_pd=0.0), dict(objective="x"),
                                    dict(condition_relax=0.5)])
    def test_options_validated(self, kw):
        with pytest.raises(ValueError):
            SynthesisOptions(**kw)

    def test_deterministic(self, ring10, ring_data, ring_cert):
        again = synthesize_iss(ring_data, ring10.coupling_matrix(0), SynthesisOptions(kappa=1.0, mu=1.0))
        assert json.dumps(again.to_dict()) == json.dumps(ring_cert.to_dict())


class TestValidation:
    def test_flipped_off_diagonal(self, ring10, ring_data, ring_cert):
        P = ring_cert.P.copy()
        P[0, 1] = P[1, 0] = -P[0, 1]
        bad = dataclasses.replace(ring_cert, P=P)
        assert not validate_certificate(bad, ring_data, ring10.coupling_matrix(0)).passed

    def test_inflated_kappa(self, ring10, ring_data, ring_cert):
        bad = dataclasses.replace(ring_cert, kappa=10 * ring_cert.kappa)
        rep = validate_certificate(bad, ring_data, ring10.coupling_matrix(0))
        assert not rep.passed
        assert any("dissipation-lmi" in f for f in rep.failures)

    def test_wrong_rho(self, ring10, ring_data, ring_cert):
        bad = dataclasses.replace(ring_cert, rho=0.5 * ring_cert.rho)
        assert not validate_certificate(bad, ring_data, ring10.coupling_matrix(0)).passed

    def test_strict_decay_without_coupling(self, ring_cert):
        rng = np.random.default_rng(0)
        X = sample_ball(rng, 1000, 2, 10.0)
        g = dissipation_check(ring_cert.P, ring_cert.F, benchmark_dictionary(), ring_cert.kappa, ring_cert.rho,
                              0.01 * ANTI, X, np.zeros((1000, 2)))
        assert g.max() <= 1e-6

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 5), st.floats(0.1, 100.0), st.integers(0, 2 ** 31))
    def test_sample_ball(self, dim, radius, seed):
        X = sample_ball(np.random.default_rng(seed), 200, dim, radius)
        assert X.shape == (200, dim)
        assert np.all(np.linalg.norm(X, axis=1) <= radius * (1 + 1e-12))


class TestCertificate:
    def test_json_round_trip(self, ring_cert, tmp_path):
        ring_cert.save(tmp_path / "c.json")
        back = IssCertificate.load(tmp_path / "c.json")
        for k in ("P", "Phi", "Y", "G2", "K", "F"):
            np.testing.assert_array_equal(getattr(back, k), getattr(ring_cert, k))
        assert (back.kappa, back.mu, back.alpha1, back.alpha2, back.rho) == \
            (ring_cert.kappa, ring_cert.mu, ring_cert.alpha1, ring_cert.alpha2, ring_cert.rho)
        assert back.terms == ring_cert.terms

    def test_timing_not_serialised(self, ring_cert):
        assert "solve_time" in ring_cert.meta
        assert "solve_time" not in ring_cert.to_dict()["meta"]

    def test_read_only(self, ring_cert):
        with pytest.raises(ValueError):
            ring_cert.P[0, 0] = 1.0

    def test_with_coupling(self, ring_cert):
        D = np.hstack([5e-4 * ANTI] * 9)
        c = ring_cert.with_coupling(D)
        assert c.rho == pytest.approx(9 * 25e-8, rel=1e-12)
        assert c.mu == ring_cert.mu
        np.testing.assert_array_equal(c.P, ring_cert.P)

    def test_reused_certificate_validates(self, ring10, ring_data, ring_cert):
        D = np.hstack([5e-4 * ANTI] * 9)
        rep = validate_certificate(ring_cert.with_coupling(D), ring_data, ring10.coupling_matrix(0), coupling=D)
        assert rep.passed, rep.failures

    def test_lyapunov_value(self, ring_cert):
        x = np.array([1.0, -2.0])
        assert ring_cert.V(x) == pytest.approx(x @ ring_cert.P @ x)


class TestGrid:
    def test_first_accepted(self, ring10, ring_data):
        seen = []

        def accept(c):
            seen.append(c.kappa)
            return c.kappa >= 1.0

        res = synthesize_grid(ring_data, ring10.coupling_matrix(0), [0.5, 1.0, 2.0], [1.0], accept=accept)
        assert res.cert.kappa == 1.0
        assert seen == [0.5, 1.0]
        assert [a[2] for a in res.attempts] == ["rejected by acceptance test", "accepted"]

    def test_infeasible_points_skipped(self, ring10, ring_data):
        res = synthesize_grid(ring_data, ring10.coupling_matrix(0), [1e6, 1.0], [1.0])
        assert res.cert.kappa == 1.0
        assert "dissipation-lmi" in res.attempts[0][2]

    def test_nothing_accepted(self, ring10, ring_data):
        res = synthesize_grid(ring_data, ring10.coupling_matrix(0), [1.0], [1.0], accept=lambda c: False)
        assert res.cert is None
