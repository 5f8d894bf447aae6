import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddism.experiment import ClosedLoopRep
from ddism.ism import (IsmController, IsmDesignError, design_C, design_ism, design_theta, initial_transient,
                       ism_control, sliding_variable, theta_bound, transient_rhs, unit_vector_batch)
from ddism.model import Dictionary, benchmark_dictionary

B_TRUE = np.array([[0.0], [1.0]])
vec = arrays(np.float64, 3, elements=st.floats(-1e3, 1e3, allow_nan=False))


class TestSlidingOutput:
    def test_default_is_transpose(self):
        np.testing.assert_array_equal(design_C(B_TRUE), [[0.0, 1.0]])

    def test_override_accepted(self):
        np.testing.assert_array_equal(design_C(B_TRUE, [[1.0, 1.0]]), [[1.0, 1.0]])

    def test_identity(self):
        np.testing.assert_array_equal(design_C(np.eye(2)), np.eye(2))

    @pytest.mark.parametrize("C", [[[-1.0, 0.0]], [[0.0, -1.0]], [[1.0, 0.0]]])
    def test_override_rejected(self, C):
        with pytest.raises(IsmDesignError):
            design_C(B_TRUE, C)

    def test_shape_checked(self):
        with pytest.raises(IsmDesignError):
            design_C(B_TRUE, [[1.0, 1.0, 1.0]])

    def test_zero_input_matrix(self):
        with pytest.raises(IsmDesignError):
            design_C(np.zeros((2, 1)))

    def test_non_symmetric_product(self):
        # only the symmetric part has to be positive definite
        B = np.array([[1.0, 3.0], [0.0, 1.0]])
        C = np.eye(2)
        assert np.linalg.eigvalsh(0.5 * (B + B.T)).min() < 0
        with pytest.raises(IsmDesignError):
            design_C(B, C)
        B = np.array([[1.0, 0.5], [0.0, 1.0]])
        design_C(B, C)


class TestGain:
    def test_benchmark(self):
        C = design_C(B_TRUE)
        assert theta_bound(C, B_TRUE, 20.0) == 20.0
        assert design_theta(C, B_TRUE, 20.0) == 20.1

    def test_unperturbed(self):
        assert design_theta(np.eye(2), np.eye(2), 0.0, margin=0.1) == 0.1

    def test_eigenvalue_ratio(self):
        assert design_theta(np.eye(2), np.diag([1.0, 4.0]), 20.0) == pytest.approx(80.1, rel=1e-15)

    def test_symmetric_part_convention(self):
        CB = np.array([[2.0, 1.0], [-1.0, 2.0]])      # symmetric part 2 I
        assert theta_bound(np.eye(2), CB, 5.0) == pytest.approx(5.0, rel=1e-15)

    def test_margin_positive(self):
        with pytest.raises(IsmDesignError):
            design_theta(np.eye(1), np.eye(1), 1.0, margin=0.0)

    def test_estimated_input_matrix(self, ring_ism):
        assert ring_ism.Theta == pytest.approx(20.1, abs=1e-9)
        np.testing.assert_allclose(ring_ism.C, [[0.0, 1.0]], atol=1e-9)
        assert ring_ism.admissible

    @given(st.floats(0.0, 1e3), st.floats(1e-3, 10.0))
    def test_strictly_above_bound(self, gamma, margin):
        # default C = B_hat^T makes C B_hat = diag(1, 9)
        ctrl = design_ism(np.diag([1.0, 3.0]), gamma, margin=margin)
        assert ctrl.Theta > ctrl.bound
        assert ctrl.bound == pytest.approx(9 * gamma, rel=1e-12)


class TestLaw:
    @pytest.fixture(params=["boundary_layer", "ideal_sign"])
    def ctrl(self, request):
        return IsmController(np.eye(3), 20.1, np.eye(3), 20.0, mode=request.param, eps_bl=1e-3)

    def test_zero_sigma(self, ctrl):
        np.testing.assert_array_equal(ism_control(ctrl, np.zeros(3)), np.zeros(3))

    @given(vec)
    def test_unit_vector_magnitude(self, sigma):
        ctrl = IsmController(np.eye(3), 20.1, np.eye(3), 20.0, mode="ideal_sign")
        u = ism_control(ctrl, sigma)
        if np.linalg.norm(sigma) > 0:
            assert np.linalg.norm(u) == pytest.approx(20.1, rel=1e-12)
            assert u @ sigma < 0

    def test_outside_layer(self, ctrl):
        s = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(ism_control(ctrl, s), -20.1 * s / np.linalg.norm(s), rtol=1e-15)

    def test_inside_layer(self):
        ctrl = IsmController(np.eye(1), 20.1, np.eye(1), 20.0, eps_bl=1e-3)
        np.testing.assert_allclose(ism_control(ctrl, [5e-4]), [-20.1 * 0.5], rtol=1e-15)

    @given(arrays(np.float64, (6, 2), elements=st.floats(-10, 10)))
    def test_batch_matches(self, S):
        for mode in ("boundary_layer", "ideal_sign"):
            ctrl = IsmController(np.eye(2), 7.0, np.eye(2), 5.0, mode=mode, eps_bl=0.5)
            ref = np.array([ism_control(ctrl, s) for s in S])
            out = unit_vector_batch(S, np.full(6, 7.0), mode, np.full(6, 0.5))
            np.testing.assert_allclose(out, ref, rtol=1e-14, atol=0)

    def test_band(self):
        ctrl = IsmController(np.eye(1), 20.1, np.eye(1), 20.0, eps_bl=1e-3)
        assert ctrl.band == pytest.approx(1e-3 * (1 + 20 / 20.1))
        assert ctrl.band < 2e-3

    def test_step_sensitive_flag(self):
        assert IsmController(np.eye(1), 1.0, np.eye(1), 0.5, mode="ideal_sign").step_sensitive
        assert not IsmController(np.eye(1), 1.0, np.eye(1), 0.5).step_sensitive

    @pytest.mark.parametrize("kw", [dict(Theta=0.0), dict(mode="bang"), dict(eps_bl=0.0)])
    def test_invalid(self, kw):
        args = dict(C=np.eye(1), Theta=1.0, B_hat=np.eye(1), gamma_sup=0.5)
        args.update(kw)
        with pytest.raises(IsmDesignError):
            IsmController(**args)

    def test_round_trip(self, ring_ism, tmp_path):
        back = IsmController.from_dict(ring_ism.to_dict())
        np.testing.assert_array_equal(back.C, ring_ism.C)
        assert (back.Theta, back.mode, back.eps_bl, back.gamma_sup) == \
            (ring_ism.Theta, ring_ism.mode, ring_ism.eps_bl, ring_ism.gamma_sup)


class TestTransient:
    def test_sigma_zero_at_start(self):
        C = np.array([[1.0, 1.0]])
        x0 = np.array([3.7, -1.2])
        assert sliding_variable(C, x0, initial_transient(C, x0))[0] == 0.0

    def test_origin(self):
        d = Dictionary.from_terms(2, ["x1^2", "sin(x1*x2)"])
        rep = ClosedLoopRep(np.arange(8.0).reshape(2, 4), d)
        np.testing.assert_array_equal(transient_rhs([[1.0, 1.0]], rep, np.zeros(2)), [0.0])

    @given(arrays(np.float64, 2, elements=st.floats(-5, 5)))
    def test_coupling_only(self, w):
        d = Dictionary.from_terms(2, ["x1^2"])
        rep = ClosedLoopRep(np.ones((2, 3)), d)
        C = np.array([[0.0, 1.0]])
        D = 0.01 * np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(transient_rhs(C, rep, np.zeros(2), w, D), -C @ D @ w, rtol=1e-15)

    def test_oracle_identity(self, ring10, ring_cert, ring_ism, true_AB):
        A, B = true_AB
        rep = ring_cert.rep()
        D = ring10.coupling_matrix(0)
        dic = benchmark_dictionary()
        rng = np.random.default_rng(8)
        for _ in range(100):
            x, w = rng.uniform(-5, 5, 2), rng.uniform(-5, 5, 2)
            Z = dic.evaluate(x)
            truth = -ring_ism.C @ (A @ Z + B @ (ring_cert.K @ Z) + D @ w)
            assert np.abs(transient_rhs(ring_ism.C, rep, x, w, D) - truth).max() <= 1e-8 * (1 + np.abs(Z).sum())
