import dataclasses
import json

import numpy as np
import pytest

from ddism.ism import IsmController
from ddism.model import benchmark_network
from ddism.sim import (SimConfig, TrajectoryLog, check_step, decay_check, equivalent_control_error, initial_state,
                       monte_carlo_iss, simulate, upper_envelope, verify_gas, verify_sliding, write_summary)


@pytest.fixture(scope="module")
def loop(ring10, ring_cert, ring_ism):
    return ring10, [ring_cert] * 10, [ring_ism] * 10


def _run(loop, **kw):
    net, certs, isms = loop
    base = dict(horizon=0.5, x0_box=5.0, seed=3)
    base.update(kw)
    return simulate(net, certs, isms, SimConfig(**base))


@pytest.fixture(scope="module")
def ism_log(loop):
    return _run(loop, horizon=1.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(h=0.0), dict(horizon=-1.0), dict(scheme="rk45"),
                                    dict(controllers="pid"), dict(log_every=0), dict(backend="gpu")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)

    def test_step_limit_from_perturbation(self, ring10):
        # 20 sin(100 t) has period 2 pi / 100; h must not exceed a fiftieth of it
        check_step(ring10, SimConfig(h=1e-3))
        with pytest.raises(ValueError):
            check_step(ring10, SimConfig(h=2e-3))
        check_step(ring10, SimConfig(h=2e-3, perturbation=False))

    def test_step_limit_from_sampling(self, ring10):
        with pytest.raises(ValueError):
            check_step(ring10, SimConfig(h=1e-3, tau=1e-3))
        check_step(ring10, SimConfig(h=1e-3, tau=1e-3, enforce_step=False))

    def test_initial_state(self, ring10):
        x0 = initial_state(ring10, SimConfig(x0_box=100.0, seed=1))
        assert x0.shape == (20,) and np.abs(x0).max() <= 100.0
        x = tuple(np.arange(20.0))
        np.testing.assert_array_equal(initial_state(ring10, SimConfig(x0=x)), x)


class TestBackends:
    @pytest.mark.parametrize("controllers,perturbation", [("iss_plus_ism", True), ("iss_only", True),
                                                          ("iss_only", False), ("none", False)])
    def test_compiled_matches_numpy(self, loop, controllers, perturbation):
        kw = dict(horizon=0.1, controllers=controllers, perturbation=perturbation, x0_box=1.0)
        a = _run(loop, backend="numpy", **kw)
        b = _run(loop, backend="compiled", **kw)
        assert b.meta["backend"] == "compiled"
        for k in ("x", "sigma", "u_star", "u_ism", "gamma"):
            np.testing.assert_allclose(getattr(b, k), getattr(a, k), rtol=1e-10, atol=1e-12)

    def test_compiled_needs_homogeneous(self):
        from ddism.model import NetworkModel, SubsystemModel
        net = benchmark_network("ring", 3)
        s = net.subsystems[0]
        other = SubsystemModel(2.0 * s.A, s.B, s.dictionary, s.perturbation)
        mixed = NetworkModel([s, other, s], net.topology)
        with pytest.raises(ValueError, match="compiled"):
            simulate(mixed, None, None, SimConfig(horizon=0.01, controllers="none", backend="compiled"))


class TestIntegration:
    def test_deterministic(self, loop):
        a, b = _run(loop, horizon=0.2), _run(loop, horizon=0.2)
        for k in TrajectoryLog._ARRAYS:
            assert np.array_equal(getattr(a, k), getattr(b, k))

    def test_step_halving(self, loop):
        kw = dict(controllers="iss_only", perturbation=False, horizon=1.0, x0_box=5.0)
        a = _run(loop, h=1e-3, **kw)
        b = _run(loop, h=5e-4, log_every=2, **kw)
        np.testing.assert_array_equal(a.t, b.t)
        assert np.abs(a.x - b.x).max() <= 1e-4 * np.abs(b.x).max()

    def test_lyapunov_column(self, ism_log, ring_cert):
        X = ism_log.x.reshape(len(ism_log.t), 10, 2)
        V = np.einsum("kgi,ij,kgj->k", X, ring_cert.P, X)
        np.testing.assert_allclose(ism_log.V, V, rtol=1e-13)

    def test_sliding_variable_starts_at_zero(self, ism_log):
        assert np.all(ism_log.sigma[0] == 0.0)

    def test_open_loop_diverges(self, loop):
        log = _run(loop, controllers="none", perturbation=False, horizon=5.0, x0_box=5.0)
        assert log.diverged and "not stabilising" in log.message
        rep = verify_gas(log)
        assert not rep.passed

    def test_log_every(self, loop):
        log = _run(loop, horizon=0.1, log_every=10)
        assert len(log.t) == 101 and log.h_log == pytest.approx(1e-3)


class TestVerification:
    def test_sliding_inside_band(self, ism_log, ring_ism):
        rep = verify_sliding(ism_log, ring_ism.band)
        assert rep.passed and rep.sigma_at_start == 0.0

    def test_gain_below_bound_leaves_band(self, loop, ring_ism):
        net, certs, _ = loop
        weak = IsmController(ring_ism.C, 0.5 * ring_ism.gamma_sup, ring_ism.B_hat, ring_ism.gamma_sup)
        assert not weak.admissible
        log = simulate(net, certs, [weak] * 10, SimConfig(horizon=0.3, x0_box=5.0, seed=3))
        assert not verify_sliding(log, weak.band).passed

    def test_equivalent_control(self, ism_log):
        # the averaged discontinuous input reproduces -gamma
        assert equivalent_control_error(ism_log, 20.0, window=63) <= 0.05

    def test_gas_on_synthetic_decay(self):
        t = np.linspace(0, 10, 1001)
        log = _synthetic(t, np.exp(-t)[:, None] * np.array([3.0, 4.0]))
        rep = verify_gas(log)
        assert rep.passed and rep.shrink == pytest.approx(np.exp(-10), rel=1e-9)
        assert rep.decay_exponent == pytest.approx(1.0, rel=1e-6)

    def test_gas_rejects_persistent_oscillation(self):
        t = np.linspace(0, 10, 1001)
        x = 1e-3 * np.sin(50 * t)[:, None] * np.ones(2)
        x[0] = [100.0, 0.0]
        rep = verify_gas(_synthetic(t, x), residual_floor=0.0)
        assert rep.shrink < 1e-2 and not rep.passed and "persistent" in rep.reason

    def test_upper_envelope(self):
        np.testing.assert_array_equal(upper_envelope(np.array([1.0, 3.0, 2.0, 0.5])), [3.0, 3.0, 2.0, 0.5])

    def test_decay_on_exact_exponential(self):
        t = np.linspace(0, 5, 501)
        log = _synthetic(t, np.zeros((501, 2)), V=np.exp(-2.0 * t))
        assert decay_check(log, 2.0).fraction == 1.0
        assert decay_check(log, 2.5).fraction < 0.5

    def test_decay_needs_lyapunov(self):
        t = np.linspace(0, 1, 11)
        with pytest.raises(ValueError):
            decay_check(_synthetic(t, np.zeros((11, 2))), 1.0)

    def test_nominal_decay(self, loop, ring_cert):
        log = _run(loop, controllers="iss_only", perturbation=False, horizon=1.0)
        assert decay_check(log, ring_cert.kappa).passed


class TestMonteCarlo:
    def test_certificate_holds_far_out(self, ring_cert, ring10):
        rep = monte_carlo_iss(ring_cert, ring_cert.rep(), ring10.coupling_matrix(0), n_mc=5000, radius=1e6)
        assert rep.passed and rep.n_violations == 0

    def test_inflated_rate_is_caught(self, ring_cert, ring10):
        bad = dataclasses.replace(ring_cert, kappa=10 * ring_cert.kappa)
        rep = monte_carlo_iss(bad, ring_cert.rep(), ring10.coupling_matrix(0), n_mc=5000, radius=10.0)
        assert not rep.passed and rep.n_violations > 0 and rep.worst.shape[1] == 2

    def test_seeded(self, ring_cert, ring10):
        a = monte_carlo_iss(ring_cert, ring_cert.rep(), ring10.coupling_matrix(0), n_mc=500, seed=4)
        b = monte_carlo_iss(ring_cert, ring_cert.rep(), ring10.coupling_matrix(0), n_mc=500, seed=4)
        assert a.max_violation == b.max_violation


class TestOutput:
    def test_round_trip(self, ism_log, tmp_path):
        ism_log.save(tmp_path / "log.npz")
        back = TrajectoryLog.load(tmp_path / "log.npz")
        for k in TrajectoryLog._ARRAYS:
            assert np.array_equal(getattr(back, k), getattr(ism_log, k))
        np.testing.assert_array_equal(back.V, ism_log.V)
        assert back.config == ism_log.config and back.eps_bl == ism_log.eps_bl

    def test_csv(self, ism_log, tmp_path):
        ism_log.write_csv(tmp_path / "log.csv", downsample=100)
        rows = (tmp_path / "log.csv").read_text().splitlines()
        assert len(rows) == 1 + len(ism_log.t[::100])
        assert rows[0].startswith("t,")

    def test_summary_json(self, ism_log, tmp_path):
        write_summary(tmp_path / "s.json", gas=verify_gas(ism_log), sliding=verify_sliding(ism_log, 2e-3))
        s = json.loads((tmp_path / "s.json").read_text())
        assert set(s) >= {"gas", "sliding"} and isinstance(s["gas"]["passed"], bool)


def _synthetic(t, x, V=None):
    k = len(t)
    z = np.zeros((k, 1))
    return TrajectoryLog(t, x, z, z, z, z, z, V, np.array([0, 2]), np.array([0, 1]), SimConfig(),
                         float(t[1] - t[0]), None)
