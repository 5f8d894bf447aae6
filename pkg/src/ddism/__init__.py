"""Data-driven ISS certificates, integral sliding-mode control and small-gain
composition for networks of nonlinear subsystems.

Typical use::

    from ddism import benchmark_network, ExperimentConfig, collect_trajectories
    from ddism import SynthesisOptions, synthesize_iss, compose

    net = benchmark_network("ring", 10)
    data = collect_trajectories(net, 0, ExperimentConfig())
    cert = synthesize_iss(data, net.coupling_matrix(0), SynthesisOptions(kappa=1.0, mu=1.0))
"""
from .composition import NetworkCertificate, compose, network_clf, smallgain_from_constants
from .experiment import (DataMatrices, ExperimentConfig, check_richness, closed_loop_rep,
                         collect_trajectories, estimate_B, solve_Q)
from .ism import IsmController, design_ism, design_theta
from .model import (Dictionary, NetworkModel, SubsystemModel, benchmark_dictionary, benchmark_network,
                    benchmark_subsystem, build_topology)
from .sim import SimConfig, TrajectoryLog, monte_carlo_iss, simulate, verify_gas, verify_sliding
from .synthesis import (IssCertificate, SynthesisInfeasible, SynthesisOptions, iss_bounds, synthesize_iss,
                        validate_certificate)

__version__ = "0.1.0"

__all__ = [
    "NetworkCertificate", "compose", "network_clf", "smallgain_from_constants",
    "DataMatrices", "ExperimentConfig", "check_richness", "closed_loop_rep", "collect_trajectories",
    "estimate_B", "solve_Q",
    "IsmController", "design_ism", "design_theta",
    "Dictionary", "NetworkModel", "SubsystemModel", "benchmark_dictionary", "benchmark_network",
    "benchmark_subsystem", "build_topology",
    "SimConfig", "TrajectoryLog", "monte_carlo_iss", "simulate", "verify_gas", "verify_sliding",
    "IssCertificate", "SynthesisInfeasible", "SynthesisOptions", "iss_bounds", "synthesize_iss",
    "validate_certificate",
]
