"""Decentralized gradient-tracking simulator with lossless noise-difference privacy."""

from .attack import AttackConfig, ReconstructionResult, dlg_attack, mse
from .data import Dataset, PartitionSpec, generate_synthetic, load_csv, partition
from .estimator import DFLClassifier
from .model import ModelSpec
from .numerics import LaplaceSpec, SeededRng
from .privacy import PrivacyParams, budget_dp, budget_lppa, empirical_sensitivity
from .protocol import (
    AggregationRule, SimulationConfig, dsgt_round, exchange_noise, frozen_gradient_round,
    init_clients, noise_difference, run_simulation,
)
from .topology import Digraph, WeightMatrix, build_topology, sinkhorn_knopp

__version__ = "0.1.0"
