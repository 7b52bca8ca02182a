"""Differentially private adaptive-batch SpiderBoost for second-order
stationary points, with a verification and benchmarking harness."""

from .calibrate import Calibration, Constants, alpha_bound, derive_params
from .objective import Dataset, DomainViolation, ProblemSpec, generate_dataset, make_problem
from .oracles import InsufficientData, OraclePool, adaptive_batch_size, oracle1, oracle2
from .spider import Trace, run_spider, select_best_candidate
from .tree_mech import TreeNoise, calibrate_sigma, init_tree, node_intervals, tree_noise
from .verify import SospReport, check_sosp, min_eigenvalue

__version__ = "0.1.0"
