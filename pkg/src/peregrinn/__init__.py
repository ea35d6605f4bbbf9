"""Exact verification of ReLU networks by conditioning a slack-relaxed LP."""
from .encoder import ConditioningDecision, encode, indeterminate_neurons, layer_weights
from .geometry import Box, Hyperplane, Polytope
from .interval import PhaseMap, infer_phases, symbolic_analysis
from .lp import LinearProgram, Status, extract_iis, solve
from .nn import AffineMap, Layer, Network, Phase, fold_affine, forward, load_network
from .properties import (ClosedLoopSpec, RobustnessSpec, check_closed_loop, check_robustness,
                         closed_loop_queries, grid_workspace, robustness_queries)
from .query import CoupledConstraints, VerificationQuery
from .search import Verdict, VerdictStatus, VerifierConfig, validate_witness, verify

__version__ = "0.1.0"
