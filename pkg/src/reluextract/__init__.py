"""Black-box extraction of one-hidden-layer ReLU networks from function queries."""

from .errors import (BudgetError, InconsistencyError, InputError, NumericalError,
                     ProtocolError, ReluExtractError, ResourceError, StageError,
                     TransportError)
from .network import (CriticalPoint, GaussianLine, Network, Neuron, critical_points, evaluate,
                      gaussian_norm_mc, l2_distance_mc, load_network, relu, relu_correlation,
                      restrict, save_network)
from .oracle import InProcessOracle, NoisyOracle, Oracle, OracleServer, QueryLog, WireOracle, serve
from .geometry import (AffineMap, ClosenessParams, Orientation, SignedNeuron, collapse_clump,
                       corner_case_affine, is_close, merge, orientation)
from .extraction import (CandidateSet, ExtractionParams, IntervalProbe, get_bias, get_gradient,
                         get_neurons, sample_gaussian_line, schedule)
from .regression import (RegressionConfig, assemble, constrained_least_squares, draw_dataset,
                         featurize, learn_from_queries)
from .harness import ExperimentConfig, RunReport, generate_target, run_experiment, sweep

__version__ = "0.1.0"
