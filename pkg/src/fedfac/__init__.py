"""Factor-analysis-assisted split of neural network parameters for personalized federated learning."""

__version__ = "0.1.0"

from .numerics import ContractError, NumericalFailure, derive_rng, sym_eig
from .datagen import ClientDataset, SynthConfig, TrueModel, generate_synthetic_federation
from .model import ModelConfig, SplitParams, forward, init_params, local_gradients, run_local_epochs
from .facsplit import FactorConfig, Partition, TauSpec, decompose, estimate_loadings
from .federation import FederationConfig, RoundRecord, RunResult, run_experiment
from .analysis import knn_entropy, neuron_entropy_report, stability_fraction, weighted_accuracy
