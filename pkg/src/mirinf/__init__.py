"""Training-data influence via test-to-train forward passes.

Forward-INF scores a training source by how much its loss moves after a few
gradient-ascent steps on the test set. The package also provides retraining
oracles, influence functions (exact and LiSSA), TracIn, and an experiment
harness.
"""

from .data import CorruptionLog, Dataset, inject_leak, inject_mislabels, load_dataset
from .errors import ConfigError, MirinfError, NumericalError
from .estimators import (
    ForwardInfConfig,
    InfluenceReport,
    LissaConfig,
    forward_inf,
    if_lissa,
    if_pairwise,
    influence_function,
    self_influence,
    tracin,
    tracin_pairwise,
)
from .models import Mlp, MultinomialLogistic
from .oracles import OracleConfig, SourcePartition, build_noisy_groups

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CorruptionLog", "Dataset", "ForwardInfConfig", "InfluenceReport",
    "LissaConfig", "MirinfError", "Mlp", "MultinomialLogistic", "NumericalError", "OracleConfig",
    "SourcePartition", "build_noisy_groups", "forward_inf", "if_lissa", "if_pairwise",
    "influence_function", "inject_leak", "inject_mislabels", "load_dataset", "self_influence",
    "tracin", "tracin_pairwise",
]
