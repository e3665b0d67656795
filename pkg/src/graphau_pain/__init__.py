"""Graph-based AU representation model for pain intensity estimation."""

from .facs import (
    PainCategory3,
    PainCategory4,
    categorize_pain_3,
    categorize_pain_4,
    compute_pspi,
    to_occurrence,
)
from .model import ForwardOutput, GraphAUPain, ModelConfig, forward
from .training import Checkpoint, TrainConfig, pretrain_au, train_pain
from .evaluation import MetricsReport, evaluate_model

__version__ = "0.1.0"
