"""BPR and adversarial personalized ranking (APR) on matrix factorization,
with gradient-magnitude instrumentation and popularity-bias metrics."""

from .data import (
    Dataset,
    Interaction,
    PopularityPartition,
    TrainTestSplit,
    density,
    generate_synthetic,
    head_probability,
    load_interactions,
    load_split,
    partition_items,
    save_split,
    temporal_leave_one_out,
)
from .errors import AprLabError, DataError, NumericalError
from .model import FactorModel, ModelConfig, init_model, load_model, save_model, score, score_diff, top_k
from .trainers import (
    Perturbation,
    TrainSchedule,
    Triplet,
    adversarial_score_diff,
    apr_step,
    bpr_loss,
    bpr_step,
    fgsm_perturbation,
    sample_epoch,
    train,
)

__version__ = "0.1.0"
