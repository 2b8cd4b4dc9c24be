"""Desk-scale progressive cross transformer for bias-suppressed
representation learning, with its exact subspace-decomposition oracle and
the grouped-verification fairness protocols."""

from .backbone import BackboneConfig, EmbeddingPair, PctModel, StagePair, model_from_checkpoint
from .ct import CtConfig, CtOutput, CtWeights, FeatureMap, ct_forward
from .errors import (
    ConfigError,
    ContractError,
    NumericError,
    PctError,
    ProtocolError,
    ShapeError,
    SingularError,
)
from .fairness import (
    GroupMetrics,
    GroupedPairs,
    ave_std,
    bias_degree,
    cosine_similarity,
    evaluate_grouped,
    global_threshold,
    group_fpr,
    roc_points,
    verification_accuracy,
)
from .harness import RunConfig, RunReport, run_ablation, train_model
from .losses import (
    ClassifierHead,
    LossWeights,
    MarginConfig,
    RaceHead,
    face_loss,
    margin_logits,
    race_loss,
    total_loss,
)
from .subspace import (
    Decomposition,
    LinearSignalModel,
    decompose,
    oblique_projector,
    orth_complement_projector,
    sample,
)
from .synthdata import DatasetSpec, SynthDataset, generate, load_dataset, write_dataset
from .tensor import OptimizerConfig, Param, Tensor, backward, sgd_step

__all__ = [name for name in dir() if not name.startswith("_")]
