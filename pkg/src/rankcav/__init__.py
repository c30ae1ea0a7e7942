from rankcav.cav import Cav, ConceptActivations, collect_activations, learn_cavs, sample_negatives, train_cav
from rankcav.exceptions import (
    ArtifactError,
    ConfigError,
    InfeasibleSpecError,
    RankcavError,
    ShapeError,
    TrainingError,
    UndefinedMetricError,
)
from rankcav.nn import LinearHead, MlpEncoder, forward, init_encoder
from rankcav.rnc import RncBatch, RncConfig, rnc_loss
from rankcav.synth import Concept, GroundTruthModel, Scene, build_concept_sets, build_task_dataset, stratified_split
from rankcav.tcav import IgConfig, Method, align_instances, sensitivities, tcav_score
from rankcav.training import TrainConfig, TrainedPipeline, train_pipeline

__all__ = [
    "ArtifactError",
    "Cav",
    "Concept",
    "ConceptActivations",
    "ConfigError",
    "GroundTruthModel",
    "IgConfig",
    "InfeasibleSpecError",
    "LinearHead",
    "Method",
    "MlpEncoder",
    "RankcavError",
    "RncBatch",
    "RncConfig",
    "Scene",
    "ShapeError",
    "TrainConfig",
    "TrainedPipeline",
    "TrainingError",
    "UndefinedMetricError",
    "align_instances",
    "build_concept_sets",
    "build_task_dataset",
    "collect_activations",
    "forward",
    "init_encoder",
    "learn_cavs",
    "rnc_loss",
    "sample_negatives",
    "sensitivities",
    "stratified_split",
    "tcav_score",
    "train_cav",
    "train_pipeline",
]
