"""Exemplar-free class-incremental learning engine and benchmark harness."""

__version__ = "0.1.0"

from .datahub import (Dataset, LabeledImage, ScenarioSpec, TaskSequence, augment,
                      load_dataset, make_scenario, synth_dataset)
from .features import FeatureMatrix, ingest_features
from .fusion import late_fuse, single_predict, softmax
from .harness import MetricsReport, RunConfig, accuracy, avg_acc, perf_drop, run_scenario
from .projector import (PrototypeState, accumulate, init_projection, project,
                        score, select_lambda, solve_prototypes)
from .rpca import DecomposedImage, RpcaModel, pcp_oracle, rpca_apply, rpca_train

__all__ = [
    "Dataset", "LabeledImage", "ScenarioSpec", "TaskSequence", "augment",
    "load_dataset", "make_scenario", "synth_dataset",
    "FeatureMatrix", "ingest_features",
    "late_fuse", "single_predict", "softmax",
    "MetricsReport", "RunConfig", "accuracy", "avg_acc", "perf_drop", "run_scenario",
    "PrototypeState", "accumulate", "init_projection", "project", "score",
    "select_lambda", "solve_prototypes",
    "DecomposedImage", "RpcaModel", "pcp_oracle", "rpca_apply", "rpca_train",
]
