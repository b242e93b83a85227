from .metrics import concept_accuracy
from .oracle import OracleModel, OracleTrainConfig, load_oracle_checkpoint, save_oracle_checkpoint, train_oracle
from .protodataset import build_prototype_dataset, write_prototype_dataset
from .fidelity import generation_fidelity
from .gradcheck import gradcheck_suite
from .report import build_report, render_report

__all__ = [
    "OracleModel",
    "OracleTrainConfig",
    "build_prototype_dataset",
    "build_report",
    "concept_accuracy",
    "generation_fidelity",
    "gradcheck_suite",
    "load_oracle_checkpoint",
    "render_report",
    "save_oracle_checkpoint",
    "train_oracle",
    "write_prototype_dataset",
]
