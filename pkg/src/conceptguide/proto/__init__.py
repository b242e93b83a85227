from .core import (
    BackboneConfig,
    ConvBackbone,
    PrototypeBank,
    SimilarityConfig,
    activation_from_distance,
    cluster_cost,
    concept_logits,
    extract_patches,
    init_last_layer,
    predict_probabilities,
    project_prototypes,
    receptive_field_box,
    separation_cost,
    similarity,
)
from .ppnet import PPNetModel, PPNetTrainConfig, build_ppnet, optimize_last_layer, ppnet_total_loss, train_ppnet
from .ppool import (
    PPoolModel,
    PPoolTrainConfig,
    build_ppool,
    gumbel_softmax,
    orth_cross,
    orth_within,
    ppool_total_loss,
    project_ppool,
    tau_at_epoch,
    train_ppool,
)

__all__ = [
    "BackboneConfig",
    "ConvBackbone",
    "PPNetModel",
    "PPNetTrainConfig",
    "PPoolModel",
    "PPoolTrainConfig",
    "PrototypeBank",
    "SimilarityConfig",
    "activation_from_distance",
    "build_ppnet",
    "build_ppool",
    "cluster_cost",
    "concept_logits",
    "extract_patches",
    "gumbel_softmax",
    "init_last_layer",
    "optimize_last_layer",
    "orth_cross",
    "orth_within",
    "ppnet_total_loss",
    "ppool_total_loss",
    "predict_probabilities",
    "project_ppool",
    "project_prototypes",
    "receptive_field_box",
    "separation_cost",
    "similarity",
    "tau_at_epoch",
    "train_ppnet",
    "train_ppool",
]
