from .schedule import NoiseSchedule, linear_schedule, q_sample
from .embedding import ConceptEmbeddingTable, GuidedCondition, select_concept_embedding
from .unet import ConditionalDenoiser, DenoiserConfig
from .train import DiffusionTrainConfig, load_diffusion_checkpoint, save_diffusion_checkpoint, train_diffusion, training_step
from .sample import render_grid, sample

__all__ = [
    "ConceptEmbeddingTable",
    "ConditionalDenoiser",
    "DenoiserConfig",
    "DiffusionTrainConfig",
    "GuidedCondition",
    "NoiseSchedule",
    "linear_schedule",
    "load_diffusion_checkpoint",
    "q_sample",
    "render_grid",
    "sample",
    "save_diffusion_checkpoint",
    "select_concept_embedding",
    "train_diffusion",
    "training_step",
]
