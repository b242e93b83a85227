"""Classifier-free training of the concept-conditioned denoiser.

Training always conditions on the complete concept annotation (mask all
ones); per item, with probability p_uncond the concept contribution is
replaced by the zero vector, which doubles as the unconditional branch at
sampling time. Images are shifted to [-1, 1] internally.
"""

from dataclasses import dataclass

import numpy as np
import torch

from ..util import derive_seed, load_pickle, numpy_to_state, save_pickle, state_to_numpy
from .embedding import ConceptEmbeddingTable
from .schedule import NoiseSchedule, linear_schedule
from .unet import ConditionalDenoiser, DenoiserConfig

CHECKPOINT_FORMAT = "conceptguide-diffusion"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class DiffusionTrainConfig:
    mode: str = "positive"
    T: int = 200
    beta1: float = 1e-4
    betaT: float = 0.2
    cond_width: int = 128
    base_channels: int = 48
    channel_mults: tuple = (1, 2, 2)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 3e-4
    p_uncond: float = 0.1
    seed: int = 0

    def to_dict(self):
        d = self.__dict__.copy()
        d["channel_mults"] = list(self.channel_mults)
        return d


# Paper-scale settings, kept available as a named configuration.
PAPER_SCALE = dict(T=2000, epochs=1500, lr=3e-4, cond_width=128)


def to_model_space(images: torch.Tensor) -> torch.Tensor:
    return images * 2.0 - 1.0


def from_model_space(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def training_step(model, batch, table, schedule: NoiseSchedule, p_uncond: float, rng: torch.Generator):
    """One noise-prediction MSE step; differentiable in model and table.

    batch: (images (B,H,W,3) float in [0,1], concepts (B,K) bits).
    """
    images, concepts = batch
    if len(images) == 0:
        raise ValueError("empty batch")
    x0 = to_model_space(torch.as_tensor(np.asarray(images), dtype=torch.get_default_dtype()))
    x0 = x0.permute(0, 3, 1, 2)
    c = torch.as_tensor(np.asarray(concepts))
    B = x0.shape[0]

    t = torch.randint(1, schedule.T + 1, (B,), generator=rng)
    noise = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    abar = torch.as_tensor(schedule.alpha_bars, dtype=x0.dtype)[t - 1]
    x_t = abar.sqrt().view(-1, 1, 1, 1) * x0 + (1 - abar).sqrt().view(-1, 1, 1, 1) * noise

    mask = torch.ones_like(c)
    vec = table.select_batch(c, mask)
    keep = (torch.rand(B, generator=rng, dtype=x0.dtype) >= p_uncond).to(x0.dtype)
    vec = vec * keep[:, None]

    pred = model(x_t, t.to(x0.dtype), vec)
    return ((pred - noise) ** 2).mean()


def _batches(n, batch_size, rng):
    order = torch.randperm(n, generator=rng).tolist()
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_diffusion(dataset, cfg: DiffusionTrainConfig, log=None):
    """Train one denoiser + embedding table; returns (model, table, schedule, history)."""
    train = dataset.subset("train") if any(ex.split != "train" for ex in dataset.examples) else dataset
    if len(train) == 0:
        raise ValueError("no training examples")
    images = train.images_array()
    concepts = train.concepts_array()
    K = dataset.K

    schedule = linear_schedule(cfg.T, cfg.beta1, cfg.betaT)
    den_cfg = DenoiserConfig(
        image_size=dataset.image_size[0],
        base_channels=cfg.base_channels,
        channel_mults=cfg.channel_mults,
        cond_width=cfg.cond_width,
        param_seed=derive_seed(cfg.seed, "denoiser-init"),
    )
    model = ConditionalDenoiser(den_cfg)
    table = ConceptEmbeddingTable(K, cfg.cond_width, cfg.mode, seed=derive_seed(cfg.seed, "table-init"))

    opt = torch.optim.Adam(list(model.parameters()) + list(table.parameters()), lr=cfg.lr)
    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "train"))

    history = []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            opt.zero_grad()
            loss = training_step(model, (images[idx], concepts[idx]), table, schedule, cfg.p_uncond, rng)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
        if log and (epoch % max(1, cfg.epochs // 20) == 0 or epoch == 1):
            log(f"epoch {epoch}/{cfg.epochs} loss {history[-1]['loss']:.4f}")
    return model, table, schedule, history


def save_diffusion_checkpoint(path, model, table, schedule, concept_names, train_cfg=None, history=None):
    table_arrays = (
        {"E1": table.E1.detach().numpy().copy(), "E2": table.E2.detach().numpy().copy()}
        if table.mode == "double"
        else {"E": table.E.detach().numpy().copy()}
    )
    save_pickle(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "format_version": FORMAT_VERSION,
            "denoiser_config": model.cfg.to_dict(),
            "denoiser_state": state_to_numpy(model),
            "embedding_mode": table.mode,
            "embedding": table_arrays,
            "schedule": {"T": schedule.T, "beta1": float(schedule.betas[0]), "betaT": float(schedule.betas[-1])},
            "concept_names": list(concept_names),
            "train_config": train_cfg.to_dict() if train_cfg else None,
            "history": history,
        },
    )


def load_diffusion_checkpoint(path):
    doc = load_pickle(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a diffusion checkpoint")
    if doc["format_version"] > FORMAT_VERSION:
        raise ValueError(f"checkpoint format {doc['format_version']} too new")
    den_cfg = DenoiserConfig.from_dict(doc["denoiser_config"])
    model = ConditionalDenoiser(den_cfg)
    numpy_to_state(model, doc["denoiser_state"])
    model.eval()

    mode = doc["embedding_mode"]
    table = ConceptEmbeddingTable.from_arrays(mode, **doc["embedding"])
    K = len(doc["concept_names"])
    if table.K != K:
        raise ValueError(f"embedding rows {table.K} != concept count {K}")
    if table.D != den_cfg.cond_width:
        raise ValueError(f"embedding width {table.D} != denoiser conditioning width {den_cfg.cond_width}")

    sch = doc["schedule"]
    schedule = linear_schedule(sch["T"], sch["beta1"], sch["betaT"])
    return model, table, schedule, doc
