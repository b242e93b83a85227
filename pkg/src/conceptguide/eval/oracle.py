"""Black-box concept oracle: the prototype nets' backbone plus a linear head.

Architecture-matched to the interpretable models so the accuracy gap
isolates what the prototype constraint costs, not capacity differences.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..proto.core import BackboneConfig, ConvBackbone, images_to_tensor
from ..util import derive_seed, load_pickle, numpy_to_state, save_pickle, state_to_numpy

CHECKPOINT_FORMAT = "conceptguide-oracle"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class OracleTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    feature_depth: int = 128
    seed: int = 0

    def to_dict(self):
        return dict(self.__dict__)


class OracleModel(nn.Module):
    def __init__(self, K: int, image_size: int, feature_depth: int = 128, param_seed: int = 0):
        super().__init__()
        self.backbone = ConvBackbone(BackboneConfig(feature_depth=feature_depth, param_seed=param_seed))
        self.K = K
        grid = image_size // 8  # three stride-2 convs
        torch.manual_seed(derive_seed(param_seed, "oracle-head"))
        self.head = nn.Linear(feature_depth * grid * grid, K)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        feats = self.backbone(images)
        return self.head(feats.flatten(1))

    def predict_concepts(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        probs = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                logits = self(images_to_tensor(images[i : i + batch_size]))
                probs.append(torch.sigmoid(logits).numpy())
        return np.concatenate(probs, axis=0)


def train_oracle(dataset, cfg: OracleTrainConfig, log=None):
    """Plain multi-label BCE training; deterministic given seed."""
    train = dataset.subset("train") if any(ex.split != "train" for ex in dataset.examples) else dataset
    if len(train) == 0:
        raise ValueError("no training examples")
    images = train.images_array()
    concepts = train.concepts_array()

    model = OracleModel(
        dataset.K, dataset.image_size[0], cfg.feature_depth, param_seed=derive_seed(cfg.seed, "oracle")
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "oracle-train"))

    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(len(train), generator=rng).tolist()
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            opt.zero_grad()
            logits = model(images_to_tensor(images[idx]))
            loss = F.binary_cross_entropy_with_logits(
                logits, torch.as_tensor(concepts[idx], dtype=logits.dtype)
            )
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history.append({"epoch": epoch, "bce": float(np.mean(losses))})
        if log and (epoch % 10 == 0 or epoch == 1):
            log(f"epoch {epoch}/{cfg.epochs} bce {history[-1]['bce']:.4f}")
    model.eval()
    return model, history


def save_oracle_checkpoint(path, model: OracleModel, cfg, concept_names, image_size,
                           history=None, split_fingerprint=None):
    save_pickle(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "format_version": FORMAT_VERSION,
            "K": model.K,
            "image_size": image_size,
            "feature_depth": model.backbone.cfg.feature_depth,
            "param_seed": model.backbone.cfg.param_seed,
            "state": state_to_numpy(model),
            "train_config": cfg.to_dict() if cfg else None,
            "concept_names": list(concept_names),
            "history": history,
            "split_fingerprint": split_fingerprint,
        },
    )


def load_oracle_checkpoint(path):
    doc = load_pickle(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an oracle checkpoint")
    model = OracleModel(doc["K"], doc["image_size"][0], doc["feature_depth"], doc["param_seed"])
    numpy_to_state(model, doc["state"])
    model.eval()
    return model, doc
