"""Concept-guided ProtoPNet: fixed prototype allocation over 2K concept
classes, staged training (warm-up, joint, periodic push + convex last layer).
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..util import derive_seed, load_pickle, numpy_to_state, save_pickle, state_to_numpy
from .core import (
    BackboneConfig,
    ConvBackbone,
    PrototypeBank,
    activation_from_distance,
    cluster_cost,
    concept_logits,
    images_to_tensor,
    init_last_layer,
    patch_grid,
    project_prototypes,
    separation_cost,
    squared_distances,
)

CHECKPOINT_FORMAT = "conceptguide-ppnet"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PPNetTrainConfig:
    prototypes_per_class: int = 10
    lambda1: float = 0.8
    lambda2: float = -0.08
    lambda_last: float = 1e-4
    epochs: int = 50
    warmup_epochs: int = 5
    push_every: int = 10
    lr_prototypes: float = 3e-3
    lr_backbone: float = 1e-4
    lr_last_layer: float = 1e-2
    batch_size: int = 64
    last_layer_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be > 0")
        if self.lambda2 >= 0:
            raise ValueError("lambda2 must be < 0 (it multiplies the negated separation cost)")
        if self.epochs % self.push_every:
            raise ValueError("push_every must divide the epoch budget")

    def to_dict(self):
        return dict(self.__dict__)


class PPNetModel(nn.Module):
    """Backbone + prototype layer + K-logit last layer."""

    def __init__(self, backbone: ConvBackbone, m_p: int, assignment: np.ndarray, K: int,
                 eps_sim: float = 1e-4, proto_seed: int = 0):
        super().__init__()
        self.backbone = backbone
        gen = torch.Generator().manual_seed(proto_seed)
        self.prototypes = nn.Parameter(torch.rand(m_p, backbone.cfg.feature_depth, generator=gen))
        self.assignment = np.asarray(assignment, dtype=np.int64)
        self.K = K
        self.eps_sim = eps_sim
        self.last_layer = nn.Parameter(init_last_layer(self.assignment, K))
        self.provenance = None

    def bank(self) -> PrototypeBank:
        return PrototypeBank(
            prototypes=self.prototypes,
            assignment=self.assignment,
            K=self.K,
            eps_sim=self.eps_sim,
            provenance=self.provenance,
        )

    def min_patch_distances(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, m) min-over-patches squared distances."""
        patches = patch_grid(self.backbone(images))
        return squared_distances(patches, self.prototypes).min(dim=1).values

    def scores(self, dmin: torch.Tensor) -> torch.Tensor:
        return activation_from_distance(dmin, self.eps_sim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Concept logits for a batch of (B, 3, H, W) images."""
        return concept_logits(self.scores(self.min_patch_distances(images)), self.last_layer)

    def predict_concepts(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """(N, H, W, 3) float images -> (N, K) probabilities."""
        probs = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                logits = self(images_to_tensor(images[i : i + batch_size]))
                probs.append(torch.sigmoid(logits).numpy())
        return np.concatenate(probs, axis=0)


def build_ppnet(K: int, backbone_cfg: BackboneConfig, cfg: PPNetTrainConfig) -> PPNetModel:
    """m_p = 2 * K * prototypes_per_class prototypes, round-robin assignment."""
    if K < 1:
        raise ValueError("K must be >= 1")
    m_p = 2 * K * cfg.prototypes_per_class
    assignment = np.arange(m_p) % (2 * K)
    backbone = ConvBackbone(backbone_cfg)
    return PPNetModel(
        backbone, m_p, assignment, K, proto_seed=derive_seed(cfg.seed, "prototypes-init")
    )


def ppnet_total_loss(model: PPNetModel, images: torch.Tensor, concepts: torch.Tensor,
                     lambda1: float, lambda2: float):
    """BCE + lambda1 * Clst + lambda2 * Sep; returns (total, parts dict)."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    dmin = model.min_patch_distances(images)
    logits = concept_logits(model.scores(dmin), model.last_layer)
    bce = F.binary_cross_entropy_with_logits(logits, concepts.to(logits.dtype))
    members = model.bank().group_members()
    clst = cluster_cost(dmin, members, concepts)
    sep = separation_cost(dmin, members, concepts)
    total = bce + lambda1 * clst + lambda2 * sep
    parts = {
        "bce": float(bce.detach()),
        "clst": float(clst.detach()),
        "sep": float(sep.detach()),
        "total": float(total.detach()),
    }
    return total, parts


def _soft_threshold(x: torch.Tensor, level: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * (x.abs() - level).clamp(min=0.0)


def optimize_last_layer(model, scores: torch.Tensor, concepts: torch.Tensor, lambda_last: float,
                        steps: int = 200):
    """Convex last-layer stage on frozen scores.

    Proximal gradient (BCE gradient step + soft-threshold of off-support
    weights) with backtracking, so the objective is nonincreasing by
    construction; any increase beyond 1e-6 aborts with diagnostics.
    """
    W = model.last_layer.detach().clone()
    support = (W != 0.0)
    targets = concepts.to(W.dtype)

    def objective(weights):
        bce = F.binary_cross_entropy_with_logits(scores @ weights.T, targets)
        return bce + lambda_last * weights[~support].abs().sum()

    def bce_grad(weights):
        w = weights.detach().requires_grad_(True)
        bce = F.binary_cross_entropy_with_logits(scores @ w.T, targets)
        (grad,) = torch.autograd.grad(bce, w)
        return bce.detach(), grad

    lr = 1.0
    prev = float(objective(W))
    trace = [prev]
    for _ in range(steps):
        _, grad = bce_grad(W)
        while True:
            cand = W - lr * grad
            cand = torch.where(support, cand, _soft_threshold(cand, torch.tensor(lr * lambda_last, dtype=W.dtype)))
            new = float(objective(cand))
            if new <= prev + 1e-12 or lr < 1e-12:
                break
            lr *= 0.5
        if lr < 1e-12:
            break
        W = cand
        lr *= 1.2
        if new > prev + 1e-6:
            raise RuntimeError(
                f"last-layer stage diverged: loss rose from {prev:.8f} to {new:.8f}"
            )
        prev = new
        trace.append(new)
    with torch.no_grad():
        model.last_layer.copy_(W)
    return trace


def _epoch_batches(n, batch_size, rng):
    order = torch.randperm(n, generator=rng).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def cached_scores(model, images: np.ndarray, batch_size: int = 128) -> torch.Tensor:
    """Prototype activations with frozen features, for the convex stage."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            dmin = model.min_patch_distances(images_to_tensor(images[i : i + batch_size]))
            outs.append(model.scores(dmin))
    return torch.cat(outs, dim=0)


def train_ppnet(model: PPNetModel, dataset, cfg: PPNetTrainConfig, log=None):
    """Staged training; returns per-epoch history. Deterministic given seed."""
    train = dataset.subset("train") if any(ex.split != "train" for ex in dataset.examples) else dataset
    images = train.images_array()
    concepts_np = train.concepts_array()
    n = len(train)
    if n == 0:
        raise ValueError("no training examples")

    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "ppnet-train"))
    warm_opt = torch.optim.Adam(
        [
            {"params": [model.prototypes], "lr": cfg.lr_prototypes},
            {"params": model.backbone.addon_parameters(), "lr": cfg.lr_prototypes},
        ]
    )
    joint_opt = torch.optim.Adam(
        [
            {"params": [model.prototypes], "lr": cfg.lr_prototypes},
            {"params": model.backbone.addon_parameters(), "lr": cfg.lr_prototypes},
            {"params": model.backbone.backbone_parameters(), "lr": cfg.lr_backbone},
        ]
    )

    history = []
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        opt = warm_opt if warm else joint_opt
        sums = {"bce": 0.0, "clst": 0.0, "sep": 0.0, "total": 0.0}
        batches = _epoch_batches(n, cfg.batch_size, rng)
        for idx in batches:
            opt.zero_grad()
            total, parts = ppnet_total_loss(
                model,
                images_to_tensor(images[idx]),
                torch.as_tensor(concepts_np[idx]),
                cfg.lambda1,
                cfg.lambda2,
            )
            total.backward()
            opt.step()
            for key in sums:
                sums[key] += parts[key]
        record = {k: v / len(batches) for k, v in sums.items()}
        record.update(epoch=epoch, stage="warmup" if warm else "joint", pushed=False)

        if epoch % cfg.push_every == 0:
            pushed = project_prototypes(model.bank(), train, model.backbone)
            with torch.no_grad():
                model.prototypes.copy_(pushed.prototypes)
            model.provenance = pushed.provenance
            scores = cached_scores(model, images)
            optimize_last_layer(model, scores, torch.as_tensor(concepts_np), cfg.lambda_last,
                                steps=cfg.last_layer_steps)
            record["pushed"] = True
        history.append(record)
        if log:
            log(
                f"epoch {epoch}/{cfg.epochs} [{record['stage']}] total {record['total']:.4f} "
                f"bce {record['bce']:.4f}" + (" (push)" if record["pushed"] else "")
            )
    return history


def save_ppnet_checkpoint(path, model: PPNetModel, cfg, concept_names, history=None,
                          split_fingerprint=None):
    save_pickle(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "format_version": FORMAT_VERSION,
            "backbone_config": dict(model.backbone.cfg.__dict__),
            "state": state_to_numpy(model),
            "assignment": model.assignment.copy(),
            "K": model.K,
            "eps_sim": model.eps_sim,
            "provenance": model.provenance,
            "train_config": cfg.to_dict() if cfg else None,
            "concept_names": list(concept_names),
            "history": history,
            "split_fingerprint": split_fingerprint,
        },
    )


def load_ppnet_checkpoint(path):
    doc = load_pickle(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a ppnet checkpoint")
    backbone = ConvBackbone(BackboneConfig(**doc["backbone_config"]))
    model = PPNetModel(
        backbone,
        m_p=len(doc["assignment"]),
        assignment=doc["assignment"],
        K=doc["K"],
        eps_sim=doc["eps_sim"],
    )
    numpy_to_state(model, doc["state"])
    model.provenance = doc["provenance"]
    model.eval()
    return model, doc
