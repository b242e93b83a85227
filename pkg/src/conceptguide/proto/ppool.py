"""Concept-guided ProtoPool: a shared prototype pool assigned to S slots per
concept class through Gumbel-Softmax, with two orthogonality penalties
(within-class slots and across each concept's positive/negative classes).
"""

import warnings
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

CHECKPOINT_FORMAT = "conceptguide-ppool"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PPoolTrainConfig:
    m_p: int = 1000
    slots: int = 10
    lambda1: float = 0.8
    lambda2: float = -0.08
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda_last: float = 1e-4
    epochs: int = 100
    warmup_epochs: int = 10
    tau_initial: float = 1.0
    tau_final: float = 0.001
    tau_decay_epochs: int = 30
    lr_prototypes: float = 3e-3
    lr_backbone: float = 1e-4
    lr_last_layer: float = 1e-2
    batch_size: int = 64
    last_layer_steps: int = 200
    feature_depth: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.lambda3 < 0 or self.lambda4 < 0:
            raise ValueError("lambda3 and lambda4 must be >= 0")
        if self.tau_initial <= 0 or self.tau_final <= 0:
            raise ValueError("temperatures must be positive")

    def to_dict(self):
        return dict(self.__dict__)


# Desk preset shrinks the pool and slot count for laptop-class runtimes.
DESK_PRESET = dict(m_p=200, slots=4, feature_depth=96)


def tau_at_epoch(cfg: PPoolTrainConfig, epoch: int) -> float:
    """Geometric decay from tau_initial (epoch 1) to tau_final exactly at
    epoch tau_decay_epochs; constant afterwards."""
    if epoch >= cfg.tau_decay_epochs:
        return cfg.tau_final
    frac = (epoch - 1) / (cfg.tau_decay_epochs - 1)
    return float(cfg.tau_initial * (cfg.tau_final / cfg.tau_initial) ** frac)


def gumbel_softmax(q, tau: float, rng: torch.Generator = None, noise=None):
    """Relaxed one-hot sample: softmax((q + eta) / tau), eta ~ Gumbel(0, 1).

    Pass explicit `noise` to fix eta (noise=0 gives a plain softmax of q/tau).
    Differentiable in q.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    q = q if torch.is_tensor(q) else torch.as_tensor(np.asarray(q), dtype=torch.get_default_dtype())
    if noise is None:
        u = torch.rand(q.shape, generator=rng, dtype=q.dtype)
        noise = -torch.log(-torch.log(u.clamp(min=1e-12)).clamp(min=1e-12))
    else:
        noise = torch.as_tensor(np.asarray(noise), dtype=q.dtype)
    return torch.softmax((q + noise) / tau, dim=-1)


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    num = a @ b.T
    denom = a.norm(dim=1, keepdim=True) * b.norm(dim=1, keepdim=True).T + 1e-12
    return num / denom


def orth_within(q_class) -> torch.Tensor:
    """Sum over slot pairs i<j of cosine similarity, for one class's slots."""
    q_class = q_class if torch.is_tensor(q_class) else torch.as_tensor(np.asarray(q_class), dtype=torch.get_default_dtype())
    S = q_class.shape[0]
    if S < 2:
        return torch.zeros((), dtype=q_class.dtype)
    cos = _cosine_matrix(q_class, q_class)
    iu = torch.triu_indices(S, S, offset=1)
    return cos[iu[0], iu[1]].sum()


def orth_cross(q_pos, q_neg) -> torch.Tensor:
    """Sum over the full S x S grid of cosine similarities between one
    concept's positive-class and negative-class slot vectors."""
    q_pos = q_pos if torch.is_tensor(q_pos) else torch.as_tensor(np.asarray(q_pos), dtype=torch.get_default_dtype())
    q_neg = q_neg if torch.is_tensor(q_neg) else torch.as_tensor(np.asarray(q_neg), dtype=torch.get_default_dtype())
    return _cosine_matrix(q_pos, q_neg).sum()


def slot_scores(sims: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """(B, m) per-prototype activations, (2K, S, m) assignment -> (B, 2K*S)."""
    return torch.einsum("bm,gsm->bgs", sims, y).reshape(sims.shape[0], -1)


class PPoolModel(nn.Module):
    def __init__(self, backbone: ConvBackbone, m_p: int, slots: int, K: int,
                 eps_sim: float = 1e-4, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        gen = torch.Generator().manual_seed(seed)
        self.prototypes = nn.Parameter(torch.rand(m_p, backbone.cfg.feature_depth, generator=gen))
        self.q = nn.Parameter(torch.randn(2 * K, slots, m_p, generator=gen))
        self.K = K
        self.slots = slots
        self.eps_sim = eps_sim
        slot_classes = np.repeat(np.arange(2 * K), slots)
        self.last_layer = nn.Parameter(init_last_layer(slot_classes, K, n_columns=2 * K * slots))
        self.provenance = None
        self.tau = 1.0

    @property
    def m_p(self) -> int:
        return self.prototypes.shape[0]

    def hard_assignment(self) -> np.ndarray:
        """(2K, S) argmax of q: the noise-free slot-to-prototype assignment."""
        return self.q.detach().argmax(dim=-1).numpy()

    def members_from(self, slot_protos: np.ndarray) -> list:
        """Per-class unique prototype sets induced by a (2K, S) assignment."""
        return [np.unique(slot_protos[g]) for g in range(2 * self.K)]

    def prototype_activations(self, images: torch.Tensor) -> torch.Tensor:
        patches = patch_grid(self.backbone(images))
        dmin = squared_distances(patches, self.prototypes).min(dim=1).values
        return dmin, activation_from_distance(dmin, self.eps_sim)

    def eval_logits(self, images: torch.Tensor) -> torch.Tensor:
        """Deterministic logits using the hard (argmax of q) assignment."""
        _, sims = self.prototype_activations(images)
        y = F.one_hot(self.q.detach().argmax(dim=-1), num_classes=self.m_p).to(sims.dtype)
        return concept_logits(slot_scores(sims, y), self.last_layer)

    def predict_concepts(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        probs = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                logits = self.eval_logits(images_to_tensor(images[i : i + batch_size]))
                probs.append(torch.sigmoid(logits).numpy())
        return np.concatenate(probs, axis=0)


def build_ppool(K: int, cfg: PPoolTrainConfig, backbone_seed: int = None) -> PPoolModel:
    if K < 1:
        raise ValueError("K must be >= 1")
    backbone = ConvBackbone(
        BackboneConfig(
            feature_depth=cfg.feature_depth,
            param_seed=derive_seed(cfg.seed, "ppool-backbone") if backbone_seed is None else backbone_seed,
        )
    )
    return PPoolModel(backbone, cfg.m_p, cfg.slots, K, seed=derive_seed(cfg.seed, "ppool-init"))


def ppool_total_loss(model: PPoolModel, images: torch.Tensor, concepts: torch.Tensor,
                     cfg: PPoolTrainConfig, tau: float, rng: torch.Generator):
    """BCE + l1 Clst + l2 Sep + l3 Orth_p + l4 Orth_c over one batch.

    Cluster/separation membership comes from the argmax of the sampled
    relaxed assignment; gradients reach q only through the soft slot scores
    and the orthogonality terms.
    """
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    dmin, sims = model.prototype_activations(images)
    y = gumbel_softmax(model.q, tau, rng=rng)

    logits = concept_logits(slot_scores(sims, y), model.last_layer)
    bce = F.binary_cross_entropy_with_logits(logits, concepts.to(logits.dtype))

    members = model.members_from(y.detach().argmax(dim=-1).numpy())
    clst = cluster_cost(dmin, members, concepts)
    sep = separation_cost(dmin, members, concepts)

    orth_p = sum(orth_within(y[g]) for g in range(2 * model.K))
    orth_c = sum(orth_cross(y[2 * k + 1], y[2 * k]) for k in range(model.K))

    total = bce + cfg.lambda1 * clst + cfg.lambda2 * sep + cfg.lambda3 * orth_p + cfg.lambda4 * orth_c
    parts = {
        "bce": float(bce.detach()),
        "clst": float(clst.detach()),
        "sep": float(sep.detach()),
        "orth_p": float(orth_p.detach()),
        "orth_c": float(orth_c.detach()),
        "total": float(total.detach()),
    }
    return total, parts


def project_ppool(model: PPoolModel, dataset):
    """Push prototypes used by at least one slot; warn about orphans.

    A prototype's eligible images are the union, over classes whose hard
    assignment includes it, of the images matching that class.
    """
    slot_protos = model.hard_assignment()
    examples = sorted(dataset.examples, key=lambda ex: ex.id)
    concepts = np.stack([ex.c for ex in examples])

    eligible = {}
    used = sorted({int(j) for row in slot_protos for j in row})
    orphans = [j for j in range(model.m_p) if j not in used]
    if orphans:
        warnings.warn(f"{len(orphans)} prototypes assigned to no class; excluded from push")
    for j in used:
        classes = sorted({g for g in range(2 * model.K) if j in slot_protos[g]})
        rows = set()
        for g in classes:
            k, v = divmod(g, 2)
            rows.update(np.flatnonzero(concepts[:, k] == v).tolist())
        eligible[j] = sorted(rows)

    # Assignment table for the push: used prototypes keep one representative
    # class for bookkeeping; the eligibility map drives the candidate set.
    representative = np.zeros(model.m_p, dtype=np.int64)
    for j in used:
        for g in range(2 * model.K):
            if j in slot_protos[g]:
                representative[j] = g
                break

    sub_bank = PrototypeBank(
        prototypes=model.prototypes[torch.as_tensor(used, dtype=torch.long)],
        assignment=representative[used],
        K=model.K,
        eps_sim=model.eps_sim,
    )
    pushed = project_prototypes(
        sub_bank, dataset, model.backbone, eligible_images=[eligible[j] for j in used]
    )
    with torch.no_grad():
        for slot, j in enumerate(used):
            model.prototypes[j] = pushed.prototypes[slot]
    provenance = [None] * model.m_p
    for slot, j in enumerate(used):
        provenance[j] = pushed.provenance[slot]
    model.provenance = provenance
    return model


def optimize_ppool_last_layer(model: PPoolModel, dataset, lambda_last: float, steps: int = 200):
    """Convex BCE + off-support L1 on the slot-to-logit weights."""
    from .ppnet import optimize_last_layer as _optimize

    train = dataset.subset("train") if any(ex.split != "train" for ex in dataset.examples) else dataset
    images = train.images_array()
    concepts = torch.as_tensor(train.concepts_array())
    y = F.one_hot(torch.as_tensor(model.hard_assignment()), num_classes=model.m_p).to(
        model.prototypes.dtype
    )
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), 128):
            _, sims = model.prototype_activations(images_to_tensor(images[i : i + 128]))
            outs.append(slot_scores(sims, y))
    scores = torch.cat(outs, dim=0)
    return _optimize(model, scores, concepts, lambda_last, steps=steps)


def train_ppool(model: PPoolModel, dataset, cfg: PPoolTrainConfig, log=None):
    """Warm-up (frozen backbone) then joint training with tau decay; one push
    plus convex last-layer optimization at the end. Deterministic given seed."""
    train = dataset.subset("train") if any(ex.split != "train" for ex in dataset.examples) else dataset
    images = train.images_array()
    concepts_np = train.concepts_array()
    n = len(train)
    if n == 0:
        raise ValueError("no training examples")

    rng = torch.Generator().manual_seed(derive_seed(cfg.seed, "ppool-train"))
    warm_opt = torch.optim.Adam(
        [
            {"params": [model.prototypes, model.q], "lr": cfg.lr_prototypes},
            {"params": model.backbone.addon_parameters(), "lr": cfg.lr_prototypes},
        ]
    )
    joint_opt = torch.optim.Adam(
        [
            {"params": [model.prototypes, model.q], "lr": cfg.lr_prototypes},
            {"params": model.backbone.addon_parameters(), "lr": cfg.lr_prototypes},
            {"params": model.backbone.backbone_parameters(), "lr": cfg.lr_backbone},
        ]
    )

    history = []
    for epoch in range(1, cfg.epochs + 1):
        warm = epoch <= cfg.warmup_epochs
        opt = warm_opt if warm else joint_opt
        tau = tau_at_epoch(cfg, epoch)
        model.tau = tau
        sums = None
        order = torch.randperm(n, generator=rng).tolist()
        batches = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for idx in batches:
            opt.zero_grad()
            total, parts = ppool_total_loss(
                model,
                images_to_tensor(images[idx]),
                torch.as_tensor(concepts_np[idx]),
                cfg,
                tau,
                rng,
            )
            total.backward()
            opt.step()
            sums = parts if sums is None else {k: sums[k] + parts[k] for k in sums}
        record = {k: v / len(batches) for k, v in sums.items()}
        record.update(epoch=epoch, stage="warmup" if warm else "joint", tau=tau, pushed=False)
        history.append(record)
        if log:
            log(
                f"epoch {epoch}/{cfg.epochs} [{record['stage']}] tau {tau:.4f} "
                f"total {record['total']:.4f} bce {record['bce']:.4f}"
            )

    project_ppool(model, train)
    optimize_ppool_last_layer(model, train, cfg.lambda_last, steps=cfg.last_layer_steps)
    history[-1]["pushed"] = True
    return history


def save_ppool_checkpoint(path, model: PPoolModel, cfg, concept_names, history=None,
                          split_fingerprint=None):
    save_pickle(
        path,
        {
            "format": CHECKPOINT_FORMAT,
            "format_version": FORMAT_VERSION,
            "backbone_config": dict(model.backbone.cfg.__dict__),
            "state": state_to_numpy(model),
            "K": model.K,
            "slots": model.slots,
            "m_p": model.m_p,
            "eps_sim": model.eps_sim,
            "tau": model.tau,
            "provenance": model.provenance,
            "train_config": cfg.to_dict() if cfg else None,
            "concept_names": list(concept_names),
            "history": history,
            "split_fingerprint": split_fingerprint,
        },
    )


def load_ppool_checkpoint(path):
    doc = load_pickle(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a ppool checkpoint")
    backbone = ConvBackbone(BackboneConfig(**doc["backbone_config"]))
    model = PPoolModel(backbone, doc["m_p"], doc["slots"], doc["K"], eps_sim=doc["eps_sim"])
    numpy_to_state(model, doc["state"])
    model.provenance = doc["provenance"]
    model.tau = doc["tau"]
    model.eval()
    return model, doc
