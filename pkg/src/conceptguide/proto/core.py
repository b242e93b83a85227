"""Shared machinery for both concept-guided prototype networks.

Concept classes: concept k splits into a positive and a negative class,
indexed 2k+1 and 2k, giving 2K classes total. The cluster cost pulls some
patch of each image toward a prototype of the image's own class per concept;
the separation cost pushes all patches away from the opposite class.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


def class_index(k: int, value: int) -> int:
    return 2 * k + int(value)


def class_name(concept_names, idx: int) -> str:
    return f"{concept_names[idx // 2]}_{'pos' if idx % 2 else 'neg'}"


@dataclass(frozen=True)
class SimilarityConfig:
    eps_sim: float = 1e-4


@dataclass(frozen=True)
class BackboneConfig:
    preset: str = "small-conv"
    feature_depth: int = 128
    param_seed: int = 0


# (kernel, stride, padding) of each conv in the small backbone; the add-on
# 1x1 convs do not change the receptive field.
_SMALL_CONV_LAYERS = ((3, 1, 1), (3, 2, 1), (3, 2, 1), (3, 2, 1))


class ConvBackbone(nn.Module):
    """Small convolutional feature extractor f followed by add-on layers.

    Input images get two coordinate channels so patch embeddings can encode
    absolute position (needed for location concepts under max-pooling).
    Output is a (B, D_f, H', W') grid with values in (0, 1).
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.preset != "small-conv":
            raise ValueError(f"unknown backbone preset {cfg.preset!r}")
        self.cfg = cfg
        torch.manual_seed(cfg.param_seed)
        widths = [32, 64, 96, 96]
        layers = []
        in_ch = 5
        for (k, s, p), out_ch in zip(_SMALL_CONV_LAYERS, widths):
            layers += [nn.Conv2d(in_ch, out_ch, k, stride=s, padding=p), nn.GroupNorm(8, out_ch), nn.SiLU()]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.add_on = nn.Sequential(
            nn.Conv2d(in_ch, cfg.feature_depth, 1),
            nn.SiLU(),
            nn.Conv2d(cfg.feature_depth, cfg.feature_depth, 1),
            nn.Sigmoid(),
        )

    @staticmethod
    def with_coords(x: torch.Tensor) -> torch.Tensor:
        B, _, H, W = x.shape
        rr = torch.linspace(-1.0, 1.0, H, dtype=x.dtype).view(1, 1, H, 1).expand(B, 1, H, W)
        cc = torch.linspace(-1.0, 1.0, W, dtype=x.dtype).view(1, 1, 1, W).expand(B, 1, H, W)
        return torch.cat([x, rr, cc], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, H, W) in [0, 1] -> (B, D_f, H', W')."""
        return self.add_on(self.features(self.with_coords(x)))

    def backbone_parameters(self):
        return self.features.parameters()

    def addon_parameters(self):
        return self.add_on.parameters()


def receptive_field_box(row: int, col: int, image_size: int):
    """Input-pixel rectangle (r0, c0, r1, c1), end-exclusive, seen by a patch."""
    r, j, start = 1.0, 1.0, 0.5
    for k, s, p in _SMALL_CONV_LAYERS:
        r = r + (k - 1) * j
        start = start + ((k - 1) / 2 - p) * j
        j = j * s
    cy, cx = start + row * j, start + col * j
    r0 = int(max(0, np.floor(cy - r / 2)))
    c0 = int(max(0, np.floor(cx - r / 2)))
    r1 = int(min(image_size, np.ceil(cy + r / 2)))
    c1 = int(min(image_size, np.ceil(cx + r / 2)))
    return r0, c0, r1, c1


def patch_grid(features: torch.Tensor) -> torch.Tensor:
    """(B, D, H', W') -> (B, H'*W', D) in row-major patch order."""
    B, D, H, W = features.shape
    return features.permute(0, 2, 3, 1).reshape(B, H * W, D)


def extract_patches(features):
    """One H' x W' x D grid -> list of (vector, row, col), row-major."""
    grid = np.asarray(features)
    if grid.ndim != 3:
        raise ValueError("expected an H' x W' x D feature grid")
    H, W, _ = grid.shape
    return [(grid[r, c], r, c) for r in range(H) for c in range(W)]


def squared_distances(patches: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """(B, P, D) x (m, D) -> (B, P, m) squared Euclidean distances."""
    if patches.shape[-1] != prototypes.shape[-1]:
        raise ValueError(
            f"patch dim {patches.shape[-1]} != prototype dim {prototypes.shape[-1]}"
        )
    z2 = (patches**2).sum(-1, keepdim=True)
    p2 = (prototypes**2).sum(-1).view(1, 1, -1)
    cross = patches @ prototypes.T
    return (z2 + p2 - 2.0 * cross).clamp(min=0.0)


def activation_from_distance(d2, eps_sim: float = 1e-4):
    """ProtoPNet log-activation log((d^2 + 1) / (d^2 + eps))."""
    if torch.is_tensor(d2):
        return torch.log((d2 + 1.0) / (d2 + eps_sim))
    return np.log((np.asarray(d2) + 1.0) / (np.asarray(d2) + eps_sim))


def similarity(patch, prototype, cfg: SimilarityConfig = SimilarityConfig()):
    """Single (patch, prototype) pair -> (squared distance, activation)."""
    patch = np.asarray(patch, dtype=np.float64)
    prototype = np.asarray(prototype, dtype=np.float64)
    if patch.shape != prototype.shape:
        raise ValueError(f"dimension mismatch {patch.shape} vs {prototype.shape}")
    d2 = float(((patch - prototype) ** 2).sum())
    return d2, float(np.log((d2 + 1.0) / (d2 + cfg.eps_sim)))


@dataclass
class PrototypeBank:
    """m_p prototype vectors with their concept-class assignment.

    assignment[j] is the class index 2k+v of prototype j (fixed for the
    ProtoPNet variant; derived from slot argmaxes for the pool variant).
    provenance[j] is (image_id, row, col) once prototypes were pushed.
    """

    prototypes: torch.Tensor
    assignment: np.ndarray
    K: int
    eps_sim: float = 1e-4
    provenance: Optional[list] = None

    @property
    def m_p(self) -> int:
        return self.prototypes.shape[0]

    def group_members(self) -> list:
        return [np.flatnonzero(self.assignment == g) for g in range(2 * self.K)]

    def require_group(self, g: int, members) -> None:
        if len(members[g]) == 0:
            raise ValueError(f"no prototypes assigned to concept class {g}")


def group_min_distances(dmin_patches: torch.Tensor, members) -> torch.Tensor:
    """(B, m) per-prototype min patch distances -> (B, 2K) per-class minima.

    Empty groups yield +inf columns; callers decide whether that is an error.
    """
    B = dmin_patches.shape[0]
    cols = []
    inf = torch.full((B,), float("inf"), dtype=dmin_patches.dtype)
    for idx in members:
        if len(idx) == 0:
            cols.append(inf)
        else:
            cols.append(dmin_patches[:, torch.as_tensor(idx, dtype=torch.long)].min(dim=1).values)
    return torch.stack(cols, dim=1)


def _class_gather(group_min: torch.Tensor, concepts: torch.Tensor, own: bool) -> torch.Tensor:
    B, K = concepts.shape
    k_idx = torch.arange(K).unsqueeze(0).expand(B, K)
    value = concepts if own else 1 - concepts
    return group_min.gather(1, 2 * k_idx + value.long())


def cluster_cost(dmin_patches: torch.Tensor, members, concepts: torch.Tensor) -> torch.Tensor:
    """Mean over images and concepts of the own-class double minimum."""
    group_min = group_min_distances(dmin_patches, members)
    own = _class_gather(group_min, concepts, own=True)
    if torch.isinf(own).any():
        raise ValueError("empty prototype group for a needed concept class")
    return own.mean()


def separation_cost(dmin_patches: torch.Tensor, members, concepts: torch.Tensor) -> torch.Tensor:
    """Negated mean of the opposite-class double minimum (always <= 0)."""
    group_min = group_min_distances(dmin_patches, members)
    opp = _class_gather(group_min, concepts, own=False)
    if torch.isinf(opp).any():
        raise ValueError("empty prototype group for a needed opposite concept class")
    return -opp.mean()


def init_last_layer(assignment: np.ndarray, K: int, n_columns: Optional[int] = None) -> torch.Tensor:
    """(K, m) weights: +1 on a concept's positive class columns, -1 on its
    negative class columns, 0 elsewhere."""
    m = len(assignment) if n_columns is None else n_columns
    W = torch.zeros(K, m)
    for j, g in enumerate(assignment):
        k, v = divmod(int(g), 2)
        W[k, j] = 1.0 if v == 1 else -1.0
    return W


def concept_logits(scores: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """(B, m) prototype/slot scores -> (B, K) concept logits."""
    return scores @ W.T


def predict_probabilities(logits):
    if torch.is_tensor(logits):
        return torch.sigmoid(logits)
    return 1.0 / (1.0 + np.exp(-np.asarray(logits)))


def images_to_tensor(images: np.ndarray, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(images), dtype=dtype or torch.get_default_dtype())
    return t.permute(0, 3, 1, 2)


def compute_feature_grids(backbone: ConvBackbone, images: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    """Feature grids for a full image array, batched, no gradients."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(backbone(images_to_tensor(images[i : i + batch_size])))
    return torch.cat(outs, dim=0)


def project_prototypes(bank: PrototypeBank, dataset, backbone: ConvBackbone, eligible_images=None):
    """Push each prototype onto its nearest patch among class-eligible images.

    Eligibility: images whose concept value matches the prototype's class
    (positive class 2k+1 needs c_k = 1, negative 2k needs c_k = 0), unless an
    explicit eligibility map {j: [image indices]} is given (pool variant).
    Ties break toward the lexicographically smallest (image id, row, col).
    Returns a new bank with provenance set; raises if a prototype has no
    eligible image.
    """
    examples = sorted(dataset.examples, key=lambda ex: ex.id)
    images = np.stack([ex.image for ex in examples])
    concepts = np.stack([ex.c for ex in examples])
    grids = compute_feature_grids(backbone, images)
    B, D, Hp, Wp = grids.shape
    # float64 distances: the matmul form cancels catastrophically in float32,
    # which would blur the push fixed point and the tie order.
    patches = patch_grid(grids).double()  # (B, P, D) row-major

    new_P = bank.prototypes.detach().clone()
    provenance = [None] * bank.m_p
    d2_all = None
    for j in range(bank.m_p):
        if eligible_images is None:
            k, v = divmod(int(bank.assignment[j]), 2)
            rows = np.flatnonzero(concepts[:, k] == v)
        else:
            rows = np.asarray(eligible_images[j])
        if len(rows) == 0:
            raise ValueError(f"prototype {j}: no eligible training image for its concept class")
        if d2_all is None:
            d2_all = squared_distances(patches, bank.prototypes.detach().double())  # (B, P, m)
        d2 = d2_all[torch.as_tensor(rows, dtype=torch.long), :, j]  # (n_elig, P)
        flat = d2.reshape(-1)
        best = int(torch.argmin(flat))  # first minimum = lexicographic smallest
        img_i, patch_i = divmod(best, d2.shape[1])
        row, col = divmod(patch_i, Wp)
        src = int(rows[img_i])
        new_P[j] = patches[src, patch_i]
        provenance[j] = {
            "image_id": examples[src].id,
            "row": int(row),
            "col": int(col),
            "distance": float(np.sqrt(float(flat[best]))),
        }
    return replace(bank, prototypes=new_P, provenance=provenance)
