"""Concept embedding tables and the mask-driven row selection.

Three selection modes turn (concept bits, mask) into one D-vector:

* positive: average the rows of masked concepts that are present.
* opposite: average over all masked concepts, negating rows of absent ones.
* double:   two tables; masked rows come from the first table when the
  concept is present and from the second when absent.

An empty selection (and the unconditional branch during training) is the
zero vector, so "no guidance" and "all concepts masked off" coincide.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

MODES = ("positive", "opposite", "double")


@dataclass(frozen=True)
class GuidedCondition:
    """Concept bits plus the user mask selecting which of them guide."""

    c: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=np.int64)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "mask", mask)
        if c.shape != mask.shape or c.ndim != 1:
            raise ValueError("c and mask must be 1-D and the same length")
        if not (np.isin(c, (0, 1)).all() and np.isin(mask, (0, 1)).all()):
            raise ValueError("c and mask must be binary")

    @property
    def K(self) -> int:
        return len(self.c)

    @classmethod
    def from_pairs(cls, concept_names, pairs) -> "GuidedCondition":
        """Build from {"name": bit} with unnamed concepts masked off."""
        K = len(concept_names)
        c = np.zeros(K, dtype=np.int64)
        mask = np.zeros(K, dtype=np.int64)
        for name, bit in dict(pairs).items():
            if name not in concept_names:
                raise KeyError(f"unknown concept {name!r}")
            idx = list(concept_names).index(name)
            mask[idx] = 1
            c[idx] = int(bit)
        return cls(c=c, mask=mask)


class ConceptEmbeddingTable(nn.Module):
    """Learnable K x D embedding(s); mode decides the selection rule."""

    def __init__(self, K: int, D: int, mode: str, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown embedding mode {mode!r}")
        self.K = K
        self.D = D
        self.mode = mode
        # Unit-scale rows keep the concept signal comparable to the sinusoidal
        # timestep encoding it is summed with.
        gen = torch.Generator().manual_seed(seed)
        if mode == "double":
            self.E1 = nn.Parameter(torch.randn(K, D, generator=gen))
            self.E2 = nn.Parameter(torch.randn(K, D, generator=gen))
        else:
            self.E = nn.Parameter(torch.randn(K, D, generator=gen))

    @classmethod
    def from_arrays(cls, mode: str, E=None, E1=None, E2=None) -> "ConceptEmbeddingTable":
        if mode == "double":
            E1 = torch.as_tensor(np.asarray(E1), dtype=torch.get_default_dtype())
            E2 = torch.as_tensor(np.asarray(E2), dtype=torch.get_default_dtype())
            if E1.shape != E2.shape:
                raise ValueError("E1 and E2 must have the same shape")
            table = cls(E1.shape[0], E1.shape[1], mode)
            with torch.no_grad():
                table.E1.copy_(E1)
                table.E2.copy_(E2)
        else:
            E = torch.as_tensor(np.asarray(E), dtype=torch.get_default_dtype())
            table = cls(E.shape[0], E.shape[1], mode)
            with torch.no_grad():
                table.E.copy_(E)
        return table

    def select_batch(self, c: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Vectorized selection for a batch: (B, K) bits -> (B, D) vectors.

        Implemented as a weighted matmul so unselected rows receive exactly
        zero gradient.
        """
        if c.shape[1] != self.K or mask.shape != c.shape:
            raise ValueError(f"expected (B, {self.K}) c and mask, got {tuple(c.shape)}")
        dtype = self.parameters().__next__().dtype
        c = c.to(dtype)
        mask = mask.to(dtype)
        if self.mode == "positive":
            weights = mask * c
            count = weights.sum(dim=1, keepdim=True)
            vec = weights @ self.E
        elif self.mode == "opposite":
            weights = mask * (2.0 * c - 1.0)
            count = mask.sum(dim=1, keepdim=True)
            vec = weights @ self.E
        else:
            w1 = mask * c
            w2 = mask * (1.0 - c)
            count = mask.sum(dim=1, keepdim=True)
            vec = w1 @ self.E1 + w2 @ self.E2
        return vec / count.clamp(min=1.0)


def select_concept_embedding(table: ConceptEmbeddingTable, cond: GuidedCondition) -> np.ndarray:
    """Selection rule for a single condition; returns the averaged D-vector."""
    if cond.K != table.K:
        raise ValueError(f"condition has K={cond.K}, table has K={table.K}")
    c = torch.as_tensor(cond.c).unsqueeze(0)
    mask = torch.as_tensor(cond.mask).unsqueeze(0)
    with torch.no_grad():
        vec = table.select_batch(c, mask)[0]
    return vec.numpy()
