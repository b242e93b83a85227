"""Generation-fidelity scoring: do guided samples satisfy the conditioned
pixel predicates?
"""

import numpy as np

from ..data.schema import evaluate_predicates
from ..diffusion.sample import sample
from ..util import derive_seed


def condition_label(concept_names, cond) -> str:
    parts = [
        f"{concept_names[k]}={int(cond.c[k])}" for k in range(len(concept_names)) if cond.mask[k]
    ]
    return ",".join(parts) if parts else "unconditional"


def generation_fidelity(model, table, schedule, schema, conditions, samples_per_condition: int,
                        seed: int, w_g: float = 2.0, log=None):
    """Score each condition: per masked concept, the fraction of samples whose
    predicate equals the conditioned bit, plus the joint rate; returns a list
    of table rows. Unmasked ("unconditional") rows carry no fidelity entries.
    """
    if not schema.has_predicates:
        raise ValueError("generation fidelity needs a schema with pixel predicates")
    rows = []
    for i, cond in enumerate(conditions):
        label = condition_label(schema.concept_names, cond)
        imgs = sample(
            model, table, cond, w_g, samples_per_condition, derive_seed(seed, "fidelity", i), schedule
        )
        bits = np.stack([evaluate_predicates(schema, im) for im in imgs])
        row = {
            "condition": label,
            "samples": int(samples_per_condition),
            "guidance": float(w_g),
            "per_concept": {},
            "predicate_rates": {
                name: float(bits[:, k].mean()) for k, name in enumerate(schema.concept_names)
            },
        }
        masked = np.flatnonzero(cond.mask)
        if len(masked) == 0:
            row["joint"] = None
        else:
            agree = np.ones(len(bits), dtype=bool)
            for k in masked:
                match = bits[:, k] == cond.c[k]
                row["per_concept"][schema.concept_names[k]] = {
                    "target": int(cond.c[k]),
                    "satisfaction": float(match.mean()),
                }
                agree &= match
            row["joint"] = float(agree.mean())
        rows.append(row)
        if log:
            log(f"{label}: joint {row['joint']}")
    return rows
