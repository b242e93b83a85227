"""Concept-accuracy metrics for multi-label predictors."""

import numpy as np


def concept_accuracy(probabilities, targets):
    """Element-wise (micro) accuracy with the p > 0.5 decision rule.

    Returns (micro, per_concept) where per_concept is the per-k mean; the
    macro value is per_concept.mean(). p = 0.5 predicts 0.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    targets = np.asarray(targets)
    if probabilities.shape != targets.shape:
        raise ValueError(f"shape mismatch {probabilities.shape} vs {targets.shape}")
    if probabilities.size == 0:
        raise ValueError("empty evaluation set")
    correct = (probabilities > 0.5).astype(np.int64) == targets
    return float(correct.mean()), correct.mean(axis=0)


def evaluate_model(model, dataset, split: str = "test"):
    """Run a concept predictor over one split; returns a report dict."""
    subset = dataset.subset(split) if split else dataset
    if len(subset) == 0:
        raise ValueError(f"no examples in split {split!r}")
    probs = model.predict_concepts(subset.images_array())
    micro, per_concept = concept_accuracy(probs, subset.concepts_array())
    return {
        "split": split,
        "n": len(subset),
        "accuracy_micro": micro,
        "accuracy_macro": float(per_concept.mean()),
        "per_concept": {
            name: float(v) for name, v in zip(dataset.schema.concept_names, per_concept)
        },
    }
