"""Concept-prototype dataset: the ranked closest training patches per
prototype, localized through receptive-field boxes, plus activation overlays.
"""

import numpy as np
import torch

from ..data.manifest import save_image
from ..proto.core import (
    activation_from_distance,
    class_name,
    compute_feature_grids,
    patch_grid,
    receptive_field_box,
    squared_distances,
)
from ..util import write_json


def _class_prototype_lists(model):
    """class index -> ordered unique prototype ids, for either variant."""
    if hasattr(model, "q"):  # pool variant: classes share prototypes via slots
        slot_protos = model.hard_assignment()
        out = {}
        for g in range(2 * model.K):
            seen = []
            for j in slot_protos[g]:
                if int(j) not in seen:
                    seen.append(int(j))
            out[g] = seen
        return out
    assignment = model.assignment
    return {g: [int(j) for j in np.flatnonzero(assignment == g)] for g in range(2 * model.K)}


def build_prototype_dataset(model, dataset, top_n: int = 50):
    """Rank the training patches of each prototype's eligible images.

    Returns {class_name: [prototype records]}, each record carrying the
    provenance patch, its box in input coordinates, and the ranked closest
    patches (ties broken lexicographically on (image id, row, col), so the
    output is byte-stable). Requires a pushed model.
    """
    if model.provenance is None:
        raise ValueError("model has no push provenance; run the push step first")
    examples = sorted(dataset.examples, key=lambda ex: ex.id)
    images = np.stack([ex.image for ex in examples])
    concepts = np.stack([ex.c for ex in examples])
    image_size = images.shape[1]

    grids = compute_feature_grids(model.backbone, images)
    patches = patch_grid(grids).double()
    Wp = grids.shape[3]
    d2_all = squared_distances(patches, model.prototypes.detach().double())

    class_lists = _class_prototype_lists(model)
    result = {}
    concept_names = dataset.schema.concept_names
    for g, protos in class_lists.items():
        records = []
        for j in protos:
            if model.provenance[j] is None:
                continue
            k, v = divmod(g, 2)
            rows = np.flatnonzero(concepts[:, k] == v)
            acts = activation_from_distance(d2_all[torch.as_tensor(rows), :, j], model.eps_sim).numpy()
            flat = acts.reshape(-1)
            n_p = acts.shape[1]
            img_idx = np.repeat(np.arange(len(rows)), n_p)
            patch_idx = np.tile(np.arange(n_p), len(rows))
            order = np.lexsort((patch_idx % Wp, patch_idx // Wp, img_idx, -flat))
            top = order[:top_n]
            ranked = []
            for t in top:
                src = int(rows[img_idx[t]])
                r, c = divmod(int(patch_idx[t]), Wp)
                ranked.append(
                    {
                        "image_id": examples[src].id,
                        "row": r,
                        "col": c,
                        "box": list(receptive_field_box(r, c, image_size)),
                        "activation": float(flat[t]),
                    }
                )
            prov = model.provenance[j]
            records.append(
                {
                    "prototype": int(j),
                    "provenance": dict(prov),
                    "provenance_box": list(
                        receptive_field_box(prov["row"], prov["col"], image_size)
                    ),
                    "closest": ranked,
                }
            )
        result[class_name(concept_names, g)] = records
    return result


def _activation_map(model, image: np.ndarray, j: int) -> np.ndarray:
    """Patch-activation map of prototype j over one image (H' x W')."""
    from ..proto.core import images_to_tensor

    with torch.no_grad():
        grid = model.backbone(images_to_tensor(image[None]))
        pat = patch_grid(grid).double()
        d2 = squared_distances(pat, model.prototypes.detach().double()[j : j + 1])[0, :, 0]
        act = activation_from_distance(d2, model.eps_sim)
    Hp, Wp = grid.shape[2], grid.shape[3]
    return act.reshape(Hp, Wp).numpy()


def overlay_activation(image: np.ndarray, act_map: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend a nearest-upsampled heat map over the image; pure numpy."""
    H, W = image.shape[:2]
    up = np.kron(act_map, np.ones((H // act_map.shape[0], W // act_map.shape[1])))
    up = up[:H, :W]
    lo, hi = up.min(), up.max()
    norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    # blue -> red ramp
    heat = np.stack([norm, 0.2 * (1 - np.abs(2 * norm - 1)), 1.0 - norm], axis=2)
    return np.clip((1 - alpha) * image + alpha * heat, 0.0, 1.0)


def write_prototype_dataset(model, dataset, out_dir, top_n: int = 50, log=None):
    """Write class/<concept>_<pos|neg>/prototype_<j>/rank_<r>.png + index.json.

    Pool classes that reuse a prototype store it once; the duplication count
    goes into the index.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    data = build_prototype_dataset(model, dataset, top_n=top_n)
    by_id = {ex.id: ex for ex in dataset.examples}
    index = {}
    for cname, records in data.items():
        centry = {"prototypes": [], "unique_prototypes": len(records)}
        for rec in records:
            j = rec["prototype"]
            pdir = out_dir / "class" / cname / f"prototype_{j}"
            for rank, item in enumerate(rec["closest"]):
                r0, c0, r1, c1 = item["box"]
                crop = by_id[item["image_id"]].image[r0:r1, c0:c1]
                save_image(pdir / f"rank_{rank}.png", crop)
            prov_img = by_id[rec["provenance"]["image_id"]].image
            overlay = overlay_activation(prov_img, _activation_map(model, prov_img, j))
            save_image(pdir / "overlay.png", overlay)
            centry["prototypes"].append(rec)
        index[cname] = centry
        if log:
            log(f"{cname}: {len(records)} prototypes, {sum(len(r['closest']) for r in records)} patches")
    write_json(out_dir / "index.json", index)
    return out_dir / "index.json"
