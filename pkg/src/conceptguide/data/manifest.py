"""Dataset container, manifest JSON I/O, the CBM-style import adapter, splits.

A dataset on disk is one manifest.json next to an images/ directory of PNGs;
paths inside the manifest are relative to the manifest. Loaded datasets are
immutable in spirit: nothing in the package mutates examples after load.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..util import derive_seed, read_json, write_json
from .schema import ConceptSchema, evaluate_predicates, external_schema, get_schema

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConceptExample:
    """One training triplet: image, auxiliary class label, K concept bits."""

    id: str
    image: np.ndarray
    y: int
    c: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"{self.id}: image must be H x W x 3")
        if self.y < 0:
            raise ValueError(f"{self.id}: y must be >= 0")


@dataclass(frozen=True)
class ConceptDataset:
    schema: ConceptSchema
    examples: list
    image_size: tuple
    seed: int = 0

    def __post_init__(self):
        H, W = self.image_size
        for ex in self.examples:
            if ex.image.shape[:2] != (H, W):
                raise ValueError(f"{ex.id}: image shape {ex.image.shape[:2]} != dataset size {(H, W)}")
            if len(ex.c) != self.schema.K:
                raise ValueError(f"{ex.id}: concept vector length {len(ex.c)} != K={self.schema.K}")

    def __len__(self):
        return len(self.examples)

    @property
    def K(self) -> int:
        return self.schema.K

    def subset(self, split: str) -> "ConceptDataset":
        kept = [ex for ex in self.examples if ex.split == split]
        return replace(self, examples=kept)

    def images_array(self) -> np.ndarray:
        return np.stack([ex.image for ex in self.examples])

    def concepts_array(self) -> np.ndarray:
        return np.stack([ex.c for ex in self.examples]).astype(np.int64)

    def positive_rates(self) -> np.ndarray:
        return self.concepts_array().mean(axis=0)

    def split_fingerprint(self) -> str:
        """Stable digest of (id, split) pairs; models trained and evaluated
        together must agree on it."""
        from ..util import config_hash

        return config_hash([[ex.id, ex.split] for ex in self.examples])


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_manifest(dataset: ConceptDataset, out_dir) -> Path:
    """Write manifest.json + images/*.png under out_dir."""
    out_dir = Path(out_dir)
    items = []
    for ex in dataset.examples:
        rel = f"images/{ex.id}.png"
        save_image(out_dir / rel, ex.image)
        items.append(
            {
                "id": ex.id,
                "path": rel,
                "y": int(ex.y),
                "c": [int(b) for b in ex.c],
                "split": ex.split,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "schema": {
            "preset": dataset.schema.preset,
            "concept_names": list(dataset.schema.concept_names),
            "has_predicates": dataset.schema.has_predicates,
        },
        "image_size": list(dataset.image_size),
        "seed": int(dataset.seed),
        "items": items,
    }
    write_json(out_dir / MANIFEST_NAME, manifest)
    return out_dir / MANIFEST_NAME


def load_manifest(path) -> ConceptDataset:
    """Load a dataset directory or manifest path; validates shapes and files."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = read_json(path)
    sch = doc["schema"]
    if sch.get("has_predicates") and sch["preset"] != "external":
        schema = get_schema(sch["preset"])
        if list(schema.concept_names) != sch["concept_names"]:
            raise ValueError("manifest concept names do not match preset schema")
    else:
        schema = external_schema(sch["concept_names"])
    K = schema.K
    base = path.parent
    examples = []
    for item in doc["items"]:
        if len(item["c"]) != K:
            raise ValueError(f"{item['id']}: concept vector length {len(item['c'])} != K={K}")
        img_path = base / item["path"]
        if not img_path.exists():
            raise FileNotFoundError(f"image file missing: {img_path}")
        examples.append(
            ConceptExample(
                id=item["id"],
                image=load_image(img_path),
                y=int(item["y"]),
                c=np.asarray(item["c"], dtype=np.int64),
                split=item.get("split", "train"),
            )
        )
    return ConceptDataset(
        schema=schema,
        examples=examples,
        image_size=tuple(doc["image_size"]),
        seed=int(doc.get("seed", 0)),
    )


def import_attribute_files(image_list_path, attributes_path, out_dir, concept_names=None) -> ConceptDataset:
    """Adapter for CBM-style data: an image list plus a 0/1 attribute matrix.

    Produces the same manifest shape as the synthetic generator, with
    predicates absent (fidelity scoring disabled for imported data).
    """
    image_list_path = Path(image_list_path)
    attributes_path = Path(attributes_path)
    with open(image_list_path) as f:
        paths = [line.strip() for line in f if line.strip()]
    rows = []
    with open(attributes_path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            bits = line.split()
            if any(b not in ("0", "1") for b in bits):
                raise ValueError(f"{attributes_path}:{lineno}: attribute values must be 0/1")
            rows.append([int(b) for b in bits])
    if len(rows) != len(paths):
        raise ValueError(f"{len(paths)} images but {len(rows)} attribute rows")
    K = len(rows[0])
    if any(len(r) != K for r in rows):
        raise ValueError("attribute rows have inconsistent lengths")
    schema = external_schema(concept_names or [f"attr_{k}" for k in range(K)])

    examples = []
    size = None
    for i, (rel, bits) in enumerate(zip(paths, rows)):
        img = load_image(image_list_path.parent / rel)
        if size is None:
            size = img.shape[:2]
        elif img.shape[:2] != size:
            raise ValueError(f"{rel}: image size {img.shape[:2]} != {size}")
        examples.append(
            ConceptExample(id=f"ext_{i:05d}", image=img, y=0, c=np.asarray(bits, dtype=np.int64))
        )
    dataset = ConceptDataset(schema=schema, examples=examples, image_size=size, seed=0)
    if out_dir is not None:
        save_manifest(dataset, out_dir)
    return dataset


def split_dataset(dataset: ConceptDataset, ratios, seed: int) -> ConceptDataset:
    """Tag items train/val/test, stratified so every concept keeps at least
    one positive and one negative in train whenever the full set has two.

    A concept with a single positive (or negative) example forces that
    example into train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three nonnegative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    n = len(dataset)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)

    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = list(rng.permutation(n))

    c = dataset.concepts_array()
    forced = set()
    for k in range(dataset.K):
        for value in (0, 1):
            idxs = np.flatnonzero(c[:, k] == value)
            if len(idxs) == 0:
                continue
            if len(idxs) == 1:
                forced.add(int(idxs[0]))
    if len(forced) > n_train:
        raise ValueError("dataset too small to stratify: forced examples exceed train size")

    order = [i for i in order if i in forced] + [i for i in order if i not in forced]
    assignment = {}
    for pos, i in enumerate(order):
        assignment[i] = "train" if pos < n_train else ("val" if pos < n_train + n_val else "test")

    # Pull a representative of any concept class missing from train.
    for k in range(dataset.K):
        for value in (0, 1):
            idxs = np.flatnonzero(c[:, k] == value)
            if len(idxs) < 2:
                continue
            if not any(assignment[int(i)] == "train" for i in idxs):
                move = min(int(i) for i in idxs)
                donor = None
                for j in order[:n_train][::-1]:
                    bits = c[j]
                    safe = all(
                        sum(1 for t in np.flatnonzero(c[:, kk] == bits[kk]) if assignment[int(t)] == "train") > 1
                        for kk in range(dataset.K)
                    )
                    if safe:
                        donor = j
                        break
                if donor is None:
                    raise ValueError("dataset too small to satisfy stratification")
                assignment[move], assignment[donor] = "train", assignment[move]

    examples = [replace(ex, split=assignment[i]) for i, ex in enumerate(dataset.examples)]
    return replace(dataset, examples=examples)
