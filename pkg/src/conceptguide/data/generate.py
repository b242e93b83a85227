"""Synthetic shapes8 scene generator.

Scenes hold 1-3 axis-aligned colored shapes on a flat gray background.
Concept bits are computed from the rendered pixels (the predicates are the
ground truth); the sampler only steers the distribution and rejects scenes
whose rendering lands on a predicate threshold. Everything is driven by
per-item RNG streams derived from the dataset seed, so generation is
deterministic and parallelizable.

Concept base rates are engineered: has_circle and has_triangle sit near the
lower clamp bound, the rest in the 0.45-0.72 band, which both exercises
class imbalance and keeps negative-concept guidance measurable for the
embedding mode that cannot actively steer away from a concept.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..util import derive_seed
from . import schema as S
from .manifest import ConceptDataset, ConceptExample, save_manifest

RATE_LOW, RATE_HIGH = 0.15, 0.85

# Scene archetypes: shapes within one scene share a type so the rare shape
# concepts stay rare. Weights give has_square ~ 0.75, circle/triangle ~ 0.155.
SCENE_PATTERNS = (("squares", 0.74), ("circles", 0.105), ("triangles", 0.105), ("mix", 0.05))

COLORS = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.10, 0.15, 0.85),
    "green": (0.10, 0.70, 0.20),
    "yellow": (0.90, 0.80, 0.12),
}
COLOR_WEIGHTS = (("red", 0.30), ("blue", 0.30), ("green", 0.20), ("yellow", 0.20))

P_LARGE = 0.35
P_DARK = 0.50
# Area bands as fractions of H*W; the gap around LARGE_AREA_FRACTION keeps the
# size predicate unambiguous.
SMALL_BAND = (0.012, 0.032)
LARGE_BAND = (0.075, 0.135)
TOP_MARGIN_PX = 1.5
MIN_IMAGE_SIDE = 8


@dataclass
class _Shape:
    kind: str
    color: str
    large: bool
    top: bool


def _weighted_choice(rng, pairs):
    names = [p[0] for p in pairs]
    weights = np.array([p[1] for p in pairs], dtype=np.float64)
    return names[rng.choice(len(names), p=weights / weights.sum())]


def _sample_plan(rng, constraints):
    """Draw the scene-level attribute plan, honoring flip constraints."""
    pattern = constraints.get("pattern") or _weighted_choice(rng, SCENE_PATTERNS)
    n_shapes = int(rng.integers(1, 4))
    kinds = {
        "squares": ["square"] * n_shapes,
        "circles": ["circle"] * n_shapes,
        "triangles": ["triangle"] * n_shapes,
        "mix": ["circle", "triangle"][: max(2, n_shapes)][:n_shapes] or ["circle"],
    }[pattern]
    if pattern == "mix":
        kinds = ["circle", "triangle"] + ["square"] * (n_shapes - 2)
        kinds = kinds[: max(2, n_shapes)]

    shapes = []
    for i, kind in enumerate(kinds):
        color = _weighted_choice(rng, COLOR_WEIGHTS)
        large = bool(rng.random() < P_LARGE)
        top = bool(rng.random() < 0.5)
        shapes.append(_Shape(kind=kind, color=color, large=large, top=top))

    dark = bool(rng.random() < P_DARK)

    # Constraint overrides used by the base-rate fix-up pass.
    if "dark" in constraints:
        dark = constraints["dark"]
    if constraints.get("color_on"):
        shapes[0].color = constraints["color_on"]
    if constraints.get("color_off"):
        shapes = [
            _Shape(s.kind, "green" if s.color == constraints["color_off"] else s.color, s.large, s.top)
            for s in shapes
        ]
    if constraints.get("large") is True:
        shapes[0].large = True
    if constraints.get("large") is False:
        shapes = [_Shape(s.kind, s.color, False, s.top) for s in shapes]
    if constraints.get("top") is True:
        shapes[0].top = True
    if constraints.get("top") is False:
        shapes = [_Shape(s.kind, s.color, s.large, False) for s in shapes]
    return shapes, dark


def _raster_square(rng, large, hw):
    lo, hi = (LARGE_BAND if large else SMALL_BAND)
    lo_px, hi_px = max(9, lo * hw), max(16, hi * hw)
    side = int(np.round(np.sqrt(rng.uniform(lo_px, hi_px))))
    side = max(3, side)
    return np.ones((side, side), dtype=bool)


def _raster_circle(rng, large, hw):
    lo, hi = (LARGE_BAND if large else SMALL_BAND)
    lo_px, hi_px = max(10, lo * hw), max(18, hi * hw)
    radius = np.sqrt(rng.uniform(lo_px, hi_px) / np.pi)
    radius = max(2.0, radius)
    r_int = int(np.ceil(radius))
    yy, xx = np.mgrid[-r_int : r_int + 1, -r_int : r_int + 1]
    return (yy**2 + xx**2) <= radius**2


def _raster_triangle(rng, large, hw):
    lo, hi = (LARGE_BAND if large else SMALL_BAND)
    lo_px, hi_px = max(10, lo * hw), max(18, hi * hw)
    area = rng.uniform(lo_px, hi_px)
    height = max(4, int(np.round(np.sqrt(1.6 * area))))
    half_base = max(2.0, area / height)
    rows = []
    for dy in range(height):
        w = half_base * (dy + 0.6) / height
        row = np.abs(np.arange(-int(np.ceil(half_base)), int(np.ceil(half_base)) + 1)) <= w
        rows.append(row)
    return np.stack(rows)


_RASTER = {"square": _raster_square, "circle": _raster_circle, "triangle": _raster_triangle}


def _area_band(large, hw):
    lo, hi = (LARGE_BAND if large else SMALL_BAND)
    return max(8, lo * hw - 1), max(20, hi * hw + 1)


def _place(rng, stamp, occupied, H, W, top):
    """Find a placement with a 2px gap to borders and other shapes."""
    h, w = stamp.shape
    margin = 2
    rows, _ = np.nonzero(stamp)
    centroid_off = rows.mean()
    for _ in range(60):
        r0 = int(rng.integers(margin, max(margin + 1, H - h - margin + 1)))
        c0 = int(rng.integers(margin, max(margin + 1, W - w - margin + 1)))
        if r0 + h > H - margin or c0 + w > W - margin:
            continue
        centroid_row = r0 + centroid_off
        if abs(centroid_row - H / 2) < TOP_MARGIN_PX:
            continue
        if (centroid_row < H / 2) != top:
            continue
        region = occupied[max(0, r0 - 2) : r0 + h + 2, max(0, c0 - 2) : c0 + w + 2]
        window = np.zeros_like(region)
        rr = r0 - max(0, r0 - 2)
        cc = c0 - max(0, c0 - 2)
        window[rr : rr + h, cc : cc + w] = stamp
        if (ndimage.binary_dilation(window, structure=np.ones((5, 5), bool)) & region).any():
            continue
        return r0, c0
    return None


def _render_scene(rng, shapes, dark, H, W):
    """Rasterize a scene plan; returns (uint8 image, per-shape ok) or None."""
    hw = H * W
    bg = rng.uniform(0.08, 0.30) if dark else rng.uniform(0.62, 0.92)
    img = np.full((H, W, 3), bg, dtype=np.float64)
    occupied = np.zeros((H, W), dtype=bool)
    placed = []
    for shape in shapes:
        ok = False
        for _ in range(25):
            stamp = _RASTER[shape.kind](rng, shape.large, hw)
            lo, hi = _area_band(shape.large, hw)
            if not (lo <= stamp.sum() <= hi):
                continue
            if stamp.shape[0] > H - 4 or stamp.shape[1] > W - 4:
                continue
            pos = _place(rng, stamp, occupied, H, W, shape.top)
            if pos is None:
                continue
            r0, c0 = pos
            sl = (slice(r0, r0 + stamp.shape[0]), slice(c0, c0 + stamp.shape[1]))
            occupied[sl] |= stamp
            img[sl][stamp] = COLORS[shape.color]
            placed.append(shape)
            ok = True
            break
        if not ok and shape is shapes[0]:
            return None  # first shape carries constraints; retry whole scene
    if not placed:
        return None
    return np.round(img * 255).astype(np.uint8), placed


def _expected_bits(schema, placed, dark):
    bits = np.zeros(schema.K, dtype=np.int64)
    kinds = {s.kind for s in placed}
    colors = {s.color for s in placed}
    bits[schema.index_of("has_red_object")] = int("red" in colors)
    bits[schema.index_of("has_blue_object")] = int("blue" in colors)
    bits[schema.index_of("has_square")] = int("square" in kinds)
    bits[schema.index_of("has_circle")] = int("circle" in kinds)
    bits[schema.index_of("has_triangle")] = int("triangle" in kinds)
    bits[schema.index_of("object_in_top_half")] = int(any(s.top for s in placed))
    bits[schema.index_of("has_large_object")] = int(any(s.large for s in placed))
    bits[schema.index_of("dark_background")] = int(dark)
    return bits


def render_item(seed: int, index: int, H: int, W: int, schema, constraints=None, attempt: int = 0):
    """Render one labeled scene deterministically from (seed, index, attempt).

    The stored bits are the pixel predicates evaluated on the quantized image;
    scenes where rendering disagrees with the plan (threshold straddles,
    placement failures) are resampled from the same stream.
    """
    constraints = constraints or {}
    rng = np.random.default_rng(derive_seed(seed, "item", index, attempt))
    for _ in range(200):
        shapes, dark = _sample_plan(rng, constraints)
        rendered = _render_scene(rng, shapes, dark, H, W)
        if rendered is None:
            continue
        img_u8, placed = rendered
        image = img_u8.astype(np.float64) / 255.0
        bits = S.evaluate_predicates(schema, image)
        if not np.array_equal(bits, _expected_bits(schema, placed, dark)):
            continue
        return img_u8, bits, len(placed)
    raise RuntimeError(f"could not render a consistent scene for item {index}")


_FLIP_CONSTRAINTS = {
    "has_red_object": lambda v: {"color_on": "red"} if v else {"color_off": "red"},
    "has_blue_object": lambda v: {"color_on": "blue"} if v else {"color_off": "blue"},
    "has_square": lambda v: {"pattern": "squares"} if v else {"pattern": "mix"},
    "has_circle": lambda v: {"pattern": "mix"} if v else {"pattern": "squares"},
    "has_triangle": lambda v: {"pattern": "mix"} if v else {"pattern": "squares"},
    "object_in_top_half": lambda v: {"top": bool(v)},
    "has_large_object": lambda v: {"large": bool(v)},
    "dark_background": lambda v: {"dark": bool(v)},
}


def _fix_rates(items, seed, H, W, schema):
    """Resample targeted items until every concept rate is inside the clamp."""
    n = len(items)
    lo_count = int(np.ceil(RATE_LOW * n))
    hi_count = int(np.floor(RATE_HIGH * n))
    for round_idx in range(1, 200):
        bits = np.stack([it[1] for it in items])
        counts = bits.sum(axis=0)
        lo_k = np.flatnonzero(counts < lo_count)
        hi_k = np.flatnonzero(counts > hi_count)
        if len(lo_k) == 0 and len(hi_k) == 0:
            return items
        k = int(lo_k[0]) if len(lo_k) else int(hi_k[0])
        want = 1 if len(lo_k) else 0
        need = max(1, (lo_count - counts[k]) if want else (counts[k] - hi_count))

        # Prefer items whose removal cannot push another concept out of bounds.
        def safe(i):
            after = counts - bits[i]
            return all(
                after[kk] >= lo_count - (1 if kk == k and want else 0)
                for kk in range(schema.K)
                if kk != k
            )

        pool = [i for i in range(n) if bits[i, k] != want]
        candidates = [i for i in pool if safe(i)][:need]
        if not candidates:
            candidates = pool[round_idx % max(1, len(pool)) :][:need] or pool[:need]
        for i in candidates:
            constraints = dict(_FLIP_CONSTRAINTS[schema.concept_names[k]](want))
            # Carry over boundary-tight bits of this item that the new scene
            # can express alongside the fix (pattern conflicts excluded).
            for kk in range(schema.K):
                if kk == k:
                    continue
                tight = (bits[i, kk] == 1 and counts[kk] <= lo_count) or (
                    bits[i, kk] == 0 and counts[kk] >= hi_count
                )
                if not tight:
                    continue
                extra = _FLIP_CONSTRAINTS[schema.concept_names[kk]](int(bits[i, kk]))
                clash = {"color_on", "color_off"} if set(extra) & {"color_on", "color_off"} else set(extra)
                if clash & set(constraints):
                    continue
                constraints.update(extra)
            items[i] = render_item(seed, i, H, W, schema, constraints, attempt=round_idx)
    raise RuntimeError("per-concept rate clamp could not be satisfied; dataset too small")


def generate_synthetic(preset: str, n: int, image_size, seed: int, out_dir) -> ConceptDataset:
    """Generate a labeled synthetic dataset and write its manifest + PNGs.

    Deterministic given (preset, n, image_size, seed). Per-concept positive
    rates are clamped to [0.15, 0.85] whenever n makes that feasible.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    H, W = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    if H < MIN_IMAGE_SIDE or W < MIN_IMAGE_SIDE:
        raise ValueError(f"image size below minimum renderable ({MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE})")
    schema = S.get_schema(preset)

    items = [render_item(seed, i, H, W, schema) for i in range(n)]
    feasible = np.ceil(RATE_LOW * n) <= np.floor(RATE_HIGH * n)
    if n >= 2 and feasible:
        items = _fix_rates(items, seed, H, W, schema)

    examples = []
    for i, (img_u8, bits, n_shapes) in enumerate(items):
        examples.append(
            ConceptExample(
                id=f"item_{i:05d}",
                image=img_u8.astype(np.float64) / 255.0,
                y=n_shapes - 1,
                c=bits,
            )
        )
    dataset = ConceptDataset(schema=schema, examples=examples, image_size=(H, W), seed=seed)
    save_manifest(dataset, out_dir)
    return dataset
