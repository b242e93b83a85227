"""Concept schemas and the pixel-level predicates of the shapes8 preset.

Every shapes8 concept is decidable from the image alone, so generated images
(from the diffusion model or from the renderer) can be scored automatically.
All thresholds are module constants; predicates are pure and total over valid
H x W x 3 float images with values in [0, 1].
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

# Object pixels are chromatic (shapes are saturated colors, backgrounds gray).
CHROMA_THRESHOLD = 0.15
# Components smaller than this are noise, not objects.
MIN_COMPONENT_AREA = 6
# Color dominance margin for calling a component red / blue.
COLOR_DOMINANCE = 0.20
# A component is "large" when its area reaches this fraction of the image.
LARGE_AREA_FRACTION = 0.05
# Border-ring median luminance below this means a dark background.
DARK_LUMINANCE = 0.45

_EIGHT_CONN = np.ones((3, 3), dtype=bool)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    return image


def find_components(image: np.ndarray):
    """Return (labels, count) of 8-connected chromatic components."""
    image = _check_image(image)
    chroma = image.max(axis=2) - image.min(axis=2)
    mask = chroma > CHROMA_THRESHOLD
    labels, count = ndimage.label(mask, structure=_EIGHT_CONN)
    return labels, count


def component_slices(image: np.ndarray):
    """Yield (mask, area) for each component at least MIN_COMPONENT_AREA big."""
    labels, count = find_components(image)
    for idx in range(1, count + 1):
        mask = labels == idx
        area = int(mask.sum())
        if area >= MIN_COMPONENT_AREA:
            yield mask, area


def _mean_color(image, mask):
    return image[mask].mean(axis=0)


def _row_widths(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    sub = mask[rows.min() : rows.max() + 1]
    return sub.sum(axis=1)


def classify_shape(mask: np.ndarray) -> Optional[str]:
    """Classify one component as square / circle / triangle, or None.

    Uses the row-width profile of the component: squares are full-width top
    and bottom, upward triangles widen monotonically, circles are vertically
    symmetric and narrow at both ends. Anything ambiguous is None so blurry
    generations do not fire shape concepts spuriously.
    """
    widths = _row_widths(mask).astype(np.float64)
    wmax = widths.max()
    if wmax <= 0:
        return None
    rows = np.flatnonzero(mask.any(axis=0))
    bbox_area = len(widths) * (rows.max() - rows.min() + 1)
    extent = mask.sum() / bbox_area
    top = widths[0] / wmax
    bot = widths[-1] / wmax

    if top >= 0.82 and bot >= 0.82 and extent >= 0.80:
        return "square"
    monotone = np.all(widths[1:] >= widths[:-1] - 1)
    if top <= 0.50 and bot >= 0.85 and monotone:
        return "triangle"
    symmetric = np.all(np.abs(widths - widths[::-1]) <= np.maximum(2.0, 0.25 * wmax))
    if top <= 0.60 and bot <= 0.60 and symmetric and 0.50 <= extent <= 0.88:
        return "circle"
    return None


def _has_color(image, channel: int) -> int:
    image = _check_image(image)
    others = [c for c in range(3) if c != channel]
    for mask, _ in component_slices(image):
        mean = _mean_color(image, mask)
        if mean[channel] - max(mean[others[0]], mean[others[1]]) > COLOR_DOMINANCE:
            return 1
    return 0


def _has_shape(image, shape: str) -> int:
    image = _check_image(image)
    for mask, _ in component_slices(image):
        if classify_shape(mask) == shape:
            return 1
    return 0


def has_red_object(image) -> int:
    return _has_color(image, 0)


def has_blue_object(image) -> int:
    return _has_color(image, 2)


def has_square(image) -> int:
    return _has_shape(image, "square")


def has_circle(image) -> int:
    return _has_shape(image, "circle")


def has_triangle(image) -> int:
    return _has_shape(image, "triangle")


def object_in_top_half(image) -> int:
    image = _check_image(image)
    h = image.shape[0]
    for mask, _ in component_slices(image):
        rows, _cols = np.nonzero(mask)
        if rows.mean() < h / 2:
            return 1
    return 0


def has_large_object(image) -> int:
    image = _check_image(image)
    threshold = LARGE_AREA_FRACTION * image.shape[0] * image.shape[1]
    for _, area in component_slices(image):
        if area >= threshold:
            return 1
    return 0


def dark_background(image) -> int:
    image = _check_image(image)
    border = np.concatenate(
        [image[0], image[-1], image[1:-1, 0], image[1:-1, -1]], axis=0
    )
    return int(np.median(border.mean(axis=1)) < DARK_LUMINANCE)


@dataclass(frozen=True)
class ConceptSchema:
    """Named binary concepts, optionally with their pixel predicates.

    External (imported) datasets have predicates=None: concept prediction
    still works, but fidelity scoring of generations is disabled.
    """

    preset: str
    concept_names: tuple
    predicates: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.concept_names) == 0:
            raise ValueError("schema needs at least one concept")
        if len(set(self.concept_names)) != len(self.concept_names):
            raise ValueError("concept names must be unique")
        if self.predicates is not None and len(self.predicates) != len(self.concept_names):
            raise ValueError("one predicate per concept required")

    @property
    def K(self) -> int:
        return len(self.concept_names)

    @property
    def has_predicates(self) -> bool:
        return self.predicates is not None

    def index_of(self, name: str) -> int:
        try:
            return self.concept_names.index(name)
        except ValueError:
            raise KeyError(f"unknown concept {name!r}") from None


SHAPES8_CONCEPTS = (
    ("has_red_object", has_red_object),
    ("has_blue_object", has_blue_object),
    ("has_square", has_square),
    ("has_circle", has_circle),
    ("has_triangle", has_triangle),
    ("object_in_top_half", object_in_top_half),
    ("has_large_object", has_large_object),
    ("dark_background", dark_background),
)


def shapes8_schema() -> ConceptSchema:
    names, preds = zip(*SHAPES8_CONCEPTS)
    return ConceptSchema(preset="shapes8", concept_names=names, predicates=preds)


def external_schema(concept_names) -> ConceptSchema:
    return ConceptSchema(preset="external", concept_names=tuple(concept_names))


def get_schema(preset: str) -> ConceptSchema:
    if preset == "shapes8":
        return shapes8_schema()
    raise ValueError(f"unknown schema preset {preset!r}")


def evaluate_predicates(schema: ConceptSchema, image) -> np.ndarray:
    """Apply every predicate of the schema to one image, returning K bits."""
    if not schema.has_predicates:
        raise ValueError(f"schema {schema.preset!r} has no pixel predicates")
    image = _check_image(image)
    return np.array([p(image) for p in schema.predicates], dtype=np.int64)
