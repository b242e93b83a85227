from .schema import ConceptSchema, evaluate_predicates, shapes8_schema
from .manifest import (
    ConceptDataset,
    ConceptExample,
    import_attribute_files,
    load_manifest,
    save_manifest,
    split_dataset,
)
from .generate import generate_synthetic

__all__ = [
    "ConceptSchema",
    "ConceptDataset",
    "ConceptExample",
    "evaluate_predicates",
    "generate_synthetic",
    "import_attribute_files",
    "load_manifest",
    "save_manifest",
    "shapes8_schema",
    "split_dataset",
]
