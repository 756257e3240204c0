from .manifest import (
    AnnotatedFrame,
    IngestionError,
    Query,
    SceneImage,
    SearchProtocol,
    ValidationError,
    load_annotations,
    save_annotations,
)
from .sampling import InsufficientDiversityError, sample_training_pairs
from .toy import PlacementError, ToyOracle, ToySpec, generate_toy_dataset

__all__ = [
    "AnnotatedFrame",
    "IngestionError",
    "InsufficientDiversityError",
    "PlacementError",
    "Query",
    "SceneImage",
    "SearchProtocol",
    "ToyOracle",
    "ToySpec",
    "ValidationError",
    "generate_toy_dataset",
    "load_annotations",
    "sample_training_pairs",
    "save_annotations",
]
