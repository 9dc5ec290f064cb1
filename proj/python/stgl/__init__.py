"""Satellite-thermal geo-localization: retrieval, mining, metrics and embedding."""

from ._core import (
    DescriptorIndex,
    FormatError,
    InputError,
    SgmNetwork,
    TrainingError,
    contrast_enhance,
    evaluate,
    experiment_config,
    generate_world,
    mine_triplets,
    tile_offsets,
)

__all__ = [
    "DescriptorIndex",
    "FormatError",
    "InputError",
    "SgmNetwork",
    "TrainingError",
    "contrast_enhance",
    "evaluate",
    "experiment_config",
    "generate_world",
    "mine_triplets",
    "tile_offsets",
]
