from .io import MatchSetParseError, load_grids, load_matchset, save_grids, save_matchset
from .matchset import (
    AppearanceError,
    GridAppearance,
    MatchSet,
    bilinear,
    resample_indices,
    resample_matches,
    sample_appearance,
)
from .scene import (
    ProceduralAppearance,
    SceneError,
    SceneParams,
    SceneSample,
    SequenceSample,
    generate_scene,
    generate_sequence,
)

__all__ = [
    "AppearanceError",
    "GridAppearance",
    "MatchSet",
    "MatchSetParseError",
    "ProceduralAppearance",
    "SceneError",
    "SceneParams",
    "SceneSample",
    "SequenceSample",
    "bilinear",
    "generate_scene",
    "generate_sequence",
    "load_grids",
    "load_matchset",
    "resample_indices",
    "resample_matches",
    "sample_appearance",
    "save_grids",
    "save_matchset",
]
