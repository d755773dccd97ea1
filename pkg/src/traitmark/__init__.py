"""traitmark: cross-prompt multi-trait essay scoring platform."""

__version__ = "0.1.0"

from .domain import (  # noqa: F401
    DEFAULT_SCHEMA,
    TRAIT_ORDER,
    Assignment,
    Essay,
    Prompt,
    Rubric,
    TraitSchema,
    TraitScore,
    TraitSpec,
    clamp_round_score,
    holistic_score,
    trait_range,
    validate_rubric,
)
