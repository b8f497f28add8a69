"""Adversarial-image lab: attacks, input-transformation defenses, a small CNN
trained from scratch, and an evaluation harness."""

from .imagecore import FormatError, InvalidInputError, SeedStream, clip01, normalized_l2_dissimilarity

__all__ = [
    "FormatError",
    "InvalidInputError",
    "SeedStream",
    "clip01",
    "normalized_l2_dissimilarity",
]
__version__ = "0.1.0"
