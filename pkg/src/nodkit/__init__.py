"""nodkit: nodule-oriented CT curation, lesion-aware augmentation, toy
mask-conditioned rectified flow, and the evaluation protocol around them."""

__version__ = "0.1.0"

from .errors import DomainError, FormatError, NodkitError  # noqa: E402
