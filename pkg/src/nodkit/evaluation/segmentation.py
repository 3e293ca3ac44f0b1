"""Dice overlap inside an annotation-centred volume of interest."""
import logging

import numpy as np

from ..curate import annotation_box
from ..errors import DomainError

logger = logging.getLogger(__name__)

DICE_VOI_MARGIN = 64


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def dice_in_voi(pred, ref, ann, margin_vox: int = DICE_VOI_MARGIN) -> float:
    """Dice of two masks cropped to the annotation box grown by ``margin_vox``.

    Two empty crops agree vacuously and score 1.0 (logged).
    """
    if pred.meta != ref.meta:
        raise DomainError(f"geometry mismatch: {pred.meta} vs {ref.meta}")
    lo, hi = annotation_box(pred.meta, ann, margin_vox)
    if any(l > h for l, h in zip(lo, hi)):
        raise DomainError(f"annotation box for {ann.series_id} lies outside the volume")
    crop = tuple(slice(l, h + 1) for l, h in zip(lo, hi))
    a, b = pred.bits[crop], ref.bits[crop]
    if not a.any() and not b.any():
        logger.warning("dice_in_voi: both masks empty inside the VOI of %s; scoring 1.0", ann.series_id)
    return dice(a, b)
