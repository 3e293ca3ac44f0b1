"""Evaluation protocol: segmentation overlap, FROC, FID and classification metrics."""
from .classification import (FOLD_COUNTS, FoldPlan, auc, bootstrap_ci, plan_folds,
                             preprocess_patch)
from .detection import (FP_RATES, FP, IGNORED, SIZE_BINS, TP, FrocCurve, MatchResult,
                        froc_by_size, froc_curve, match_detections, size_bin, stratify_by_size)
from .fid import (FeatureConfig, GaussianStats, extract_features, fid_from_volumes,
                  frechet_distance, gaussian_stats, sqrtm_psd, trace_sqrt_product)
from .segmentation import dice, dice_in_voi
