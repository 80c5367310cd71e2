"""Promptable multi-modal tumor sub-region segmentation, desk scale.

Thin numpy-facing wrappers over the C++ core: phantom generation, archive
IO, preprocessing, training, inference, and evaluation statistics.
"""

from subseg._subseg import (
    MODALITIES,
    REGIONS,
    __version__,
    clip_percentiles,
    dice,
    generate_phantoms,
    iou,
    kfold_split,
    load_case,
    minmax_normalize,
    percentile,
    region_scores,
    save_case,
    segment,
    split_cases,
    train_model,
    wilcoxon_signed_rank,
)

__all__ = [
    "MODALITIES",
    "REGIONS",
    "__version__",
    "clip_percentiles",
    "dice",
    "generate_phantoms",
    "iou",
    "kfold_split",
    "load_case",
    "minmax_normalize",
    "percentile",
    "region_scores",
    "save_case",
    "segment",
    "split_cases",
    "train_model",
    "wilcoxon_signed_rank",
]
