#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "subseg/volume.hpp"

namespace subseg {

/// Dice = 2|A∩B| / (|A|+|B|); two empty masks score 1.0.
double dice(const BinaryMask& pred, const BinaryMask& gt);

/// IoU = |A∩B| / |A∪B|; two empty masks score 1.0.
double iou(const BinaryMask& pred, const BinaryMask& gt);

/// Binary view of one label value.
BinaryMask label_mask(const SegmentationMask& mask, uint8_t label);

/// Standard composite regions: whole tumor {1,2,4}, tumor core {1,4},
/// enhancing tumor {4}.
struct CompositeMasks {
  BinaryMask wt, tc, et;
};
CompositeMasks composite_masks(const SegmentationMask& mask);

/// Disjoint cover of the ids into k folds whose sizes differ by at most 1.
struct FoldSplit {
  std::vector<std::vector<std::string>> folds;
};
FoldSplit kfold_split(const std::vector<std::string>& case_ids, long k, uint64_t seed);

/// Two-sided Wilcoxon signed-rank p-value over paired scores. Zero
/// differences are dropped; exact enumeration up to 25 nonzero differences,
/// normal approximation with continuity and tie corrections above.
double wilcoxon_signed_rank(const std::vector<double>& scores_a,
                            const std::vector<double>& scores_b);

}  // namespace subseg
