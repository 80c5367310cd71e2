#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "subseg/attention.hpp"
#include "subseg/model.hpp"
#include "subseg/volume.hpp"

namespace subseg {

// Tightest axis-aligned box around pixels labeled `region` in a 2-D label
// slice, optionally expanded by `margin` pixels and clamped to the slice.
// Sets empty_flag (and leaves coordinates at -1) when the region is absent.
SpatialPrompt extract_bbox(const LabelSlice& pred, uint8_t region, long margin = 0);

// Merges three per-region probability maps (NCR, ED, ET order) into one
// label slice. A pixel gets the label of its highest-probability region among
// those reaching `tau`; exact ties resolve by clinical priority ET > NCR > ED.
// Pixels where no region reaches `tau` stay background.
LabelSlice combine_subregions(const Tensor& prob_ncr, const Tensor& prob_ed,
                              const Tensor& prob_et, double tau);

// One prompted refinement decode: probabilities for `prompt.sub_region` given
// fused feature maps. Rejects empty prompts; callers handle that fallback.
Tensor refine_subregion(const Model& model, const Tensor& features, const SpatialPrompt& prompt);

// One attention row logged during inference: softmax weights over modalities
// for one (slice, sub-region) pair.
struct AttentionRecord {
  long slice = 0;
  uint8_t sub_region = 0;          // label: 1, 2, or 4
  std::vector<double> alpha;       // one weight per input modality
};

struct TwoPassOptions {
  double tau = 0.5;
  long refine_iters = 1;
};

// Full slice-by-slice two-pass segmentation of a preprocessed volume.
// Pass 1 decodes mean-fused features without a prompt; pass 2 re-decodes each
// sub-region on its attention-fused features, box-prompted from the pass-1
// labels. `variant` gates the attention and prompting stages independently;
// with both off the pass-1 labels are final. Appends one AttentionRecord per
// (slice, sub-region) to `log` when attention is active and `log` is non-null.
SegmentationMask two_pass_segment(const Model& model, const AttentionParams& attn,
                                  const MultiModalVolume& volume, const VariantFlags& variant,
                                  const TwoPassOptions& opts = {},
                                  std::vector<AttentionRecord>* log = nullptr);

}  // namespace subseg
