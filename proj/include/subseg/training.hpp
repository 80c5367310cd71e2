#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "subseg/attention.hpp"
#include "subseg/autodiff.hpp"
#include "subseg/model.hpp"
#include "subseg/rng.hpp"
#include "subseg/volume.hpp"

namespace subseg {

// Mean binary cross-entropy over logits. Target entries must be 0 or 1.
double ce_loss(const Tensor& logits, const Tensor& target);
// Soft intersection-over-union style overlap loss on sigmoid probabilities,
// smoothed so empty targets are well defined.
double iou_loss(const Tensor& logits, const Tensor& target, double eps = 1.0);
double combined_loss(const Tensor& logits, const Tensor& target, double lambda_seg,
                     double lambda_iou);
ad::Var combined_loss_var(const ad::Var& logits, const Tensor& target, double lambda_seg,
                          double lambda_iou);

// Cosine decay from base_lr at step 0 to 0 at step == total_steps.
double cosine_lr(long step, long total_steps, double base_lr);

struct AugmentConfig {
  double rotate_deg = 15.0;  // rotation drawn uniformly in +-rotate_deg
  std::array<double, 2> scale{0.9, 1.1};
  double intensity_jitter_frac = 0.1;  // per-modality gain in 1 +- frac
};

struct AugmentDraw {
  double angle_deg = 0.0;
  double scale = 1.0;
  std::vector<double> gain;  // one multiplicative factor per modality
};

AugmentDraw draw_augment(const AugmentConfig& cfg, long modalities, Rng& rng);

// Applies the drawn rotation and scale about the slice center (bilinear for
// intensities, nearest for labels, zero outside), then the per-modality gains,
// clipping intensities to [0, 255]. An identity draw returns exact copies.
std::pair<Tensor, LabelSlice> apply_augment(const Tensor& slice_hwm, const LabelSlice& labels,
                                            const AugmentDraw& draw);

// One-vs-all target sampling: picks uniformly among sub-regions present in
// the slice (all three when none are) and returns the chosen label with its
// binary target map.
std::pair<uint8_t, Tensor> sample_subregion_target(const LabelSlice& labels, Rng& rng);

struct TrainConfig {
  long epochs = 12;
  double base_lr = 1e-3;
  long batch_size = 2;
  double lambda_seg = 1.0;
  double lambda_iou = 1.0;
  uint64_t seed = 0;
  AugmentConfig augmentation;
  double tau = 0.5;
  long refine_iters = 1;
  long steps_per_epoch = 0;  // 0 derives ceil(tumor slices / batch_size)

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct EpochStats {
  long epoch = 0;
  double lr = 0.0;
  double loss_ce = 0.0;
  double loss_iou = 0.0;
  // Validation dice per sub-region (NCR, ED, ET) on the center slice of up
  // to four cases, using the current weights and the full two-pass forward.
  std::array<double, 3> val_dice{0.0, 0.0, 0.0};
};

using TrainHistory = std::vector<EpochStats>;

void write_history_csv(const TrainHistory& history, const std::string& path);

// Optimizes the model (attention parameters included) on the given cases.
// Each step samples slices containing tumor, augments them, picks a
// one-vs-all target, and averages the pass-1 and pass-2 combined losses.
// Throws if the loss turns non-finite.
TrainHistory train(Model& model, const AttentionParams& attn,
                   const std::vector<CaseArchive>& cases, const TrainConfig& cfg,
                   const VariantFlags& variant);

}  // namespace subseg
