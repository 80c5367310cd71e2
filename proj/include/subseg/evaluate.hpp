#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "subseg/attention.hpp"
#include "subseg/model.hpp"
#include "subseg/prompting.hpp"
#include "subseg/training.hpp"
#include "subseg/volume.hpp"

namespace subseg {

/// Score columns, in report order: the three sub-regions, then the standard
/// composites (whole tumor, tumor core).
inline constexpr std::array<const char*, 5> kRegionColumns{"ncr", "ed", "et", "wt", "tc"};

struct NamedCase {
  std::string id;
  CaseArchive data;
};

/// Dice and IoU per region for one case, indexed like kRegionColumns.
struct CaseScores {
  std::string case_id;
  std::array<double, 5> dice{};
  std::array<double, 5> iou{};
};

struct CaseFailure {
  std::string case_id;
  std::string reason;
};

/// Per-case scores plus population mean/std aggregates. Failed cases are
/// recorded and excluded from the aggregates.
struct MetricsReport {
  std::vector<CaseScores> cases;
  std::vector<CaseFailure> failures;
  std::array<double, 5> dice_mean{}, dice_std{};
  std::array<double, 5> iou_mean{}, iou_std{};

  // Metadata stamped into report rows.
  std::string variant = "full";
  long fold = 0;
  uint64_t seed = 0;

  /// Recomputes the mean/std aggregates from the per-case scores.
  void aggregate();
};

/// Scores a prediction against ground truth over all five regions.
CaseScores score_prediction(const std::string& case_id, const SegmentationMask& pred,
                            const SegmentationMask& gt);

/// Attention weights observed while segmenting one case.
struct CaseAttention {
  std::string case_id;
  std::vector<AttentionRecord> records;
};

struct EvalOptions {
  TwoPassOptions two_pass;
  long jobs = 1;
};

/// Segments and scores every case. Cases are independent, so `jobs` worker
/// threads may run them concurrently; results keep the input order either
/// way. A case that throws is recorded as a failure, not propagated.
MetricsReport evaluate_dataset(const Model& model, const AttentionParams& attention,
                               const std::vector<NamedCase>& cases, const VariantFlags& variant,
                               const EvalOptions& opts = {},
                               std::vector<CaseAttention>* attention_log = nullptr);

/// Seeded shuffle, then the first ceil(n * train_frac) ids train and the
/// rest evaluate.
struct SplitResult {
  std::vector<std::string> train_ids;
  std::vector<std::string> eval_ids;
};
SplitResult split_cases(const std::vector<std::string>& case_ids, double train_frac,
                        uint64_t seed);

/// One ablation grid row: table name, report slug, and the flags behind it.
struct AblationVariant {
  std::string name;
  std::string slug;
  VariantFlags flags;
};

/// Baseline, each mechanism alone, then both together.
const std::vector<AblationVariant>& ablation_grid();

struct AblationRow {
  std::string name;
  std::array<double, 4> dice_mean{};  // ncr, ed, et, wt
  std::array<double, 4> dice_std{};
  MetricsReport report;
};

struct AblationResult {
  std::vector<AblationRow> rows;  // completed variants, grid order
  std::string error;              // empty when every variant completed
  std::vector<std::string> train_ids, eval_ids;
};

/// Trains and evaluates every grid variant from the same initial weights on
/// the same split. A variant failure stops the run but keeps finished rows.
AblationResult ablation_run(const std::vector<NamedCase>& cases, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, double train_frac, uint64_t split_seed,
                            const EvalOptions& opts = {});

}  // namespace subseg
