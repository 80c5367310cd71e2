#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "subseg/evaluate.hpp"

namespace subseg {

/// One case/region score line of a results CSV.
struct ReportRow {
  std::string case_id;
  std::string region;  // one of kRegionColumns
  double dice = 0.0;
  double iou = 0.0;
  std::string variant;
  long fold = 0;
  uint64_t seed = 0;
};

/// Flattens a report into rows, one per case and region, in case order.
std::vector<ReportRow> report_rows(const MetricsReport& report);

/// Columns: case_id, region, dice, iou, variant, fold, seed.
void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows);

/// Header-validated reader; a missing column is an error naming it.
std::vector<ReportRow> read_report_csv(const std::string& path);

/// One attention observation: weights for a slice and sub-region.
struct AttentionRow {
  std::string case_id;
  long slice = 0;
  std::string sub_region;  // "ncr", "ed", "et"
  std::array<double, 4> alpha{};
};

std::vector<AttentionRow> attention_rows(const std::vector<CaseAttention>& log);

/// Columns: case, slice, sub_region, alpha_T1, alpha_T1c, alpha_T2, alpha_FLAIR.
void write_attention_csv(const std::string& path, const std::vector<AttentionRow>& rows);
std::vector<AttentionRow> read_attention_csv(const std::string& path);

/// Mean and population std of one metric over the cases of a group.
struct ScoreAgg {
  double dice_mean = 0.0, dice_std = 0.0;
  double iou_mean = 0.0, iou_std = 0.0;
  long n = 0;
};

/// Aggregates rows per (variant, region); variants keep first-seen order.
struct RowAggregate {
  std::vector<std::string> variants;
  std::map<std::string, std::map<std::string, ScoreAgg>> stats;

  const ScoreAgg* find(const std::string& variant, const std::string& region) const;
};
RowAggregate aggregate_rows(const std::vector<ReportRow>& rows);

/// "Necrotic Core" for "ncr" and so on; unknown slugs pass through.
std::string region_display(const std::string& slug);

/// Ablation grid display name for a variant slug; unknown slugs pass through.
std::string variant_display(const std::string& slug);

/// One row per variant with whole-tumor Dice and IoU (mean +/- std).
std::string markdown_overall_table(const RowAggregate& agg,
                                   const std::string& label_column = "Method");

/// One row per variant, Dice per region column (NCR, ED, ET, WT).
std::string markdown_region_table(const RowAggregate& agg,
                                  const std::string& label_column = "Method");

/// Wilcoxon signed-rank p-values of each variant against the first, paired
/// by case on whole-tumor Dice. Empty when the case sets differ.
std::string markdown_significance_notes(const std::vector<ReportRow>& rows);

/// Mean attention weight per sub-region and modality.
std::string markdown_attention_summary(const std::vector<AttentionRow>& rows);

/// Grouped bar chart of Dice per region, one bar per variant, with
/// mean +/- std whiskers.
std::string svg_dice_bars(const RowAggregate& agg, const std::string& title);

}  // namespace subseg
