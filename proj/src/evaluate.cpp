#include "subseg/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <thread>

#include "subseg/metrics.hpp"
#include "subseg/rng.hpp"

namespace subseg {

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& stdev) {
  if (xs.empty()) {
    mean = 0.0;
    stdev = 0.0;
    return;
  }
  double s = 0.0;
  for (double x : xs) s += x;
  mean = s / static_cast<double>(xs.size());
  double sq = 0.0;
  for (double x : xs) sq += (x - mean) * (x - mean);
  stdev = std::sqrt(sq / static_cast<double>(xs.size()));
}

}  // namespace

void MetricsReport::aggregate() {
  for (int r = 0; r < 5; ++r) {
    std::vector<double> ds, is;
    ds.reserve(cases.size());
    is.reserve(cases.size());
    for (const CaseScores& c : cases) {
      ds.push_back(c.dice[static_cast<size_t>(r)]);
      is.push_back(c.iou[static_cast<size_t>(r)]);
    }
    mean_std(ds, dice_mean[static_cast<size_t>(r)], dice_std[static_cast<size_t>(r)]);
    mean_std(is, iou_mean[static_cast<size_t>(r)], iou_std[static_cast<size_t>(r)]);
  }
}

CaseScores score_prediction(const std::string& case_id, const SegmentationMask& pred,
                            const SegmentationMask& gt) {
  if (pred.dims != gt.dims)
    throw std::invalid_argument("score_prediction: prediction and ground truth shapes differ");
  CaseScores s;
  s.case_id = case_id;
  const CompositeMasks pc = composite_masks(pred);
  const CompositeMasks gc = composite_masks(gt);
  const BinaryMask masks_p[5] = {label_mask(pred, 1), label_mask(pred, 2), pc.et, pc.wt, pc.tc};
  const BinaryMask masks_g[5] = {label_mask(gt, 1), label_mask(gt, 2), gc.et, gc.wt, gc.tc};
  for (int r = 0; r < 5; ++r) {
    s.dice[static_cast<size_t>(r)] = dice(masks_p[r], masks_g[r]);
    s.iou[static_cast<size_t>(r)] = iou(masks_p[r], masks_g[r]);
  }
  return s;
}

MetricsReport evaluate_dataset(const Model& model, const AttentionParams& attention,
                               const std::vector<NamedCase>& cases, const VariantFlags& variant,
                               const EvalOptions& opts,
                               std::vector<CaseAttention>* attention_log) {
  if (opts.jobs < 1) throw std::invalid_argument("evaluate_dataset: jobs must be >= 1");
  const size_t n = cases.size();

  struct Slot {
    bool ok = false;
    CaseScores scores;
    std::string reason;
    std::vector<AttentionRecord> records;
  };
  std::vector<Slot> slots(n);

  auto run_case = [&](size_t i) {
    Slot& slot = slots[i];
    try {
      auto [volume, gt] = archive_to_volume(cases[i].data);
      std::vector<AttentionRecord>* rec = attention_log ? &slot.records : nullptr;
      SegmentationMask pred =
          two_pass_segment(model, attention, volume, variant, opts.two_pass, rec);
      slot.scores = score_prediction(cases[i].id, pred, gt);
      slot.ok = true;
    } catch (const std::exception& e) {
      slot.reason = e.what();
    }
  };

  const size_t jobs = std::min<size_t>(static_cast<size_t>(opts.jobs), std::max<size_t>(n, 1));
  if (jobs <= 1) {
    for (size_t i = 0; i < n; ++i) run_case(i);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (size_t t = 0; t < jobs; ++t)
      pool.emplace_back([&, t] {
        for (size_t i = t; i < n; i += jobs) run_case(i);
      });
    for (std::thread& th : pool) th.join();
  }

  MetricsReport report;
  for (size_t i = 0; i < n; ++i) {
    if (slots[i].ok) {
      report.cases.push_back(std::move(slots[i].scores));
      if (attention_log)
        attention_log->push_back(CaseAttention{cases[i].id, std::move(slots[i].records)});
    } else {
      report.failures.push_back(CaseFailure{cases[i].id, slots[i].reason});
    }
  }
  report.aggregate();
  return report;
}

SplitResult split_cases(const std::vector<std::string>& case_ids, double train_frac,
                        uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0))
    throw std::invalid_argument("split_cases: train fraction must be in (0, 1)");
  if (case_ids.size() < 2)
    throw std::invalid_argument("split_cases: need at least 2 cases to split");
  const long n = static_cast<long>(case_ids.size());
  std::vector<long> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  long train_n = static_cast<long>(std::ceil(train_frac * static_cast<double>(n)));
  train_n = std::min(train_n, n - 1);  // keep the eval side nonempty

  SplitResult split;
  for (long i = 0; i < n; ++i) {
    const std::string& id = case_ids[static_cast<size_t>(order[static_cast<size_t>(i)])];
    (i < train_n ? split.train_ids : split.eval_ids).push_back(id);
  }
  return split;
}

const std::vector<AblationVariant>& ablation_grid() {
  static const std::vector<AblationVariant> grid{
      {"Fine-tuned Multi-modal", "baseline", VariantFlags{false, false}},
      {"+ Attention", "attention", VariantFlags{true, false}},
      {"+ Prompting", "prompting", VariantFlags{false, true}},
      {"Full Framework", "full", VariantFlags{true, true}},
  };
  return grid;
}

AblationResult ablation_run(const std::vector<NamedCase>& cases, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, double train_frac, uint64_t split_seed,
                            const EvalOptions& opts) {
  std::vector<std::string> ids;
  ids.reserve(cases.size());
  std::map<std::string, const NamedCase*> by_id;
  for (const NamedCase& c : cases) {
    if (!by_id.emplace(c.id, &c).second)
      throw std::invalid_argument("ablation_run: duplicate case id '" + c.id + "'");
    ids.push_back(c.id);
  }

  AblationResult result;
  SplitResult split = split_cases(ids, train_frac, split_seed);
  result.train_ids = split.train_ids;
  result.eval_ids = split.eval_ids;

  std::vector<CaseArchive> train_set;
  train_set.reserve(split.train_ids.size());
  for (const std::string& id : split.train_ids) train_set.push_back(by_id.at(id)->data);
  std::vector<NamedCase> eval_set;
  eval_set.reserve(split.eval_ids.size());
  for (const std::string& id : split.eval_ids) eval_set.push_back(*by_id.at(id));

  for (const AblationVariant& v : ablation_grid()) {
    try {
      Model model(model_cfg, train_cfg.seed);
      AttentionParams attn = AttentionParams::create(model.params(), model_cfg.encoder_dims.back());
      train(model, attn, train_set, train_cfg, v.flags);

      AblationRow row;
      row.name = v.name;
      row.report = evaluate_dataset(model, attn, eval_set, v.flags, opts);
      row.report.variant = v.slug;
      row.report.seed = train_cfg.seed;
      if (!row.report.failures.empty())
        throw std::runtime_error("evaluation failed on case '" +
                                 row.report.failures.front().case_id +
                                 "': " + row.report.failures.front().reason);
      for (int r = 0; r < 4; ++r) {
        row.dice_mean[static_cast<size_t>(r)] = row.report.dice_mean[static_cast<size_t>(r)];
        row.dice_std[static_cast<size_t>(r)] = row.report.dice_std[static_cast<size_t>(r)];
      }
      result.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      result.error = v.slug + std::string(": ") + e.what();
      break;
    }
  }
  return result;
}

}  // namespace subseg
