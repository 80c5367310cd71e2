// Release gate: one deterministic check per acceptance criterion, each
// printed as a single pass/fail line with its runtime budget. Checks compare
// library behavior against independent oracles (brute-force counting,
// explicit enumeration, sort-and-interpolate, finite differences) rather
// than against the implementation's own helpers. Run with no arguments for
// the full gate, or pass criterion ids (e.g. "A1 A7") to run a subset.

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "subseg/attention.hpp"
#include "subseg/autodiff.hpp"
#include "subseg/evaluate.hpp"
#include "subseg/metrics.hpp"
#include "subseg/model.hpp"
#include "subseg/nn.hpp"
#include "subseg/npz.hpp"
#include "subseg/phantom.hpp"
#include "subseg/prompting.hpp"
#include "subseg/report.hpp"
#include "subseg/rng.hpp"
#include "subseg/tensor.hpp"
#include "subseg/training.hpp"
#include "subseg/volume.hpp"
#include "test_helpers.hpp"

namespace fs = std::filesystem;
using namespace subseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  va_list ap;
  va_start(ap, f);
  char buf[512];
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ---------------------------------------------------------------------------
// A1: modality attention weights are a proper convex combination.
// Over random parameter/feature draws: weights sum to 1 (<= 1e-6), adding a
// constant to every energy leaves them unchanged (<= 1e-9), permuting the
// modalities permutes them bit-exactly, and fused features stay inside the
// per-element min/max envelope of the inputs.
// ---------------------------------------------------------------------------
Outcome check_attention_invariants() {
  Rng rng(41);
  double worst_sum = 0.0, worst_shift = 0.0;
  long perm_bad = 0, convex_bad = 0;
  const int draws = 1000;

  for (int t = 0; t < draws; ++t) {
    const long m = 2 + static_cast<long>(rng.below(5));
    const long c = 1 + static_cast<long>(rng.below(12));
    const long h = 2 + static_cast<long>(rng.below(4));
    const long w = 2 + static_cast<long>(rng.below(4));

    nn::ParamStore store;
    AttentionParams p = AttentionParams::create(store, c);
    for (int r = 0; r < 3; ++r) {
      for (double& v : p.w[r].value().data) v = rng.uniform(-2.0, 2.0);
      p.b[r].value()[0] = rng.uniform(-2.0, 2.0);
    }

    std::vector<Tensor> feats;
    for (long i = 0; i < m; ++i) {
      Tensor f({c, h, w});
      for (double& v : f.data) v = rng.uniform(-3.0, 3.0);
      feats.push_back(std::move(f));
    }

    const int r = static_cast<int>(rng.below(3));
    std::vector<double> e;
    for (const Tensor& f : feats) e.push_back(energy(p, f, r));
    const std::vector<double> alpha = attention_weights(e);

    double s = 0.0;
    for (double a : alpha) s += a;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));

    const double shift = rng.uniform(-20.0, 20.0);
    std::vector<double> e_shift = e;
    for (double& v : e_shift) v += shift;
    const std::vector<double> alpha_shift = attention_weights(e_shift);
    for (size_t i = 0; i < alpha.size(); ++i)
      worst_shift = std::max(worst_shift, std::abs(alpha_shift[i] - alpha[i]));

    std::vector<size_t> perm(e.size());
    std::iota(perm.begin(), perm.end(), size_t{0});
    rng.shuffle(perm);
    std::vector<double> e_perm(e.size());
    for (size_t i = 0; i < e.size(); ++i) e_perm[i] = e[perm[i]];
    const std::vector<double> alpha_perm = attention_weights(e_perm);
    for (size_t i = 0; i < e.size(); ++i)
      if (alpha_perm[i] != alpha[perm[i]]) ++perm_bad;

    const Tensor fused = fuse(feats, alpha);
    for (long i = 0; i < fused.numel(); ++i) {
      double lo = feats[0][i], hi = feats[0][i];
      for (long k = 1; k < m; ++k) {
        lo = std::min(lo, feats[static_cast<size_t>(k)][i]);
        hi = std::max(hi, feats[static_cast<size_t>(k)][i]);
      }
      if (fused[i] < lo || fused[i] > hi) ++convex_bad;
    }
  }

  Outcome o;
  o.pass = worst_sum <= 1e-6 && worst_shift <= 1e-9 && perm_bad == 0 && convex_bad == 0;
  o.detail = fmt("%d draws: max |sum-1| %.2e (bar 1e-6), max shift drift %.2e (bar 1e-9), "
                 "permutation mismatches %ld, convexity violations %ld",
                 draws, worst_sum, worst_shift, perm_bad, convex_bad);
  return o;
}

// ---------------------------------------------------------------------------
// A2: dice and iou equal brute-force voxel counting bit-exactly on random
// 8x8x8 mask pairs, and the Dice-IoU identity d = 2i/(1+i) holds to 1e-12.
// ---------------------------------------------------------------------------
Outcome check_metric_oracle() {
  Rng rng(7);
  const int pairs = 200;
  long mismatches = 0;
  double worst_identity = 0.0;

  auto random_mask = [&](double density) {
    BinaryMask mk;
    mk.dims = {8, 8, 8};
    mk.v.resize(512);
    for (uint8_t& b : mk.v) b = rng.uniform() < density ? 1 : 0;
    return mk;
  };

  auto check_pair = [&](const BinaryMask& a, const BinaryMask& b) {
    long ii = 0, aa = 0, bb = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
      aa += a.v[i] != 0;
      bb += b.v[i] != 0;
      ii += (a.v[i] != 0) && (b.v[i] != 0);
    }
    const double d_ref =
        aa + bb == 0 ? 1.0 : 2.0 * static_cast<double>(ii) / static_cast<double>(aa + bb);
    const long uni = aa + bb - ii;
    const double i_ref = uni == 0 ? 1.0 : static_cast<double>(ii) / static_cast<double>(uni);
    const double d = dice(a, b), i = iou(a, b);
    if (d != d_ref || i != i_ref) ++mismatches;
    worst_identity = std::max(worst_identity, std::abs(d - 2.0 * i / (1.0 + i)));
  };

  for (int t = 0; t < pairs; ++t)
    check_pair(random_mask(rng.uniform(0.05, 0.95)), random_mask(rng.uniform(0.05, 0.95)));
  check_pair(random_mask(0.0), random_mask(0.0));  // both empty -> 1.0
  check_pair(random_mask(0.0), random_mask(0.5));  // one empty -> 0.0

  Outcome o;
  o.pass = mismatches == 0 && worst_identity <= 1e-12;
  o.detail = fmt("%d random pairs + empty edge cases: %ld count mismatches, "
                 "dice-iou identity off by %.2e (bar 1e-12)",
                 pairs + 2, mismatches, worst_identity);
  return o;
}

// ---------------------------------------------------------------------------
// A3: analytic gradients match central finite differences to 1e-4 relative,
// for the combined loss and for the attention-fuse -> decode path on the
// desk-scale model. Finite differences probe a seeded sample of coordinates
// across the feature maps, the attention scorers, and reachable model
// parameters.
// ---------------------------------------------------------------------------
struct GradProbe {
  double worst = 0.0;  // relative error at the worst coordinate
  double an = 0.0, fd = 0.0;

  void merge(const GradProbe& o) {
    if (o.worst > worst) *this = o;
  }
};

GradProbe sampled_grad_err(const std::vector<ad::Var>& leaves,
                           const std::function<ad::Var()>& build, long probes_per_leaf, Rng& rng,
                           double h) {
  ad::Var loss = build();
  for (const ad::Var& l : leaves) const_cast<ad::Var&>(l).zero_grad();
  ad::backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (const ad::Var& l : leaves) analytic.push_back(const_cast<ad::Var&>(l).grad());

  GradProbe out;
  for (size_t k = 0; k < leaves.size(); ++k) {
    Tensor& v = const_cast<ad::Var&>(leaves[k]).value();
    const long n = v.numel();
    for (long probe = 0; probe < std::min(probes_per_leaf, n); ++probe) {
      const long i = probes_per_leaf >= n ? probe : static_cast<long>(rng.below(static_cast<uint64_t>(n)));
      const double an = analytic[k][i];
      // Richardson-extrapolated central difference: the h and h/4 estimates
      // cancel the quadratic truncation term, which otherwise dominates on
      // high-curvature coordinates at any single workable step size.
      const double f1 = testing::central_diff([&] { return build().value()[0]; },
                                              v.data[static_cast<size_t>(i)], h);
      const double f4 = testing::central_diff([&] { return build().value()[0]; },
                                              v.data[static_cast<size_t>(i)], h / 4.0);
      const double fd = (16.0 * f4 - f1) / 15.0;
      // A finite difference of the scalar loss cannot resolve below ~1e-11
      // absolute, so entries under 1e-5 are held to an absolute 1e-9 bar
      // (the 1e-5 denominator floor) instead of a pure relative one.
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-5});
      out.merge({rel, an, fd});
    }
  }
  return out;
}

Outcome check_gradient_fidelity() {
  Rng rng(5);
  const int instances = 20;
  GradProbe worst_loss, worst_path;

  // Combined loss wrt its logits, every coordinate.
  for (int t = 0; t < instances; ++t) {
    Tensor logits({5, 7});
    Tensor target({5, 7});
    for (double& v : logits.data) v = rng.uniform(-3.0, 3.0);
    for (double& v : target.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const double ls = rng.uniform(0.2, 2.0), li = rng.uniform(0.2, 2.0);
    ad::Var leaf = ad::Var::param(logits);
    worst_loss.merge(sampled_grad_err(
        {leaf}, [&] { return combined_loss_var(leaf, target, ls, li); }, logits.numel(), rng,
        1e-5));
  }

  // Attention-fuse -> decode on the desk preset: probe the four feature
  // maps, all six scorer tensors, and a sample of reachable model params.
  ModelConfig cfg = ModelConfig::desk(4);
  Model model(cfg, 123);
  AttentionParams attn = AttentionParams::create(model.params(), model.feature_channels());
  {
    Rng prng(99);
    for (int r = 0; r < 3; ++r) {
      for (double& v : attn.w[r].value().data) v = prng.uniform(-0.5, 0.5);
      attn.b[r].value()[0] = prng.uniform(-0.5, 0.5);
    }
  }
  const std::array<long, 2> hw = model.feature_hw();
  const long c = model.feature_channels();

  for (int t = 0; t < instances; ++t) {
    std::vector<ad::Var> feats;
    for (int m = 0; m < 4; ++m) {
      Tensor f({c, hw[0], hw[1]});
      for (double& v : f.data) v = rng.uniform(-1.0, 1.0);
      feats.push_back(ad::Var::param(std::move(f)));
    }
    const int r = static_cast<int>(rng.below(3));
    SpatialPrompt prompt;
    prompt.sub_region = kSubRegionLabels[static_cast<size_t>(r)];
    prompt.row_min = static_cast<long>(rng.below(24));
    prompt.col_min = static_cast<long>(rng.below(24));
    prompt.row_max = prompt.row_min + 4 + static_cast<long>(rng.below(32));
    prompt.col_max = prompt.col_min + 4 + static_cast<long>(rng.below(32));
    const bool prompted = t % 2 == 0;

    Tensor target({cfg.input_size[0], cfg.input_size[1]});
    for (double& v : target.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;

    auto build = [&] {
      FusedFeatures fused = attend_and_fuse_var(attn, feats);
      ad::Var pe;
      if (prompted) pe = model.encode_prompt_var(prompt);
      ad::Var logits = model.decode_mask_var(fused.per_region[static_cast<size_t>(r)],
                                             prompted ? &pe : nullptr);
      return combined_loss_var(logits, target, 1.0, 1.0);
    };

    std::vector<ad::Var> leaves = feats;
    for (int q = 0; q < 3; ++q) {
      leaves.push_back(attn.w[q]);
      leaves.push_back(attn.b[q]);
    }
    // Decoder-side parameters reachable from this loss; a fixed handful keeps
    // the probe count inside the runtime budget.
    const std::vector<std::string>& names = model.params().names();
    for (int picked = 0; picked < 4;) {
      const std::string& name = names[rng.below(names.size())];
      if (name.rfind("dec.", 0) != 0) continue;
      leaves.push_back(model.params().get(name));
      ++picked;
    }
    // Step size balances truncation against roundoff: gradients here are
    // O(1e-4), so 1e-5 steps leave the difference quotient noise-dominated.
    worst_path.merge(sampled_grad_err(leaves, build, 8, rng, 1e-4));
  }

  Outcome o;
  o.pass = worst_loss.worst <= 1e-4 && worst_path.worst <= 1e-4;
  o.detail = fmt("%d instances each: combined loss worst rel err %.2e, "
                 "fuse->decode worst rel err %.2e at grad %.2e vs fd %.2e (bar 1e-4)",
                 instances, worst_loss.worst, worst_path.worst, worst_path.an, worst_path.fd);
  return o;
}

// ---------------------------------------------------------------------------
// A4: preprocessing against independent oracles. Percentile clipping matches
// an explicit sort-and-interpolate + clamp loop to 1e-9; min-max mapping
// lands exactly on [0, 255] and is idempotent; the case archive round-trips
// through its file format bit-exactly.
// ---------------------------------------------------------------------------
Outcome check_preprocessing_oracle() {
  Rng rng(13);
  const int volumes = 100;
  double worst_clip = 0.0, worst_idem = 0.0;
  long range_bad = 0, roundtrip_bad = 0;

  for (int t = 0; t < volumes; ++t) {
    const long d = 2 + static_cast<long>(rng.below(5));
    const long h = 2 + static_cast<long>(rng.below(6));
    const long w = 2 + static_cast<long>(rng.below(6));
    Tensor vol({d, h, w});
    for (double& v : vol.data) v = rng.uniform(-50.0, 400.0);
    const double lo_pct = rng.uniform(0.0, 30.0);
    const double hi_pct = rng.uniform(70.0, 100.0);

    // Oracle: sort a copy, interpolate both cut points, clamp every value.
    std::vector<double> sorted = vol.data;
    std::sort(sorted.begin(), sorted.end());
    auto interp = [&](double pct) {
      const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
      const size_t k = static_cast<size_t>(pos);
      if (k + 1 >= sorted.size()) return sorted.back();
      return sorted[k] + (pos - static_cast<double>(k)) * (sorted[k + 1] - sorted[k]);
    };
    const double lo = interp(lo_pct), hi = interp(hi_pct);

    const Tensor clipped = clip_percentiles(vol, lo_pct, hi_pct);
    for (long i = 0; i < vol.numel(); ++i) {
      const double want = std::min(std::max(vol[i], lo), hi);
      worst_clip = std::max(worst_clip, std::abs(clipped[i] - want));
    }

    const Tensor norm = minmax_normalize(clipped);
    const auto [mn, mx] = std::minmax_element(norm.data.begin(), norm.data.end());
    if (*mn != 0.0 || *mx != 255.0) ++range_bad;
    const Tensor again = minmax_normalize(norm);
    for (long i = 0; i < norm.numel(); ++i)
      worst_idem = std::max(worst_idem, std::abs(again[i] - norm[i]));
  }

  // Archive file round trip, bit for bit.
  for (int t = 0; t < 10; ++t) {
    CaseArchive a;
    a.img_dims = {2 + static_cast<long>(rng.below(3)), 4 + static_cast<long>(rng.below(5)),
                  4 + static_cast<long>(rng.below(5)), 4};
    const long vox = a.img_dims[0] * a.img_dims[1] * a.img_dims[2];
    a.imgs.resize(static_cast<size_t>(vox * 4));
    a.gts.resize(static_cast<size_t>(vox));
    for (uint8_t& b : a.imgs) b = static_cast<uint8_t>(rng.below(256));
    static constexpr std::array<uint8_t, 4> kLabels{0, 1, 2, 4};
    for (uint8_t& b : a.gts) b = kLabels[rng.below(4)];
    a.spacing = {rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)};

    const std::string path =
        "/tmp/subseg_accept_" + std::to_string(::getpid()) + "_case.npz";
    save_case(a, path);
    const CaseArchive b = load_case(path);
    std::remove(path.c_str());
    if (b.img_dims != a.img_dims || b.imgs != a.imgs || b.gts != a.gts ||
        b.spacing != a.spacing)
      ++roundtrip_bad;
  }

  Outcome o;
  o.pass = worst_clip <= 1e-9 && range_bad == 0 && worst_idem <= 1e-9 && roundtrip_bad == 0;
  o.detail = fmt("%d volumes: clip off by %.2e (bar 1e-9), %ld range misses, "
                 "idempotence off by %.2e, %ld round-trip mismatches",
                 volumes, worst_clip, range_bad, worst_idem, roundtrip_bad);
  return o;
}

// ---------------------------------------------------------------------------
// Shared phantom benchmark for A5/A6: 25 noise-free separable phantoms, 20
// train / 5 held out under a seeded split.
// ---------------------------------------------------------------------------
std::vector<NamedCase> benchmark_cases() {
  const PhantomSpec spec = default_phantom_spec({24, 64, 64}, 0.0, 0);
  std::vector<CaseArchive> archives = generate_dataset(25, spec, 0);
  std::vector<NamedCase> cases;
  cases.reserve(archives.size());
  for (size_t i = 0; i < archives.size(); ++i)
    cases.push_back({fmt("case_%04zu", i), std::move(archives[i])});
  return cases;
}

// ---------------------------------------------------------------------------
// A5: training the full model on the 20 train phantoms (desk preset, 12
// epochs) reaches mean whole-tumor dice >= 0.90 on the train set and >= 0.80
// on the 5 held-out phantoms.
// ---------------------------------------------------------------------------
Outcome check_desk_scale_learning() {
  const std::vector<NamedCase> cases = benchmark_cases();
  std::vector<std::string> ids;
  for (const NamedCase& c : cases) ids.push_back(c.id);
  const SplitResult split = split_cases(ids, 0.8, 0);

  auto select = [&](const std::vector<std::string>& want) {
    std::vector<NamedCase> out;
    for (const NamedCase& c : cases)
      if (std::find(want.begin(), want.end(), c.id) != want.end()) out.push_back(c);
    return out;
  };
  const std::vector<NamedCase> train_cases = select(split.train_ids);
  const std::vector<NamedCase> eval_cases = select(split.eval_ids);

  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.seed = 0;
  Model model(ModelConfig::desk(4), cfg.seed);
  AttentionParams attn = AttentionParams::create(model.params(), model.feature_channels());
  std::vector<CaseArchive> train_archives;
  for (const NamedCase& c : train_cases) train_archives.push_back(c.data);
  train(model, attn, train_archives, cfg, VariantFlags{true, true});

  const MetricsReport on_train = evaluate_dataset(model, attn, train_cases, VariantFlags{true, true});
  const MetricsReport on_hold = evaluate_dataset(model, attn, eval_cases, VariantFlags{true, true});

  Outcome o;
  o.pass = train_cases.size() == 20 && eval_cases.size() == 5 &&
           on_train.failures.empty() && on_hold.failures.empty() &&
           on_train.dice_mean[3] >= 0.90 && on_hold.dice_mean[3] >= 0.80;
  o.detail = fmt("20 train / 5 held out, 12 epochs: whole-tumor dice %.4f on train "
                 "(bar 0.90), %.4f held out (bar 0.80)",
                 on_train.dice_mean[3], on_hold.dice_mean[3]);
  return o;
}

// ---------------------------------------------------------------------------
// A6: across five seeds on the phantom benchmark, mean whole-tumor dice
// orders Full >= +Attention >= baseline in at least three seeds, and the
// emitted ablation table has four variant rows by four region columns.
// ---------------------------------------------------------------------------
Outcome check_ablation_ordering() {
  const std::vector<NamedCase> cases = benchmark_cases();
  int ordered = 0;
  std::string per_seed;
  std::string table;

  for (uint64_t s = 0; s < 5; ++s) {
    TrainConfig cfg;
    cfg.epochs = 12;
    cfg.seed = s;
    const AblationResult res = ablation_run(cases, ModelConfig::desk(4), cfg, 0.8, s);
    if (!res.error.empty() || res.rows.size() != 4) {
      Outcome o;
      o.detail = fmt("seed %llu did not complete: %s", static_cast<unsigned long long>(s),
                     res.error.c_str());
      return o;
    }
    const double base = res.rows[0].dice_mean[3];
    const double att = res.rows[1].dice_mean[3];
    const double full = res.rows[3].dice_mean[3];
    const bool ok = full >= att && att >= base;
    ordered += ok;
    per_seed += fmt("%ss%llu %.3f/%.3f/%.3f", s ? ", " : "",
                    static_cast<unsigned long long>(s), base, att, full);

    if (s == 0) {
      std::vector<ReportRow> rows;
      for (const AblationRow& row : res.rows) {
        const std::vector<ReportRow> r = report_rows(row.report);
        rows.insert(rows.end(), r.begin(), r.end());
      }
      table = markdown_region_table(aggregate_rows(rows));
    }
  }

  // Table shape: header + separator + one line per variant, and the header
  // carries exactly the four region columns.
  long data_rows = -2;
  for (size_t pos = 0; pos < table.size();) {
    size_t nl = table.find('\n', pos);
    if (nl == std::string::npos) nl = table.size();
    if (table.compare(pos, 2, "| ") == 0) ++data_rows;
    pos = nl + 1;
  }
  const bool header_ok = table.find("| Method | Necrotic Core Dice | Edema Dice | "
                                    "Enhancing Tumor Dice | Whole Tumor Dice |") == 0;

  Outcome o;
  o.pass = ordered >= 3 && data_rows == 4 && header_ok;
  o.detail = fmt("wt dice base/att/full per seed: %s; ordering holds in %d/5 (bar 3); "
                 "table %ld rows x 4 region columns",
                 per_seed.c_str(), ordered, data_rows);
  return o;
}

// ---------------------------------------------------------------------------
// A7: the exact Wilcoxon signed-rank p equals an explicit all-sign-vectors
// enumeration for every n <= 10, and k-fold splits are disjoint covers with
// sizes differing by at most one.
// ---------------------------------------------------------------------------
double wilcoxon_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  const int m = static_cast<int>(d.size());
  if (m == 0) return 1.0;

  std::vector<int> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](int x, int y) { return std::fabs(d[static_cast<size_t>(x)]) <
                                       std::fabs(d[static_cast<size_t>(y)]); });
  std::vector<long> rank2(d.size());  // doubled midranks, exact integers
  for (int i = 0; i < m;) {
    int j = i;
    while (j < m && std::fabs(d[static_cast<size_t>(idx[static_cast<size_t>(j)])]) ==
                        std::fabs(d[static_cast<size_t>(idx[static_cast<size_t>(i)])]))
      ++j;
    const long doubled = i + j + 1;  // 2 * average of ranks i+1 .. j
    for (int t = i; t < j; ++t) rank2[static_cast<size_t>(idx[static_cast<size_t>(t)])] = doubled;
    i = j;
  }

  long w2_obs = 0;
  for (size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0.0) w2_obs += rank2[i];

  long cnt_le = 0, cnt_ge = 0;
  for (long mask = 0; mask < (1L << m); ++mask) {
    long w2 = 0;
    for (int i = 0; i < m; ++i)
      if (mask & (1L << i)) w2 += rank2[static_cast<size_t>(i)];
    cnt_le += w2 <= w2_obs;
    cnt_ge += w2 >= w2_obs;
  }
  const double denom = std::pow(2.0, m);
  return std::min(1.0, 2.0 * static_cast<double>(std::min(cnt_le, cnt_ge)) / denom);
}

Outcome check_statistics() {
  Rng rng(17);
  double worst_p = 0.0;
  long checked = 0;

  for (int n = 1; n <= 10; ++n) {
    for (int t = 0; t < 40; ++t) {
      std::vector<double> a(static_cast<size_t>(n)), b(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        b[static_cast<size_t>(i)] = rng.uniform(0.0, 1.0);
        // Half-integer differences in [-2, 2] force ties and zeros; the odd
        // draws use continuous differences instead.
        const double diff = t % 2 == 0
                                ? (static_cast<double>(rng.below(9)) - 4.0) / 2.0
                                : rng.uniform(-1.0, 1.0);
        a[static_cast<size_t>(i)] = b[static_cast<size_t>(i)] + diff;
      }
      worst_p = std::max(worst_p, std::abs(wilcoxon_signed_rank(a, b) - wilcoxon_oracle(a, b)));
      ++checked;
    }
  }

  // Pinned example: six positive differences -> p = 2/64.
  const std::vector<double> base(6, 0.5);
  std::vector<double> up(6);
  for (int i = 0; i < 6; ++i) up[static_cast<size_t>(i)] = 0.5 + 0.01 * (i + 1);
  const double p6 = wilcoxon_signed_rank(up, base);
  const bool pinned_ok = p6 == 0.03125 && wilcoxon_signed_rank(base, base) == 1.0;

  // k-fold splits: disjoint cover, sizes within one of each other.
  long fold_bad = 0;
  auto check_fold = [&](long n, long k, uint64_t seed) {
    std::vector<std::string> ids;
    for (long i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
    const FoldSplit fsplit = kfold_split(ids, k, seed);
    std::vector<std::string> all;
    long mn = n, mx = 0;
    for (const std::vector<std::string>& f : fsplit.folds) {
      mn = std::min(mn, static_cast<long>(f.size()));
      mx = std::max(mx, static_cast<long>(f.size()));
      all.insert(all.end(), f.begin(), f.end());
    }
    std::sort(all.begin(), all.end());
    std::vector<std::string> want = ids;
    std::sort(want.begin(), want.end());
    if (all != want || mx - mn > 1 || static_cast<long>(fsplit.folds.size()) != k) ++fold_bad;
    return fsplit;
  };
  const FoldSplit brats = check_fold(369, 5, 0);
  std::array<long, 5> sizes{};
  for (size_t i = 0; i < 5; ++i) sizes[i] = static_cast<long>(brats.folds[i].size());
  std::sort(sizes.begin(), sizes.end(), std::greater<>());
  const bool brats_ok = sizes == std::array<long, 5>{74, 74, 74, 74, 73};
  for (int t = 0; t < 30; ++t) {
    const long k = 2 + static_cast<long>(rng.below(7));
    const long n = k + static_cast<long>(rng.below(54));
    check_fold(n, k, static_cast<uint64_t>(t));
  }

  Outcome o;
  o.pass = worst_p <= 1e-12 && pinned_ok && fold_bad == 0 && brats_ok;
  o.detail = fmt("%ld wilcoxon vectors (n<=10): worst |p - oracle| %.2e (bar 1e-12), "
                 "p6=%.5f; fold violations %ld, 369/5 sizes %s",
                 checked, worst_p, p6, fold_bad, brats_ok ? "{74,74,74,74,73}" : "WRONG");
  return o;
}

// ---------------------------------------------------------------------------
// A8: box prompts are tight (every shrink drops a region pixel), absent
// regions raise the empty flag and are rejected by refinement, and region
// merging reproduces the threshold/priority rule on an exhaustive 0.1-step
// probability grid.
// ---------------------------------------------------------------------------
Outcome check_prompting_mechanics() {
  Rng rng(23);
  const int masks = 500;
  long box_bad = 0;

  for (int t = 0; t < masks; ++t) {
    LabelSlice slice;
    slice.dims = {3 + static_cast<long>(rng.below(22)), 3 + static_cast<long>(rng.below(22))};
    slice.v.assign(static_cast<size_t>(slice.dims[0] * slice.dims[1]), 0);
    const uint8_t region = kSubRegionLabels[rng.below(3)];
    for (uint8_t& v : slice.v) {
      const double u = rng.uniform();
      if (u < 0.08) v = region;
      else if (u < 0.16) v = kSubRegionLabels[rng.below(3)];
    }
    slice.v[rng.below(slice.v.size())] = region;  // at least one pixel

    const SpatialPrompt box = extract_bbox(slice, region, 0);
    if (box.empty_flag) {
      ++box_bad;
      continue;
    }
    bool contains = true;
    bool edge_r0 = false, edge_r1 = false, edge_c0 = false, edge_c1 = false;
    for (long r = 0; r < slice.dims[0]; ++r)
      for (long c = 0; c < slice.dims[1]; ++c) {
        if (slice.at(r, c) != region) continue;
        if (r < box.row_min || r > box.row_max || c < box.col_min || c > box.col_max)
          contains = false;
        edge_r0 |= r == box.row_min;
        edge_r1 |= r == box.row_max;
        edge_c0 |= c == box.col_min;
        edge_c1 |= c == box.col_max;
      }
    if (!(contains && edge_r0 && edge_r1 && edge_c0 && edge_c1)) ++box_bad;
  }

  // Absent region: flagged empty, coordinates parked at -1, refinement
  // refuses the prompt.
  LabelSlice blank;
  blank.dims = {6, 6};
  blank.v.assign(36, 0);
  const SpatialPrompt empty_box = extract_bbox(blank, 4, 0);
  bool empty_ok = empty_box.empty_flag && empty_box.row_min == -1;
  {
    Model model(ModelConfig::desk(4), 3);
    Tensor feats({model.feature_channels(), model.feature_hw()[0], model.feature_hw()[1]});
    for (double& v : feats.data) v = rng.uniform(-1.0, 1.0);
    try {
      refine_subregion(model, feats, empty_box);
      empty_ok = false;
    } catch (const std::exception&) {
    }
  }

  // Margin expansion stays inside the slice.
  LabelSlice corner;
  corner.dims = {5, 5};
  corner.v.assign(25, 0);
  corner.at(0, 4) = 2;
  const SpatialPrompt wide = extract_bbox(corner, 2, 3);
  const bool margin_ok = wide.row_min == 0 && wide.col_min == 1 && wide.row_max == 3 &&
                         wide.col_max == 4 && !wide.empty_flag;

  // Exhaustive 0.1-resolution grid: label = highest probability reaching the
  // 0.5 threshold, ties broken enhancing > necrotic > edema, else background.
  long merge_bad = 0;
  for (int i = 0; i <= 10; ++i)
    for (int j = 0; j <= 10; ++j)
      for (int k = 0; k <= 10; ++k) {
        const double pn = i / 10.0, pe = j / 10.0, pt = k / 10.0;
        uint8_t want = 0;
        double best = -1.0;
        // Priority order: check ET first, then NCR, then ED; strict > keeps
        // the first of equals.
        const std::array<std::pair<double, uint8_t>, 3> ranked{
            std::pair{pt, uint8_t{4}}, std::pair{pn, uint8_t{1}}, std::pair{pe, uint8_t{2}}};
        for (const auto& [p, label] : ranked)
          if (p >= 0.5 && p > best) {
            best = p;
            want = label;
          }
        const LabelSlice merged = combine_subregions(Tensor::from({1, 1}, {pn}),
                                                     Tensor::from({1, 1}, {pe}),
                                                     Tensor::from({1, 1}, {pt}), 0.5);
        if (merged.v[0] != want) ++merge_bad;
      }

  Outcome o;
  o.pass = box_bad == 0 && empty_ok && margin_ok && merge_bad == 0;
  o.detail = fmt("%d boxes: %ld tightness violations; empty flag %s, margin clamp %s; "
                 "merge rule mismatches %ld/1331",
                 masks, box_bad, empty_ok ? "ok" : "BAD", margin_ok ? "ok" : "BAD", merge_bad);
  return o;
}

// ---------------------------------------------------------------------------
// A9: the command-line chain phantom -> preprocess -> train(2 epochs) ->
// infer -> eval, run twice from the same seed, produces byte-identical
// report CSVs.
// ---------------------------------------------------------------------------
std::string cli_path() {
  if (const char* env = std::getenv("SUBSEG_CLI")) return env;
  std::error_code ec;
  const fs::path self = fs::read_symlink("/proc/self/exe", ec);
  if (!ec) return (self.parent_path() / "subseg").string();
  return "subseg";
}

Outcome check_pipeline_determinism() {
  const std::string cli = cli_path();
  const fs::path root = fs::path("/tmp") / ("subseg_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);

  auto run_chain = [&](const std::string& tag) -> std::string {
    const fs::path dir = root / tag;
    fs::create_directories(dir);
    const std::string d = dir.string();
    const std::vector<std::string> steps = {
        cli + " phantom --n 3 --size 12x64x64 --noise 0 --seed 11 --out " + d + "/raw",
        cli + " preprocess --in " + d + "/raw --out " + d + "/prep",
        cli + " train --data " + d + "/prep --epochs 2 --seed 3 --out " + d + "/m.ckpt",
        cli + " infer --model " + d + "/m.ckpt --case " + d + "/prep/case_0000.npz --out " +
            d + "/pred.npz",
        cli + " eval --model " + d + "/m.ckpt --data " + d + "/prep --out " + d + "/r.csv",
    };
    for (const std::string& cmd : steps) {
      const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
      if (!WIFEXITED(rc) || WEXITSTATUS(rc) != 0)
        throw std::runtime_error("step failed (" + cmd + ")");
    }
    std::ifstream f(dir / "r.csv", std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };

  Outcome o;
  try {
    const std::string first = run_chain("one");
    const std::string second = run_chain("two");
    o.pass = !first.empty() && first == second;
    o.detail = fmt("two chained runs, %zu-byte report CSVs, %s", first.size(),
                   o.pass ? "byte-identical" : "DIFFER");
  } catch (const std::exception& e) {
    o.detail = e.what();
  }
  if (o.pass) fs::remove_all(root);
  return o;
}

struct Criterion {
  const char* id;
  const char* what;
  double budget_s;
  Outcome (*fn)();
};

const std::array<Criterion, 9> kCriteria{{
    {"A1", "attention weight invariants", 5.0, check_attention_invariants},
    {"A2", "metric oracle equivalence", 5.0, check_metric_oracle},
    {"A3", "gradient fidelity", 120.0, check_gradient_fidelity},
    {"A4", "preprocessing oracle", 10.0, check_preprocessing_oracle},
    {"A5", "desk-scale learning", 1800.0, check_desk_scale_learning},
    {"A6", "ablation ordering", 7200.0, check_ablation_ordering},
    {"A7", "statistics", 10.0, check_statistics},
    {"A8", "prompting mechanics", 10.0, check_prompting_mechanics},
    {"A9", "pipeline determinism", 300.0, check_pipeline_determinism},
}};

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> want(argv + 1, argv + argc);
  for (const std::string& id : want) {
    const bool known = std::any_of(kCriteria.begin(), kCriteria.end(),
                                   [&](const Criterion& c) { return id == c.id; });
    if (!known) {
      std::fprintf(stderr, "unknown criterion '%s' (valid: A1..A9)\n", id.c_str());
      return 2;
    }
  }

  int failures = 0, ran = 0;
  for (const Criterion& c : kCriteria) {
    if (!want.empty() && std::find(want.begin(), want.end(), c.id) == want.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.fn();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs <= c.budget_s;
    const bool pass = out.pass && in_budget;
    failures += !pass;
    std::printf("%s %s: %s (%.1fs of %.0fs) %s%s\n", c.id, c.what, pass ? "PASS" : "FAIL", secs,
                c.budget_s, out.detail.c_str(), in_budget ? "" : " [over time budget]");
    std::fflush(stdout);
  }

  std::printf("acceptance: %d/%d passed\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
