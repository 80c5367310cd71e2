#include "subseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "subseg/rng.hpp"

namespace subseg {

namespace {

struct Overlap {
  long a = 0, b = 0, both = 0;
};

Overlap count_overlap(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.dims != gt.dims)
    throw std::invalid_argument("metrics: mask shapes differ");
  const long n = pred.dims[0] * pred.dims[1] * pred.dims[2];
  if (static_cast<long>(pred.v.size()) != n || static_cast<long>(gt.v.size()) != n)
    throw std::invalid_argument("metrics: mask size does not match dims");
  Overlap o;
  for (long i = 0; i < n; ++i) {
    const bool p = pred.v[static_cast<size_t>(i)] != 0;
    const bool g = gt.v[static_cast<size_t>(i)] != 0;
    o.a += p;
    o.b += g;
    o.both += p && g;
  }
  return o;
}

}  // namespace

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  const Overlap o = count_overlap(pred, gt);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  const Overlap o = count_overlap(pred, gt);
  const long uni = o.a + o.b - o.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.both) / static_cast<double>(uni);
}

BinaryMask label_mask(const SegmentationMask& mask, uint8_t label) {
  BinaryMask out;
  out.dims = mask.dims;
  out.v.resize(mask.labels.size());
  for (size_t i = 0; i < mask.labels.size(); ++i) out.v[i] = mask.labels[i] == label;
  return out;
}

CompositeMasks composite_masks(const SegmentationMask& mask) {
  mask.validate();
  CompositeMasks c;
  c.wt.dims = c.tc.dims = c.et.dims = mask.dims;
  c.wt.v.resize(mask.labels.size());
  c.tc.v.resize(mask.labels.size());
  c.et.v.resize(mask.labels.size());
  for (size_t i = 0; i < mask.labels.size(); ++i) {
    const uint8_t l = mask.labels[i];
    c.wt.v[i] = l == 1 || l == 2 || l == 4;
    c.tc.v[i] = l == 1 || l == 4;
    c.et.v[i] = l == 4;
  }
  return c;
}

FoldSplit kfold_split(const std::vector<std::string>& case_ids, long k, uint64_t seed) {
  const long n = static_cast<long>(case_ids.size());
  if (k < 1) throw std::invalid_argument("kfold_split: k must be >= 1");
  if (k > n)
    throw std::invalid_argument("kfold_split: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(n) + " cases");
  std::vector<long> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);

  FoldSplit split;
  split.folds.resize(static_cast<size_t>(k));
  const long q = n / k, r = n % k;
  long at = 0;
  for (long f = 0; f < k; ++f) {
    const long sz = q + (f < r ? 1 : 0);
    for (long i = 0; i < sz; ++i)
      split.folds[static_cast<size_t>(f)].push_back(
          case_ids[static_cast<size_t>(order[static_cast<size_t>(at++)])]);
  }
  return split;
}

double wilcoxon_signed_rank(const std::vector<double>& scores_a,
                            const std::vector<double>& scores_b) {
  if (scores_a.size() != scores_b.size())
    throw std::invalid_argument("wilcoxon: paired score lists differ in length");
  std::vector<double> d;
  for (size_t i = 0; i < scores_a.size(); ++i) {
    const double diff = scores_a[i] - scores_b[i];
    if (diff != 0.0) d.push_back(diff);
  }
  const long m = static_cast<long>(d.size());
  if (m == 0) return 1.0;

  // Average ranks of |d|, ties averaged; doubled ranks are exact integers.
  std::vector<long> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](long x, long y) { return std::fabs(d[static_cast<size_t>(x)]) <
                                         std::fabs(d[static_cast<size_t>(y)]); });
  std::vector<double> rank(d.size());
  double tie_term = 0.0;
  for (long i = 0; i < m;) {
    long j = i;
    while (j < m && std::fabs(d[static_cast<size_t>(idx[static_cast<size_t>(j)])]) ==
                        std::fabs(d[static_cast<size_t>(idx[static_cast<size_t>(i)])]))
      ++j;
    const double avg = static_cast<double>(i + j - 1) / 2.0 + 1.0;
    for (long t = i; t < j; ++t) rank[static_cast<size_t>(idx[static_cast<size_t>(t)])] = avg;
    const double tlen = static_cast<double>(j - i);
    tie_term += tlen * tlen * tlen - tlen;
    i = j;
  }

  double w_plus = 0.0;
  for (size_t i = 0; i < d.size(); ++i)
    if (d[i] > 0.0) w_plus += rank[i];

  if (m <= 25) {
    // Exact: distribution of 2*W+ over all 2^m sign assignments by subset-sum
    // counting over doubled ranks.
    const long total = m * (m + 1);  // sum of doubled ranks
    std::vector<double> cnt(static_cast<size_t>(total + 1), 0.0);
    cnt[0] = 1.0;
    for (double rk : rank) {
      const long dr = std::lround(2.0 * rk);
      for (long s = total; s >= dr; --s)
        cnt[static_cast<size_t>(s)] += cnt[static_cast<size_t>(s - dr)];
    }
    const long w2 = std::lround(2.0 * w_plus);
    double lo_cnt = 0.0, hi_cnt = 0.0;
    for (long s = 0; s <= total; ++s) {
      if (s <= w2) lo_cnt += cnt[static_cast<size_t>(s)];
      if (s >= w2) hi_cnt += cnt[static_cast<size_t>(s)];
    }
    const double denom = std::pow(2.0, static_cast<double>(m));
    return std::min(1.0, 2.0 * std::min(lo_cnt, hi_cnt) / denom);
  }

  const double md = static_cast<double>(m);
  const double mean = md * (md + 1.0) / 4.0;
  const double var = md * (md + 1.0) * (2.0 * md + 1.0) / 24.0 - tie_term / 48.0;
  if (var <= 0.0) return 1.0;
  double num = w_plus - mean;
  if (num > 0.5)
    num -= 0.5;  // continuity correction toward the mean
  else if (num < -0.5)
    num += 0.5;
  else
    num = 0.0;
  const double z = std::fabs(num) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace subseg
