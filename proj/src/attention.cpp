#include "subseg/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace subseg {

using ad::Var;

int subregion_index(uint8_t label) {
  for (int i = 0; i < 3; ++i)
    if (kSubRegionLabels[size_t(i)] == label) return i;
  throw std::invalid_argument("attention: invalid sub-region label " + std::to_string(int(label)));
}

namespace {

std::string region_key(int r) {
  const char* names[3] = {"ncr", "ed", "et"};
  return names[r];
}

void check_region(int r) {
  if (r < 0 || r > 2) throw std::invalid_argument("attention: sub-region index outside [0,2]");
}

}  // namespace

AttentionParams AttentionParams::create(nn::ParamStore& store, long channels) {
  if (channels < 1) throw std::invalid_argument("attention: channels must be >= 1");
  AttentionParams p;
  p.channels = channels;
  for (int r = 0; r < 3; ++r) {
    p.w[size_t(r)] = store.create("attn." + region_key(r) + ".w", Tensor({1, channels}));
    p.b[size_t(r)] = store.create("attn." + region_key(r) + ".b", Tensor({1}));
  }
  return p;
}

AttentionParams AttentionParams::from_store(const nn::ParamStore& store, long channels) {
  AttentionParams p;
  p.channels = channels;
  for (int r = 0; r < 3; ++r) {
    p.w[size_t(r)] = store.get("attn." + region_key(r) + ".w");
    p.b[size_t(r)] = store.get("attn." + region_key(r) + ".b");
    if (p.w[size_t(r)].value().dims != std::vector<long>{1, channels})
      throw std::invalid_argument("attention: stored weights do not match channel count");
  }
  return p;
}

Var energy_var(const AttentionParams& params, const Var& f_m, int r) {
  check_region(r);
  if (f_m.value().rank() != 3 || f_m.value().dim(0) != params.channels)
    throw std::invalid_argument("attention: feature channels do not match W_r");
  const Var pooled = ad::reshape_copy(ad::gap_chw(f_m), {params.channels, 1});
  const Var affine = ad::add(ad::reshape_copy(ad::matmul(params.w[size_t(r)], pooled), {1}),
                             params.b[size_t(r)]);
  return ad::tanh_op(affine);
}

Var attention_weights_var(const std::vector<Var>& energies) {
  if (energies.empty()) throw std::invalid_argument("attention: need at least one energy");
  std::vector<Var> rows;
  rows.reserve(energies.size());
  for (const Var& e : energies) {
    for (double v : e.value().data)
      if (!std::isfinite(v)) throw std::invalid_argument("attention: non-finite energy");
    rows.push_back(ad::reshape_copy(e, {1, 1}));
  }
  const Var stacked = ad::reshape_copy(ad::concat_rows(rows), {long(energies.size())});
  return ad::softmax_vec_canonical(stacked);
}

Var fuse_var(const Var& alpha, const std::vector<Var>& maps) {
  if (maps.empty() || alpha.value().numel() != long(maps.size()))
    throw std::invalid_argument("attention: weight count does not match modality count");
  double sum = 0.0;
  for (double a : alpha.value().data) sum += a;
  if (std::fabs(sum - 1.0) > 1e-6)
    throw std::invalid_argument("attention: weights do not sum to 1");
  for (const Var& m : maps)
    if (m.value().dims != maps[0].value().dims)
      throw std::invalid_argument("attention: feature map shapes differ");
  return ad::fuse_convex(alpha, maps);
}

FusedFeatures attend_and_fuse_var(const AttentionParams& params, const std::vector<Var>& features) {
  if (features.empty()) throw std::invalid_argument("attention: no features");
  FusedFeatures out;
  for (int r = 0; r < 3; ++r) {
    std::vector<Var> energies;
    energies.reserve(features.size());
    for (const Var& f : features) energies.push_back(energy_var(params, f, r));
    out.alpha[size_t(r)] = attention_weights_var(energies);
    out.per_region[size_t(r)] = fuse_var(out.alpha[size_t(r)], features);
  }
  return out;
}

double energy(const AttentionParams& params, const Tensor& f_m, int r) {
  ad::NoGradGuard ng;
  return energy_var(params, Var::constant(f_m), r).value().data[0];
}

std::vector<double> attention_weights(const std::vector<double>& energies) {
  ad::NoGradGuard ng;
  std::vector<Var> es;
  es.reserve(energies.size());
  for (double e : energies) es.push_back(Var::constant(Tensor::scalar(e)));
  return attention_weights_var(es).value().data;
}

Tensor fuse(const std::vector<Tensor>& features, const std::vector<double>& alpha) {
  ad::NoGradGuard ng;
  std::vector<Var> maps;
  maps.reserve(features.size());
  for (const Tensor& f : features) maps.push_back(Var::constant(f));
  return fuse_var(Var::constant(Tensor::from({long(alpha.size())}, alpha)), maps).value();
}

Var mean_fuse_var(const std::vector<Var>& features) {
  if (features.empty()) throw std::invalid_argument("attention: no features");
  const long m = long(features.size());
  return fuse_var(Var::constant(Tensor({m}, 1.0 / double(m))), features);
}

}  // namespace subseg
