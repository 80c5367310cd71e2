#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "subseg/autodiff.hpp"
#include "subseg/nn.hpp"
#include "subseg/tensor.hpp"

namespace subseg {

inline constexpr std::array<uint8_t, 3> kSubRegionLabels{1, 2, 4};  // NCR, ED, ET
inline constexpr std::array<const char*, 3> kSubRegionNames{"NCR", "ED", "ET"};

/// Index of a sub-region label in kSubRegionLabels; throws on other values.
int subregion_index(uint8_t label);

/// One linear scorer (W_r, b_r) per sub-region, applied to channel-pooled
/// modality features. Zero initialization gives uniform attention.
struct AttentionParams {
  std::array<ad::Var, 3> w;  // each [1, C]
  std::array<ad::Var, 3> b;  // each [1]
  long channels = 0;

  static AttentionParams create(nn::ParamStore& store, long channels);
  static AttentionParams from_store(const nn::ParamStore& store, long channels);
};

// Graph-building forms.
ad::Var energy_var(const AttentionParams& params, const ad::Var& f_m, int r);
ad::Var attention_weights_var(const std::vector<ad::Var>& energies);
ad::Var fuse_var(const ad::Var& alpha, const std::vector<ad::Var>& maps);

struct FusedFeatures {
  std::array<ad::Var, 3> per_region;  // fused map per sub-region
  std::array<ad::Var, 3> alpha;       // attention weights per sub-region, each [M]
};
FusedFeatures attend_and_fuse_var(const AttentionParams& params,
                                  const std::vector<ad::Var>& features);

// Value forms.
double energy(const AttentionParams& params, const Tensor& f_m, int r);
std::vector<double> attention_weights(const std::vector<double>& energies);
Tensor fuse(const std::vector<Tensor>& features, const std::vector<double>& alpha);

/// Uniform (mean) fusion of modality features, the attention-off path.
ad::Var mean_fuse_var(const std::vector<ad::Var>& features);

}  // namespace subseg
