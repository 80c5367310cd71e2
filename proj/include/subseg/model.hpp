#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "subseg/autodiff.hpp"
#include "subseg/nn.hpp"
#include "subseg/tensor.hpp"

namespace subseg {

/// Box prompt for one sub-region on one slice. Coordinates are inclusive
/// pixel indices; empty_flag marks a region absent from the source mask.
struct SpatialPrompt {
  long row_min = 0, col_min = 0, row_max = 0, col_max = 0;
  uint8_t sub_region = 0;  // 1, 2, or 4
  bool empty_flag = false;
};

struct ModelConfig {
  std::vector<long> encoder_dims{64, 128, 160, 320};
  std::vector<long> encoder_depths{2, 2, 6, 2};
  long prompt_embed_dim = 256;
  long decoder_layers = 2;
  long decoder_heads = 8;
  std::array<long, 2> input_size{256, 256};
  long in_channels = 4;
  bool desk_scale = false;

  /// Reduced preset for fast experiments and tests.
  static ModelConfig desk(long in_channels = 4);

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  bool operator==(const ModelConfig& o) const = default;
};

/// Promptable segmenter: a TinyViT-style image encoder shared across
/// modalities, a box prompt encoder, and a two-way transformer mask decoder.
class Model {
 public:
  Model(ModelConfig config, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  long param_count() const { return store_.param_count(); }

  /// Spatial size of the encoder's final stage (input_size / 16).
  std::array<long, 2> feature_hw() const;
  /// Channel count of the per-modality feature maps fed to fusion.
  long feature_channels() const { return cfg_.encoder_dims.back(); }

  // Graph-building forms, used by training; gradients flow to parameters
  // (and to the input when it is built from a param).
  std::vector<ad::Var> encode_per_modality_vars(const Tensor& slice_hwm) const;
  ad::Var encode_prompt_var(const SpatialPrompt& prompt) const;
  /// Decodes fused features into full-resolution logits. Null prompt uses
  /// the learned no-prompt token (initial unprompted pass).
  ad::Var decode_mask_var(const ad::Var& features, const ad::Var* prompt) const;

  // Value forms for inference; no graph is recorded.
  std::vector<Tensor> encode_per_modality(const Tensor& slice_hwm) const;
  Tensor encode_prompt(const SpatialPrompt& prompt) const;
  Tensor decode_mask(const Tensor& features, const Tensor* prompt_embedding) const;

 private:
  ad::Var encode_channel(const Tensor& chan_hw) const;

  ModelConfig cfg_;
  nn::ParamStore store_;
};

/// Ablation switches carried with a checkpoint so inference replays the
/// trained configuration.
struct VariantFlags {
  bool attention = true;
  bool prompting = true;
};

}  // namespace subseg
