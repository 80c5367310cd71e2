#include "subseg/prompting.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace subseg {
namespace {

void check_slice_shape(const LabelSlice& s) {
  if (s.dims[0] <= 0 || s.dims[1] <= 0)
    throw std::invalid_argument("label slice dims must be positive");
  if (s.v.size() != static_cast<size_t>(s.dims[0] * s.dims[1]))
    throw std::invalid_argument("label slice size does not match dims");
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

Tensor sigmoid_map(const Tensor& logits) {
  Tensor out(logits.dims);
  for (size_t i = 0; i < logits.data.size(); ++i) out.data[i] = stable_sigmoid(logits.data[i]);
  return out;
}

}  // namespace

SpatialPrompt extract_bbox(const LabelSlice& pred, uint8_t region, long margin) {
  check_slice_shape(pred);
  (void)subregion_index(region);  // rejects labels outside {1, 2, 4}
  if (margin < 0) throw std::invalid_argument("extract_bbox: margin must be non-negative");

  SpatialPrompt p;
  p.sub_region = region;
  long rmin = pred.dims[0], rmax = -1, cmin = pred.dims[1], cmax = -1;
  for (long r = 0; r < pred.dims[0]; ++r)
    for (long c = 0; c < pred.dims[1]; ++c)
      if (pred.at(r, c) == region) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  if (rmax < 0) {
    p.empty_flag = true;
    p.row_min = p.col_min = p.row_max = p.col_max = -1;  // clearly out of range
    return p;
  }
  p.empty_flag = false;
  p.row_min = std::max<long>(0, rmin - margin);
  p.col_min = std::max<long>(0, cmin - margin);
  p.row_max = std::min(pred.dims[0] - 1, rmax + margin);
  p.col_max = std::min(pred.dims[1] - 1, cmax + margin);
  return p;
}

LabelSlice combine_subregions(const Tensor& prob_ncr, const Tensor& prob_ed,
                              const Tensor& prob_et, double tau) {
  if (prob_ncr.dims.size() != 2)
    throw std::invalid_argument("combine_subregions expects rank-2 probability maps");
  if (prob_ed.dims != prob_ncr.dims || prob_et.dims != prob_ncr.dims)
    throw std::invalid_argument("combine_subregions: probability map shapes differ");
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("combine_subregions: tau must lie in (0, 1)");

  // Highest probability wins among regions reaching tau; exact ties go to the
  // earliest entry here, encoding the priority ET > NCR > ED.
  const Tensor* maps[3] = {&prob_et, &prob_ncr, &prob_ed};
  const uint8_t labels[3] = {4, 1, 2};

  LabelSlice out;
  out.dims = {prob_ncr.dims[0], prob_ncr.dims[1]};
  out.v.assign(prob_ncr.data.size(), 0);
  for (size_t i = 0; i < prob_ncr.data.size(); ++i) {
    double best = -1.0;
    uint8_t lab = 0;
    for (int k = 0; k < 3; ++k) {
      double p = maps[k]->data[i];
      if (p >= tau && p > best) {
        best = p;
        lab = labels[k];
      }
    }
    out.v[i] = lab;
  }
  return out;
}

Tensor refine_subregion(const Model& model, const Tensor& features, const SpatialPrompt& prompt) {
  if (prompt.empty_flag)
    throw std::invalid_argument("refine_subregion requires a non-empty prompt");
  Tensor emb = model.encode_prompt(prompt);
  return sigmoid_map(model.decode_mask(features, &emb));
}

SegmentationMask two_pass_segment(const Model& model, const AttentionParams& attn,
                                  const MultiModalVolume& volume, const VariantFlags& variant,
                                  const TwoPassOptions& opts, std::vector<AttentionRecord>* log) {
  volume.validate();
  const ModelConfig& cfg = model.config();
  if (volume.modalities() != cfg.in_channels)
    throw std::invalid_argument("two_pass_segment: volume has " +
                                std::to_string(volume.modalities()) + " modalities, model expects " +
                                std::to_string(cfg.in_channels));
  if (volume.height() != cfg.input_size[0] || volume.width() != cfg.input_size[1])
    throw std::invalid_argument("two_pass_segment: slice size " + std::to_string(volume.height()) +
                                "x" + std::to_string(volume.width()) + " does not match model input " +
                                std::to_string(cfg.input_size[0]) + "x" +
                                std::to_string(cfg.input_size[1]));
  for (double x : volume.intensities.data)
    if (!(x >= 0.0 && x <= 255.0))
      throw std::invalid_argument(
          "two_pass_segment expects a preprocessed volume with intensities in [0, 255]");
  if (!(opts.tau > 0.0 && opts.tau < 1.0))
    throw std::invalid_argument("two_pass_segment: tau must lie in (0, 1)");
  if (opts.refine_iters < 1)
    throw std::invalid_argument("two_pass_segment: refine_iters must be at least 1");

  const long D = volume.depth(), H = volume.height(), W = volume.width(), M = volume.modalities();
  SegmentationMask out;
  out.dims = {D, H, W};
  out.labels.assign(static_cast<size_t>(D * H * W), 0);

  for (long d = 0; d < D; ++d) {
    Tensor slice({H, W, M});
    std::copy_n(volume.intensities.data.begin() + d * H * W * M, H * W * M, slice.data.begin());

    std::vector<Tensor> maps = model.encode_per_modality(slice);
    Tensor mean_f(maps[0].dims);
    for (const Tensor& m : maps)
      for (size_t i = 0; i < mean_f.data.size(); ++i) mean_f.data[i] += m.data[i];
    for (double& x : mean_f.data) x /= double(M);

    Tensor p1 = sigmoid_map(model.decode_mask(mean_f, nullptr));
    std::array<Tensor, 3> probs = {p1, p1, p1};

    if (variant.attention || variant.prompting) {
      std::array<Tensor, 3> fused;
      for (int r = 0; r < 3; ++r) {
        if (variant.attention) {
          std::vector<double> e(static_cast<size_t>(M));
          for (long m = 0; m < M; ++m) e[static_cast<size_t>(m)] = energy(attn, maps[static_cast<size_t>(m)], r);
          std::vector<double> alpha = attention_weights(e);
          fused[static_cast<size_t>(r)] = fuse(maps, alpha);
          if (log) log->push_back({d, kSubRegionLabels[static_cast<size_t>(r)], alpha});
        } else {
          fused[static_cast<size_t>(r)] = mean_f;
        }
      }
      for (long it = 0; it < opts.refine_iters; ++it) {
        LabelSlice pass1 = combine_subregions(probs[0], probs[1], probs[2], opts.tau);
        for (int r = 0; r < 3; ++r) {
          if (variant.prompting) {
            SpatialPrompt pr = extract_bbox(pass1, kSubRegionLabels[static_cast<size_t>(r)]);
            if (pr.empty_flag) continue;  // region absent in pass 1: keep that prediction
            probs[static_cast<size_t>(r)] = refine_subregion(model, fused[static_cast<size_t>(r)], pr);
          } else {
            probs[static_cast<size_t>(r)] =
                sigmoid_map(model.decode_mask(fused[static_cast<size_t>(r)], nullptr));
          }
        }
        if (!variant.prompting) break;  // further iterations would not change anything
      }
    }

    LabelSlice final_labels = combine_subregions(probs[0], probs[1], probs[2], opts.tau);
    std::copy_n(final_labels.v.begin(), H * W, out.labels.begin() + d * H * W);
  }
  return out;
}

}  // namespace subseg
