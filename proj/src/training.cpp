#include "subseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "subseg/metrics.hpp"
#include "subseg/nn.hpp"
#include "subseg/prompting.hpp"

namespace subseg {
namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

void check_pair(const Tensor& logits, const Tensor& target, const char* who) {
  if (logits.dims != target.dims)
    throw std::invalid_argument(std::string(who) + ": logits and target shapes differ");
}

}  // namespace

double ce_loss(const Tensor& logits, const Tensor& target) {
  check_pair(logits, target, "ce_loss");
  ad::NoGradGuard ng;
  return ad::bce_logits_mean(ad::Var::constant(logits), target).value().data[0];
}

double iou_loss(const Tensor& logits, const Tensor& target, double eps) {
  check_pair(logits, target, "iou_loss");
  ad::NoGradGuard ng;
  return ad::soft_dice_loss(ad::Var::constant(logits), target, eps).value().data[0];
}

double combined_loss(const Tensor& logits, const Tensor& target, double lambda_seg,
                     double lambda_iou) {
  return lambda_seg * ce_loss(logits, target) + lambda_iou * iou_loss(logits, target);
}

ad::Var combined_loss_var(const ad::Var& logits, const Tensor& target, double lambda_seg,
                          double lambda_iou) {
  check_pair(logits.value(), target, "combined_loss");
  if (lambda_seg < 0.0 || lambda_iou < 0.0)
    throw std::invalid_argument("combined_loss: loss weights must be non-negative");
  return ad::add(ad::scalar_mul(ad::bce_logits_mean(logits, target), lambda_seg),
                 ad::scalar_mul(ad::soft_dice_loss(logits, target, 1.0), lambda_iou));
}

double cosine_lr(long step, long total_steps, double base_lr) {
  if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be at least 1");
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step must lie in [0, total_steps]");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    throw std::invalid_argument("cosine_lr: base_lr must be positive and finite");
  return 0.5 * base_lr * (1.0 + std::cos(kPi * double(step) / double(total_steps)));
}

AugmentDraw draw_augment(const AugmentConfig& cfg, long modalities, Rng& rng) {
  if (modalities < 1) throw std::invalid_argument("draw_augment: modalities must be positive");
  AugmentDraw d;
  d.angle_deg = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg);
  d.scale = rng.uniform(cfg.scale[0], cfg.scale[1]);
  d.gain.resize(static_cast<size_t>(modalities));
  for (double& g : d.gain)
    g = rng.uniform(1.0 - cfg.intensity_jitter_frac, 1.0 + cfg.intensity_jitter_frac);
  return d;
}

std::pair<Tensor, LabelSlice> apply_augment(const Tensor& slice_hwm, const LabelSlice& labels,
                                            const AugmentDraw& draw) {
  if (slice_hwm.dims.size() != 3)
    throw std::invalid_argument("apply_augment expects a rank-3 slice (rows, cols, modalities)");
  const long H = slice_hwm.dims[0], W = slice_hwm.dims[1], M = slice_hwm.dims[2];
  if (labels.dims[0] != H || labels.dims[1] != W)
    throw std::invalid_argument("apply_augment: label slice shape differs from image slice");
  if (draw.gain.size() != static_cast<size_t>(M))
    throw std::invalid_argument("apply_augment: one gain per modality required");
  if (!(draw.scale > 0.0)) throw std::invalid_argument("apply_augment: scale must be positive");

  Tensor img(slice_hwm.dims);
  LabelSlice out;
  out.dims = labels.dims;
  out.v.assign(labels.v.size(), 0);

  if (draw.angle_deg == 0.0 && draw.scale == 1.0) {
    img = slice_hwm;
    out = labels;
  } else {
    const double th = draw.angle_deg * kPi / 180.0;
    const double ct = std::cos(th), st = std::sin(th);
    const double cr = 0.5 * double(H - 1), cc = 0.5 * double(W - 1);
    for (long r = 0; r < H; ++r) {
      for (long c = 0; c < W; ++c) {
        // inverse map of rotate-then-scale about the slice center
        const double dr = double(r) - cr, dc = double(c) - cc;
        const double sr = cr + (ct * dr + st * dc) / draw.scale;
        const double sc = cc + (-st * dr + ct * dc) / draw.scale;

        const long r0 = static_cast<long>(std::floor(sr));
        const long c0 = static_cast<long>(std::floor(sc));
        const double fr = sr - double(r0), fc = sc - double(c0);
        const double wgt[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
        const long rr[4] = {r0, r0, r0 + 1, r0 + 1};
        const long cw[4] = {c0, c0 + 1, c0, c0 + 1};
        for (long m = 0; m < M; ++m) {
          double acc = 0.0;
          for (int k = 0; k < 4; ++k) {
            if (rr[k] < 0 || rr[k] >= H || cw[k] < 0 || cw[k] >= W) continue;  // zero outside
            acc += wgt[k] * slice_hwm.data[static_cast<size_t>((rr[k] * W + cw[k]) * M + m)];
          }
          img.data[static_cast<size_t>((r * W + c) * M + m)] = acc;
        }
        const long nr = std::lround(sr), nc = std::lround(sc);
        if (nr >= 0 && nr < H && nc >= 0 && nc < W) out.at(r, c) = labels.at(nr, nc);
      }
    }
  }

  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      for (long m = 0; m < M; ++m) {
        double& x = img.data[static_cast<size_t>((r * W + c) * M + m)];
        x = std::clamp(x * draw.gain[static_cast<size_t>(m)], 0.0, 255.0);
      }
  return {std::move(img), std::move(out)};
}

std::pair<uint8_t, Tensor> sample_subregion_target(const LabelSlice& labels, Rng& rng) {
  if (labels.dims[0] <= 0 || labels.dims[1] <= 0 ||
      labels.v.size() != static_cast<size_t>(labels.dims[0] * labels.dims[1]))
    throw std::invalid_argument("sample_subregion_target: malformed label slice");

  bool present[3] = {false, false, false};
  for (uint8_t l : labels.v)
    if (l != 0) present[subregion_index(l)] = true;
  std::vector<uint8_t> pool;
  for (int r = 0; r < 3; ++r)
    if (present[r]) pool.push_back(kSubRegionLabels[static_cast<size_t>(r)]);
  if (pool.empty()) pool = {kSubRegionLabels[0], kSubRegionLabels[1], kSubRegionLabels[2]};

  uint8_t chosen = pool[static_cast<size_t>(rng.below(pool.size()))];
  Tensor target({labels.dims[0], labels.dims[1]});
  for (size_t i = 0; i < labels.v.size(); ++i) target.data[i] = labels.v[i] == chosen ? 1.0 : 0.0;
  return {chosen, std::move(target)};
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be at least 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    throw std::invalid_argument("train config: base_lr must be positive and finite");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be at least 1");
  if (lambda_seg < 0.0 || lambda_iou < 0.0)
    throw std::invalid_argument("train config: loss weights must be non-negative");
  if (lambda_seg == 0.0 && lambda_iou == 0.0)
    throw std::invalid_argument("train config: at least one loss weight must be positive");
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("train config: tau must lie in (0, 1)");
  if (refine_iters < 1)
    throw std::invalid_argument("train config: refine_iters must be at least 1");
  if (steps_per_epoch < 0)
    throw std::invalid_argument("train config: steps_per_epoch must be non-negative");
  if (augmentation.rotate_deg < 0.0 || augmentation.rotate_deg > 180.0)
    throw std::invalid_argument("train config: rotate_deg must lie in [0, 180]");
  if (!(augmentation.scale[0] > 0.0) || augmentation.scale[1] < augmentation.scale[0])
    throw std::invalid_argument("train config: scale range must be positive and ordered");
  if (augmentation.intensity_jitter_frac < 0.0 || augmentation.intensity_jitter_frac >= 1.0)
    throw std::invalid_argument("train config: intensity_jitter_frac must lie in [0, 1)");
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["base_lr"] = base_lr;
  j["batch_size"] = batch_size;
  j["lambda_seg"] = lambda_seg;
  j["lambda_iou"] = lambda_iou;
  j["seed"] = seed;
  j["augmentation"] = {{"rotate_deg", augmentation.rotate_deg},
                       {"scale", {augmentation.scale[0], augmentation.scale[1]}},
                       {"intensity_jitter_frac", augmentation.intensity_jitter_frac}};
  j["tau"] = tau;
  j["refine_iters"] = refine_iters;
  j["steps_per_epoch"] = steps_per_epoch;
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  TrainConfig cfg;
  try {
    json j = json::parse(text);
    if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
    for (const auto& it : j.items()) {
      const std::string& k = it.key();
      if (k == "epochs") cfg.epochs = it.value().get<long>();
      else if (k == "base_lr") cfg.base_lr = it.value().get<double>();
      else if (k == "batch_size") cfg.batch_size = it.value().get<long>();
      else if (k == "lambda_seg") cfg.lambda_seg = it.value().get<double>();
      else if (k == "lambda_iou") cfg.lambda_iou = it.value().get<double>();
      else if (k == "seed") cfg.seed = it.value().get<uint64_t>();
      else if (k == "tau") cfg.tau = it.value().get<double>();
      else if (k == "refine_iters") cfg.refine_iters = it.value().get<long>();
      else if (k == "steps_per_epoch") cfg.steps_per_epoch = it.value().get<long>();
      else if (k == "augmentation") {
        const json& a = it.value();
        if (!a.is_object()) throw std::invalid_argument("train config: augmentation must be an object");
        for (const auto& ai : a.items()) {
          const std::string& ak = ai.key();
          if (ak == "rotate_deg") cfg.augmentation.rotate_deg = ai.value().get<double>();
          else if (ak == "scale") {
            std::vector<double> s = ai.value().get<std::vector<double>>();
            if (s.size() != 2)
              throw std::invalid_argument("train config: scale must be a [lo, hi] pair");
            cfg.augmentation.scale = {s[0], s[1]};
          } else if (ak == "intensity_jitter_frac") {
            cfg.augmentation.intensity_jitter_frac = ai.value().get<double>();
          } else {
            throw std::invalid_argument("train config: unknown augmentation key '" + ak + "'");
          }
        }
      } else {
        throw std::invalid_argument("train config: unknown key '" + k + "'");
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void write_history_csv(const TrainHistory& history, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write history csv '" + path + "'");
  f << "epoch,lr,loss_ce,loss_iou,dice_ncr,dice_ed,dice_et\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return std::string(buf);
  };
  for (const EpochStats& s : history)
    f << s.epoch << ',' << num(s.lr) << ',' << num(s.loss_ce) << ',' << num(s.loss_iou) << ','
      << num(s.val_dice[0]) << ',' << num(s.val_dice[1]) << ',' << num(s.val_dice[2]) << '\n';
  if (!f.good()) throw std::runtime_error("failed writing history csv '" + path + "'");
}

namespace {

Tensor slice_tensor(const CaseArchive& c, long d) {
  const long H = c.img_dims[1], W = c.img_dims[2], M = c.img_dims[3];
  Tensor t({H, W, M});
  const size_t base = static_cast<size_t>(d * H * W * M);
  for (size_t i = 0; i < t.data.size(); ++i) t.data[i] = double(c.imgs[base + i]);
  return t;
}

LabelSlice slice_labels(const CaseArchive& c, long d) {
  const long H = c.img_dims[1], W = c.img_dims[2];
  LabelSlice s;
  s.dims = {H, W};
  s.v.assign(c.gts.begin() + d * H * W, c.gts.begin() + (d + 1) * H * W);
  return s;
}

// Dice per sub-region on the center slice of up to four cases, using the
// current weights and the full inference path.
std::array<double, 3> validation_dice(const Model& model, const AttentionParams& attn,
                                      const std::vector<CaseArchive>& cases,
                                      const TrainConfig& cfg, const VariantFlags& variant) {
  const long n = std::min<long>(4, static_cast<long>(cases.size()));
  std::array<double, 3> acc{0.0, 0.0, 0.0};
  for (long i = 0; i < n; ++i) {
    const CaseArchive& c = cases[static_cast<size_t>(i)];
    const long d = c.img_dims[0] / 2;
    const long H = c.img_dims[1], W = c.img_dims[2], M = c.img_dims[3];

    MultiModalVolume vol;
    vol.intensities = Tensor({1, H, W, M});
    vol.spacing = c.spacing;
    Tensor st = slice_tensor(c, d);
    vol.intensities.data = st.data;

    SegmentationMask pred = two_pass_segment(model, attn, vol, variant,
                                             {cfg.tau, cfg.refine_iters}, nullptr);
    SegmentationMask gt;
    gt.dims = {1, H, W};
    LabelSlice gl = slice_labels(c, d);
    gt.labels = gl.v;
    for (int r = 0; r < 3; ++r) {
      uint8_t lab = kSubRegionLabels[static_cast<size_t>(r)];
      acc[static_cast<size_t>(r)] += dice(label_mask(pred, lab), label_mask(gt, lab));
    }
  }
  if (n > 0)
    for (double& x : acc) x /= double(n);
  return acc;
}

}  // namespace

TrainHistory train(Model& model, const AttentionParams& attn,
                   const std::vector<CaseArchive>& cases, const TrainConfig& cfg,
                   const VariantFlags& variant) {
  cfg.validate();
  if (cases.empty()) throw std::invalid_argument("train: no cases given");
  const ModelConfig& mc = model.config();
  for (const CaseArchive& c : cases) {
    c.validate();
    if (c.img_dims[1] != mc.input_size[0] || c.img_dims[2] != mc.input_size[1])
      throw std::invalid_argument("train: case slice size does not match model input size");
    if (c.img_dims[3] != mc.in_channels)
      throw std::invalid_argument("train: case modality count does not match model");
  }

  // Slices containing any tumor label, across all cases.
  std::vector<std::pair<size_t, long>> inventory;
  for (size_t ci = 0; ci < cases.size(); ++ci) {
    const CaseArchive& c = cases[ci];
    const long D = c.img_dims[0], HW = c.img_dims[1] * c.img_dims[2];
    for (long d = 0; d < D; ++d) {
      bool any = false;
      for (long i = 0; i < HW && !any; ++i) any = c.gts[static_cast<size_t>(d * HW + i)] != 0;
      if (any) inventory.emplace_back(ci, d);
    }
  }
  if (inventory.empty()) throw std::invalid_argument("train: no slices contain tumor labels");

  const long spe = cfg.steps_per_epoch > 0
                       ? cfg.steps_per_epoch
                       : (static_cast<long>(inventory.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = cfg.epochs * spe;
  const long denom = std::max<long>(1, total_steps - 1);

  nn::Adam opt(model.params().trainable());
  TrainHistory hist;
  hist.reserve(static_cast<size_t>(cfg.epochs));

  for (long e = 0; e < cfg.epochs; ++e) {
    double ce_sum = 0.0, iou_sum = 0.0;
    long nsamp = 0;
    double lr_first = 0.0;
    for (long s = 0; s < spe; ++s) {
      const long g = e * spe + s;
      const double lr = cosine_lr(g, denom, cfg.base_lr);
      if (s == 0) lr_first = lr;
      opt.zero_grad();
      for (long b = 0; b < cfg.batch_size; ++b) {
        Rng srng(mix_seed(cfg.seed, static_cast<uint64_t>(g * cfg.batch_size + b)));
        const auto& pick = inventory[static_cast<size_t>(srng.below(inventory.size()))];
        Tensor raw = slice_tensor(cases[pick.first], pick.second);
        LabelSlice raw_gt = slice_labels(cases[pick.first], pick.second);
        AugmentDraw drw = draw_augment(cfg.augmentation, mc.in_channels, srng);
        auto aug = apply_augment(raw, raw_gt, drw);
        auto picked = sample_subregion_target(aug.second, srng);
        const int ridx = subregion_index(picked.first);

        std::vector<ad::Var> maps = model.encode_per_modality_vars(aug.first);
        ad::Var mean_f = mean_fuse_var(maps);
        ad::Var z1 = model.decode_mask_var(mean_f, nullptr);

        ad::Var z2 = z1;
        if (variant.attention || variant.prompting) {
          ad::Var fused = mean_f;
          if (variant.attention) {
            std::vector<ad::Var> energies;
            energies.reserve(maps.size());
            for (const ad::Var& fm : maps) energies.push_back(energy_var(attn, fm, ridx));
            fused = fuse_var(attention_weights_var(energies), maps);
          }
          if (variant.prompting) {
            Tensor p1(z1.value().dims);
            for (size_t i = 0; i < p1.data.size(); ++i) {
              double z = z1.value().data[i];
              p1.data[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            }
            LabelSlice pass1 = combine_subregions(p1, p1, p1, cfg.tau);
            SpatialPrompt pr = extract_bbox(pass1, picked.first);
            if (!pr.empty_flag) {
              ad::Var emb = model.encode_prompt_var(pr);
              z2 = model.decode_mask_var(fused, &emb);
            }
          } else {
            z2 = model.decode_mask_var(fused, nullptr);
          }
        }

        ad::Var ce1 = ad::bce_logits_mean(z1, picked.second);
        ad::Var di1 = ad::soft_dice_loss(z1, picked.second, 1.0);
        ad::Var ce2 = ad::bce_logits_mean(z2, picked.second);
        ad::Var di2 = ad::soft_dice_loss(z2, picked.second, 1.0);
        ad::Var c1 = ad::add(ad::scalar_mul(ce1, cfg.lambda_seg), ad::scalar_mul(di1, cfg.lambda_iou));
        ad::Var c2 = ad::add(ad::scalar_mul(ce2, cfg.lambda_seg), ad::scalar_mul(di2, cfg.lambda_iou));
        ad::Var loss = ad::scalar_mul(ad::add(c1, c2), 0.5 / double(cfg.batch_size));

        const double lv = loss.value().data[0];
        if (!std::isfinite(lv))
          throw std::runtime_error("training loss became non-finite at epoch " +
                                   std::to_string(e) + " step " + std::to_string(s));
        ad::backward(loss);
        ce_sum += 0.5 * (ce1.value().data[0] + ce2.value().data[0]);
        iou_sum += 0.5 * (di1.value().data[0] + di2.value().data[0]);
        ++nsamp;
      }
      opt.step(lr);
    }
    EpochStats st;
    st.epoch = e;
    st.lr = lr_first;
    st.loss_ce = ce_sum / double(nsamp);
    st.loss_iou = iou_sum / double(nsamp);
    st.val_dice = validation_dice(model, attn, cases, cfg, variant);
    hist.push_back(st);
  }
  return hist;
}

}  // namespace subseg
