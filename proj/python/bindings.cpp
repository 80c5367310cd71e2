// Python bindings: numpy-facing wrappers over the pipeline's main
// operations. Arrays cross the boundary by copy; image and label arrays must
// already be uint8 (the archive quantization), float volumes are accepted as
// anything numpy can cast to double.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "subseg/attention.hpp"
#include "subseg/checkpoint.hpp"
#include "subseg/evaluate.hpp"
#include "subseg/metrics.hpp"
#include "subseg/model.hpp"
#include "subseg/phantom.hpp"
#include "subseg/prompting.hpp"
#include "subseg/training.hpp"
#include "subseg/volume.hpp"

namespace py = pybind11;
using namespace subseg;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<uint8_t, py::array::c_style>;

Tensor to_tensor(const F64Array& a) {
  if (a.ndim() == 0) throw std::invalid_argument("expected an array, got a scalar");
  std::vector<long> dims(a.shape(), a.shape() + a.ndim());
  Tensor t(dims);
  std::copy(a.data(), a.data() + a.size(), t.data.begin());
  return t;
}

py::array_t<double> from_tensor(const Tensor& t) {
  py::array_t<double> out(t.dims);
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

CaseArchive to_archive(const U8Array& imgs, const U8Array& gts,
                       const std::array<double, 3>& spacing) {
  if (imgs.ndim() != 4)
    throw std::invalid_argument("imgs must be (depth, height, width, modality) uint8");
  if (gts.ndim() != 3) throw std::invalid_argument("gts must be (depth, height, width) uint8");
  CaseArchive a;
  for (int i = 0; i < 4; ++i) a.img_dims[static_cast<size_t>(i)] = imgs.shape(i);
  a.imgs.assign(imgs.data(), imgs.data() + imgs.size());
  a.gts.assign(gts.data(), gts.data() + gts.size());
  a.spacing = spacing;
  a.validate();
  return a;
}

py::dict from_archive(const CaseArchive& a) {
  py::array_t<uint8_t> imgs(a.img_dims);
  std::copy(a.imgs.begin(), a.imgs.end(), imgs.mutable_data());
  py::array_t<uint8_t> gts(
      std::vector<long>{a.img_dims[0], a.img_dims[1], a.img_dims[2]});
  std::copy(a.gts.begin(), a.gts.end(), gts.mutable_data());
  py::array_t<double> spacing(std::vector<long>{3});
  std::copy(a.spacing.begin(), a.spacing.end(), spacing.mutable_data());
  py::dict d;
  d["imgs"] = std::move(imgs);
  d["gts"] = std::move(gts);
  d["spacing"] = std::move(spacing);
  return d;
}

CaseArchive archive_from_dict(const py::dict& d) {
  return to_archive(d["imgs"].cast<U8Array>(), d["gts"].cast<U8Array>(),
                    d["spacing"].cast<std::array<double, 3>>());
}

BinaryMask to_binary(const U8Array& a) {
  BinaryMask m;
  m.dims = {1, 1, static_cast<long>(a.size())};
  m.v.resize(static_cast<size_t>(a.size()));
  for (py::ssize_t i = 0; i < a.size(); ++i) m.v[static_cast<size_t>(i)] = a.data()[i] != 0;
  return m;
}

SegmentationMask to_labels(const U8Array& a) {
  if (a.ndim() != 3) throw std::invalid_argument("labels must be (depth, height, width) uint8");
  SegmentationMask m;
  m.dims = {a.shape(0), a.shape(1), a.shape(2)};
  m.labels.assign(a.data(), a.data() + a.size());
  m.validate();
  return m;
}

}  // namespace

PYBIND11_MODULE(_subseg, m) {
  m.doc() = "Promptable multi-modal tumor sub-region segmentation, desk scale";
  m.attr("__version__") = SUBSEG_VERSION;
  m.attr("MODALITIES") = py::make_tuple("T1", "T1c", "T2", "FLAIR");
  m.attr("REGIONS") = py::make_tuple("ncr", "ed", "et", "wt", "tc");

  m.def(
      "generate_phantoms",
      [](long n, std::array<long, 3> size, double noise_sigma, uint64_t seed) {
        const PhantomSpec spec = default_phantom_spec(size, noise_sigma, seed);
        std::vector<CaseArchive> cases;
        {
          py::gil_scoped_release release;
          cases = generate_dataset(n, spec, seed);
        }
        py::list out;
        for (const CaseArchive& c : cases) out.append(from_archive(c));
        return out;
      },
      py::arg("n"), py::arg("size") = std::array<long, 3>{24, 64, 64},
      py::arg("noise_sigma") = 0.0, py::arg("seed") = 0,
      "Synthetic nested-sphere tumor cases as dicts of imgs/gts/spacing.");

  m.def(
      "save_case",
      [](const std::string& path, const U8Array& imgs, const U8Array& gts,
         std::array<double, 3> spacing) { save_case(to_archive(imgs, gts, spacing), path); },
      py::arg("path"), py::arg("imgs"), py::arg("gts"),
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0},
      "Write one case to a compressed npz archive (keys imgs, gts, spacing).");

  m.def(
      "load_case", [](const std::string& path) { return from_archive(load_case(path)); },
      py::arg("path"), "Read a case archive back into imgs/gts/spacing arrays.");

  m.def(
      "percentile",
      [](const F64Array& values, double pct) {
        return percentile(std::vector<double>(values.data(), values.data() + values.size()), pct);
      },
      py::arg("values"), py::arg("pct"),
      "Linear-interpolated percentile over the flattened values.");

  m.def(
      "clip_percentiles",
      [](const F64Array& volume, double lo_pct, double hi_pct) {
        return from_tensor(clip_percentiles(to_tensor(volume), lo_pct, hi_pct));
      },
      py::arg("volume"), py::arg("lo_pct") = 0.5, py::arg("hi_pct") = 99.5,
      "Clamp every value into the [lo, hi] percentile band of the input.");

  m.def(
      "minmax_normalize",
      [](const F64Array& volume) { return from_tensor(minmax_normalize(to_tensor(volume))); },
      py::arg("volume"), "Affine rescale so min maps to 0 and max to 255.");

  m.def(
      "dice", [](const U8Array& pred, const U8Array& gt) { return dice(to_binary(pred), to_binary(gt)); },
      py::arg("pred"), py::arg("gt"),
      "Dice overlap of two binary uint8 arrays (nonzero means foreground).");

  m.def(
      "iou", [](const U8Array& pred, const U8Array& gt) { return iou(to_binary(pred), to_binary(gt)); },
      py::arg("pred"), py::arg("gt"), "Intersection over union of two binary uint8 arrays.");

  m.def(
      "region_scores",
      [](const U8Array& pred, const U8Array& gt) {
        const CaseScores s = score_prediction("case", to_labels(pred), to_labels(gt));
        py::dict out;
        for (size_t i = 0; i < kRegionColumns.size(); ++i) {
          py::dict entry;
          entry["dice"] = s.dice[i];
          entry["iou"] = s.iou[i];
          out[kRegionColumns[i]] = std::move(entry);
        }
        return out;
      },
      py::arg("pred"), py::arg("gt"),
      "Dice and IoU per sub-region and composite for two label volumes.");

  m.def("wilcoxon_signed_rank", &wilcoxon_signed_rank, py::arg("scores_a"), py::arg("scores_b"),
        "Two-sided Wilcoxon signed-rank p-value over paired scores.");

  m.def(
      "kfold_split",
      [](const std::vector<std::string>& ids, long k, uint64_t seed) {
        return kfold_split(ids, k, seed).folds;
      },
      py::arg("case_ids"), py::arg("k"), py::arg("seed") = 0,
      "Disjoint folds whose sizes differ by at most one.");

  m.def(
      "split_cases",
      [](const std::vector<std::string>& ids, double train_frac, uint64_t seed) {
        const SplitResult s = split_cases(ids, train_frac, seed);
        return py::make_tuple(s.train_ids, s.eval_ids);
      },
      py::arg("case_ids"), py::arg("train_frac") = 0.8, py::arg("seed") = 0,
      "Seeded shuffle split into (train_ids, eval_ids).");

  m.def(
      "train_model",
      [](const py::list& cases, const std::string& out_path, long epochs, uint64_t seed,
         bool attention, bool prompting, const std::string& preset, double base_lr,
         long batch_size, long steps_per_epoch) {
        std::vector<CaseArchive> archives;
        for (const auto& item : cases) archives.push_back(archive_from_dict(item.cast<py::dict>()));
        if (archives.empty()) throw std::invalid_argument("train_model: no cases given");

        TrainConfig cfg;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.base_lr = base_lr;
        cfg.batch_size = batch_size;
        cfg.steps_per_epoch = steps_per_epoch;
        cfg.validate();

        ModelConfig mcfg;
        if (preset == "desk") {
          mcfg = ModelConfig::desk(archives[0].img_dims[3]);
        } else if (preset == "default") {
          mcfg.in_channels = archives[0].img_dims[3];
        } else {
          throw std::invalid_argument("preset must be 'desk' or 'default'");
        }
        const VariantFlags flags{attention, prompting};

        TrainHistory history;
        {
          py::gil_scoped_release release;
          Model model(mcfg, cfg.seed);
          AttentionParams attn =
              AttentionParams::create(model.params(), mcfg.encoder_dims.back());
          history = train(model, attn, archives, cfg, flags);
          save_checkpoint(model, flags, out_path);
        }

        py::list out;
        for (const EpochStats& e : history) {
          py::dict row;
          row["epoch"] = e.epoch;
          row["lr"] = e.lr;
          row["loss_ce"] = e.loss_ce;
          row["loss_iou"] = e.loss_iou;
          row["val_dice"] = py::make_tuple(e.val_dice[0], e.val_dice[1], e.val_dice[2]);
          out.append(std::move(row));
        }
        return out;
      },
      py::arg("cases"), py::arg("out_path"), py::arg("epochs") = 12, py::arg("seed") = 0,
      py::arg("attention") = true, py::arg("prompting") = true, py::arg("preset") = "desk",
      py::arg("base_lr") = 1e-3, py::arg("batch_size") = 2, py::arg("steps_per_epoch") = 0,
      "Train on case dicts, write a checkpoint, and return per-epoch stats.");

  m.def(
      "segment",
      [](const std::string& checkpoint_path, const U8Array& imgs, std::array<double, 3> spacing,
         double tau, long refine_iters) {
        if (imgs.ndim() != 4)
          throw std::invalid_argument("imgs must be (depth, height, width, modality) uint8");
        MultiModalVolume vol;
        vol.intensities = Tensor({imgs.shape(0), imgs.shape(1), imgs.shape(2), imgs.shape(3)});
        for (py::ssize_t i = 0; i < imgs.size(); ++i)
          vol.intensities.data[static_cast<size_t>(i)] = imgs.data()[i];
        vol.spacing = spacing;

        SegmentationMask pred;
        {
          py::gil_scoped_release release;
          const Checkpoint ck = load_checkpoint(checkpoint_path);
          TwoPassOptions opts;
          opts.tau = tau;
          opts.refine_iters = refine_iters;
          pred = two_pass_segment(ck.model, ck.attention, vol, ck.variant, opts);
        }

        py::array_t<uint8_t> out(pred.dims);
        std::copy(pred.labels.begin(), pred.labels.end(), out.mutable_data());
        return out;
      },
      py::arg("checkpoint_path"), py::arg("imgs"),
      py::arg("spacing") = std::array<double, 3>{1.0, 1.0, 1.0}, py::arg("tau") = 0.5,
      py::arg("refine_iters") = 1,
      "Segment a quantized multi-modal volume with a trained checkpoint.");
}
