#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "subseg/checkpoint.hpp"
#include "subseg/evaluate.hpp"
#include "subseg/metrics.hpp"
#include "subseg/npz.hpp"
#include "subseg/phantom.hpp"
#include "subseg/report.hpp"
#include "subseg/training.hpp"
#include "subseg/volume.hpp"

#ifndef SUBSEG_VERSION
#define SUBSEG_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace subseg;

namespace {

int run(const std::vector<std::string>& args);

/// Everything a manifest records about the invocation that produced a file.
struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  json seeds = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
};

void write_manifest(const RunContext& ctx, const std::string& path) {
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.started).count();
  json m;
  m["command"] = ctx.command;
  m["argv"] = ctx.argv;
  m["config"] = ctx.config;
  m["seeds"] = ctx.seeds;
  m["inputs"] = ctx.inputs;
  m["outputs"] = ctx.outputs;
  m["version"] = SUBSEG_VERSION;
  m["duration_seconds"] = seconds;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest '" + path + "'");
  f << m.dump(2) << "\n";
  if (!f.good()) throw std::runtime_error("failed writing manifest '" + path + "'");
}

std::vector<fs::path> list_npz(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw std::invalid_argument("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const fs::directory_entry& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".npz") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::invalid_argument("no .npz files in '" + dir + "'");
  return files;
}

std::vector<NamedCase> load_named_cases(const std::string& dir) {
  std::vector<NamedCase> cases;
  for (const fs::path& p : list_npz(dir))
    cases.push_back(NamedCase{p.stem().string(), load_case(p.string())});
  return cases;
}

std::array<long, 3> parse_size(const std::string& text) {
  std::array<long, 3> size{};
  char extra = 0;
  if (std::sscanf(text.c_str(), "%ldx%ldx%ld%c", &size[0], &size[1], &size[2], &extra) != 3)
    throw std::invalid_argument("--size expects DxHxW, got '" + text + "'");
  return size;
}

long modality_index(const std::string& name) {
  for (long m = 0; m < 4; ++m)
    if (name == kModalityNames[static_cast<size_t>(m)]) return m;
  throw std::invalid_argument("--single-modality expects one of T1, T1c, T2, FLAIR, got '" +
                              name + "'");
}

std::string variant_slug(const VariantFlags& v) {
  if (v.attention && v.prompting) return "full";
  if (v.attention) return "attention";
  if (v.prompting) return "prompting";
  return "baseline";
}

TrainConfig load_train_config(const std::string& path) {
  if (path.empty()) return TrainConfig{};
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot read config '" + path + "'");
  std::ostringstream s;
  s << f.rdbuf();
  return TrainConfig::from_json(s.str());
}

ModelConfig model_config_for(const std::string& preset, long in_channels) {
  if (preset == "desk") return ModelConfig::desk(in_channels);
  if (preset == "default") {
    ModelConfig cfg;
    cfg.in_channels = in_channels;
    cfg.validate();
    return cfg;
  }
  throw std::invalid_argument("--preset expects 'desk' or 'default', got '" + preset + "'");
}

/// Keeps only the named cases whose ids appear in `ids`, preserving id order.
std::vector<NamedCase> select_cases(const std::vector<NamedCase>& cases,
                                    const std::vector<std::string>& ids) {
  std::vector<NamedCase> out;
  for (const std::string& id : ids)
    for (const NamedCase& c : cases)
      if (c.id == id) {
        out.push_back(c);
        break;
      }
  return out;
}

int cmd_phantom(RunContext ctx, long n, const std::string& size_text, double noise, uint64_t seed,
                const std::string& out_dir) {
  const std::array<long, 3> size = parse_size(size_text);
  if (n < 1) throw std::invalid_argument("--n must be >= 1");
  const PhantomSpec spec = default_phantom_spec(size, noise, seed);
  std::vector<CaseArchive> cases = generate_dataset(n, spec, seed);

  fs::create_directories(out_dir);
  char name[32];
  for (long i = 0; i < n; ++i) {
    std::snprintf(name, sizeof name, "case_%04ld.npz", i);
    const std::string path = (fs::path(out_dir) / name).string();
    save_case(cases[static_cast<size_t>(i)], path);
    ctx.outputs.push_back(path);
  }

  ctx.config = {{"n", n},
                {"size", {size[0], size[1], size[2]}},
                {"noise_sigma", noise}};
  ctx.seeds = {{"seed", seed}};
  write_manifest(ctx, (fs::path(out_dir) / "manifest.json").string());
  std::cout << "wrote " << n << " cases to " << out_dir << "\n";
  return 0;
}

/// One raw study: per-modality volumes plus optional labels and spacing.
struct RawCase {
  std::vector<Tensor> modalities;  // each depth x height x width
  bool labeled = false;
  SegmentationMask mask;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

RawCase load_raw_case(const npz::Archive& ar, const std::string& path, long single) {
  RawCase raw;
  static const char* keys[4] = {"t1", "t1c", "t2", "flair"};
  std::vector<long> wanted;
  if (single >= 0)
    wanted.push_back(single);
  else
    for (long m = 0; m < 4; ++m) wanted.push_back(m);

  for (long m : wanted) {
    auto it = ar.find(keys[m]);
    if (it == ar.end())
      throw std::invalid_argument("'" + path + "' is missing modality key '" + keys[m] + "'");
    if (it->second.shape.size() != 3)
      throw std::invalid_argument("'" + path + "' key '" + keys[m] + "' must be 3-D");
    Tensor t(it->second.shape);
    t.data = it->second.as_doubles();
    raw.modalities.push_back(std::move(t));
  }
  for (size_t i = 1; i < raw.modalities.size(); ++i)
    if (raw.modalities[i].dims != raw.modalities[0].dims)
      throw std::invalid_argument("'" + path + "' modality shapes differ");

  auto seg = ar.find("seg");
  if (seg != ar.end()) {
    if (seg->second.shape.size() != 3 || seg->second.shape != raw.modalities[0].dims)
      throw std::invalid_argument("'" + path + "' key 'seg' must match the modality shape");
    raw.labeled = true;
    raw.mask.dims = {seg->second.shape[0], seg->second.shape[1], seg->second.shape[2]};
    raw.mask.labels = seg->second.as_bytes();
    raw.mask.validate();
  }
  auto sp = ar.find("spacing");
  if (sp != ar.end()) {
    const std::vector<double> v = sp->second.as_doubles();
    if (v.size() != 3) throw std::invalid_argument("'" + path + "' key 'spacing' must have 3 values");
    raw.spacing = {v[0], v[1], v[2]};
  }
  return raw;
}

int cmd_preprocess(RunContext ctx, const std::string& in_dir, const std::string& out_dir,
                   double lo, double hi, const std::string& single_modality) {
  const long single = single_modality.empty() ? -1 : modality_index(single_modality);
  fs::create_directories(out_dir);

  for (const fs::path& p : list_npz(in_dir)) {
    ctx.inputs.push_back(p.string());
    const std::string out_path = (fs::path(out_dir) / p.filename()).string();
    const npz::Archive ar = npz::load(p.string());

    CaseArchive archive;
    if (ar.count("imgs") && ar.count("gts") && ar.count("spacing")) {
      // Already in case form; revalidate, optionally select one modality.
      archive = load_case(p.string());
      if (single >= 0) {
        if (archive.img_dims[3] != 4)
          throw std::invalid_argument("'" + p.string() + "' is not multi-modal");
        CaseArchive one;
        one.img_dims = {archive.img_dims[0], archive.img_dims[1], archive.img_dims[2], 1};
        one.gts = archive.gts;
        one.spacing = archive.spacing;
        one.imgs.resize(static_cast<size_t>(one.img_dims[0] * one.img_dims[1] * one.img_dims[2]));
        for (size_t v = 0; v < one.imgs.size(); ++v)
          one.imgs[v] = archive.imgs[v * 4 + static_cast<size_t>(single)];
        archive = std::move(one);
      }
    } else {
      RawCase raw = load_raw_case(ar, p.string(), single);
      std::vector<Tensor> normalized;
      for (const Tensor& t : raw.modalities)
        normalized.push_back(minmax_normalize(clip_percentiles(t, lo, hi)));
      MultiModalVolume volume;
      if (single >= 0) {
        const Tensor& t = normalized[0];
        volume.intensities = Tensor({t.dim(0), t.dim(1), t.dim(2), 1});
        volume.intensities.data = t.data;
        volume.spacing = raw.spacing;
        volume.validate();
      } else {
        volume = stack_modalities(normalized, raw.spacing);
      }

      SegmentationMask mask = raw.mask;
      if (!raw.labeled) {
        mask.dims = {volume.depth(), volume.height(), volume.width()};
        mask.labels.assign(static_cast<size_t>(mask.numel()), 0);
      }
      CropResult crop = raw.labeled ? crop_to_labeled_roi(volume, mask) : [&] {
        auto [v, off] = crop_to_intensity_roi(volume);
        CropResult r;
        r.volume = std::move(v);
        r.slice_offset = off;
        r.mask.dims = {r.volume.depth(), r.volume.height(), r.volume.width()};
        r.mask.labels.assign(static_cast<size_t>(r.mask.dims[0] * r.mask.dims[1] * r.mask.dims[2]),
                             0);
        return r;
      }();
      archive = make_archive(crop.volume, crop.mask);
    }

    save_case(archive, out_path);
    ctx.outputs.push_back(out_path);
  }

  ctx.config = {{"lo", lo}, {"hi", hi}};
  if (single >= 0) ctx.config["single_modality"] = single_modality;
  write_manifest(ctx, (fs::path(out_dir) / "manifest.json").string());
  std::cout << "preprocessed " << ctx.outputs.size() << " cases to " << out_dir << "\n";
  return 0;
}

int cmd_train(RunContext ctx, const std::string& data_dir, const std::string& config_path,
              const std::string& out_path, bool no_attention, bool no_prompting,
              bool seed_set, uint64_t seed, bool epochs_set, long epochs,
              const std::string& preset, bool split_set, double split) {
  TrainConfig cfg = load_train_config(config_path);
  if (seed_set) cfg.seed = seed;
  if (epochs_set) cfg.epochs = epochs;
  cfg.validate();

  std::vector<NamedCase> named = load_named_cases(data_dir);
  ctx.inputs.push_back(data_dir);
  if (split_set) {
    std::vector<std::string> ids;
    for (const NamedCase& c : named) ids.push_back(c.id);
    named = select_cases(named, split_cases(ids, split, cfg.seed).train_ids);
  }
  std::vector<CaseArchive> archives;
  for (NamedCase& c : named) archives.push_back(std::move(c.data));
  if (archives.empty()) throw std::invalid_argument("no training cases in '" + data_dir + "'");

  const long in_channels = archives[0].img_dims[3];
  const ModelConfig mcfg = model_config_for(preset, in_channels);
  const VariantFlags flags{!no_attention, !no_prompting};

  Model model(mcfg, cfg.seed);
  AttentionParams attn = AttentionParams::create(model.params(), model.feature_channels());
  TrainHistory history = train(model, attn, archives, cfg, flags);

  save_checkpoint(model, flags, out_path);
  const fs::path out(out_path);
  const std::string history_path =
      (out.parent_path() / (out.stem().string() + "_history.csv")).string();
  write_history_csv(history, history_path);

  ctx.config = {{"model", json::parse(mcfg.to_json())},
                {"train", json::parse(cfg.to_json())},
                {"variant", {{"attention", flags.attention}, {"prompting", flags.prompting}}}};
  if (split_set) ctx.config["split"] = split;
  ctx.seeds = {{"seed", cfg.seed}};
  ctx.outputs = {out_path, history_path};
  write_manifest(ctx, out_path + ".manifest.json");

  const EpochStats& last = history.back();
  std::cout << "trained " << archives.size() << " cases for " << cfg.epochs
            << " epochs; final ce " << last.loss_ce << ", iou loss " << last.loss_iou << "\n";
  return 0;
}

int cmd_infer(RunContext ctx, const std::string& model_path, const std::string& case_path,
              const std::string& out_path, double tau, long refine_iters) {
  Checkpoint ck = load_checkpoint(model_path);
  const CaseArchive archive = load_case(case_path);
  auto [volume, gt] = archive_to_volume(archive);
  (void)gt;

  TwoPassOptions tp;
  tp.tau = tau;
  tp.refine_iters = refine_iters;
  SegmentationMask pred = two_pass_segment(ck.model, ck.attention, volume, ck.variant, tp);

  npz::Archive out;
  out["pred"] = npz::Array::from_bytes({pred.dims[0], pred.dims[1], pred.dims[2]}, pred.labels);
  npz::save(out_path, out);

  ctx.inputs = {model_path, case_path};
  ctx.outputs = {out_path};
  ctx.config = {{"tau", tau}, {"refine_iters", refine_iters}};
  write_manifest(ctx, out_path + ".manifest.json");
  std::cout << "wrote prediction for " << fs::path(case_path).stem().string() << " to "
            << out_path << "\n";
  return 0;
}

int cmd_eval(RunContext ctx, const std::string& model_path, const std::string& data_dir,
             long cv, bool split_set, double split, uint64_t seed, const std::string& out_path,
             long jobs, const std::string& variant_name, double tau, long refine_iters) {
  if (cv > 0 && split_set)
    throw std::invalid_argument("--cv and --split are mutually exclusive");

  Checkpoint ck = load_checkpoint(model_path);
  const std::vector<NamedCase> cases = load_named_cases(data_dir);
  std::vector<std::string> ids;
  for (const NamedCase& c : cases) ids.push_back(c.id);

  EvalOptions opts;
  opts.two_pass.tau = tau;
  opts.two_pass.refine_iters = refine_iters;
  opts.jobs = jobs;
  const std::string variant = variant_name.empty() ? variant_slug(ck.variant) : variant_name;

  std::vector<ReportRow> rows;
  std::vector<CaseAttention> att_log;
  std::vector<CaseFailure> failures;
  auto eval_group = [&](const std::vector<NamedCase>& group, long fold) {
    MetricsReport rep = evaluate_dataset(ck.model, ck.attention, group, ck.variant, opts,
                                         &att_log);
    rep.variant = variant;
    rep.fold = fold;
    rep.seed = seed;
    std::vector<ReportRow> group_rows = report_rows(rep);
    rows.insert(rows.end(), group_rows.begin(), group_rows.end());
    failures.insert(failures.end(), rep.failures.begin(), rep.failures.end());
  };

  if (cv > 0) {
    const FoldSplit folds = kfold_split(ids, cv, seed);
    for (size_t f = 0; f < folds.folds.size(); ++f)
      eval_group(select_cases(cases, folds.folds[f]), static_cast<long>(f));
  } else if (split_set) {
    eval_group(select_cases(cases, split_cases(ids, split, seed).eval_ids), 0);
  } else {
    eval_group(cases, 0);
  }

  write_report_csv(out_path, rows);
  ctx.outputs = {out_path};
  if (ck.model.config().in_channels == 4) {
    const std::vector<AttentionRow> att = attention_rows(att_log);
    if (!att.empty()) {
      const fs::path out(out_path);
      const std::string att_path =
          (out.parent_path() / (out.stem().string() + "_attention.csv")).string();
      write_attention_csv(att_path, att);
      ctx.outputs.push_back(att_path);
    }
  }

  for (const CaseFailure& f : failures)
    std::cerr << "warning: case '" << f.case_id << "' failed: " << f.reason << "\n";

  ctx.inputs = {model_path, data_dir};
  ctx.config = {{"variant", variant},
                {"tau", tau},
                {"refine_iters", refine_iters},
                {"jobs", jobs}};
  if (cv > 0) ctx.config["cv"] = cv;
  if (split_set) ctx.config["split"] = split;
  ctx.seeds = {{"seed", seed}};
  write_manifest(ctx, out_path + ".manifest.json");

  const RowAggregate agg = aggregate_rows(rows);
  const ScoreAgg* wt = agg.find(variant, "wt");
  std::cout << "evaluated " << (rows.size() / kRegionColumns.size()) << " cases ("
            << failures.size() << " failed)";
  if (wt) std::cout << "; whole-tumor dice " << wt->dice_mean << " +/- " << wt->dice_std;
  std::cout << "\n";
  return 0;
}

int cmd_ablate(RunContext ctx, const std::string& data_dir, const std::string& config_path,
               const std::string& out_path, double split, uint64_t seed, long jobs,
               const std::string& preset, bool seed_set, bool epochs_set, long epochs) {
  TrainConfig cfg = load_train_config(config_path);
  if (seed_set) cfg.seed = seed;
  if (epochs_set) cfg.epochs = epochs;
  cfg.validate();

  const std::vector<NamedCase> cases = load_named_cases(data_dir);
  if (cases.empty()) throw std::invalid_argument("no cases in '" + data_dir + "'");
  const ModelConfig mcfg = model_config_for(preset, cases[0].data.img_dims[3]);

  EvalOptions opts;
  opts.jobs = jobs;
  AblationResult res = ablation_run(cases, mcfg, cfg, split, cfg.seed, opts);

  std::vector<ReportRow> rows;
  for (const AblationRow& row : res.rows) {
    std::vector<ReportRow> r = report_rows(row.report);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const fs::path out(out_path);
  const std::string csv_path = (out.parent_path() / (out.stem().string() + ".csv")).string();
  write_report_csv(csv_path, rows);

  std::string table = markdown_region_table(aggregate_rows(rows));
  const std::string notes = markdown_significance_notes(rows);
  if (!notes.empty()) table += "\n" + notes;
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write table '" + out_path + "'");
  f << table;
  if (!f.good()) throw std::runtime_error("failed writing table '" + out_path + "'");
  f.close();

  ctx.inputs = {data_dir};
  ctx.outputs = {out_path, csv_path};
  ctx.config = {{"model", json::parse(mcfg.to_json())},
                {"train", json::parse(cfg.to_json())},
                {"split", split},
                {"jobs", jobs}};
  ctx.seeds = {{"seed", cfg.seed}};
  write_manifest(ctx, out_path + ".manifest.json");

  if (!res.error.empty()) {
    std::cerr << "error: ablation stopped at variant " << res.error << "\n"
              << "kept " << res.rows.size() << " completed variants in " << csv_path << "\n";
    return 2;
  }
  std::cout << "ablation over " << res.rows.size() << " variants: " << res.eval_ids.size()
            << " eval cases; table in " << out_path << "\n";
  return 0;
}

int cmd_report(RunContext ctx, const std::string& in_csv, const std::string& attention_csv,
               const std::string& out_dir) {
  const std::vector<ReportRow> rows = read_report_csv(in_csv);
  if (rows.empty()) throw std::invalid_argument("'" + in_csv + "' has no data rows");
  const RowAggregate agg = aggregate_rows(rows);

  fs::create_directories(out_dir);
  auto emit = [&](const std::string& name, const std::string& text) {
    const std::string path = (fs::path(out_dir) / name).string();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f << text;
    if (!f.good()) throw std::runtime_error("failed writing '" + path + "'");
    ctx.outputs.push_back(path);
  };

  emit("modality_table.md", markdown_overall_table(agg, "Modality"));
  std::string ablation = markdown_region_table(agg, "Method");
  const std::string notes = markdown_significance_notes(rows);
  if (!notes.empty()) ablation += "\n" + notes;
  emit("ablation_table.md", ablation);
  emit("subregion_table.md", markdown_region_table(agg, "Modality"));
  emit("dice_by_region.svg", svg_dice_bars(agg, "Dice by region"));

  ctx.inputs = {in_csv};
  if (!attention_csv.empty()) {
    emit("attention_summary.md", markdown_attention_summary(read_attention_csv(attention_csv)));
    ctx.inputs.push_back(attention_csv);
  }

  write_manifest(ctx, (fs::path(out_dir) / "manifest.json").string());
  std::cout << "wrote " << ctx.outputs.size() << " report files to " << out_dir << "\n";
  return 0;
}

int cmd_rerun(const std::string& manifest_path) {
  std::ifstream f(manifest_path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot read manifest '" + manifest_path + "'");
  json m;
  try {
    f >> m;
  } catch (const json::exception& e) {
    throw std::invalid_argument("manifest '" + manifest_path + "' is not valid JSON: " +
                                e.what());
  }
  if (!m.contains("argv") || !m["argv"].is_array())
    throw std::invalid_argument("manifest '" + manifest_path + "' has no argv list");
  std::vector<std::string> args;
  for (const json& a : m["argv"]) args.push_back(a.get<std::string>());
  return run(args);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"sub-region aware brain tumor segmentation pipeline"};
  app.set_version_flag("--version", SUBSEG_VERSION);
  app.require_subcommand(1);

  RunContext ctx;
  ctx.argv = args;

  // phantom
  long ph_n = 5;
  std::string ph_size = "24x64x64";
  double ph_noise = 0.0;
  uint64_t ph_seed = 0;
  std::string ph_out;
  CLI::App* phantom = app.add_subcommand("phantom", "generate synthetic tumor cases");
  phantom->add_option("--n", ph_n, "number of cases");
  phantom->add_option("--size", ph_size, "volume size as DxHxW");
  phantom->add_option("--noise", ph_noise, "gaussian noise sigma");
  phantom->add_option("--seed", ph_seed, "random seed");
  phantom->add_option("--out", ph_out, "output directory")->required();

  // preprocess
  std::string pp_in, pp_out, pp_single;
  double pp_lo = 0.5, pp_hi = 99.5;
  CLI::App* preprocess = app.add_subcommand("preprocess", "normalize and crop raw volumes");
  preprocess->add_option("--in", pp_in, "input directory")->envname("SUBSEG_DATA_DIR")->required();
  preprocess->add_option("--out", pp_out, "output directory")->required();
  preprocess->add_option("--lo", pp_lo, "lower clip percentile");
  preprocess->add_option("--hi", pp_hi, "upper clip percentile");
  preprocess->add_option("--single-modality", pp_single, "keep one modality (T1|T1c|T2|FLAIR)");

  // train
  std::string tr_data, tr_config, tr_out, tr_preset = "desk";
  bool tr_no_attention = false, tr_no_prompting = false;
  uint64_t tr_seed = 0;
  long tr_epochs = 0;
  double tr_split = 0.8;
  CLI::App* train_cmd = app.add_subcommand("train", "train a segmentation model");
  train_cmd->add_option("--data", tr_data, "case directory")->envname("SUBSEG_DATA_DIR")
      ->required();
  train_cmd->add_option("--config", tr_config, "training config (JSON)");
  train_cmd->add_option("--out", tr_out, "checkpoint path")->required();
  train_cmd->add_flag("--no-attention", tr_no_attention, "disable modality attention");
  train_cmd->add_flag("--no-prompting", tr_no_prompting, "disable adaptive prompting");
  CLI::Option* tr_seed_opt = train_cmd->add_option("--seed", tr_seed, "random seed");
  CLI::Option* tr_epochs_opt = train_cmd->add_option("--epochs", tr_epochs, "epoch count");
  train_cmd->add_option("--preset", tr_preset, "model size preset (desk|default)");
  CLI::Option* tr_split_opt =
      train_cmd->add_option("--split", tr_split, "train on this fraction only");

  // infer
  std::string in_model, in_case, in_out;
  double in_tau = 0.5;
  long in_iters = 1;
  CLI::App* infer = app.add_subcommand("infer", "segment one case");
  infer->add_option("--model", in_model, "checkpoint path")->required();
  infer->add_option("--case", in_case, "case archive")->required();
  infer->add_option("--out", in_out, "prediction path")->required();
  infer->add_option("--tau", in_tau, "probability threshold");
  infer->add_option("--refine-iters", in_iters, "refinement iterations");

  // eval
  std::string ev_model, ev_data, ev_out, ev_variant;
  long ev_cv = 0, ev_jobs = 1, ev_iters = 1;
  double ev_split = 0.8, ev_tau = 0.5;
  uint64_t ev_seed = 0;
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a model over a case directory");
  eval_cmd->add_option("--model", ev_model, "checkpoint path")->required();
  eval_cmd->add_option("--data", ev_data, "case directory")->envname("SUBSEG_DATA_DIR")
      ->required();
  eval_cmd->add_option("--cv", ev_cv, "evaluate per fold of a k-fold split");
  CLI::Option* ev_split_opt =
      eval_cmd->add_option("--split", ev_split, "evaluate the held-out fraction");
  eval_cmd->add_option("--seed", ev_seed, "split seed");
  eval_cmd->add_option("--out", ev_out, "report CSV path")->required();
  eval_cmd->add_option("--jobs", ev_jobs, "parallel case workers");
  eval_cmd->add_option("--variant-name", ev_variant, "override the variant column");
  eval_cmd->add_option("--tau", ev_tau, "probability threshold");
  eval_cmd->add_option("--refine-iters", ev_iters, "refinement iterations");

  // ablate
  std::string ab_data, ab_config, ab_out, ab_preset = "desk";
  double ab_split = 0.8;
  uint64_t ab_seed = 0;
  long ab_jobs = 1, ab_epochs = 0;
  CLI::App* ablate = app.add_subcommand("ablate", "train and score every framework variant");
  ablate->add_option("--data", ab_data, "case directory")->envname("SUBSEG_DATA_DIR")->required();
  ablate->add_option("--config", ab_config, "training config (JSON)");
  ablate->add_option("--out", ab_out, "markdown table path")->required();
  ablate->add_option("--split", ab_split, "training fraction");
  CLI::Option* ab_seed_opt = ablate->add_option("--seed", ab_seed, "random seed");
  CLI::Option* ab_epochs_opt = ablate->add_option("--epochs", ab_epochs, "epoch count");
  ablate->add_option("--jobs", ab_jobs, "parallel case workers");
  ablate->add_option("--preset", ab_preset, "model size preset (desk|default)");

  // report
  std::string rp_in, rp_attention, rp_out;
  CLI::App* report = app.add_subcommand("report", "render tables and charts from a report CSV");
  report->add_option("--in", rp_in, "report CSV path")->required();
  report->add_option("--attention-in", rp_attention, "attention CSV path");
  report->add_option("--out-dir", rp_out, "output directory")->required();

  // rerun
  std::string rr_manifest;
  CLI::App* rerun = app.add_subcommand("rerun", "re-execute a command from its manifest");
  rerun->add_option("--manifest", rr_manifest, "manifest JSON path")->required();

  std::vector<const char*> argv;
  argv.push_back("subseg");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return 1;
  }

  ctx.command = app.get_subcommands().front()->get_name();
  try {
    if (phantom->parsed())
      return cmd_phantom(std::move(ctx), ph_n, ph_size, ph_noise, ph_seed, ph_out);
    if (preprocess->parsed())
      return cmd_preprocess(std::move(ctx), pp_in, pp_out, pp_lo, pp_hi, pp_single);
    if (train_cmd->parsed())
      return cmd_train(std::move(ctx), tr_data, tr_config, tr_out, tr_no_attention,
                       tr_no_prompting, static_cast<bool>(*tr_seed_opt), tr_seed,
                       static_cast<bool>(*tr_epochs_opt), tr_epochs, tr_preset,
                       static_cast<bool>(*tr_split_opt), tr_split);
    if (infer->parsed())
      return cmd_infer(std::move(ctx), in_model, in_case, in_out, in_tau, in_iters);
    if (eval_cmd->parsed())
      return cmd_eval(std::move(ctx), ev_model, ev_data, ev_cv,
                      static_cast<bool>(*ev_split_opt), ev_split, ev_seed, ev_out, ev_jobs,
                      ev_variant, ev_tau, ev_iters);
    if (ablate->parsed())
      return cmd_ablate(std::move(ctx), ab_data, ab_config, ab_out, ab_split, ab_seed, ab_jobs,
                        ab_preset, static_cast<bool>(*ab_seed_opt),
                        static_cast<bool>(*ab_epochs_opt), ab_epochs);
    if (report->parsed()) return cmd_report(std::move(ctx), rp_in, rp_attention, rp_out);
    if (rerun->parsed()) return cmd_rerun(rr_manifest);
    std::cerr << app.help();
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const npz::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}
