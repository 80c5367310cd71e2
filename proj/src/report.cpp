#include "subseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "subseg/metrics.hpp"

namespace subseg {

namespace {

std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

std::string fmt3(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", x);
  return buf;
}

std::string mean_std_cell(double mean, double stdev) { return fmt3(mean) + " ± " + fmt3(stdev); }

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  for (char c : line) {
    if (c == ',') {
      out.push_back(field);
      field.clear();
    } else {
      field.push_back(c);
    }
  }
  out.push_back(field);
  return out;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

double parse_double(const std::string& field, const std::string& path, long lineno,
                    const char* column) {
  char* end = nullptr;
  const double v = std::strtod(field.c_str(), &end);
  if (field.empty() || end != field.c_str() + field.size())
    throw std::invalid_argument("csv '" + path + "' line " + std::to_string(lineno) +
                                ": bad value '" + field + "' in column '" + column + "'");
  return v;
}

long parse_long(const std::string& field, const std::string& path, long lineno,
                const char* column) {
  char* end = nullptr;
  const long v = std::strtol(field.c_str(), &end, 10);
  if (field.empty() || end != field.c_str() + field.size())
    throw std::invalid_argument("csv '" + path + "' line " + std::to_string(lineno) +
                                ": bad value '" + field + "' in column '" + column + "'");
  return v;
}

uint64_t parse_u64(const std::string& field, const std::string& path, long lineno,
                   const char* column) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(field.c_str(), &end, 10);
  if (field.empty() || end != field.c_str() + field.size())
    throw std::invalid_argument("csv '" + path + "' line " + std::to_string(lineno) +
                                ": bad value '" + field + "' in column '" + column + "'");
  return static_cast<uint64_t>(v);
}

/// Maps required column names to their indices; a missing name is an error.
std::vector<size_t> header_indices(const std::vector<std::string>& header,
                                   const std::vector<const char*>& required,
                                   const std::string& path) {
  std::vector<size_t> idx;
  for (const char* name : required) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw std::invalid_argument("csv '" + path + "' missing column '" + name + "'");
    idx.push_back(static_cast<size_t>(it - header.begin()));
  }
  return idx;
}

const std::string& field_at(const std::vector<std::string>& fields, size_t idx,
                            const std::string& path, long lineno) {
  if (idx >= fields.size())
    throw std::invalid_argument("csv '" + path + "' line " + std::to_string(lineno) +
                                ": too few fields");
  return fields[idx];
}

std::string sub_region_slug(uint8_t label) {
  switch (label) {
    case 1: return "ncr";
    case 2: return "ed";
    case 4: return "et";
    default:
      throw std::invalid_argument("sub_region_slug: label " + std::to_string(label) +
                                  " is not a sub-region");
  }
}

void mean_std(const std::vector<double>& xs, double& mean, double& stdev) {
  mean = 0.0;
  stdev = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double sq = 0.0;
  for (double x : xs) sq += (x - mean) * (x - mean);
  stdev = std::sqrt(sq / static_cast<double>(xs.size()));
}

}  // namespace

std::vector<ReportRow> report_rows(const MetricsReport& report) {
  std::vector<ReportRow> rows;
  rows.reserve(report.cases.size() * kRegionColumns.size());
  for (const CaseScores& c : report.cases)
    for (size_t r = 0; r < kRegionColumns.size(); ++r)
      rows.push_back(ReportRow{c.case_id, kRegionColumns[r], c.dice[r], c.iou[r], report.variant,
                               report.fold, report.seed});
  return rows;
}

void write_report_csv(const std::string& path, const std::vector<ReportRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write report csv '" + path + "'");
  f << "case_id,region,dice,iou,variant,fold,seed\n";
  for (const ReportRow& r : rows)
    f << r.case_id << ',' << r.region << ',' << num(r.dice) << ',' << num(r.iou) << ','
      << r.variant << ',' << r.fold << ',' << r.seed << '\n';
  if (!f.good()) throw std::runtime_error("failed writing report csv '" + path + "'");
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot read report csv '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw std::invalid_argument("csv '" + path + "' is empty");
  const std::vector<std::string> header = split_fields(strip_cr(line));
  const std::vector<size_t> idx = header_indices(
      header, {"case_id", "region", "dice", "iou", "variant", "fold", "seed"}, path);

  std::vector<ReportRow> rows;
  long lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    ReportRow r;
    r.case_id = field_at(fields, idx[0], path, lineno);
    r.region = field_at(fields, idx[1], path, lineno);
    r.dice = parse_double(field_at(fields, idx[2], path, lineno), path, lineno, "dice");
    r.iou = parse_double(field_at(fields, idx[3], path, lineno), path, lineno, "iou");
    r.variant = field_at(fields, idx[4], path, lineno);
    r.fold = parse_long(field_at(fields, idx[5], path, lineno), path, lineno, "fold");
    r.seed = parse_u64(field_at(fields, idx[6], path, lineno), path, lineno, "seed");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<AttentionRow> attention_rows(const std::vector<CaseAttention>& log) {
  std::vector<AttentionRow> rows;
  for (const CaseAttention& c : log)
    for (const AttentionRecord& rec : c.records) {
      if (rec.alpha.size() != 4)
        throw std::invalid_argument("attention_rows: expected 4 modality weights, got " +
                                    std::to_string(rec.alpha.size()));
      AttentionRow row;
      row.case_id = c.case_id;
      row.slice = rec.slice;
      row.sub_region = sub_region_slug(rec.sub_region);
      std::copy(rec.alpha.begin(), rec.alpha.end(), row.alpha.begin());
      rows.push_back(std::move(row));
    }
  return rows;
}

void write_attention_csv(const std::string& path, const std::vector<AttentionRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write attention csv '" + path + "'");
  f << "case,slice,sub_region,alpha_T1,alpha_T1c,alpha_T2,alpha_FLAIR\n";
  for (const AttentionRow& r : rows)
    f << r.case_id << ',' << r.slice << ',' << r.sub_region << ',' << num(r.alpha[0]) << ','
      << num(r.alpha[1]) << ',' << num(r.alpha[2]) << ',' << num(r.alpha[3]) << '\n';
  if (!f.good()) throw std::runtime_error("failed writing attention csv '" + path + "'");
}

std::vector<AttentionRow> read_attention_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot read attention csv '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw std::invalid_argument("csv '" + path + "' is empty");
  const std::vector<std::string> header = split_fields(strip_cr(line));
  const std::vector<size_t> idx = header_indices(
      header, {"case", "slice", "sub_region", "alpha_T1", "alpha_T1c", "alpha_T2", "alpha_FLAIR"},
      path);

  std::vector<AttentionRow> rows;
  long lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    line = strip_cr(line);
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    AttentionRow r;
    r.case_id = field_at(fields, idx[0], path, lineno);
    r.slice = parse_long(field_at(fields, idx[1], path, lineno), path, lineno, "slice");
    r.sub_region = field_at(fields, idx[2], path, lineno);
    for (int m = 0; m < 4; ++m)
      r.alpha[static_cast<size_t>(m)] =
          parse_double(field_at(fields, idx[static_cast<size_t>(3 + m)], path, lineno), path,
                       lineno, "alpha");
    rows.push_back(std::move(r));
  }
  return rows;
}

const ScoreAgg* RowAggregate::find(const std::string& variant, const std::string& region) const {
  auto v = stats.find(variant);
  if (v == stats.end()) return nullptr;
  auto r = v->second.find(region);
  return r == v->second.end() ? nullptr : &r->second;
}

RowAggregate aggregate_rows(const std::vector<ReportRow>& rows) {
  RowAggregate agg;
  std::map<std::string, std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>>
      buckets;
  for (const ReportRow& r : rows) {
    if (buckets.find(r.variant) == buckets.end()) agg.variants.push_back(r.variant);
    auto& [ds, is] = buckets[r.variant][r.region];
    ds.push_back(r.dice);
    is.push_back(r.iou);
  }
  for (auto& [variant, regions] : buckets)
    for (auto& [region, lists] : regions) {
      ScoreAgg s;
      s.n = static_cast<long>(lists.first.size());
      mean_std(lists.first, s.dice_mean, s.dice_std);
      mean_std(lists.second, s.iou_mean, s.iou_std);
      agg.stats[variant][region] = s;
    }
  return agg;
}

std::string region_display(const std::string& slug) {
  if (slug == "ncr") return "Necrotic Core";
  if (slug == "ed") return "Edema";
  if (slug == "et") return "Enhancing Tumor";
  if (slug == "wt") return "Whole Tumor";
  if (slug == "tc") return "Tumor Core";
  return slug;
}

std::string variant_display(const std::string& slug) {
  for (const AblationVariant& v : ablation_grid())
    if (v.slug == slug) return v.name;
  return slug;
}

std::string markdown_overall_table(const RowAggregate& agg, const std::string& label_column) {
  std::ostringstream out;
  out << "| " << label_column << " | Dice Score | IoU |\n";
  out << "| --- | --- | --- |\n";
  for (const std::string& variant : agg.variants) {
    const ScoreAgg* s = agg.find(variant, "wt");
    out << "| " << variant_display(variant) << " | ";
    if (s)
      out << mean_std_cell(s->dice_mean, s->dice_std) << " | "
          << mean_std_cell(s->iou_mean, s->iou_std);
    else
      out << "n/a | n/a";
    out << " |\n";
  }
  return out.str();
}

std::string markdown_region_table(const RowAggregate& agg, const std::string& label_column) {
  static const char* regions[4] = {"ncr", "ed", "et", "wt"};
  std::ostringstream out;
  out << "| " << label_column;
  for (const char* r : regions) out << " | " << region_display(r) << " Dice";
  out << " |\n|";
  for (int i = 0; i < 5; ++i) out << " --- |";
  out << "\n";
  for (const std::string& variant : agg.variants) {
    out << "| " << variant_display(variant);
    for (const char* r : regions) {
      const ScoreAgg* s = agg.find(variant, r);
      out << " | " << (s ? mean_std_cell(s->dice_mean, s->dice_std) : std::string("n/a"));
    }
    out << " |\n";
  }
  return out.str();
}

std::string markdown_significance_notes(const std::vector<ReportRow>& rows) {
  std::vector<std::string> variants;
  std::map<std::string, std::map<std::string, double>> wt;  // variant -> case -> dice
  for (const ReportRow& r : rows) {
    if (r.region != "wt") continue;
    if (wt.find(r.variant) == wt.end()) variants.push_back(r.variant);
    wt[r.variant][r.case_id] = r.dice;
  }
  if (variants.size() < 2) return "";
  const std::map<std::string, double>& base = wt[variants.front()];
  if (base.empty()) return "";
  for (const std::string& v : variants)
    if (wt[v].size() != base.size()) return "";

  std::vector<double> base_scores;
  for (const auto& [id, d] : base) base_scores.push_back(d);

  std::ostringstream out;
  out << "Whole-tumor Dice, Wilcoxon signed-rank vs " << variant_display(variants.front())
      << ":\n";
  char buf[64];
  for (size_t i = 1; i < variants.size(); ++i) {
    std::vector<double> scores;
    for (const auto& [id, d] : base) {
      auto it = wt[variants[i]].find(id);
      if (it == wt[variants[i]].end()) return "";
      scores.push_back(it->second);
      (void)d;
    }
    const double p = wilcoxon_signed_rank(scores, base_scores);
    std::snprintf(buf, sizeof buf, "%.4g", p);
    out << "- " << variant_display(variants[i]) << ": p = " << buf << "\n";
  }
  return out.str();
}

std::string markdown_attention_summary(const std::vector<AttentionRow>& rows) {
  std::ostringstream out;
  out << "| Sub-region | T1 | T1c | T2 | FLAIR |\n";
  out << "| --- | --- | --- | --- | --- |\n";
  for (const char* slug : {"ncr", "ed", "et"}) {
    std::array<double, 4> sum{};
    long n = 0;
    for (const AttentionRow& r : rows) {
      if (r.sub_region != slug) continue;
      for (int m = 0; m < 4; ++m) sum[static_cast<size_t>(m)] += r.alpha[static_cast<size_t>(m)];
      ++n;
    }
    if (n == 0) continue;
    out << "| " << region_display(slug);
    for (int m = 0; m < 4; ++m)
      out << " | " << fmt3(sum[static_cast<size_t>(m)] / static_cast<double>(n));
    out << " |\n";
  }
  return out.str();
}

std::string svg_dice_bars(const RowAggregate& agg, const std::string& title) {
  static const char* regions[4] = {"ncr", "ed", "et", "wt"};
  static const char* palette[6] = {"#4c78a8", "#f58518", "#54a24b",
                                   "#e45756", "#72b7b2", "#b279a2"};
  const double width = 760, height = 420;
  const double x0 = 70, x1 = 730, y0 = 360, y1 = 60;
  const size_t nv = agg.variants.size();

  char buf[64];
  auto f2 = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  auto y_of = [&](double dice) { return y0 - (y0 - y1) * dice; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  s << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  s << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\""
    << " font-size=\"16\">" << title << "</text>\n";

  for (int g = 0; g <= 4; ++g) {
    const double v = 0.25 * g;
    const double y = y_of(v);
    s << "<line x1=\"" << x0 << "\" y1=\"" << f2(y) << "\" x2=\"" << x1 << "\" y2=\"" << f2(y)
      << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << x0 - 8 << "\" y=\"" << f2(y + 4)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << f2(v)
      << "</text>\n";
  }

  const double group_w = (x1 - x0) / 4.0;
  for (size_t r = 0; r < 4; ++r) {
    const double gx = x0 + group_w * static_cast<double>(r);
    s << "<text x=\"" << f2(gx + group_w / 2) << "\" y=\"" << y0 + 22
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
      << region_display(regions[r]) << "</text>\n";
    if (nv == 0) continue;
    const double band = group_w * 0.8;
    const double bar_w = band / static_cast<double>(nv);
    for (size_t v = 0; v < nv; ++v) {
      const ScoreAgg* sa = agg.find(agg.variants[v], regions[r]);
      if (!sa) continue;
      const double bx = gx + group_w * 0.1 + bar_w * static_cast<double>(v);
      const double by = y_of(sa->dice_mean);
      s << "<rect x=\"" << f2(bx + 1) << "\" y=\"" << f2(by) << "\" width=\"" << f2(bar_w - 2)
        << "\" height=\"" << f2(y0 - by) << "\" fill=\"" << palette[v % 6] << "\"/>\n";
      const double lo = y_of(std::max(0.0, sa->dice_mean - sa->dice_std));
      const double hi = y_of(std::min(1.0, sa->dice_mean + sa->dice_std));
      const double cx = bx + bar_w / 2;
      s << "<line x1=\"" << f2(cx) << "\" y1=\"" << f2(lo) << "\" x2=\"" << f2(cx) << "\" y2=\""
        << f2(hi) << "\" stroke=\"#333\"/>\n";
      s << "<line x1=\"" << f2(cx - 4) << "\" y1=\"" << f2(lo) << "\" x2=\"" << f2(cx + 4)
        << "\" y2=\"" << f2(lo) << "\" stroke=\"#333\"/>\n";
      s << "<line x1=\"" << f2(cx - 4) << "\" y1=\"" << f2(hi) << "\" x2=\"" << f2(cx + 4)
        << "\" y2=\"" << f2(hi) << "\" stroke=\"#333\"/>\n";
    }
  }

  for (size_t v = 0; v < nv; ++v) {
    const double ly = 40 + 18 * static_cast<double>(v);
    s << "<rect x=\"" << x1 - 180 << "\" y=\"" << f2(ly - 10)
      << "\" width=\"12\" height=\"12\" fill=\"" << palette[v % 6] << "\"/>\n";
    s << "<text x=\"" << x1 - 162 << "\" y=\"" << f2(ly)
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << variant_display(agg.variants[v])
      << "</text>\n";
  }

  s << "</svg>\n";
  return s.str();
}

}  // namespace subseg
