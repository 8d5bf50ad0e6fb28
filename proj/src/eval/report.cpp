#include "cseg/eval/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "cseg/core/errors.hpp"

namespace cseg {

namespace fs = std::filesystem;

namespace {

constexpr std::array<const char*, 2> kMetricNames{"dice_gt", "temporal_dice"};
constexpr std::array<const char*, 3> kStratumNames{"LOW", "HIGH", "ALL"};

std::string num(double v, int digits = 17) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream s(line);
  while (std::getline(s, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<Group> parse_group(const std::string& s) {
  if (s == "HIGH") return Group::high;
  if (s == "LOW") return Group::low;
  if (s.empty()) return std::nullopt;
  throw IoError("unknown group '" + s + "'");
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::map<std::string, const SubjectScore*> by_subject(const std::vector<SubjectScore>& scores, const char* what) {
  std::map<std::string, const SubjectScore*> m;
  for (const auto& s : scores) {
    if (!m.emplace(s.subject_id, &s).second) throw ArgumentError(std::string(what) + ": duplicate subject " + s.subject_id);
  }
  return m;
}

double metric_of(const SubjectScore& s, int metric) { return metric == 0 ? s.dice_gt : s.temporal_dice; }

}  // namespace

SeriesPrediction predict_series(const SegmentationNetwork& net, const TimeSeries& series, bool keep_logits) {
  SeriesPrediction out;
  for (const Volume3D& frame : series.frames) {
    if (frame.shape() != series.shape()) {
      throw ArgumentError("predict_series: frame shape " + frame.shape().str() + " differs from " + series.shape().str());
    }
    LogitMap logits = forward_seg(net, frame);
    out.labels.push_back(logits_to_labels(logits));
    if (keep_logits) out.logits.push_back(std::move(logits));
  }
  return out;
}

SubjectScore score_subject(const TimeSeries& series, const SeriesPrediction& prediction,
                           const std::vector<LabelMap>* dense_truth) {
  if (prediction.labels.size() != series.num_frames()) throw ArgumentError("score_subject: prediction/frame count mismatch");
  SubjectScore s;
  s.subject_id = series.subject_id;
  std::vector<double> d;
  if (dense_truth) {
    if (dense_truth->size() != series.num_frames()) throw ArgumentError("score_subject: truth/frame count mismatch");
    for (std::size_t t = 0; t < dense_truth->size(); ++t) d.push_back(dice_coefficient(prediction.labels[t], (*dense_truth)[t]));
  } else {
    for (const auto& [t, label] : series.labels) d.push_back(dice_coefficient(prediction.labels[static_cast<std::size_t>(t)], label));
  }
  if (d.empty()) throw ArgumentError("score_subject: subject " + series.subject_id + " has no labeled frames");
  s.dice_gt = mean(d);
  s.temporal_dice = temporal_dice(prediction.labels);
  return s;
}

std::vector<SubjectScore> group_low_high(std::vector<SubjectScore> scores, const std::vector<SubjectScore>& basic_scores,
                                         double dice_threshold, double temporal_threshold) {
  const auto basic = by_subject(basic_scores, "group_low_high");
  for (auto& s : scores) {
    const auto it = basic.find(s.subject_id);
    if (it == basic.end()) throw ArgumentError("group_low_high: no Basic score for subject " + s.subject_id);
    s.group_gt = classify(it->second->dice_gt, dice_threshold);
    s.group_td = classify(it->second->temporal_dice, temporal_threshold);
  }
  return scores;
}

ImprovementTable improvement_table(const std::vector<SubjectScore>& setting_scores,
                                   const std::vector<SubjectScore>& basic_scores, double dice_threshold,
                                   double temporal_threshold) {
  const auto basic = by_subject(basic_scores, "improvement_table");
  const auto mine = by_subject(setting_scores, "improvement_table");
  if (basic.size() != mine.size() ||
      !std::equal(basic.begin(), basic.end(), mine.begin(), [](const auto& a, const auto& b) { return a.first == b.first; })) {
    throw ArgumentError("improvement_table: subject sets differ between setting and Basic scores");
  }
  ImprovementTable table;
  if (!setting_scores.empty()) table.setting = setting_scores.front().setting;
  const std::array<double, 2> thresholds{dice_threshold, temporal_threshold};
  std::array<std::array<std::vector<double>, 3>, 2> buckets;
  for (const auto& s : setting_scores) {
    const SubjectScore& b = *basic.at(s.subject_id);
    table.subjects.push_back(s.subject_id);
    for (int m = 0; m < 2; ++m) {
      const double delta = metric_of(s, m) - metric_of(b, m);
      const Group g = classify(metric_of(b, m), thresholds[static_cast<std::size_t>(m)]);
      table.deltas[m].push_back(delta);
      table.groups[m].push_back(g);
      buckets[m][g == Group::low ? 0 : 1].push_back(delta);
      buckets[m][2].push_back(delta);
    }
  }
  for (int m = 0; m < 2; ++m) {
    for (int g = 0; g < 3; ++g) {
      const auto& v = buckets[m][g];
      DeltaSummary& c = table.cells[m][g];
      c.n = v.size();
      if (!v.empty()) {
        c.median = median(v);
        c.iqr = iqr(v);
      }
    }
  }
  return table;
}

void write_table1_csv(const fs::path& path, const std::vector<ImprovementTable>& tables) {
  auto out = open_out(path);
  out << "setting,metric,group,n,median,iqr\n";
  for (const auto& t : tables) {
    for (int m = 0; m < 2; ++m) {
      for (int g = 0; g < 3; ++g) {
        const auto& c = t.cells[m][g];
        out << t.setting << ',' << kMetricNames[m] << ',' << kStratumNames[g] << ',' << c.n << ',';
        if (c.n) out << num(c.median) << ',' << num(c.iqr);
        else out << ',';
        out << '\n';
      }
    }
  }
}

std::string format_table1(const std::vector<ImprovementTable>& tables) {
  std::ostringstream s;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s | %-54s | %-54s\n", "", "Dice w. ground truth", "Temporal Dice");
  s << buf;
  std::snprintf(buf, sizeof buf, "%-14s | %-17s %-17s %-17s | %-17s %-17s %-17s\n", "setting", "LOW", "HIGH", "ALL", "LOW",
                "HIGH", "ALL");
  s << buf;
  for (const auto& t : tables) {
    std::snprintf(buf, sizeof buf, "%-14s |", t.setting.c_str());
    s << buf;
    for (int m = 0; m < 2; ++m) {
      for (int g = 0; g < 3; ++g) {
        const auto& c = t.cells[m][g];
        const std::string cell = c.n ? fixed(c.median, 3) + " (" + fixed(c.iqr, 3) + ")" : "n/a";
        std::snprintf(buf, sizeof buf, " %-17s", cell.c_str());
        s << buf;
      }
      if (m == 0) s << " |";
    }
    s << '\n';
  }
  return s.str();
}

std::optional<SummaryCell> SummaryTable::cell(const std::string& method, const std::string& level) const {
  const auto it = cells.find({method, level});
  if (it == cells.end()) return std::nullopt;
  return it->second;
}

SummaryTable summarize(const std::map<std::string, std::map<std::string, std::vector<double>>>& scores,
                       std::vector<std::string> levels) {
  SummaryTable t;
  t.levels = std::move(levels);
  for (const auto& [method, per_level] : scores) {
    t.methods.push_back(method);
    for (const auto& [level, values] : per_level) {
      if (std::find(t.levels.begin(), t.levels.end(), level) == t.levels.end()) t.levels.push_back(level);
      if (values.empty()) continue;
      t.cells[{method, level}] = SummaryCell{values.size(), mean(values), population_std(values)};
    }
  }
  return t;
}

void write_table2_csv(const fs::path& path, const SummaryTable& table) {
  auto out = open_out(path);
  out << "method,level,n,mean,std\n";
  for (const auto& m : table.methods) {
    for (const auto& l : table.levels) {
      out << m << ',' << l << ',';
      if (const auto c = table.cell(m, l)) out << c->n << ',' << num(c->mean) << ',' << num(c->std);
      else out << "0,,";
      out << '\n';
    }
  }
}

std::string format_table2(const SummaryTable& table) {
  std::ostringstream s;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-14s", "method");
  s << buf;
  for (const auto& l : table.levels) {
    std::snprintf(buf, sizeof buf, " | %-11s", l.c_str());
    s << buf;
  }
  s << '\n';
  for (const auto& m : table.methods) {
    std::snprintf(buf, sizeof buf, "%-14s", m.c_str());
    s << buf;
    for (const auto& l : table.levels) {
      const auto c = table.cell(m, l);
      const std::string text = c ? fixed(c->mean, 2) + "±" + fixed(c->std, 2) : "-";
      std::snprintf(buf, sizeof buf, " | %-11s", text.c_str());
      s << buf;
    }
    s << '\n';
  }
  return s.str();
}

void write_scores_csv(const fs::path& path, const std::vector<SubjectScore>& scores) {
  auto out = open_out(path);
  out << "subject_id,setting,dice_gt,temporal_dice,group_gt,group_td,level\n";
  for (const auto& s : scores) {
    out << s.subject_id << ',' << s.setting << ',' << num(s.dice_gt) << ',' << num(s.temporal_dice) << ','
        << (s.group_gt ? group_name(*s.group_gt) : "") << ',' << (s.group_td ? group_name(*s.group_td) : "") << ','
        << s.level << '\n';
  }
}

std::vector<SubjectScore> read_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  if (header.size() < 6 || header[0] != "subject_id") throw IoError(path.string() + ": not a scores file");
  std::vector<SubjectScore> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = split(line);
    if (c.size() < 6) throw IoError(path.string() + ": short row '" + line + "'");
    SubjectScore s;
    s.subject_id = c[0];
    s.setting = c[1];
    s.dice_gt = std::stod(c[2]);
    s.temporal_dice = std::stod(c[3]);
    s.group_gt = parse_group(c[4]);
    s.group_td = parse_group(c[5]);
    if (c.size() > 6 && !c[6].empty()) s.level = c[6];
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<double> gaussian_kde(const std::vector<double>& samples, const std::vector<double>& grid, double* bandwidth) {
  if (samples.empty()) throw ArgumentError("gaussian_kde: no samples");
  const double sd = population_std(samples);
  double h = 1.06 * sd * std::pow(static_cast<double>(samples.size()), -0.2);
  if (!(h > 0.0)) h = 0.01;
  if (bandwidth) *bandwidth = h;
  const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  std::vector<double> out;
  out.reserve(grid.size());
  for (double x : grid) {
    double acc = 0.0;
    for (double s : samples) {
      const double z = (x - s) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out.push_back(acc * norm);
  }
  return out;
}

namespace {

const std::array<const char*, 8> kPalette{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

struct Svg {
  std::ostringstream body;
  double width;
  double height;

  Svg(double w, double h) : width(w), height(h) {}
  void line(double x1, double y1, double x2, double y2, const std::string& color, double w = 1.0) {
    body << "<line x1=\"" << x1 << "\" y1=\"" << y1 << "\" x2=\"" << x2 << "\" y2=\"" << y2 << "\" stroke=\"" << color
         << "\" stroke-width=\"" << w << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 12) {
    body << "<text x=\"" << x << "\" y=\"" << y << "\" font-size=\"" << size << "\" text-anchor=\"" << anchor
         << "\" font-family=\"sans-serif\">" << s << "</text>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    body << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\"" << h << "\" fill=\"" << fill
         << "\" fill-opacity=\"0.5\" stroke=\"black\"/>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& color) {
    body << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) body << x << ',' << y << ' ';
    body << "\"/>\n";
  }
  void save(const fs::path& path) const {
    auto out = open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << body.str() << "</svg>\n";
  }
};

std::vector<std::string> setting_order(const std::vector<SubjectScore>& scores) {
  std::vector<std::string> order;
  for (const auto& s : scores) {
    if (std::find(order.begin(), order.end(), s.setting) == order.end()) order.push_back(s.setting);
  }
  std::stable_partition(order.begin(), order.end(), [](const std::string& s) { return s == "basic"; });
  return order;
}

}  // namespace

std::vector<fs::path> emit_plots(const std::vector<SubjectScore>& scores, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  const auto settings = setting_order(scores);

  // Density panels.
  std::vector<double> grid;
  for (int k = 0; k <= 200; ++k) grid.push_back(k / 200.0);
  for (int m = 0; m < 2; ++m) {
    const fs::path csv = out_dir / (std::string("kde_") + kMetricNames[m] + ".csv");
    const fs::path raw = out_dir / (std::string("kde_") + kMetricNames[m] + "_samples.csv");
    auto out = open_out(csv);
    auto samples_out = open_out(raw);
    out << "setting,bandwidth,x,density\n";
    samples_out << "setting,subject_id,value\n";
    std::vector<std::pair<std::string, std::vector<double>>> curves;
    double ymax = 0.0;
    for (const auto& name : settings) {
      std::vector<double> v;
      for (const auto& s : scores) {
        if (s.setting != name) continue;
        v.push_back(metric_of(s, m));
        samples_out << name << ',' << s.subject_id << ',' << num(metric_of(s, m)) << '\n';
      }
      double h = 0.0;
      auto d = gaussian_kde(v, grid, &h);
      for (std::size_t k = 0; k < grid.size(); ++k) out << name << ',' << num(h) << ',' << num(grid[k]) << ',' << num(d[k]) << '\n';
      ymax = std::max(ymax, *std::max_element(d.begin(), d.end()));
      curves.emplace_back(name, std::move(d));
    }
    Svg svg(560, 360);
    const double x0 = 50, y0 = 320, w = 480, h = 280;
    svg.line(x0, y0, x0 + w, y0, "black");
    svg.line(x0, y0, x0, y0 - h, "black");
    for (int k = 0; k <= 5; ++k) svg.text(x0 + w * k / 5.0, y0 + 16, fixed(k / 5.0, 1));
    svg.text(x0 + w / 2, 352, kMetricNames[m]);
    for (std::size_t c = 0; c < curves.size(); ++c) {
      std::vector<std::pair<double, double>> pts;
      for (std::size_t k = 0; k < grid.size(); ++k) {
        pts.emplace_back(x0 + w * grid[k], y0 - h * (ymax > 0 ? curves[c].second[k] / ymax : 0.0));
      }
      const std::string color = kPalette[c % kPalette.size()];
      svg.polyline(pts, color);
      svg.line(x0 + 10, 20 + 16.0 * c, x0 + 30, 20 + 16.0 * c, color, 2);
      svg.text(x0 + 36, 24 + 16.0 * c, curves[c].first, "start");
    }
    const fs::path path = out_dir / (std::string("kde_") + kMetricNames[m] + ".svg");
    svg.save(path);
    written.insert(written.end(), {csv, raw, path});
  }

  // Delta boxplots per non-Basic setting.
  std::vector<SubjectScore> basic;
  for (const auto& s : scores) {
    if (s.setting == "basic") basic.push_back(s);
  }
  if (basic.empty()) return written;
  for (const auto& name : settings) {
    if (name == "basic") continue;
    std::vector<SubjectScore> mine;
    for (const auto& s : scores) {
      if (s.setting == name) mine.push_back(s);
    }
    const ImprovementTable t = improvement_table(mine, basic);
    const fs::path csv = out_dir / ("box_" + name + ".csv");
    auto out = open_out(csv);
    out << "subject_id,metric,group,delta\n";
    for (int m = 0; m < 2; ++m) {
      for (std::size_t i = 0; i < t.subjects.size(); ++i) {
        out << t.subjects[i] << ',' << kMetricNames[m] << ',' << group_name(t.groups[m][i]) << ',' << num(t.deltas[m][i]) << '\n';
      }
    }
    Svg svg(640, 360);
    double lo = 0.0, hi = 0.0;
    for (int m = 0; m < 2; ++m) {
      for (double d : t.deltas[m]) {
        lo = std::min(lo, d);
        hi = std::max(hi, d);
      }
    }
    if (hi - lo < 1e-9) hi = lo + 1e-3;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
    const double y0 = 320, h = 280;
    auto ymap = [&](double v) { return y0 - h * (v - lo) / (hi - lo); };
    svg.line(50, ymap(0.0), 620, ymap(0.0), "#999999");
    svg.text(45, ymap(lo) + 4, fixed(lo, 3), "end", 10);
    svg.text(45, ymap(hi) + 4, fixed(hi, 3), "end", 10);
    for (int m = 0; m < 2; ++m) {
      svg.text(50 + 285 * m + 142, 352, kMetricNames[m]);
      for (int g = 0; g < 3; ++g) {
        std::vector<double> v;
        for (std::size_t i = 0; i < t.deltas[m].size(); ++i) {
          if (g == 2 || static_cast<int>(t.groups[m][i] == Group::high) == g) v.push_back(t.deltas[m][i]);
        }
        const double cx = 50 + 285 * m + 50 + 90 * g;
        svg.text(cx, 336, kStratumNames[g], "middle", 10);
        if (v.empty()) continue;
        const double q1 = quantile(v, 0.25), q2 = median(v), q3 = quantile(v, 0.75);
        const double whisk_lo = std::max(*std::min_element(v.begin(), v.end()), q1 - 1.5 * (q3 - q1));
        const double whisk_hi = std::min(*std::max_element(v.begin(), v.end()), q3 + 1.5 * (q3 - q1));
        svg.line(cx, ymap(whisk_lo), cx, ymap(whisk_hi), "black");
        svg.rect(cx - 25, ymap(q3), 50, std::max(1.0, ymap(q1) - ymap(q3)), kPalette[static_cast<std::size_t>(g)]);
        svg.line(cx - 25, ymap(q2), cx + 25, ymap(q2), "black", 2);
      }
    }
    svg.text(320, 16, name + " minus basic");
    const fs::path path = out_dir / ("box_" + name + ".svg");
    svg.save(path);
    written.insert(written.end(), {csv, path});
  }
  return written;
}

}  // namespace cseg
