#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cseg/core/volume.hpp"
#include "cseg/eval/metrics.hpp"
#include "cseg/models/models.hpp"

namespace cseg {

struct SeriesPrediction {
  std::vector<LabelMap> labels;
  /// Filled only when logits were requested.
  std::vector<LogitMap> logits;
};

/// Inference on every frame in order.
SeriesPrediction predict_series(const SegmentationNetwork& net, const TimeSeries& series, bool keep_logits = false);

struct SubjectScore {
  std::string subject_id;
  std::string setting;
  std::string level = "all";
  double dice_gt = 0.0;
  double temporal_dice = 0.0;
  std::optional<Group> group_gt;
  std::optional<Group> group_td;
};

/// dice_gt averages over the series' labeled frames, or over every frame of `dense_truth`
/// when given.
SubjectScore score_subject(const TimeSeries& series, const SeriesPrediction& prediction,
                           const std::vector<LabelMap>* dense_truth = nullptr);

/// Assigns both groups from the Basic scores of the same subjects.
std::vector<SubjectScore> group_low_high(std::vector<SubjectScore> scores, const std::vector<SubjectScore>& basic_scores,
                                         double dice_threshold = kDiceThreshold,
                                         double temporal_threshold = kTemporalDiceThreshold);

enum class Metric { dice_gt, temporal_dice };
enum class Stratum { low, high, all };

struct DeltaSummary {
  std::size_t n = 0;
  double median = 0.0;
  double iqr = 0.0;
};

struct ImprovementTable {
  std::string setting;
  /// [metric][stratum]; strata with no subjects have n = 0.
  std::array<std::array<DeltaSummary, 3>, 2> cells{};
  /// Per-subject deltas in the order of the setting scores, with the Basic group.
  std::vector<std::string> subjects;
  std::array<std::vector<double>, 2> deltas;
  std::array<std::vector<Group>, 2> groups;
};

ImprovementTable improvement_table(const std::vector<SubjectScore>& setting_scores,
                                   const std::vector<SubjectScore>& basic_scores,
                                   double dice_threshold = kDiceThreshold,
                                   double temporal_threshold = kTemporalDiceThreshold);
void write_table1_csv(const std::filesystem::path& path, const std::vector<ImprovementTable>& tables);
std::string format_table1(const std::vector<ImprovementTable>& tables);

struct SummaryCell {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
};

/// Rows are methods, columns data-availability levels; absent or empty cells stay missing.
struct SummaryTable {
  std::vector<std::string> methods;
  std::vector<std::string> levels;
  std::map<std::pair<std::string, std::string>, SummaryCell> cells;

  std::optional<SummaryCell> cell(const std::string& method, const std::string& level) const;
};

SummaryTable summarize(const std::map<std::string, std::map<std::string, std::vector<double>>>& scores,
                       std::vector<std::string> levels = {"all", "60", "40", "20", "10", "5"});
void write_table2_csv(const std::filesystem::path& path, const SummaryTable& table);
std::string format_table2(const SummaryTable& table);

void write_scores_csv(const std::filesystem::path& path, const std::vector<SubjectScore>& scores);
std::vector<SubjectScore> read_scores_csv(const std::filesystem::path& path);

/// KDE curves per setting and grouped boxplots of deltas against Basic, as SVG plus CSV.
/// Returns the files written.
std::vector<std::filesystem::path> emit_plots(const std::vector<SubjectScore>& scores, const std::filesystem::path& out_dir);

/// Gaussian KDE with Silverman's bandwidth evaluated on `grid`.
std::vector<double> gaussian_kde(const std::vector<double>& samples, const std::vector<double>& grid,
                                 double* bandwidth = nullptr);

}  // namespace cseg
