#include "cseg/eval/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "cseg/core/errors.hpp"

namespace cseg {

double dice_coefficient(const LabelMap& a, const LabelMap& b) {
  if (a.shape() != b.shape()) throw ArgumentError("dice_coefficient: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::size_t inter = 0;
  std::size_t na = 0;
  std::size_t nb = 0;
  const auto da = a.data();
  const auto db = b.data();
  for (std::size_t p = 0; p < da.size(); ++p) {
    const bool x = da[p] == 1;
    const bool y = db[p] == 1;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double temporal_dice(const std::vector<LabelMap>& predictions) {
  if (predictions.size() < 2) throw ArgumentError("temporal_dice: need at least 2 predictions");
  double sum = 0.0;
  for (std::size_t t = 0; t + 1 < predictions.size(); ++t) sum += dice_coefficient(predictions[t], predictions[t + 1]);
  return sum / static_cast<double>(predictions.size() - 1);
}

std::string group_name(Group g) { return g == Group::high ? "HIGH" : "LOW"; }

Group classify(double score, double threshold) { return score >= threshold ? Group::high : Group::low; }

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("quantile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ArgumentError("quantile: q must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

double median(const std::vector<double>& values) { return quantile(values, 0.5); }

double iqr(const std::vector<double>& values) { return quantile(values, 0.75) - quantile(values, 0.25); }

double mean(const std::vector<double>& values) {
  if (values.empty()) throw ArgumentError("mean: empty sample");
  double s = 0.0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

double population_std(const std::vector<double>& values) {
  const double m = mean(values);
  double s = 0.0;
  for (double v : values) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(values.size()));
}

}  // namespace cseg
