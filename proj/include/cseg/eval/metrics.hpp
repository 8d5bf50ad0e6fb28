#pragma once

#include <string>
#include <vector>

#include "cseg/core/volume.hpp"

namespace cseg {

/// 2|A n B| / (|A| + |B|) on the foreground (label 1); two empty masks score 1.
double dice_coefficient(const LabelMap& a, const LabelMap& b);

/// Mean Dice over consecutive pairs (t, t+1).
double temporal_dice(const std::vector<LabelMap>& predictions);

enum class Group { low, high };
std::string group_name(Group g);

/// HIGH when score >= threshold.
Group classify(double score, double threshold);

constexpr double kDiceThreshold = 0.8;
constexpr double kTemporalDiceThreshold = 0.7;

/// Quantile with linear interpolation between order statistics (position q * (n - 1)).
double quantile(std::vector<double> values, double q);
double median(const std::vector<double>& values);
/// Q3 - Q1 under the same convention.
double iqr(const std::vector<double>& values);

double mean(const std::vector<double>& values);
/// Population standard deviation.
double population_std(const std::vector<double>& values);

}  // namespace cseg
