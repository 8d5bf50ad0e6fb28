#include "cseg/nn/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace cseg::nn {

std::size_t ParameterSet::add(std::string name, std::vector<int> dims) {
  const std::size_t n = std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                                        [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
  ParamSlot slot{std::move(name), std::move(dims), values_.size(), n};
  values_.resize(values_.size() + n, 0.0);
  mirror_.resize(values_.size(), 0.0f);
  slots_.push_back(std::move(slot));
  return slots_.size() - 1;
}

std::span<double> ParameterSet::values(std::size_t slot) {
  const auto& s = slots_[slot];
  return std::span<double>(values_).subspan(s.offset, s.size);
}

std::span<const float> ParameterSet::mirror(std::size_t slot) const {
  const auto& s = slots_[slot];
  return std::span<const float>(mirror_).subspan(s.offset, s.size);
}

void ParameterSet::refresh() {
  mirror_.resize(values_.size());
  std::transform(values_.begin(), values_.end(), mirror_.begin(), [](double v) { return static_cast<float>(v); });
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (slots_.size() != other.slots_.size()) return false;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].dims != other.slots_[i].dims || slots_[i].offset != other.slots_[i].offset) return false;
  }
  return true;
}

bool ParameterSet::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cseg::nn
