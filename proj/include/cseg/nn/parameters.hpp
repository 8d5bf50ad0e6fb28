#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace cseg::nn {

struct ParamSlot {
  std::string name;
  std::vector<int> dims;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Flat double-precision master copy of a network's parameters plus a float mirror used
/// by the forward/backward kernels. Call refresh() after mutating values().
class ParameterSet {
 public:
  std::size_t add(std::string name, std::vector<int> dims);

  std::size_t size() const { return values_.size(); }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  const ParamSlot& slot(std::size_t index) const { return slots_[index]; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::span<double> values(std::size_t slot);
  std::span<const float> mirror(std::size_t slot) const;

  void refresh();
  bool same_layout(const ParameterSet& other) const;
  bool all_finite() const;

 private:
  std::vector<ParamSlot> slots_;
  std::vector<double> values_;
  std::vector<float> mirror_;
};

}  // namespace cseg::nn
