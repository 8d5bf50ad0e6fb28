#include "cseg/core/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cseg/core/errors.hpp"

namespace cseg {

std::string Shape3::str() const {
  std::ostringstream os;
  os << h << "x" << w << "x" << d;
  return os.str();
}

Volume3D::Volume3D(Shape3 shape, Spacing spacing)
    : shape_(shape), spacing_(spacing), data_(shape.voxels(), 0.0f) {}

Volume3D::Volume3D(Shape3 shape, std::vector<float> data, Spacing spacing)
    : shape_(shape), spacing_(spacing), data_(std::move(data)) {
  if (data_.size() != shape_.voxels()) {
    throw ValidationError("volume data size " + std::to_string(data_.size()) + " does not match shape " +
                          shape_.str());
  }
}

void Volume3D::validate() const {
  if (shape_.h < 1 || shape_.w < 1 || shape_.d < 1) throw ValidationError("volume dims must be >= 1: " + shape_.str());
  if (data_.size() != shape_.voxels()) throw ValidationError("volume data size does not match shape");
  for (double s : spacing_) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("volume spacing must be positive");
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw ValidationError("volume has non-finite intensity");
  }
}

void Volume3D::normalize_min_max() {
  if (data_.empty()) return;
  const auto [lo_it, hi_it] = std::minmax_element(data_.begin(), data_.end());
  const float lo = *lo_it;
  const float range = *hi_it - lo;
  if (!(range > 0.0f)) {
    std::fill(data_.begin(), data_.end(), 0.0f);
    return;
  }
  for (float& v : data_) v = (v - lo) / range;
}

LabelMap::LabelMap(Shape3 shape, int num_classes)
    : shape_(shape), num_classes_(num_classes), data_(shape.voxels(), 0) {}

LabelMap::LabelMap(Shape3 shape, std::vector<std::uint8_t> data, int num_classes)
    : shape_(shape), num_classes_(num_classes), data_(std::move(data)) {
  if (data_.size() != shape_.voxels()) throw ValidationError("label data size does not match shape " + shape_.str());
}

std::size_t LabelMap::count(std::uint8_t label) const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), label));
}

void LabelMap::validate() const {
  if (num_classes_ < 2 || num_classes_ > 255) throw ValidationError("label map class count out of range");
  if (data_.size() != shape_.voxels()) throw ValidationError("label data size does not match shape");
  for (auto v : data_) {
    if (v >= num_classes_) throw ValidationError("label value " + std::to_string(v) + " >= class count");
  }
}

ChannelVolume::ChannelVolume(int channels, Shape3 shape)
    : channels_(channels), shape_(shape), data_(static_cast<std::size_t>(channels) * shape.voxels(), 0.0f) {}

ChannelVolume::ChannelVolume(int channels, Shape3 shape, std::vector<float> data)
    : channels_(channels), shape_(shape), data_(std::move(data)) {
  if (data_.size() != static_cast<std::size_t>(channels) * shape.voxels()) {
    throw ValidationError("channel volume size does not match " + std::to_string(channels) + "x" + shape.str());
  }
}

bool ChannelVolume::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void LogitMap::validate() const {
  if (channels_ < 2) throw ValidationError("logit map needs at least two classes");
  if (!all_finite()) throw ValidationError("logit map has non-finite values");
}

std::vector<int> TimeSeries::labeled_indices() const {
  std::vector<int> out;
  for (const auto& [t, _] : labels) out.push_back(t);
  return out;
}

std::vector<int> TimeSeries::unlabeled_indices() const {
  std::vector<int> out;
  for (int t = 0; t < static_cast<int>(frames.size()); ++t) {
    if (!is_labeled(t)) out.push_back(t);
  }
  return out;
}

void TimeSeries::validate() const {
  if (frames.size() < 2) throw ValidationError("series '" + subject_id + "' needs at least two frames");
  const Shape3 shape = frames.front().shape();
  const Spacing spacing = frames.front().spacing();
  for (std::size_t t = 0; t < frames.size(); ++t) {
    frames[t].validate();
    if (frames[t].shape() != shape) {
      throw ValidationError("series '" + subject_id + "' frame " + std::to_string(t) + " has shape " +
                            frames[t].shape().str() + ", expected " + shape.str());
    }
    if (frames[t].spacing() != spacing) {
      throw ValidationError("series '" + subject_id + "' frame " + std::to_string(t) + " has different spacing");
    }
  }
  for (const auto& [t, label] : labels) {
    if (t < 0 || t >= static_cast<int>(frames.size())) {
      throw ValidationError("series '" + subject_id + "' labels frame " + std::to_string(t) + " out of range");
    }
    if (label.shape() != shape) throw ValidationError("series '" + subject_id + "' label shape mismatch");
    label.validate();
  }
}

LabelMap logits_to_labels(const LogitMap& logits) {
  const Shape3 shape = logits.shape();
  const std::size_t n = shape.voxels();
  const int c = logits.channels();
  std::vector<std::uint8_t> out(n, 0);
  const float* z = logits.data().data();
  for (std::size_t v = 0; v < n; ++v) {
    int best = 0;
    float best_val = z[v];
    for (int k = 1; k < c; ++k) {
      const float val = z[static_cast<std::size_t>(k) * n + v];
      if (val > best_val) {
        best_val = val;
        best = k;
      }
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return LabelMap(shape, std::move(out), c);
}

}  // namespace cseg
