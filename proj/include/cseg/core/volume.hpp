#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace cseg {

/// Grid extent. Axis 0 (h) is slowest-varying, axis 2 (d) is contiguous.
struct Shape3 {
  int h = 0;
  int w = 0;
  int d = 0;

  constexpr std::size_t voxels() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(d);
  }
  constexpr std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * w + j) * d + k;
  }
  constexpr int extent(int axis) const { return axis == 0 ? h : (axis == 1 ? w : d); }
  constexpr bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < h && j < w && k < d;
  }
  std::string str() const;

  friend constexpr bool operator==(const Shape3&, const Shape3&) = default;
};

using Spacing = std::array<double, 3>;

/// Per-voxel validity flags (1 = valid) used to mask consistency losses.
using VoxelMask = std::vector<std::uint8_t>;

/// One scalar 3D frame.
class Volume3D {
 public:
  Volume3D() = default;
  explicit Volume3D(Shape3 shape, Spacing spacing = {1.0, 1.0, 1.0});
  Volume3D(Shape3 shape, std::vector<float> data, Spacing spacing = {1.0, 1.0, 1.0});

  const Shape3& shape() const { return shape_; }
  const Spacing& spacing() const { return spacing_; }
  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  const std::vector<float>& values() const { return data_; }

  float operator()(int i, int j, int k) const { return data_[shape_.index(i, j, k)]; }
  float& operator()(int i, int j, int k) { return data_[shape_.index(i, j, k)]; }

  /// Throws ValidationError when dims < 1, spacing <= 0 or any intensity is non-finite.
  void validate() const;

  /// Rescales intensities to [0, 1]; constant volumes become all-zero.
  void normalize_min_max();

 private:
  Shape3 shape_;
  Spacing spacing_{1.0, 1.0, 1.0};
  std::vector<float> data_;
};

/// Integer class map with values in [0, num_classes).
class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(Shape3 shape, int num_classes = 2);
  LabelMap(Shape3 shape, std::vector<std::uint8_t> data, int num_classes = 2);

  const Shape3& shape() const { return shape_; }
  int num_classes() const { return num_classes_; }
  std::span<const std::uint8_t> data() const { return data_; }
  std::span<std::uint8_t> data() { return data_; }

  std::uint8_t operator()(int i, int j, int k) const { return data_[shape_.index(i, j, k)]; }
  std::uint8_t& operator()(int i, int j, int k) { return data_[shape_.index(i, j, k)]; }

  std::size_t count(std::uint8_t label = 1) const;
  void validate() const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  Shape3 shape_;
  int num_classes_ = 2;
  std::vector<std::uint8_t> data_;
};

/// Multi-channel real grid, layout C x H x W x D.
class ChannelVolume {
 public:
  ChannelVolume() = default;
  ChannelVolume(int channels, Shape3 shape);
  ChannelVolume(int channels, Shape3 shape, std::vector<float> data);

  int channels() const { return channels_; }
  const Shape3& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  std::span<const float> channel(int c) const {
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * shape_.voxels(), shape_.voxels());
  }
  std::span<float> channel(int c) {
    return std::span<float>(data_).subspan(static_cast<std::size_t>(c) * shape_.voxels(), shape_.voxels());
  }
  float& at(int c, int i, int j, int k) { return data_[c * shape_.voxels() + shape_.index(i, j, k)]; }
  float at(int c, int i, int j, int k) const { return data_[c * shape_.voxels() + shape_.index(i, j, k)]; }

  bool all_finite() const;

  friend bool operator==(const ChannelVolume&, const ChannelVolume&) = default;

 protected:
  int channels_ = 0;
  Shape3 shape_;
  std::vector<float> data_;
};

/// Pre-softmax class scores, C x H x W x D.
class LogitMap : public ChannelVolume {
 public:
  using ChannelVolume::ChannelVolume;
  LogitMap() = default;
  explicit LogitMap(ChannelVolume v) : ChannelVolume(std::move(v)) {}

  int num_classes() const { return channels_; }
  void validate() const;
};

/// Ordered frames of one subject with sparse labels.
struct TimeSeries {
  std::string subject_id;
  std::vector<Volume3D> frames;
  std::map<int, LabelMap> labels;

  std::size_t num_frames() const { return frames.size(); }
  const Shape3& shape() const { return frames.front().shape(); }
  bool is_labeled(int t) const { return labels.count(t) != 0; }
  std::vector<int> labeled_indices() const;
  std::vector<int> unlabeled_indices() const;

  /// Throws ValidationError on shape/spacing disagreement, out-of-range label indices or N < 2.
  void validate() const;
};

/// Per-voxel argmax over classes; ties resolve to the lower class index.
LabelMap logits_to_labels(const LogitMap& logits);

}  // namespace cseg
