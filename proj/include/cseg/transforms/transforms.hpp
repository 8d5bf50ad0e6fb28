#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "cseg/core/random.hpp"
#include "cseg/core/volume.hpp"

namespace cseg {

/// Parameters of the augmentation distribution. Rotation planes are ordered (0,1), (0,2), (1,2).
struct TransformDistribution {
  double p_flip = 0.5;
  double p_rotate = 0.5;
  double p_translate = 0.1;
  double max_translation = 5.0;
  double gamma_min = 0.5;
  double gamma_max = 2.0;
  double noise_sigma_max = 0.1;
  /// Replaces quarter turns with U(-max_angle, max_angle) degree rotations resampled trilinearly.
  bool continuous_rotation = false;
  double max_angle_degrees = 15.0;

  void validate() const;
};

struct GeometricTransform {
  std::array<bool, 3> flip{false, false, false};
  /// Quarter turns per plane; odd counts only on square planes.
  std::array<int, 3> quarter_turns{0, 0, 0};
  /// Used instead of quarter_turns when continuous is set.
  std::array<double, 3> angles_degrees{0.0, 0.0, 0.0};
  bool continuous = false;
  std::array<int, 3> translation{0, 0, 0};

  bool is_identity() const;
};

struct IntensityTransform {
  double gamma = 1.0;
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

/// Applied in the order flip, rotate, translate, gamma, noise.
struct PairedTransform {
  GeometricTransform geometric;
  IntensityTransform intensity;
  bool rotation_active = false;
  bool translation_active = false;
};

PairedTransform sample_transform(Rng& rng, const TransformDistribution& dist, const Shape3& shape);

/// Resampling table for the geometric part: output voxel p reads sum_k weight[p*taps+k] *
/// input[index[p*taps+k]]. Quarter turns and integer shifts use one tap of weight 1;
/// continuous rotation uses eight trilinear taps.
struct GeometricPlan {
  Shape3 shape;
  int taps = 1;
  std::vector<std::int32_t> index;
  std::vector<float> weight;
  VoxelMask valid;

  std::size_t valid_count() const;
};

GeometricPlan make_plan(const GeometricTransform& t, const Shape3& shape);

/// Moves values through the plan; invalid voxels become 0.
void apply_plan(const GeometricPlan& plan, std::span<const float> in, std::span<float> out);
/// Adjoint of apply_plan: grad_in += P^T grad_out.
void apply_plan_adjoint(const GeometricPlan& plan, std::span<const float> grad_out, std::span<float> grad_in);

struct TransformedImage {
  Volume3D image;
  VoxelMask valid;
};

TransformedImage apply_to_image(const PairedTransform& t, const Volume3D& x);
void apply_intensity(const IntensityTransform& t, std::span<float> values);

struct TransformedLogits {
  LogitMap logits;
  VoxelMask valid;
};

TransformedLogits apply_geometric_to_logits(const PairedTransform& t, const LogitMap& z);
/// Same as above with a precomputed plan, applied to every channel.
ChannelVolume apply_plan_channels(const GeometricPlan& plan, const ChannelVolume& z);
ChannelVolume apply_plan_channels_adjoint(const GeometricPlan& plan, const ChannelVolume& grad);

}  // namespace cseg
