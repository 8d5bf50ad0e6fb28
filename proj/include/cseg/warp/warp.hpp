#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include "cseg/core/volume.hpp"

namespace cseg {

/// Per-voxel offsets in voxels, channels ordered (h, w, d). Sampling position of voxel p is
/// p + field(p).
class DisplacementField : public ChannelVolume {
 public:
  DisplacementField() = default;
  explicit DisplacementField(Shape3 shape) : ChannelVolume(3, shape) {}
  explicit DisplacementField(ChannelVolume v);

  void validate() const;
};

enum class Interp { trilinear, nearest };

/// output(p) = v(p + field(p)); sample positions are clamped to the grid.
Volume3D warp(const DisplacementField& field, const Volume3D& v, Interp interp = Interp::trilinear);
LogitMap warp(const DisplacementField& field, const LogitMap& z, Interp interp = Interp::trilinear);
LabelMap warp(const DisplacementField& field, const LabelMap& y);
/// Per-channel trilinear warp of raw channel data.
ChannelVolume warp_channels(const DisplacementField& field, const ChannelVolume& v, Interp interp = Interp::trilinear);

/// 1 where the unclamped sample position lies inside the grid.
VoxelMask warp_valid_mask(const DisplacementField& field);

/// Adjoint of the trilinear warp w.r.t. the warped values: grad_v += W^T grad_out.
void warp_adjoint_values(const DisplacementField& field, std::span<const float> grad_out, std::span<float> grad_v);
/// d/d(field) of sum_p grad_out(p) * warp(field, v)(p), trilinear, accumulated into grad_field.
void warp_adjoint_field(const DisplacementField& field, std::span<const float> v, std::span<const double> grad_out,
                        std::span<double> grad_field);

using Window3 = std::array<int, 3>;
constexpr double kNccEpsilon = 1e-5;

/// Mean over voxels of signed local normalized cross-correlation in a centered window that
/// is clipped at the borders; eps guards the variance product.
double local_ncc(const Volume3D& a, const Volume3D& b, Window3 window = {5, 5, 5}, double eps = kNccEpsilon);
/// Value plus gradients w.r.t. both inputs (either pointer may be null).
double local_ncc_grad(const Volume3D& a, const Volume3D& b, std::vector<double>* grad_a, std::vector<double>* grad_b,
                      Window3 window = {5, 5, 5}, double eps = kNccEpsilon);

/// Sum over axes of the mean over voxels and components of squared forward differences; a unit
/// ramp along one axis gives 1/3.
double grad_smoothness(const DisplacementField& field);
double grad_smoothness_grad(const DisplacementField& field, std::span<double> grad);

struct RegistrationLoss {
  double total = 0.0;
  double ncc = 0.0;
  double smoothness = 0.0;
};

/// -local_ncc(fixed, warp(field, moving)) + lambda_reg * grad_smoothness(field).
RegistrationLoss registration_loss(const Volume3D& fixed, const Volume3D& moving, const DisplacementField& field,
                                   double lambda_reg, Window3 window = {5, 5, 5});
/// Same, also accumulating d(total)/d(field) into grad_field (size 3*voxels).
RegistrationLoss registration_loss_grad(const Volume3D& fixed, const Volume3D& moving, const DisplacementField& field,
                                        double lambda_reg, std::span<double> grad_field, Window3 window = {5, 5, 5});

namespace io {
void save_field(const std::filesystem::path& raw_path, const DisplacementField& field);
DisplacementField load_field(const std::filesystem::path& raw_path);
}  // namespace io

}  // namespace cseg
