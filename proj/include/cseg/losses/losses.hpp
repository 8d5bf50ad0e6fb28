#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cseg/core/volume.hpp"
#include "cseg/transforms/transforms.hpp"
#include "cseg/warp/warp.hpp"

namespace cseg {

constexpr double kDiceSmoothing = 1.0;

// Losses are evaluated in double precision. The *_grad variants return the value and add
// scale * d(loss)/d(logits) into the supplied buffers (C x H x W x D layout); an empty span
// skips that gradient.

/// 1 - soft Dice of class 1 on softmax probabilities, smoothed by eps.
double dice_loss(const LogitMap& logits, const LabelMap& y, double eps = kDiceSmoothing);
double dice_loss_grad(const LogitMap& logits, const LabelMap& y, std::span<double> grad, double scale = 1.0,
                      double eps = kDiceSmoothing);

/// Mean per-voxel negative log-probability of the true class.
double cross_entropy_loss(const LogitMap& logits, const LabelMap& y);
double cross_entropy_loss_grad(const LogitMap& logits, const LabelMap& y, std::span<double> grad, double scale = 1.0);

/// dice_loss + cross_entropy_loss.
double supervised_loss(const LogitMap& logits, const LabelMap& y);
double supervised_loss_grad(const LogitMap& logits, const LabelMap& y, std::span<double> grad, double scale = 1.0);

/// Mean over masked voxels and channels of squared differences. Empty mask is an error.
double l2_consistency(const ChannelVolume& za, const ChannelVolume& zb, const VoxelMask& mask);
double l2_consistency_grad(const ChannelVolume& za, const ChannelVolume& zb, const VoxelMask& mask,
                           std::span<double> grad_a, std::span<double> grad_b, double scale = 1.0);

using SegmentationFn = std::function<LogitMap(const Volume3D&)>;
using RegistrationFn = std::function<DisplacementField(const Volume3D& fixed, const Volume3D& moving)>;

/// l2 between the geometrically transformed reference prediction of x and the student
/// prediction of the transformed x, masked by the transform's validity.
double spatial_consistency_loss(const SegmentationFn& student, const SegmentationFn& reference, const Volume3D& x,
                                const PairedTransform& t);

struct FrameRef {
  std::string subject_id;
  int t = 0;
  const Volume3D* image = nullptr;
};

/// l2 between student(x) and reference(x') warped onto x by registration(x, x'), masked by the
/// warp's in-grid samples.
double temporal_consistency_loss(const SegmentationFn& student, const SegmentationFn& reference,
                                 const RegistrationFn& registration, const FrameRef& x, const FrameRef& x_partner);

/// lambda0 * exp(-5 (1 - S/L)^2) for S <= L, lambda0 afterwards.
double lambda_schedule(double step, double ramp_length, double lambda0);

/// Logits of one labeled sample. Spatial fields are optional (null when the term is inactive);
/// ref_aug is the already-transformed reference prediction.
struct LabeledTerm {
  const LogitMap* student = nullptr;
  const LabelMap* label = nullptr;
  const LogitMap* student_aug = nullptr;
  const LogitMap* ref_aug = nullptr;
  const VoxelMask* spatial_mask = nullptr;
};

/// Logits of one unlabeled sample; ref_warped is the partner frame's reference prediction
/// already warped onto this frame.
struct UnlabeledTerm {
  const LogitMap* student_aug = nullptr;
  const LogitMap* ref_aug = nullptr;
  const VoxelMask* spatial_mask = nullptr;
  const LogitMap* student = nullptr;
  const LogitMap* ref_warped = nullptr;
  const VoxelMask* temporal_mask = nullptr;
};

struct LossBreakdown {
  double sup = 0.0;
  double spatial = 0.0;
  double temporal = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double total = 0.0;
};

/// Gradients of the total w.r.t. every logits input, index-aligned with the terms; vectors
/// are empty where the corresponding input was null.
struct CombinedGrads {
  struct Labeled {
    std::vector<double> student, student_aug, ref_aug;
  };
  struct Unlabeled {
    std::vector<double> student_aug, ref_aug, student, ref_warped;
  };
  std::vector<Labeled> labeled;
  std::vector<Unlabeled> unlabeled;
};

/// sup (mean over labeled samples) + lambda1 * spatial (mean over samples with a spatial term)
/// + lambda2 * temporal (mean over samples with a temporal term). A term with no
/// contributing samples is omitted.
LossBreakdown combined_loss(const std::vector<LabeledTerm>& labeled, const std::vector<UnlabeledTerm>& unlabeled,
                            double lambda1, double lambda2, CombinedGrads* grads = nullptr);

}  // namespace cseg
