#include "cseg/losses/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cseg/core/errors.hpp"

namespace cseg {

namespace {

void check_pair(const LogitMap& logits, const LabelMap& y, const char* what) {
  if (logits.shape() != y.shape()) {
    throw ArgumentError(std::string(what) + ": logits shape " + logits.shape().str() + " vs label shape " + y.shape().str());
  }
  if (logits.channels() < 2) throw ArgumentError(std::string(what) + ": need at least 2 classes");
}

void check_grad(std::span<double> grad, std::size_t n, const char* what) {
  if (!grad.empty() && grad.size() != n) throw ArgumentError(std::string(what) + ": gradient buffer size mismatch");
}

// Softmax of voxel p into prob (size C).
void softmax_at(const LogitMap& z, std::size_t p, std::vector<double>& prob) {
  const int c = z.channels();
  const std::size_t nv = z.shape().voxels();
  const float* d = z.data().data();
  double mx = d[p];
  for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(d[k * nv + p]));
  double sum = 0.0;
  for (int k = 0; k < c; ++k) {
    prob[static_cast<std::size_t>(k)] = std::exp(d[k * nv + p] - mx);
    sum += prob[static_cast<std::size_t>(k)];
  }
  for (int k = 0; k < c; ++k) prob[static_cast<std::size_t>(k)] /= sum;
}

}  // namespace

double dice_loss(const LogitMap& logits, const LabelMap& y, double eps) { return dice_loss_grad(logits, y, {}, 1.0, eps); }

double dice_loss_grad(const LogitMap& logits, const LabelMap& y, std::span<double> grad, double scale, double eps) {
  check_pair(logits, y, "dice_loss");
  check_grad(grad, logits.size(), "dice_loss");
  const int c = logits.channels();
  const std::size_t nv = y.shape().voxels();
  std::vector<double> fg(nv);
  std::vector<double> prob(static_cast<std::size_t>(c));
  double inter = 0.0;
  double sum_p = 0.0;
  double sum_y = 0.0;
  for (std::size_t p = 0; p < nv; ++p) {
    softmax_at(logits, p, prob);
    fg[p] = prob[1];
    const double t = y.data()[p] == 1 ? 1.0 : 0.0;
    inter += prob[1] * t;
    sum_p += prob[1];
    sum_y += t;
  }
  const double num = 2.0 * inter + eps;
  const double den = sum_p + sum_y + eps;
  if (!grad.empty()) {
    for (std::size_t p = 0; p < nv; ++p) {
      const double t = y.data()[p] == 1 ? 1.0 : 0.0;
      const double d_fg = -(2.0 * t * den - num) / (den * den);
      softmax_at(logits, p, prob);
      for (int k = 0; k < c; ++k) {
        const double dp1_dzk = prob[1] * ((k == 1 ? 1.0 : 0.0) - prob[static_cast<std::size_t>(k)]);
        grad[k * nv + p] += scale * d_fg * dp1_dzk;
      }
    }
  }
  return 1.0 - num / den;
}

double cross_entropy_loss(const LogitMap& logits, const LabelMap& y) { return cross_entropy_loss_grad(logits, y, {}); }

double cross_entropy_loss_grad(const LogitMap& logits, const LabelMap& y, std::span<double> grad, double scale) {
  check_pair(logits, y, "cross_entropy_loss");
  check_grad(grad, logits.size(), "cross_entropy_loss");
  const int c = logits.channels();
  const std::size_t nv = y.shape().voxels();
  const float* d = logits.data().data();
  const double inv_n = 1.0 / static_cast<double>(nv);
  double total = 0.0;
  std::vector<double> prob(static_cast<std::size_t>(c));
  for (std::size_t p = 0; p < nv; ++p) {
    const int label = y.data()[p];
    if (label >= c) throw ArgumentError("cross_entropy_loss: label exceeds class count");
    double mx = d[p];
    for (int k = 1; k < c; ++k) mx = std::max(mx, static_cast<double>(d[k * nv + p]));
    double sum = 0.0;
    for (int k = 0; k < c; ++k) sum += std::exp(d[k * nv + p] - mx);
    const double lse = mx + std::log(sum);
    total += lse - d[static_cast<std::size_t>(label) * nv + p];
    if (!grad.empty()) {
      for (int k = 0; k < c; ++k) {
        const double pk = std::exp(d[k * nv + p] - lse);
        grad[k * nv + p] += scale * inv_n * (pk - (k == label ? 1.0 : 0.0));
      }
    }
  }
  return total * inv_n;
}

double supervised_loss(const LogitMap& logits, const LabelMap& y) { return dice_loss(logits, y) + cross_entropy_loss(logits, y); }

double supervised_loss_grad(const LogitMap& logits, const LabelMap& y, std::span<double> grad, double scale) {
  const double dice = dice_loss_grad(logits, y, grad, scale);
  return dice + cross_entropy_loss_grad(logits, y, grad, scale);
}

double l2_consistency(const ChannelVolume& za, const ChannelVolume& zb, const VoxelMask& mask) {
  return l2_consistency_grad(za, zb, mask, {}, {});
}

double l2_consistency_grad(const ChannelVolume& za, const ChannelVolume& zb, const VoxelMask& mask,
                           std::span<double> grad_a, std::span<double> grad_b, double scale) {
  if (za.shape() != zb.shape() || za.channels() != zb.channels()) throw ArgumentError("l2_consistency: shape mismatch");
  const std::size_t nv = za.shape().voxels();
  if (mask.size() != nv) throw ArgumentError("l2_consistency: mask size mismatch");
  check_grad(grad_a, za.size(), "l2_consistency");
  check_grad(grad_b, zb.size(), "l2_consistency");
  std::size_t valid = 0;
  for (auto m : mask) valid += m ? 1 : 0;
  if (valid == 0) throw DegenerateInputError("l2_consistency: empty validity mask");
  const double inv = 1.0 / (static_cast<double>(valid) * za.channels());
  double total = 0.0;
  for (int c = 0; c < za.channels(); ++c) {
    const float* a = za.channel(c).data();
    const float* b = zb.channel(c).data();
    const std::size_t off = static_cast<std::size_t>(c) * nv;
    for (std::size_t p = 0; p < nv; ++p) {
      if (!mask[p]) continue;
      const double d = static_cast<double>(a[p]) - b[p];
      total += d * d;
      if (!grad_a.empty()) grad_a[off + p] += scale * 2.0 * d * inv;
      if (!grad_b.empty()) grad_b[off + p] -= scale * 2.0 * d * inv;
    }
  }
  return total * inv;
}

double spatial_consistency_loss(const SegmentationFn& student, const SegmentationFn& reference, const Volume3D& x,
                                const PairedTransform& t) {
  const TransformedImage tx = apply_to_image(t, x);
  const TransformedLogits ref = apply_geometric_to_logits(t, reference(x));
  const LogitMap z_student = student(tx.image);
  VoxelMask mask(tx.valid.size());
  for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = tx.valid[p] && ref.valid[p];
  return l2_consistency(ref.logits, z_student, mask);
}

double temporal_consistency_loss(const SegmentationFn& student, const SegmentationFn& reference,
                                 const RegistrationFn& registration, const FrameRef& x, const FrameRef& x_partner) {
  if (x.subject_id != x_partner.subject_id) {
    throw ArgumentError("temporal_consistency_loss: frames from different subjects (" + x.subject_id + ", " +
                        x_partner.subject_id + ")");
  }
  if (!x.image || !x_partner.image) throw ArgumentError("temporal_consistency_loss: missing frame");
  const DisplacementField phi = registration(*x.image, *x_partner.image);
  const LogitMap warped = warp(phi, reference(*x_partner.image));
  return l2_consistency(student(*x.image), warped, warp_valid_mask(phi));
}

double lambda_schedule(double step, double ramp_length, double lambda0) {
  if (!(ramp_length > 0.0)) throw ArgumentError("lambda_schedule: ramp length must be positive");
  if (step < 0.0) throw ArgumentError("lambda_schedule: step must be >= 0");
  if (step > ramp_length) return lambda0;
  const double r = 1.0 - step / ramp_length;
  return lambda0 * std::exp(-5.0 * r * r);
}

LossBreakdown combined_loss(const std::vector<LabeledTerm>& labeled, const std::vector<UnlabeledTerm>& unlabeled,
                            double lambda1, double lambda2, CombinedGrads* grads) {
  auto alloc = [&](const LogitMap* z) { return grads && z ? std::vector<double>(z->size(), 0.0) : std::vector<double>(); };
  if (grads) {
    grads->labeled.assign(labeled.size(), {});
    grads->unlabeled.assign(unlabeled.size(), {});
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      grads->labeled[i].student = alloc(labeled[i].student);
      grads->labeled[i].student_aug = alloc(labeled[i].student_aug);
      grads->labeled[i].ref_aug = alloc(labeled[i].ref_aug);
    }
    for (std::size_t i = 0; i < unlabeled.size(); ++i) {
      grads->unlabeled[i].student_aug = alloc(unlabeled[i].student_aug);
      grads->unlabeled[i].ref_aug = alloc(unlabeled[i].ref_aug);
      grads->unlabeled[i].student = alloc(unlabeled[i].student);
      grads->unlabeled[i].ref_warped = alloc(unlabeled[i].ref_warped);
    }
  }

  std::size_t n_sup = 0;
  std::size_t n_spatial = 0;
  std::size_t n_temporal = 0;
  for (const auto& t : labeled) {
    if (t.student && t.label) ++n_sup;
    if (t.student_aug && t.ref_aug) ++n_spatial;
  }
  for (const auto& t : unlabeled) {
    if (t.student_aug && t.ref_aug) ++n_spatial;
    if (t.student && t.ref_warped) ++n_temporal;
  }

  LossBreakdown r;
  r.lambda1 = lambda1;
  r.lambda2 = lambda2;
  const double w_sup = n_sup ? 1.0 / static_cast<double>(n_sup) : 0.0;
  const double w_spatial = n_spatial ? lambda1 / static_cast<double>(n_spatial) : 0.0;
  const double w_temporal = n_temporal ? lambda2 / static_cast<double>(n_temporal) : 0.0;
  auto span_of = [](std::vector<double>& v) { return std::span<double>(v); };

  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const LabeledTerm& t = labeled[i];
    CombinedGrads::Labeled* g = grads ? &grads->labeled[i] : nullptr;
    if (t.student && t.label) {
      r.sup += supervised_loss_grad(*t.student, *t.label, g ? span_of(g->student) : std::span<double>(), w_sup);
    }
    if (t.student_aug && t.ref_aug) {
      if (!t.spatial_mask) throw ArgumentError("combined_loss: spatial term without mask");
      r.spatial += l2_consistency_grad(*t.ref_aug, *t.student_aug, *t.spatial_mask,
                                       g ? span_of(g->ref_aug) : std::span<double>(),
                                       g ? span_of(g->student_aug) : std::span<double>(), w_spatial);
    }
  }
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    const UnlabeledTerm& t = unlabeled[i];
    CombinedGrads::Unlabeled* g = grads ? &grads->unlabeled[i] : nullptr;
    if (t.student_aug && t.ref_aug) {
      if (!t.spatial_mask) throw ArgumentError("combined_loss: spatial term without mask");
      r.spatial += l2_consistency_grad(*t.ref_aug, *t.student_aug, *t.spatial_mask,
                                       g ? span_of(g->ref_aug) : std::span<double>(),
                                       g ? span_of(g->student_aug) : std::span<double>(), w_spatial);
    }
    if (t.student && t.ref_warped) {
      if (!t.temporal_mask) throw ArgumentError("combined_loss: temporal term without mask");
      r.temporal += l2_consistency_grad(*t.student, *t.ref_warped, *t.temporal_mask,
                                        g ? span_of(g->student) : std::span<double>(),
                                        g ? span_of(g->ref_warped) : std::span<double>(), w_temporal);
    }
  }
  if (n_sup) r.sup /= static_cast<double>(n_sup);
  if (n_spatial) r.spatial /= static_cast<double>(n_spatial);
  if (n_temporal) r.temporal /= static_cast<double>(n_temporal);
  r.total = r.sup + (n_spatial ? lambda1 * r.spatial : 0.0) + (n_temporal ? lambda2 * r.temporal : 0.0);
  return r;
}

}  // namespace cseg
