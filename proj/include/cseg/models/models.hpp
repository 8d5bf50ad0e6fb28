#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cseg/core/volume.hpp"
#include "cseg/nn/unet.hpp"
#include "cseg/warp/warp.hpp"

namespace cseg {

/// 1 -> C encoder-decoder producing logits.
struct SegmentationNetwork {
  nn::UNet net;
};

/// 2 -> 3 encoder-decoder on (fixed, moving) producing a displacement field; the head starts
/// at zero so an untrained network predicts the identity map.
struct RegistrationNetwork {
  nn::UNet net;
};

SegmentationNetwork init_segmentation(nn::UNetConfig config, std::uint64_t seed, int num_classes = 2);
RegistrationNetwork init_registration(nn::UNetConfig config, std::uint64_t seed);

nn::Tensor as_tensor(const Volume3D& x);
nn::Tensor stack_pair(const Volume3D& fixed, const Volume3D& moving);

/// Inference-mode forward passes. Non-finite parameters raise NumericalError.
LogitMap forward_seg(const SegmentationNetwork& net, const Volume3D& x);
DisplacementField forward_reg(const RegistrationNetwork& net, const Volume3D& fixed, const Volume3D& moving);

struct TeacherState {
  nn::UNet net;
  double alpha = 0.99;
};

TeacherState make_teacher(const nn::UNet& student, double alpha);
LogitMap forward_teacher(const TeacherState& teacher, const Volume3D& x);

/// theta' <- alpha theta' + (1 - alpha) theta.
void ema_update(TeacherState& teacher, const nn::ParameterSet& student);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// L2 penalty added to the gradient.
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam() = default;
  Adam(std::size_t size, AdamConfig config) : config_(config), m_(size, 0.0), v_(size, 0.0) {}

  void step(nn::ParameterSet& params, const std::vector<double>& grad, double lr);

  const AdamConfig& config() const { return config_; }
  std::int64_t steps() const { return t_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }
  void restore(std::vector<double> m, std::vector<double> v, std::int64_t t);

 private:
  AdamConfig config_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::int64_t t_ = 0;
};

/// Versioned binary checkpoint: magic, version, JSON header, then raw little-endian doubles
/// for the parameter blocks named in the header.
struct Checkpoint {
  std::string kind;  // "segmentation" or "registration"
  nn::UNetConfig arch;
  std::vector<double> params;
  std::optional<std::vector<double>> teacher;
  double ema_alpha = 0.0;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::int64_t adam_steps = 0;
  std::int64_t step = 0;
  nlohmann::json meta = nlohmann::json::object();
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

SegmentationNetwork segmentation_from(const Checkpoint& ckpt);
RegistrationNetwork registration_from(const Checkpoint& ckpt);

nlohmann::json arch_to_json(const nn::UNetConfig& c);
nn::UNetConfig arch_from_json(const nlohmann::json& j);

}  // namespace cseg
