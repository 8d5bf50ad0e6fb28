#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cseg/nn/unet.hpp"
#include "cseg/transforms/transforms.hpp"

namespace cseg {

enum class Setting { basic, s, s_plus, s_plus_t, mean_teacher, self_training };

std::string setting_name(Setting s);
Setting parse_setting(const std::string& name);

/// Declarative run description. Defaults are the full-scale hyperparameters; desk-scale
/// profiles override epochs, widths and learning rates from a JSON file.
struct ExperimentConfig {
  Setting setting = Setting::basic;
  double lambda0 = 0.01;
  /// Independent overrides of the two consistency weights' base value.
  std::optional<double> lambda1_base;
  std::optional<double> lambda2_base;
  int delta_t = 5;
  int batch_size = 16;
  int epochs = 5000;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  int warmup_epochs = 10;
  double ema_alpha = 0.99;
  /// Reference branch is an EMA teacher; otherwise a weight-shared Siamese branch.
  bool teacher_student = true;
  /// Feed the supervised term the transformed image and label instead of the raw pair.
  bool augment_supervised = false;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0};

  int num_folds = 5;
  int fold = 0;
  std::uint64_t fold_seed = 0;
  double val_fraction = 0.2;
  /// Train+validation subjects kept per fold; 0 keeps all.
  int subset_size = 0;
  int val_every = 1;

  nn::UNetConfig seg_arch{1, 2, 4, 16, false, 0.01f, 1e-5};
  nn::UNetConfig reg_arch{2, 3, 4, 16, true, 0.01f, 1e-5};
  TransformDistribution transforms;

  double reg_lambda = 1.0;
  int reg_steps = 2000;
  int reg_batch_size = 4;
  double reg_learning_rate = 1e-4;

  std::vector<double> sweep_lambda0{0.01, 0.001, 0.0001};

  std::filesystem::path data_dir;
  std::filesystem::path out_dir = "runs";
  std::filesystem::path registration_checkpoint;
  std::filesystem::path stage1_checkpoint;
  bool log_batches = true;

  void validate() const;
  double lambda1_base_value() const { return lambda1_base.value_or(lambda0); }
  double lambda2_base_value() const { return lambda2_base.value_or(lambda0); }
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Keys absent from j keep their current values in base; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Linear warmup to the base rate over warmup_epochs, then cosine annealing to zero at
/// `epochs`. Accepts fractional epochs.
double learning_rate_at(double epoch, const ExperimentConfig& config);

}  // namespace cseg
