#include "cseg/trainer/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "cseg/core/errors.hpp"

namespace cseg {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
  }
}

json arch_json(const nn::UNetConfig& a) {
  return {{"depth", a.depth}, {"base_width", a.base_width}, {"leaky_slope", a.leaky_slope}, {"norm_eps", a.norm_eps}};
}

void read_arch(const json& j, nn::UNetConfig& a, const std::string& where) {
  reject_unknown(j, {"depth", "base_width", "leaky_slope", "norm_eps"}, where);
  a.depth = j.value("depth", a.depth);
  a.base_width = j.value("base_width", a.base_width);
  a.leaky_slope = j.value("leaky_slope", a.leaky_slope);
  a.norm_eps = j.value("norm_eps", a.norm_eps);
}

template <class T>
void read(const json& j, const char* key, T& dst) {
  if (j.contains(key)) {
    try {
      dst = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

void read_path(const json& j, const char* key, std::filesystem::path& dst) {
  if (j.contains(key)) dst = j.at(key).get<std::string>();
}

}  // namespace

std::string setting_name(Setting s) {
  switch (s) {
    case Setting::basic: return "basic";
    case Setting::s: return "s";
    case Setting::s_plus: return "s_plus";
    case Setting::s_plus_t: return "s_plus_t";
    case Setting::mean_teacher: return "mean_teacher";
    case Setting::self_training: return "self_training";
  }
  return "basic";
}

Setting parse_setting(const std::string& name) {
  for (Setting s : {Setting::basic, Setting::s, Setting::s_plus, Setting::s_plus_t, Setting::mean_teacher,
                    Setting::self_training}) {
    if (setting_name(s) == name) return s;
  }
  throw ConfigError("unknown setting '" + name + "' (expected basic|s|s_plus|s_plus_t|mean_teacher|self_training)");
}

void ExperimentConfig::validate() const {
  if (lambda0 < 0.0) throw ConfigError("lambda0 must be >= 0");
  if (lambda1_base && *lambda1_base < 0.0) throw ConfigError("lambda1 must be >= 0");
  if (lambda2_base && *lambda2_base < 0.0) throw ConfigError("lambda2 must be >= 0");
  if (delta_t < 1) throw ConfigError("delta_t must be >= 1");
  if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("batch_size must be even and >= 2");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) throw ConfigError("ema_alpha must lie in [0, 1]");
  if (num_folds < 2) throw ConfigError("num_folds must be >= 2");
  if (fold < 0 || fold >= num_folds) throw ConfigError("fold must lie in [0, num_folds)");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  if (subset_size < 0) throw ConfigError("subset_size must be >= 0");
  if (val_every < 1) throw ConfigError("val_every must be >= 1");
  if (reg_steps < 0 || reg_batch_size < 1) throw ConfigError("registration steps/batch must be positive");
  if (reg_lambda < 0.0) throw ConfigError("reg_lambda must be >= 0");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  seg_arch.validate();
  reg_arch.validate();
  transforms.validate();
}

json to_json(const ExperimentConfig& c) {
  const auto& t = c.transforms;
  json j{{"setting", setting_name(c.setting)},
         {"lambda0", c.lambda0},
         {"delta_t", c.delta_t},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"learning_rate", c.learning_rate},
         {"weight_decay", c.weight_decay},
         {"warmup_epochs", c.warmup_epochs},
         {"ema_alpha", c.ema_alpha},
         {"teacher_student", c.teacher_student},
         {"augment_supervised", c.augment_supervised},
         {"seed", c.seed},
         {"seeds", c.seeds},
         {"num_folds", c.num_folds},
         {"fold", c.fold},
         {"fold_seed", c.fold_seed},
         {"val_fraction", c.val_fraction},
         {"subset_size", c.subset_size},
         {"val_every", c.val_every},
         {"seg_arch", arch_json(c.seg_arch)},
         {"reg_arch", arch_json(c.reg_arch)},
         {"transforms",
          {{"p_flip", t.p_flip},
           {"p_rotate", t.p_rotate},
           {"p_translate", t.p_translate},
           {"max_translation", t.max_translation},
           {"gamma_min", t.gamma_min},
           {"gamma_max", t.gamma_max},
           {"noise_sigma_max", t.noise_sigma_max},
           {"continuous_rotation", t.continuous_rotation},
           {"max_angle_degrees", t.max_angle_degrees}}},
         {"reg_lambda", c.reg_lambda},
         {"reg_steps", c.reg_steps},
         {"reg_batch_size", c.reg_batch_size},
         {"reg_learning_rate", c.reg_learning_rate},
         {"sweep_lambda0", c.sweep_lambda0},
         {"data_dir", c.data_dir.string()},
         {"out_dir", c.out_dir.string()},
         {"registration_checkpoint", c.registration_checkpoint.string()},
         {"stage1_checkpoint", c.stage1_checkpoint.string()},
         {"log_batches", c.log_batches}};
  if (c.lambda1_base) j["lambda1"] = *c.lambda1_base;
  if (c.lambda2_base) j["lambda2"] = *c.lambda2_base;
  return j;
}

ExperimentConfig config_from_json(const json& j, ExperimentConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j,
                 {"setting", "lambda0", "lambda1", "lambda2", "delta_t", "batch_size", "epochs", "learning_rate",
                  "weight_decay", "warmup_epochs", "ema_alpha", "teacher_student", "augment_supervised", "seed",
                  "seeds", "num_folds", "fold", "fold_seed", "val_fraction", "subset_size", "val_every", "seg_arch",
                  "reg_arch", "transforms", "reg_lambda", "reg_steps", "reg_batch_size", "reg_learning_rate",
                  "sweep_lambda0", "data_dir", "out_dir", "registration_checkpoint", "stage1_checkpoint",
                  "log_batches"},
                 "");
  if (j.contains("setting")) c.setting = parse_setting(j.at("setting").get<std::string>());
  read(j, "lambda0", c.lambda0);
  if (j.contains("lambda1")) c.lambda1_base = j.at("lambda1").get<double>();
  if (j.contains("lambda2")) c.lambda2_base = j.at("lambda2").get<double>();
  read(j, "delta_t", c.delta_t);
  read(j, "batch_size", c.batch_size);
  read(j, "epochs", c.epochs);
  read(j, "learning_rate", c.learning_rate);
  read(j, "weight_decay", c.weight_decay);
  read(j, "warmup_epochs", c.warmup_epochs);
  read(j, "ema_alpha", c.ema_alpha);
  read(j, "teacher_student", c.teacher_student);
  read(j, "augment_supervised", c.augment_supervised);
  read(j, "seed", c.seed);
  read(j, "seeds", c.seeds);
  read(j, "num_folds", c.num_folds);
  read(j, "fold", c.fold);
  read(j, "fold_seed", c.fold_seed);
  read(j, "val_fraction", c.val_fraction);
  read(j, "subset_size", c.subset_size);
  read(j, "val_every", c.val_every);
  if (j.contains("seg_arch")) read_arch(j.at("seg_arch"), c.seg_arch, "seg_arch.");
  if (j.contains("reg_arch")) read_arch(j.at("reg_arch"), c.reg_arch, "reg_arch.");
  if (j.contains("transforms")) {
    const json& t = j.at("transforms");
    reject_unknown(t,
                   {"p_flip", "p_rotate", "p_translate", "max_translation", "gamma_min", "gamma_max",
                    "noise_sigma_max", "continuous_rotation", "max_angle_degrees"},
                   "transforms.");
    auto& d = c.transforms;
    read(t, "p_flip", d.p_flip);
    read(t, "p_rotate", d.p_rotate);
    read(t, "p_translate", d.p_translate);
    read(t, "max_translation", d.max_translation);
    read(t, "gamma_min", d.gamma_min);
    read(t, "gamma_max", d.gamma_max);
    read(t, "noise_sigma_max", d.noise_sigma_max);
    read(t, "continuous_rotation", d.continuous_rotation);
    read(t, "max_angle_degrees", d.max_angle_degrees);
  }
  read(j, "reg_lambda", c.reg_lambda);
  read(j, "reg_steps", c.reg_steps);
  read(j, "reg_batch_size", c.reg_batch_size);
  read(j, "reg_learning_rate", c.reg_learning_rate);
  read(j, "sweep_lambda0", c.sweep_lambda0);
  read_path(j, "data_dir", c.data_dir);
  read_path(j, "out_dir", c.out_dir);
  read_path(j, "registration_checkpoint", c.registration_checkpoint);
  read_path(j, "stage1_checkpoint", c.stage1_checkpoint);
  read(j, "log_batches", c.log_batches);
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

double learning_rate_at(double epoch, const ExperimentConfig& c) {
  if (epoch < 0.0) throw ArgumentError("learning_rate_at: epoch must be >= 0");
  const double w = c.warmup_epochs;
  const double total = c.epochs;
  if (epoch < w) return c.learning_rate * epoch / w;
  if (total <= w) return c.learning_rate;
  const double e = std::min(epoch, total);
  return c.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * (e - w) / (total - w)));
}

}  // namespace cseg
