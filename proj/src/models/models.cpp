#include "cseg/models/models.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cseg/core/errors.hpp"
#include "cseg/simd/kernels.hpp"

namespace cseg {

namespace {

constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

void require_finite(const nn::UNet& net, const char* what) {
  if (!net.parameters().all_finite()) throw NumericalError(std::string(what) + ": non-finite parameters");
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::ifstream& in, std::size_t n, const std::filesystem::path& path) {
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("checkpoint truncated: " + path.string());
  return v;
}

void load_into(nn::UNet& net, const std::vector<double>& values, const char* what) {
  if (values.size() != net.parameters().size()) {
    throw IoError(std::string(what) + ": parameter count " + std::to_string(values.size()) + " does not match architecture (" +
                  std::to_string(net.parameters().size()) + ")");
  }
  net.parameters().values() = values;
  net.parameters().refresh();
}

}  // namespace

SegmentationNetwork init_segmentation(nn::UNetConfig config, std::uint64_t seed, int num_classes) {
  if (num_classes < 2) throw ArgumentError("init_segmentation: need at least 2 classes");
  config.in_channels = 1;
  config.out_channels = num_classes;
  return SegmentationNetwork{nn::UNet(config, seed)};
}

RegistrationNetwork init_registration(nn::UNetConfig config, std::uint64_t seed) {
  config.in_channels = 2;
  config.out_channels = 3;
  config.zero_init_head = true;
  return RegistrationNetwork{nn::UNet(config, seed)};
}

nn::Tensor as_tensor(const Volume3D& x) { return nn::Tensor(1, x.shape(), x.values()); }

nn::Tensor stack_pair(const Volume3D& fixed, const Volume3D& moving) {
  if (fixed.shape() != moving.shape()) {
    throw ArgumentError("registration input shapes differ: " + fixed.shape().str() + " vs " + moving.shape().str());
  }
  std::vector<float> data;
  data.reserve(2 * fixed.shape().voxels());
  data.insert(data.end(), fixed.data().begin(), fixed.data().end());
  data.insert(data.end(), moving.data().begin(), moving.data().end());
  return nn::Tensor(2, fixed.shape(), std::move(data));
}

LogitMap forward_seg(const SegmentationNetwork& net, const Volume3D& x) {
  require_finite(net.net, "forward_seg");
  return LogitMap(net.net.forward(as_tensor(x)));
}

DisplacementField forward_reg(const RegistrationNetwork& net, const Volume3D& fixed, const Volume3D& moving) {
  require_finite(net.net, "forward_reg");
  return DisplacementField(net.net.forward(stack_pair(fixed, moving)));
}

TeacherState make_teacher(const nn::UNet& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("EMA alpha must lie in [0, 1]");
  return TeacherState{student, alpha};
}

LogitMap forward_teacher(const TeacherState& teacher, const Volume3D& x) {
  require_finite(teacher.net, "forward_teacher");
  return LogitMap(teacher.net.forward(as_tensor(x)));
}

void ema_update(TeacherState& teacher, const nn::ParameterSet& student) {
  if (!teacher.net.parameters().same_layout(student)) throw ArgumentError("ema_update: teacher/student layout mismatch");
  auto& t = teacher.net.parameters().values();
  simd::kernels().ema_blend(t.data(), student.values().data(), t.size(), teacher.alpha);
  teacher.net.parameters().refresh();
}

void Adam::step(nn::ParameterSet& params, const std::vector<double>& grad, double lr) {
  auto& p = params.values();
  if (grad.size() != p.size() || m_.size() != p.size()) throw ArgumentError("Adam: size mismatch");
  ++t_;
  simd::AdamParams ap{lr,
                      config_.beta1,
                      config_.beta2,
                      config_.eps,
                      config_.weight_decay,
                      1.0 - std::pow(config_.beta1, static_cast<double>(t_)),
                      1.0 - std::pow(config_.beta2, static_cast<double>(t_))};
  simd::kernels().adam_update(p.data(), grad.data(), m_.data(), v_.data(), p.size(), ap);
  params.refresh();
}

void Adam::restore(std::vector<double> m, std::vector<double> v, std::int64_t t) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw ArgumentError("Adam::restore: size mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

nlohmann::json arch_to_json(const nn::UNetConfig& c) {
  return {{"in_channels", c.in_channels}, {"out_channels", c.out_channels}, {"depth", c.depth},
          {"base_width", c.base_width},   {"zero_init_head", c.zero_init_head}, {"leaky_slope", c.leaky_slope},
          {"norm_eps", c.norm_eps}};
}

nn::UNetConfig arch_from_json(const nlohmann::json& j) {
  nn::UNetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.zero_init_head = j.value("zero_init_head", false);
  c.leaky_slope = j.value("leaky_slope", 0.01f);
  c.norm_eps = j.value("norm_eps", 1e-5);
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  nlohmann::json header{{"kind", ckpt.kind},
                        {"arch", arch_to_json(ckpt.arch)},
                        {"num_params", ckpt.params.size()},
                        {"has_teacher", ckpt.teacher.has_value()},
                        {"ema_alpha", ckpt.ema_alpha},
                        {"adam_size", ckpt.adam_m.size()},
                        {"adam_steps", ckpt.adam_steps},
                        {"step", ckpt.step},
                        {"meta", ckpt.meta}};
  if (ckpt.teacher && ckpt.teacher->size() != ckpt.params.size()) throw ArgumentError("checkpoint: teacher size mismatch");
  if (ckpt.adam_m.size() != ckpt.adam_v.size()) throw ArgumentError("checkpoint: Adam moment size mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string text = header.dump();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_doubles(out, ckpt.params);
    if (ckpt.teacher) write_doubles(out, *ckpt.teacher);
    write_doubles(out, ckpt.adam_m);
    write_doubles(out, ckpt.adam_v);
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError("not a checkpoint file: " + path.string());
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) throw IoError("checkpoint truncated: " + path.string());
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint truncated: " + path.string());
  const auto header = nlohmann::json::parse(text);
  Checkpoint c;
  c.kind = header.at("kind").get<std::string>();
  c.arch = arch_from_json(header.at("arch"));
  c.ema_alpha = header.at("ema_alpha").get<double>();
  c.adam_steps = header.at("adam_steps").get<std::int64_t>();
  c.step = header.at("step").get<std::int64_t>();
  c.meta = header.at("meta");
  const auto n = header.at("num_params").get<std::size_t>();
  const auto na = header.at("adam_size").get<std::size_t>();
  c.params = read_doubles(in, n, path);
  if (header.at("has_teacher").get<bool>()) c.teacher = read_doubles(in, n, path);
  c.adam_m = read_doubles(in, na, path);
  c.adam_v = read_doubles(in, na, path);
  return c;
}

SegmentationNetwork segmentation_from(const Checkpoint& ckpt) {
  if (ckpt.kind != "segmentation") throw ConfigError("expected a segmentation checkpoint, got '" + ckpt.kind + "'");
  SegmentationNetwork net{nn::UNet(ckpt.arch, 0)};
  load_into(net.net, ckpt.params, "segmentation checkpoint");
  return net;
}

RegistrationNetwork registration_from(const Checkpoint& ckpt) {
  if (ckpt.kind != "registration") throw ConfigError("expected a registration checkpoint, got '" + ckpt.kind + "'");
  RegistrationNetwork net{nn::UNet(ckpt.arch, 0)};
  load_into(net.net, ckpt.params, "registration checkpoint");
  return net;
}

}  // namespace cseg
