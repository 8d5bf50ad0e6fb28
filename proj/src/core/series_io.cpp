#include "cseg/core/series_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "cseg/core/errors.hpp"

namespace cseg::io {

using nlohmann::json;

namespace {

template <class T>
void byteswap_inplace(std::vector<T>& values) {
  if constexpr (sizeof(T) > 1) {
    for (T& v : values) {
      unsigned char bytes[sizeof(T)];
      std::memcpy(bytes, &v, sizeof(T));
      std::reverse(bytes, bytes + sizeof(T));
      std::memcpy(&v, bytes, sizeof(T));
    }
  }
}

template <class T>
void write_raw(const fs::path& path, std::vector<T> values) {
  if constexpr (std::endian::native == std::endian::big) byteswap_inplace(values);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)));
  if (!out) throw IoError("failed writing " + path.string());
}

template <class T>
std::vector<T> read_raw(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing file " + path.string());
  std::vector<T> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(T)) {
    throw IoError("truncated file " + path.string());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + path.string());
  if constexpr (std::endian::native == std::endian::big) byteswap_inplace(values);
  return values;
}

fs::path sidecar_of(const fs::path& raw_path) {
  fs::path p = raw_path;
  p.replace_extension(".json");
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

Shape3 shape_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw IoError("expected shape [H, W, D]");
  return Shape3{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

std::string frame_name(int t, const char* prefix) {
  std::ostringstream os;
  os << prefix << std::setw(3) << std::setfill('0') << t << ".raw";
  return os.str();
}

}  // namespace

void save_volume(const fs::path& raw_path, const Volume3D& volume) {
  const Shape3 s = volume.shape();
  write_raw(raw_path, volume.values());
  write_json(sidecar_of(raw_path), json{{"shape", {s.h, s.w, s.d}},
                                        {"spacing", volume.spacing()},
                                        {"dtype", "float32"},
                                        {"endian", "little"}});
}

Volume3D load_volume(const fs::path& raw_path) {
  const json header = read_json(sidecar_of(raw_path));
  if (header.value("dtype", "float32") != "float32") throw IoError(raw_path.string() + ": expected float32 payload");
  const Shape3 shape = shape_from(header.at("shape"));
  Spacing spacing{1.0, 1.0, 1.0};
  if (header.contains("spacing")) spacing = header.at("spacing").get<Spacing>();
  auto values = read_raw<float>(raw_path, shape.voxels());
  return Volume3D(shape, std::move(values), spacing);
}

void save_label(const fs::path& raw_path, const LabelMap& label) {
  const Shape3 s = label.shape();
  write_raw(raw_path, std::vector<std::uint8_t>(label.data().begin(), label.data().end()));
  write_json(sidecar_of(raw_path),
             json{{"shape", {s.h, s.w, s.d}}, {"dtype", "uint8"}, {"num_classes", label.num_classes()}});
}

LabelMap load_label(const fs::path& raw_path) {
  const json header = read_json(sidecar_of(raw_path));
  if (header.value("dtype", "uint8") != "uint8") throw IoError(raw_path.string() + ": expected uint8 payload");
  const Shape3 shape = shape_from(header.at("shape"));
  auto values = read_raw<std::uint8_t>(raw_path, shape.voxels());
  LabelMap label(shape, std::move(values), header.value("num_classes", 2));
  label.validate();
  return label;
}

void save_channels(const fs::path& raw_path, const ChannelVolume& volume) {
  const Shape3 s = volume.shape();
  write_raw(raw_path, volume.storage());
  write_json(sidecar_of(raw_path),
             json{{"shape", {volume.channels(), s.h, s.w, s.d}}, {"dtype", "float32"}, {"endian", "little"}});
}

ChannelVolume load_channels(const fs::path& raw_path) {
  const json header = read_json(sidecar_of(raw_path));
  const auto& shape = header.at("shape");
  if (!shape.is_array() || shape.size() != 4) throw IoError(raw_path.string() + ": expected shape [C, H, W, D]");
  const int c = shape[0].get<int>();
  const Shape3 s{shape[1].get<int>(), shape[2].get<int>(), shape[3].get<int>()};
  auto values = read_raw<float>(raw_path, static_cast<std::size_t>(c) * s.voxels());
  return ChannelVolume(c, s, std::move(values));
}

void save_series(const fs::path& dir, const TimeSeries& series) {
  series.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "cseg-series";
  manifest["version"] = 1;
  manifest["subject_id"] = series.subject_id;
  const Shape3 s = series.shape();
  manifest["shape"] = {s.h, s.w, s.d};
  manifest["spacing"] = series.frames.front().spacing();
  json frames = json::array();
  for (std::size_t t = 0; t < series.frames.size(); ++t) {
    const std::string name = frame_name(static_cast<int>(t), "frame_");
    save_volume(dir / name, series.frames[t]);
    frames.push_back(name);
  }
  manifest["frames"] = frames;
  json labels = json::array();
  for (const auto& [t, label] : series.labels) {
    const std::string name = frame_name(t, "label_");
    save_label(dir / name, label);
    labels.push_back({{"t", t}, {"file", name}});
  }
  manifest["labels"] = labels;
  write_json(dir / "manifest.json", manifest);
}

TimeSeries load_series(const fs::path& dir, const LoadOptions& options) {
  const json manifest = read_json(dir / "manifest.json");
  TimeSeries series;
  series.subject_id = manifest.value("subject_id", dir.filename().string());
  const auto& frames = manifest.at("frames");
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const fs::path path = dir / frames[t].get<std::string>();
    if (!fs::exists(path)) {
      throw IoError("series '" + series.subject_id + "': missing frame " + std::to_string(t) + " (" +
                    path.string() + ")");
    }
    Volume3D frame = load_volume(path);
    if (options.normalize) frame.normalize_min_max();
    series.frames.push_back(std::move(frame));
  }
  for (const auto& entry : manifest.value("labels", json::array())) {
    const int t = entry.at("t").get<int>();
    const fs::path path = dir / entry.at("file").get<std::string>();
    if (!fs::exists(path)) {
      throw IoError("series '" + series.subject_id + "': missing label for frame " + std::to_string(t));
    }
    series.labels.emplace(t, load_label(path));
  }
  series.validate();
  return series;
}

std::vector<TimeSeries> load_cohort(const fs::path& dir, const LoadOptions& options) {
  if (!fs::is_directory(dir)) throw IoError("cohort directory " + dir.string() + " does not exist");
  std::vector<fs::path> subject_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) subject_dirs.push_back(entry.path());
  }
  std::sort(subject_dirs.begin(), subject_dirs.end());
  std::vector<TimeSeries> cohort;
  cohort.reserve(subject_dirs.size());
  for (const auto& p : subject_dirs) cohort.push_back(load_series(p, options));
  std::sort(cohort.begin(), cohort.end(),
            [](const TimeSeries& a, const TimeSeries& b) { return a.subject_id < b.subject_id; });
  return cohort;
}

void save_truth(const fs::path& dir, const std::string& subject_id, const std::vector<LabelMap>& truth) {
  const fs::path sub = dir / subject_id;
  fs::create_directories(sub);
  json files = json::array();
  for (std::size_t t = 0; t < truth.size(); ++t) {
    const std::string name = frame_name(static_cast<int>(t), "truth_");
    save_label(sub / name, truth[t]);
    files.push_back(name);
  }
  write_json(sub / "truth.json", json{{"subject_id", subject_id}, {"frames", files}});
}

std::vector<LabelMap> load_truth(const fs::path& dir, const std::string& subject_id) {
  const fs::path sub = dir / subject_id;
  const json index = read_json(sub / "truth.json");
  std::vector<LabelMap> truth;
  for (const auto& name : index.at("frames")) truth.push_back(load_label(sub / name.get<std::string>()));
  return truth;
}

}  // namespace cseg::io
