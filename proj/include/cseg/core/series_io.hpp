#pragma once

#include <filesystem>
#include <vector>

#include "cseg/core/volume.hpp"

namespace cseg::io {

namespace fs = std::filesystem;

struct LoadOptions {
  /// Min-max rescale every frame to [0, 1] after reading.
  bool normalize = true;
};

// Raw little-endian payload + JSON sidecar ("<stem>.raw" / "<stem>.json").
void save_volume(const fs::path& raw_path, const Volume3D& volume);
Volume3D load_volume(const fs::path& raw_path);

void save_label(const fs::path& raw_path, const LabelMap& label);
LabelMap load_label(const fs::path& raw_path);

/// Shape recorded as [C, H, W, D].
void save_channels(const fs::path& raw_path, const ChannelVolume& volume);
ChannelVolume load_channels(const fs::path& raw_path);

/// Writes manifest.json plus one file per frame and per labeled frame.
void save_series(const fs::path& dir, const TimeSeries& series);
TimeSeries load_series(const fs::path& dir, const LoadOptions& options = {});

/// Loads every immediate subdirectory that holds a manifest.json, sorted by subject id.
std::vector<TimeSeries> load_cohort(const fs::path& dir, const LoadOptions& options = {});

/// Dense per-frame ground truth kept outside the training layout.
void save_truth(const fs::path& dir, const std::string& subject_id, const std::vector<LabelMap>& truth);
std::vector<LabelMap> load_truth(const fs::path& dir, const std::string& subject_id);

}  // namespace cseg::io
