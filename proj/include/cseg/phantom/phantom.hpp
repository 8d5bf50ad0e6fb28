#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cseg/core/volume.hpp"

namespace cseg {

struct PhantomConfig {
  Shape3 grid{32, 32, 32};
  int num_frames = 30;
  int num_subjects = 10;
  double label_fraction = 0.1;
  double motion_amplitude = 2.0;
  double noise_sigma = 0.03;
  std::uint64_t seed = 0;
  Spacing spacing{3.0, 3.0, 3.0};

  void validate() const;
};

struct PhantomSubject {
  TimeSeries series;
  /// Dense ground truth, one mask per frame.
  std::vector<LabelMap> truth;
  /// Largest displacement magnitude used over all frames and voxels.
  double max_displacement = 0.0;
};

std::string phantom_subject_id(int index);

/// A textured ellipsoid on a darker background plus a dimmer unlabeled ellipsoid, deformed
/// over time by a smooth sinusoidal displacement and corrupted by Gaussian noise. Frames
/// are min-max normalized.
PhantomSubject generate_subject(const PhantomConfig& config, int subject_index);
std::vector<PhantomSubject> generate_cohort(const PhantomConfig& config);

/// Writes <out>/series/<id>/ (training layout) and <out>/truth/<id>/ (dense ground truth).
void write_cohort(const std::filesystem::path& out, const std::vector<PhantomSubject>& cohort);

}  // namespace cseg
