#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cseg {

/// Subject-level partition for one cross-validation fold.
struct DatasetSplit {
  int fold_id = 0;
  std::vector<std::string> train_subjects;
  std::vector<std::string> val_subjects;
  std::vector<std::string> test_subjects;

  /// Throws ValidationError unless the three sets are disjoint and cover `cohort`.
  void validate(const std::vector<std::string>& cohort) const;
};

/// Shuffles subjects with `seed`, deals them into k test folds of near-equal size and carves
/// round(val_fraction * |rest|) validation subjects (at least one when possible) out of the rest.
std::vector<DatasetSplit> make_folds(std::vector<std::string> subject_ids, int k, std::uint64_t seed,
                                     double val_fraction = 0.2);

/// Keeps `count` of the split's train+val subjects (test set untouched) and re-carves validation.
DatasetSplit subsample_split(const DatasetSplit& split, int count, std::uint64_t seed, double val_fraction = 0.2);

}  // namespace cseg
