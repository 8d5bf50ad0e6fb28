#include "cseg/core/folds.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cseg/core/errors.hpp"
#include "cseg/core/random.hpp"

namespace cseg {

namespace {

void carve_validation(std::vector<std::string> pool, Rng& rng, double val_fraction, DatasetSplit& split) {
  shuffle_range(pool.begin(), pool.end(), rng);
  std::size_t n_val = 0;
  if (val_fraction > 0.0 && pool.size() >= 2) {
    n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(pool.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, pool.size() - 1);
  }
  split.val_subjects.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
  split.train_subjects.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
  std::sort(split.val_subjects.begin(), split.val_subjects.end());
  std::sort(split.train_subjects.begin(), split.train_subjects.end());
}

}  // namespace

void DatasetSplit::validate(const std::vector<std::string>& cohort) const {
  std::set<std::string> seen;
  for (const auto* group : {&train_subjects, &val_subjects, &test_subjects}) {
    for (const auto& s : *group) {
      if (!seen.insert(s).second) throw ValidationError("subject '" + s + "' appears in more than one split");
    }
  }
  const std::set<std::string> all(cohort.begin(), cohort.end());
  if (seen != all) throw ValidationError("split does not cover the cohort exactly");
}

std::vector<DatasetSplit> make_folds(std::vector<std::string> subject_ids, int k, std::uint64_t seed,
                                     double val_fraction) {
  if (k < 2) throw ArgumentError("make_folds: k must be >= 2");
  if (static_cast<std::size_t>(k) > subject_ids.size()) {
    throw ArgumentError("make_folds: k=" + std::to_string(k) + " exceeds subject count " +
                        std::to_string(subject_ids.size()));
  }
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ArgumentError("make_folds: val_fraction must be in [0, 1)");
  std::sort(subject_ids.begin(), subject_ids.end());
  if (std::adjacent_find(subject_ids.begin(), subject_ids.end()) != subject_ids.end()) {
    throw ArgumentError("make_folds: duplicate subject ids");
  }
  Rng rng(derive_seed(seed, {0xF01D}));
  shuffle_range(subject_ids.begin(), subject_ids.end(), rng);

  const std::size_t n = subject_ids.size();
  std::vector<DatasetSplit> folds(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    const std::size_t begin = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(k);
    const std::size_t end = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(k);
    DatasetSplit& split = folds[static_cast<std::size_t>(f)];
    split.fold_id = f;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= begin && i < end) {
        split.test_subjects.push_back(subject_ids[i]);
      } else {
        rest.push_back(subject_ids[i]);
      }
    }
    std::sort(split.test_subjects.begin(), split.test_subjects.end());
    std::sort(rest.begin(), rest.end());
    Rng val_rng(derive_seed(seed, {0x7A1, static_cast<std::uint64_t>(f)}));
    carve_validation(std::move(rest), val_rng, val_fraction, split);
  }
  return folds;
}

DatasetSplit subsample_split(const DatasetSplit& split, int count, std::uint64_t seed, double val_fraction) {
  std::vector<std::string> pool = split.train_subjects;
  pool.insert(pool.end(), split.val_subjects.begin(), split.val_subjects.end());
  std::sort(pool.begin(), pool.end());
  if (count <= 0 || static_cast<std::size_t>(count) >= pool.size()) return split;
  if (count < 2) throw ArgumentError("subsample_split: need at least two training subjects");
  Rng rng(derive_seed(seed, {0x5B5, static_cast<std::uint64_t>(split.fold_id), static_cast<std::uint64_t>(count)}));
  shuffle_range(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(count));
  std::sort(pool.begin(), pool.end());
  DatasetSplit out;
  out.fold_id = split.fold_id;
  out.test_subjects = split.test_subjects;
  carve_validation(std::move(pool), rng, val_fraction, out);
  return out;
}

}  // namespace cseg
