#include <doctest.h>

#include <filesystem>
#include <set>

#include "cseg/core/errors.hpp"
#include "cseg/core/folds.hpp"
#include "cseg/core/series_io.hpp"
#include "cseg/phantom/phantom.hpp"
#include "support.hpp"

using namespace cseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("volume invariants") {
  CHECK_THROWS_AS(Volume3D(Shape3{0, 2, 2}).validate(), ValidationError);
  Volume3D v(Shape3{2, 2, 2});
  v(1, 1, 1) = std::nanf("");
  CHECK_THROWS_AS(v.validate(), ValidationError);
  CHECK_THROWS_AS(Volume3D(Shape3{2, 2, 2}, std::vector<float>{1.0f, 0.0f, 1.0f}).validate(), ValidationError);

  LabelMap y(Shape3{2, 2, 2});
  y(0, 0, 0) = 2;
  CHECK_THROWS_AS(y.validate(), ValidationError);
}

TEST_CASE("min-max normalization") {
  Volume3D v(Shape3{1, 1, 4}, std::vector<float>{2, 4, 6, 10});
  v.normalize_min_max();
  CHECK(v(0, 0, 0) == 0.0f);
  CHECK(v(0, 0, 1) == doctest::Approx(0.25));
  CHECK(v(0, 0, 3) == 1.0f);
  Volume3D c(Shape3{2, 2, 2}, std::vector<float>(8, 3.0f));
  c.normalize_min_max();
  for (float x : c.data()) CHECK(x == 0.0f);
}

TEST_CASE("logits_to_labels") {
  const Shape3 s{4, 4, 4};
  LogitMap zero(2, s);
  CHECK(logits_to_labels(zero).count(1) == 0);

  LogitMap z(2, s);
  for (std::size_t p = 0; p < s.voxels(); ++p) {
    z.data()[p] = -1.0f;
    z.data()[s.voxels() + p] = 1.0f;
  }
  CHECK(logits_to_labels(z).count(1) == s.voxels());

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const LogitMap r = testing::random_logits(rng, s);
    const LabelMap y = logits_to_labels(r);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (int k = 0; k < 4; ++k) {
          const float a = r.at(0, i, j, k);
          const float b = r.at(1, i, j, k);
          CHECK(y(i, j, k) == (b > a ? 1 : 0));
        }
  }
}

TEST_CASE("series round trip") {
  const fs::path dir = scratch("series");
  Rng rng(5);
  TimeSeries ts;
  ts.subject_id = "subject-a";
  for (int t = 0; t < 3; ++t) ts.frames.push_back(testing::random_volume(rng, Shape3{4, 5, 6}));
  ts.labels[1] = testing::random_label(rng, Shape3{4, 5, 6});
  io::save_series(dir / ts.subject_id, ts);
  const TimeSeries back = io::load_series(dir / ts.subject_id, io::LoadOptions{false});
  CHECK(back.num_frames() == 3);
  CHECK(back.labeled_indices() == std::vector<int>{1});
  for (int t = 0; t < 3; ++t) CHECK(back.frames[t].values() == ts.frames[t].values());
  CHECK(back.labels.at(1) == ts.labels.at(1));

  fs::remove(dir / ts.subject_id / "frame_002.raw");
  CHECK_THROWS_AS(io::load_series(dir / ts.subject_id), IoError);
}

TEST_CASE("series with mismatched frame shapes is rejected") {
  TimeSeries ts;
  ts.subject_id = "x";
  ts.frames.emplace_back(Shape3{32, 32, 32});
  ts.frames.emplace_back(Shape3{16, 16, 16});
  CHECK_THROWS_AS(ts.validate(), ValidationError);
  const fs::path dir = scratch("mismatch");
  ts.frames[0].validate();
  CHECK_THROWS_AS(io::save_series(dir / "x", ts), ValidationError);
}

TEST_CASE("phantom directory round-trips bit-identically") {
  PhantomConfig pc;
  pc.grid = {16, 16, 16};
  pc.num_frames = 4;
  pc.num_subjects = 2;
  pc.label_fraction = 0.5;
  const auto cohort = generate_cohort(pc);
  const fs::path dir = scratch("phantom_rt");
  write_cohort(dir, cohort);
  const auto loaded = io::load_cohort(dir / "series");
  REQUIRE(loaded.size() == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    const TimeSeries& a = cohort[s].series;
    const TimeSeries& b = loaded[s];
    CHECK(a.subject_id == b.subject_id);
    for (std::size_t t = 0; t < a.num_frames(); ++t) CHECK(a.frames[t].values() == b.frames[t].values());
    CHECK(a.labels == b.labels);
    CHECK(io::load_truth(dir / "truth", a.subject_id) == cohort[s].truth);
  }
}

TEST_CASE("channel volumes round trip") {
  Rng rng(9);
  const LogitMap z = testing::random_logits(rng, Shape3{3, 4, 5}, 3);
  const fs::path dir = scratch("channels");
  io::save_channels(dir / "z.raw", z);
  CHECK(io::load_channels(dir / "z.raw") == static_cast<const ChannelVolume&>(z));
}

TEST_CASE("folds partition the cohort") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("s" + std::to_string(i));
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    const auto folds = make_folds(ids, 5, seed);
    REQUIRE(folds.size() == 5);
    std::multiset<std::string> tests;
    for (const auto& f : folds) {
      CHECK(f.test_subjects.size() == 2);
      f.validate(ids);
      std::set<std::string> all;
      for (const auto* set : {&f.train_subjects, &f.val_subjects, &f.test_subjects}) {
        for (const auto& s : *set) CHECK(all.insert(s).second);
      }
      CHECK(all.size() == ids.size());
      CHECK(!f.val_subjects.empty());
      tests.insert(f.test_subjects.begin(), f.test_subjects.end());
    }
    CHECK(tests == std::multiset<std::string>(ids.begin(), ids.end()));
    const auto again = make_folds(ids, 5, seed);
    for (int k = 0; k < 5; ++k) CHECK(again[k].test_subjects == folds[k].test_subjects);
  }
  CHECK_THROWS_AS(make_folds({"a", "b"}, 5, 0), ArgumentError);
}

TEST_CASE("subsampled splits keep the test set") {
  std::vector<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.push_back("s" + std::to_string(i));
  const auto folds = make_folds(ids, 5, 3);
  const DatasetSplit sub = subsample_split(folds[0], 5, 7);
  CHECK(sub.test_subjects == folds[0].test_subjects);
  CHECK(sub.train_subjects.size() + sub.val_subjects.size() == 5);
  std::set<std::string> pool(folds[0].train_subjects.begin(), folds[0].train_subjects.end());
  pool.insert(folds[0].val_subjects.begin(), folds[0].val_subjects.end());
  for (const auto& s : sub.train_subjects) CHECK(pool.count(s));
  for (const auto& s : sub.val_subjects) CHECK(pool.count(s));
}
