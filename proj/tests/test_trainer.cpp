#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "cseg/core/errors.hpp"
#include "cseg/phantom/phantom.hpp"
#include "cseg/trainer/trainer.hpp"

using namespace cseg;
namespace fs = std::filesystem;

namespace {

const std::vector<TimeSeries>& tiny_cohort() {
  static const std::vector<TimeSeries> cohort = [] {
    PhantomConfig pc;
    pc.grid = {8, 8, 8};
    pc.num_frames = 8;
    pc.num_subjects = 10;
    pc.label_fraction = 0.25;
    pc.seed = 3;
    std::vector<TimeSeries> out;
    for (auto& s : generate_cohort(pc)) out.push_back(std::move(s.series));
    return out;
  }();
  return cohort;
}

ExperimentConfig tiny_config(Setting setting, const std::string& out) {
  ExperimentConfig c;
  c.setting = setting;
  c.batch_size = 4;
  c.epochs = 3;
  c.warmup_epochs = 1;
  c.learning_rate = 1e-3;
  c.seg_arch = nn::UNetConfig{1, 2, 2, 2};
  c.reg_arch = nn::UNetConfig{2, 3, 2, 2, true};
  c.reg_steps = 3;
  c.reg_batch_size = 2;
  c.out_dir = fs::temp_directory_path() / out;
  fs::remove_all(c.out_dir);
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig d;
  CHECK(d.lambda0 == 0.01);
  CHECK(d.delta_t == 5);
  CHECK(d.batch_size == 16);
  CHECK(d.learning_rate == 1e-4);
  CHECK(d.weight_decay == 1e-5);
  CHECK(d.warmup_epochs == 10);
  const auto c = config_from_json(nlohmann::json{{"setting", "s_plus_t"}, {"lambda0", 0.001}, {"seg_arch", {{"base_width", 8}}}});
  CHECK(c.setting == Setting::s_plus_t);
  CHECK(c.lambda0 == 0.001);
  CHECK(c.seg_arch.base_width == 8);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"lamda0", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"batch_size", 3}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"setting", "nope"}}), ConfigError);
  // Serialization round trip.
  const auto again = config_from_json(to_json(c));
  CHECK(to_json(again) == to_json(c));
}

TEST_CASE("learning rate schedule examples") {
  ExperimentConfig c;
  c.learning_rate = 1e-4;
  c.warmup_epochs = 10;
  c.epochs = 100;
  CHECK(learning_rate_at(10, c) == 1e-4);
  CHECK(learning_rate_at(5, c) == doctest::Approx(5e-5).epsilon(1e-15));
  CHECK(learning_rate_at(100, c) == doctest::Approx(0.0).epsilon(1e-20));
  CHECK(learning_rate_at(0, c) == 0.0);
}

TEST_CASE("partner frames stay within the window") {
  Rng rng(1);
  std::map<int, int> counts;
  for (int i = 0; i < 20000; ++i) {
    const int p = sample_partner(rng, 3, 30, 5);
    CHECK(p != 3);
    CHECK(std::abs(p - 3) <= 5);
    CHECK(p >= 0);
    ++counts[p];
  }
  CHECK(counts.size() == 8);  // frames 0..8 except 3
  for (const auto& [t, n] : counts) CHECK(std::abs(n - 2500) < 4 * std::sqrt(2500.0));
  CHECK_THROWS_AS(sample_partner(rng, 0, 1, 5), DegenerateInputError);
}

TEST_CASE("batches follow the setting contract") {
  const auto& cohort = tiny_cohort();
  ExperimentConfig c = tiny_config(Setting::s_plus_t, "cseg_batch");
  c.batch_size = 16;
  const TrainingData data = prepare_data(cohort, c);
  std::set<int> train(data.train_subjects.begin(), data.train_subjects.end());
  SamplerStreams streams(5);
  std::vector<int> freq(data.labeled_pool.size(), 0);
  const int batches = 2000;
  for (int b = 0; b < batches; ++b) {
    const Batch batch = sample_batch(data, c, streams);
    REQUIRE(batch.labeled.size() == 8);
    REQUIRE(batch.unlabeled.size() == 8);
    for (const auto& l : batch.labeled) {
      ++freq[static_cast<std::size_t>(l.entry)];
      CHECK(l.transform.has_value());
    }
    for (const auto& u : batch.unlabeled) {
      CHECK(train.count(u.frame.subject));
      CHECK(!data.series(u.frame.subject).is_labeled(u.frame.t));
      REQUIRE(u.partner_t.has_value());
      const int dt = std::abs(*u.partner_t - u.frame.t);
      CHECK(dt >= 1);
      CHECK(dt <= 5);
    }
  }
  const double n = 8.0 * batches;
  const double p = 1.0 / static_cast<double>(freq.size());
  const double sigma = std::sqrt(n * p * (1 - p));
  for (int f : freq) CHECK(std::abs(f - n * p) <= 3.5 * sigma);

  c.setting = Setting::s;
  const Batch s = sample_batch(data, c, streams);
  CHECK(s.unlabeled.empty());
  CHECK(s.labeled.size() == 8);
  c.setting = Setting::mean_teacher;
  const Batch mt = sample_batch(data, c, streams);
  CHECK(mt.unlabeled.size() == 8);
  for (const auto& l : mt.labeled) CHECK(!l.transform);
  for (const auto& u : mt.unlabeled) {
    CHECK(!u.transform);
    CHECK(!u.partner_t);
  }
}

TEST_CASE("training data never includes held-out subjects") {
  const auto& cohort = tiny_cohort();
  for (int fold = 0; fold < 5; ++fold) {
    ExperimentConfig c = tiny_config(Setting::s_plus, "cseg_leak");
    c.fold = fold;
    const TrainingData d = prepare_data(cohort, c);
    std::set<int> train(d.train_subjects.begin(), d.train_subjects.end());
    for (const auto& e : d.labeled_pool) CHECK(train.count(e.subject));
    for (const auto& f : d.unlabeled_pool) CHECK(train.count(f.subject));
    for (int s : d.test_subjects) CHECK(!train.count(s));
    for (int s : d.val_subjects) CHECK(!train.count(s));
  }
}

TEST_CASE("basic steps carry no consistency terms") {
  const auto& cohort = tiny_cohort();
  const ExperimentConfig c = tiny_config(Setting::basic, "cseg_basic_step");
  TrainingData data = prepare_data(cohort, c);
  Trainer t(c, data);
  CHECK(!t.teacher());
  const StepLog log = t.step();
  CHECK(log.loss.spatial == 0.0);
  CHECK(log.loss.temporal == 0.0);
  CHECK(log.loss.total == log.loss.sup);
  CHECK(t.step_count() == 1);
}

TEST_CASE("first step at zero learning rate only moves the teacher") {
  const auto& cohort = tiny_cohort();
  ExperimentConfig c = tiny_config(Setting::s_plus, "cseg_zero_lr");
  c.ema_alpha = 0.5;
  TrainingData data = prepare_data(cohort, c);
  Trainer t(c, data);
  TrainState s = t.state();
  REQUIRE(s.teacher);
  for (double& v : *s.teacher) v = 0.0;
  t.restore(s);
  const auto before = t.student().net.parameters().values();
  const StepLog log = t.step();  // epoch 0 of the warmup: lr = 0
  CHECK(log.lr == 0.0);
  CHECK(t.student().net.parameters().values() == before);
  const auto& teacher = t.teacher()->net.parameters().values();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(teacher[i] == doctest::Approx(0.5 * before[i]).epsilon(1e-15));
}

TEST_CASE("lambda values follow the schedule") {
  const auto& cohort = tiny_cohort();
  const RegistrationNetwork reg = init_registration(nn::UNetConfig{2, 3, 2, 2, true}, 1);
  const ExperimentConfig c = tiny_config(Setting::s_plus_t, "cseg_lambda");
  TrainingData data = prepare_data(cohort, c);
  Trainer t(c, data, &reg);
  const double L = t.ramp_length();
  CHECK(L == 0.5 * static_cast<double>(t.total_steps()));
  for (double S : {0.0, L / 2, L, 2 * L}) {
    const auto step = static_cast<std::int64_t>(S);
    CHECK(t.lambda1_at(step) == lambda_schedule(static_cast<double>(step), L, c.lambda0));
    CHECK(t.lambda2_at(step) == lambda_schedule(static_cast<double>(step), L, c.lambda0));
  }
  TrainState s = t.state();
  s.step = static_cast<std::int64_t>(L) + 1;
  t.restore(s);
  const StepLog log = t.step();
  CHECK(log.loss.lambda1 == c.lambda0);
  CHECK(log.loss.lambda2 == c.lambda0);
  CHECK(log.loss.temporal > 0.0);
  CHECK(log.loss.spatial > 0.0);
}

TEST_CASE("s_plus_t without a registration network is a configuration error") {
  const auto& cohort = tiny_cohort();
  const ExperimentConfig c = tiny_config(Setting::s_plus_t, "cseg_noreg");
  TrainingData data = prepare_data(cohort, c);
  CHECK_THROWS_AS(Trainer(c, data), ConfigError);
  CHECK_THROWS_AS(train(c, cohort), ConfigError);
}

TEST_CASE("state round trip continues identically") {
  const auto& cohort = tiny_cohort();
  for (bool teacher_student : {true, false}) {
    ExperimentConfig c = tiny_config(Setting::s_plus, "cseg_resume");
    c.teacher_student = teacher_student;
    TrainingData data = prepare_data(cohort, c);
    Trainer a(c, data);
    a.step();
    a.step();
    const TrainState mid = a.state();
    a.step();
    Trainer b(c, data);
    b.restore(mid);
    b.step();
    CHECK(a.state().student == b.state().student);
    CHECK(a.state().rng_transform == b.state().rng_transform);
  }
}

TEST_CASE("training runs are deterministic and write their artifacts") {
  const auto& cohort = tiny_cohort();
  const ExperimentConfig c1 = tiny_config(Setting::s_plus, "cseg_det_a");
  ExperimentConfig c2 = c1;
  c2.out_dir = fs::temp_directory_path() / "cseg_det_b";
  fs::remove_all(c2.out_dir);
  const TrainResult r1 = train(c1, cohort);
  train(c2, cohort);
  CHECK(slurp(c1.out_dir / "train_log.csv") == slurp(c2.out_dir / "train_log.csv"));
  CHECK(slurp(c1.out_dir / "batches.csv") == slurp(c2.out_dir / "batches.csv"));
  for (const char* f : {"summary.json", "best.ckpt", "final.ckpt"}) CHECK(fs::exists(c1.out_dir / f));
  CHECK(r1.best_val_dice >= r1.final_val_dice - 1e-9);
  const auto summary = nlohmann::json::parse(slurp(c1.out_dir / "summary.json"));
  CHECK(summary.at("steps").get<std::int64_t>() == r1.steps);
}

TEST_CASE("setting s never touches unlabeled frames") {
  const auto& cohort = tiny_cohort();
  const ExperimentConfig c = tiny_config(Setting::s, "cseg_s_only");
  train(c, cohort);
  std::ifstream in(c.out_dir / "batches.csv");
  std::string line;
  std::getline(in, line);
  int rows = 0;
  while (std::getline(in, line)) {
    CHECK(line.find(",unlabeled,") == std::string::npos);
    ++rows;
  }
  CHECK(rows > 0);
}

TEST_CASE("mean teacher logs a consistency term without transforms") {
  const auto& cohort = tiny_cohort();
  ExperimentConfig c = tiny_config(Setting::mean_teacher, "cseg_mt");
  TrainingData data = prepare_data(cohort, c);
  Trainer t(c, data);
  REQUIRE(t.teacher());
  const Batch b = t.next_batch();
  for (const auto& l : b.labeled) CHECK(!l.transform);
  const StepLog first = t.train_step(b);
  // Teacher and student start identical, so the consistency term is exactly zero.
  CHECK(first.loss.spatial == 0.0);

  c.ema_alpha = 0.0;
  Trainer copy(c, data);
  for (int k = 0; k < 3; ++k) CHECK(copy.step().loss.spatial == 0.0);
}

TEST_CASE("self training needs a stage-1 model and grows the labeled pool") {
  const auto& cohort = tiny_cohort();
  ExperimentConfig c = tiny_config(Setting::self_training, "cseg_self");
  CHECK_THROWS_AS(train(c, cohort), ConfigError);

  ExperimentConfig stage1 = tiny_config(Setting::basic, "cseg_self_stage1");
  const TrainResult r = train(stage1, cohort);
  TrainingData data = prepare_data(cohort, c);
  const std::size_t labeled = data.labeled_pool.size();
  const std::size_t unlabeled = data.unlabeled_pool.size();
  add_pseudo_labels(data, segmentation_from(load_checkpoint(r.best_checkpoint)));
  CHECK(data.labeled_pool.size() == labeled + unlabeled);
  CHECK(data.unlabeled_pool.empty());
  for (const auto& y : data.pseudo_labels)
    for (auto v : y.data()) CHECK(v <= 1);

  c.stage1_checkpoint = r.best_checkpoint;
  const TrainResult st = train(c, cohort);
  CHECK(st.steps > 0);
}

TEST_CASE("registration pretraining writes one checkpoint per fold") {
  const auto& cohort = tiny_cohort();
  ExperimentConfig c = tiny_config(Setting::basic, "cseg_reg");
  c.reg_steps = 0;
  c.fold = 1;
  const RegistrationResult r0 = train_registration(c, cohort);
  CHECK(r0.checkpoint.filename() == "fold_1.ckpt");
  const RegistrationNetwork untrained = registration_from(load_checkpoint(r0.checkpoint));
  const DisplacementField f = forward_reg(untrained, cohort[0].frames[0], cohort[0].frames[1]);
  for (float v : f.data()) CHECK(v == 0.0f);
  c.fold = 2;
  c.reg_steps = 2;
  CHECK(train_registration(c, cohort).checkpoint.filename() == "fold_2.ckpt");
}

TEST_CASE("ablation nesting at zero weight") {
  const auto& cohort = tiny_cohort();
  const RegistrationNetwork reg = init_registration(nn::UNetConfig{2, 3, 2, 2, true}, 1);
  ExperimentConfig base = tiny_config(Setting::basic, "cseg_nest");
  base.lambda0 = 0.0;
  TrainingData data = prepare_data(cohort, base);
  Trainer basic(base, data);
  std::vector<std::vector<double>> traces;
  for (Setting s : {Setting::s, Setting::s_plus, Setting::s_plus_t}) {
    ExperimentConfig c = base;
    c.setting = s;
    Trainer t(c, data, &reg);
    std::vector<double> sup;
    for (int k = 0; k < 4; ++k) sup.push_back(t.step().loss.sup);
    traces.push_back(sup);
    CHECK(t.student().net.parameters().values().size() == basic.student().net.parameters().values().size());
  }
  std::vector<double> ref;
  for (int k = 0; k < 4; ++k) ref.push_back(basic.step().loss.sup);
  for (const auto& tr : traces) CHECK(tr == ref);
}
