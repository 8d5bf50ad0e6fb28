// Acceptance suite. Each criterion prints one PASS/FAIL line; supporting numbers go on
// indented lines below it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cseg/core/random.hpp"
#include "cseg/eval/metrics.hpp"
#include "cseg/eval/report.hpp"
#include "cseg/losses/losses.hpp"
#include "cseg/models/models.hpp"
#include "cseg/phantom/phantom.hpp"
#include "cseg/simd/kernels.hpp"
#include "cseg/trainer/trainer.hpp"
#include "support.hpp"

using namespace cseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

fs::path g_work;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void detail(const std::string& s) { std::printf("  %s\n", s.c_str()); std::fflush(stdout); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool verdict(int criterion, bool ok, const std::string& summary) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", criterion, summary.c_str());
  std::fflush(stdout);
  return ok;
}

ExperimentConfig desk_config() { return load_config(fs::path(CSEG_CONFIG_DIR) / "desk.json"); }

std::vector<TimeSeries> series_of(const std::vector<PhantomSubject>& subjects) {
  std::vector<TimeSeries> out;
  for (const auto& s : subjects) out.push_back(s.series);
  return out;
}

const PhantomSubject& subject_by_id(const std::vector<PhantomSubject>& cohort, const std::string& id) {
  for (const auto& s : cohort) {
    if (s.series.subject_id == id) return s;
  }
  throw std::runtime_error("unknown subject " + id);
}

std::vector<SubjectScore> score_test_subjects(const std::filesystem::path& checkpoint,
                                              const std::vector<PhantomSubject>& cohort, const ExperimentConfig& config,
                                              const std::string& setting) {
  const SegmentationNetwork net = segmentation_from(load_checkpoint(checkpoint));
  const TrainingData data = prepare_data(series_of(cohort), config);
  std::vector<SubjectScore> scores;
  for (const auto& id : data.split.test_subjects) {
    const PhantomSubject& s = subject_by_id(cohort, id);
    SubjectScore sc = score_subject(s.series, predict_series(net, s.series), &s.truth);
    sc.setting = setting;
    scores.push_back(sc);
  }
  return scores;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

// Small cohort for the harness-level criteria.
std::vector<PhantomSubject> small_cohort() {
  PhantomConfig pc;
  pc.grid = {16, 16, 16};
  pc.num_frames = 12;
  pc.num_subjects = 10;
  pc.label_fraction = 0.25;
  pc.seed = 5;
  return generate_cohort(pc);
}

ExperimentConfig small_config(Setting setting, const fs::path& out) {
  ExperimentConfig c;
  c.setting = setting;
  c.batch_size = 4;
  c.epochs = 2;
  c.warmup_epochs = 1;
  c.learning_rate = 1e-3;
  c.seg_arch = nn::UNetConfig{1, 2, 2, 4};
  c.reg_arch = nn::UNetConfig{2, 3, 2, 4, true};
  c.reg_steps = 4;
  c.reg_batch_size = 2;
  c.reg_learning_rate = 1e-3;
  c.out_dir = out;
  return c;
}

std::vector<PhantomSubject> desk_cohort(int subjects) {
  PhantomConfig pc;
  pc.grid = {32, 32, 32};
  pc.num_frames = 30;
  pc.num_subjects = subjects;
  pc.label_fraction = 0.1;
  pc.seed = 1;
  return generate_cohort(pc);
}

// ---------------------------------------------------------------------------------------

bool criterion1() {
  const auto t0 = Clock::now();
  auto dummy = [](const Volume3D& x) {
    LogitMap z(2, x.shape());
    const std::size_t n = x.shape().voxels();
    for (std::size_t p = 0; p < n; ++p) {
      z.data()[p] = x.data()[p];
      z.data()[n + p] = -x.data()[p];
    }
    return z;
  };
  Rng rng(2024);
  const TransformDistribution dist;
  const Shape3 shapes[] = {{8, 8, 8}, {8, 8, 6}, {6, 10, 10}};
  int nonzero = 0, translated = 0, rotated = 0;
  for (int k = 0; k < 1000; ++k) {
    const Shape3 s = shapes[k % 3];
    const Volume3D x = testing::random_volume(rng, s);
    PairedTransform t = sample_transform(rng, dist, s);
    t.intensity = IntensityTransform{};
    translated += t.translation_active;
    rotated += t.rotation_active;
    if (spatial_consistency_loss(dummy, dummy, x, t) != 0.0) ++nonzero;
  }
  const double secs = seconds_since(t0);
  detail("transforms with rotation " + std::to_string(rotated) + ", with translation " + std::to_string(translated));
  return verdict(1, nonzero == 0 && secs < 30.0,
                 std::to_string(nonzero) + "/1000 nonzero consistency values, " + fmt("%.2f s", secs));
}

bool criterion2() {
  const auto t0 = Clock::now();
  Rng rng(77);
  const Shape3 s{4, 4, 4};
  const int trials = 20;
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };
  for (int trial = 0; trial < trials; ++trial) {
    const LabelMap y = testing::random_label(rng, s);
    LogitMap z = testing::random_logits(rng, s);
    std::vector<double> g(z.size(), 0.0);
    dice_loss_grad(z, y, g);
    note("dice_loss", testing::fd_max_relative_error(z.data(), g, [&] { return dice_loss(z, y); }));
    std::fill(g.begin(), g.end(), 0.0);
    cross_entropy_loss_grad(z, y, g);
    note("cross_entropy_loss", testing::fd_max_relative_error(z.data(), g, [&] { return cross_entropy_loss(z, y); }));

    LogitMap zb = testing::random_logits(rng, s);
    const VoxelMask m = testing::random_mask(rng, s.voxels());
    std::vector<double> ga(z.size(), 0.0), gb(z.size(), 0.0);
    l2_consistency_grad(z, zb, m, ga, gb);
    note("l2_consistency", testing::fd_max_relative_error(z.data(), ga, [&] { return l2_consistency(z, zb, m); }));
    note("l2_consistency", testing::fd_max_relative_error(zb.data(), gb, [&] { return l2_consistency(z, zb, m); }));

    Volume3D a = testing::random_volume(rng, s), b = testing::random_volume(rng, s);
    std::vector<double> na, nb;
    local_ncc_grad(a, b, &na, &nb);
    note("local_ncc", testing::fd_max_relative_error(a.data(), na, [&] { return local_ncc(a, b); }));
    note("local_ncc", testing::fd_max_relative_error(b.data(), nb, [&] { return local_ncc(a, b); }));

    DisplacementField f(s);
    for (float& v : f.data()) v = static_cast<float>(uniform(rng, -1.0, 1.0));
    std::vector<double> gf(f.size(), 0.0);
    grad_smoothness_grad(f, gf);
    note("grad_smoothness", testing::fd_max_relative_error(f.data(), gf, [&] { return grad_smoothness(f); }));

    std::vector<LogitMap> zs;
    for (int k = 0; k < 10; ++k) zs.push_back(testing::random_logits(rng, s));
    const LabelMap y1 = testing::random_label(rng, s);
    const VoxelMask m0 = testing::random_mask(rng, s.voxels()), m1 = testing::random_mask(rng, s.voxels());
    const VoxelMask m2 = testing::random_mask(rng, s.voxels());
    const std::vector<LabeledTerm> lab{{&zs[0], &y, &zs[1], &zs[2], &m0}, {&zs[3], &y1, nullptr, nullptr, nullptr}};
    const std::vector<UnlabeledTerm> unl{{&zs[4], &zs[5], &m1, &zs[6], &zs[7], &m2}};
    const double l1 = uniform(rng, 0.0, 1.0), l2 = uniform(rng, 0.0, 1.0);
    CombinedGrads cg;
    combined_loss(lab, unl, l1, l2, &cg);
    auto total = [&] { return combined_loss(lab, unl, l1, l2).total; };
    const std::vector<std::pair<LogitMap*, const std::vector<double>*>> blocks{
        {&zs[0], &cg.labeled[0].student},      {&zs[1], &cg.labeled[0].student_aug},
        {&zs[2], &cg.labeled[0].ref_aug},      {&zs[3], &cg.labeled[1].student},
        {&zs[4], &cg.unlabeled[0].student_aug}, {&zs[5], &cg.unlabeled[0].ref_aug},
        {&zs[6], &cg.unlabeled[0].student},    {&zs[7], &cg.unlabeled[0].ref_warped}};
    for (const auto& [zp, gp] : blocks) note("combined_loss", testing::fd_max_relative_error(zp->data(), *gp, total));
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 120.0;
  std::string worst_all;
  for (const auto& [name, e] : worst) {
    detail(name + fmt(": max relative error %.3e", e));
    ok = ok && e < 1e-4;
  }
  return verdict(2, ok && worst.size() == 6, std::to_string(trials) + " instances per function, " + fmt("%.1f s", secs));
}

bool criterion3() {
  bool ok = true;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); };
  double worst_lambda = 0.0;
  for (double lambda0 : {0.01, 0.001, 1.0}) {
    for (double L : {1000.0, 37.0, 5000.0}) {
      const double expect[] = {lambda0 * std::exp(-5.0), lambda0 * std::exp(-1.25), lambda0, lambda0};
      const double S[] = {0.0, L / 2, L, 2 * L};
      for (int i = 0; i < 4; ++i) worst_lambda = std::max(worst_lambda, rel(lambda_schedule(S[i], L, lambda0), expect[i]));
    }
  }
  detail(fmt("lambda schedule max relative error %.3e", worst_lambda));
  ok = ok && worst_lambda <= 1e-12;

  double worst_ema = 0.0;
  for (double alpha : {0.99, 0.9, 0.5}) {
    SegmentationNetwork student = init_segmentation(nn::UNetConfig{1, 2, 2, 2}, 3);
    TeacherState teacher = make_teacher(student.net, alpha);
    Rng rng(11);
    for (double& v : teacher.net.parameters().values()) v = uniform(rng, -1.0, 1.0);
    teacher.net.parameters().refresh();
    const std::vector<double> start = teacher.net.parameters().values();
    const std::vector<double>& theta = student.net.parameters().values();
    for (int k = 1; k <= 200; ++k) {
      ema_update(teacher, student.net.parameters());
      const double ak = std::pow(alpha, k);
      const auto& cur = teacher.net.parameters().values();
      for (std::size_t i = 0; i < cur.size(); ++i) {
        worst_ema = std::max(worst_ema, std::abs(cur[i] - (theta[i] + ak * (start[i] - theta[i]))));
      }
    }
  }
  detail(fmt("EMA closed form max abs error %.3e", worst_ema));
  ok = ok && worst_ema <= 1e-12;

  double worst_lr = 0.0;
  for (int warm : {10, 3, 0}) {
    ExperimentConfig c;
    c.learning_rate = 1e-4;
    c.warmup_epochs = warm;
    c.epochs = 200;
    for (int k = 0; k <= 4000; ++k) {
      const double e = k * 0.05;
      double expect;
      if (e < warm) expect = c.learning_rate * e / warm;
      else expect = 0.5 * c.learning_rate * (1.0 + std::cos(std::numbers::pi * (e - warm) / (c.epochs - warm)));
      worst_lr = std::max(worst_lr, std::abs(learning_rate_at(e, c) - expect));
    }
  }
  detail(fmt("learning rate max abs error %.3e", worst_lr));
  ok = ok && worst_lr <= 1e-12;
  return verdict(3, ok, "schedule, EMA and learning-rate closed forms");
}

// Brute-force oracles, written without the library's helpers.
double oracle_dice(const LabelMap& a, const LabelMap& b) {
  std::set<std::size_t> A, B;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    if (a.data()[i] == 1) A.insert(i);
    if (b.data()[i] == 1) B.insert(i);
  }
  if (A.empty() && B.empty()) return 1.0;
  std::size_t inter = 0;
  for (auto i : A) inter += B.count(i);
  return 2.0 * static_cast<double>(inter) / static_cast<double>(A.size() + B.size());
}

double oracle_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

bool criterion4() {
  Rng rng(404);
  const int trials = 200;
  double worst = 0.0;
  int failures = 0;
  auto check = [&](double got, double want) {
    const double e = std::abs(got - want);
    worst = std::max(worst, e);
    if (!(e <= 1e-9)) ++failures;
  };
  for (int trial = 0; trial < trials; ++trial) {
    const Shape3 s{1 + static_cast<int>(uniform_index(rng, 5)), 1 + static_cast<int>(uniform_index(rng, 5)),
                   1 + static_cast<int>(uniform_index(rng, 5))};
    const double p = uniform(rng, 0.0, 0.6);
    const LabelMap a = testing::random_label(rng, s, p), b = testing::random_label(rng, s, p);
    check(dice_coefficient(a, b), oracle_dice(a, b));

    const int frames = 2 + static_cast<int>(uniform_index(rng, 6));
    std::vector<LabelMap> seq;
    for (int t = 0; t < frames; ++t) seq.push_back(testing::random_label(rng, s, p));
    double td = 0.0;
    for (int t = 0; t + 1 < frames; ++t) td += oracle_dice(seq[t], seq[t + 1]);
    check(temporal_dice(seq), td / (frames - 1));

    // Improvement table against a direct recomputation.
    const int n = 1 + static_cast<int>(uniform_index(rng, 12));
    std::vector<SubjectScore> basic, other;
    for (int i = 0; i < n; ++i) {
      SubjectScore bs;
      bs.subject_id = "s" + std::to_string(i);
      bs.setting = "basic";
      bs.dice_gt = uniform(rng, 0.5, 1.0);
      bs.temporal_dice = uniform(rng, 0.4, 1.0);
      basic.push_back(bs);
      SubjectScore os = bs;
      os.setting = "s_plus_t";
      os.dice_gt = uniform(rng, 0.5, 1.0);
      os.temporal_dice = uniform(rng, 0.4, 1.0);
      other.push_back(os);
    }
    shuffle_range(other.begin(), other.end(), rng);
    const ImprovementTable t = improvement_table(other, basic);
    for (int m = 0; m < 2; ++m) {
      const double thr = m == 0 ? 0.8 : 0.7;
      std::vector<double> strata[3];
      for (const auto& o : other) {
        const SubjectScore* b0 = nullptr;
        for (const auto& bs : basic) {
          if (bs.subject_id == o.subject_id) b0 = &bs;
        }
        const double base = m == 0 ? b0->dice_gt : b0->temporal_dice;
        const double delta = (m == 0 ? o.dice_gt : o.temporal_dice) - base;
        strata[base >= thr ? 1 : 0].push_back(delta);
        strata[2].push_back(delta);
      }
      for (int g = 0; g < 3; ++g) {
        if (t.cells[m][g].n != strata[g].size()) ++failures;
        if (strata[g].empty()) continue;
        check(t.cells[m][g].median, oracle_quantile(strata[g], 0.5));
        check(t.cells[m][g].iqr, oracle_quantile(strata[g], 0.75) - oracle_quantile(strata[g], 0.25));
      }
    }

    // Summary table cells.
    std::map<std::string, std::map<std::string, std::vector<double>>> raw;
    for (const char* method : {"basic", "mean_teacher", "self_training"}) {
      for (const char* level : {"all", "10", "5"}) {
        const int count = static_cast<int>(uniform_index(rng, 6));
        for (int i = 0; i < count; ++i) raw[method][level].push_back(uniform(rng, 0.0, 1.0));
      }
    }
    const SummaryTable st = summarize(raw, {"all", "10", "5"});
    for (const auto& [method, levels] : raw) {
      for (const auto& [level, v] : levels) {
        const auto cell = st.cell(method, level);
        if (v.empty()) {
          if (cell) ++failures;
          continue;
        }
        if (!cell || cell->n != v.size()) {
          ++failures;
          continue;
        }
        long double sum = 0.0L;
        for (double x : v) sum += x;
        const long double mu = sum / static_cast<long double>(v.size());
        long double ss = 0.0L;
        for (double x : v) ss += (x - mu) * (x - mu);
        check(cell->mean, static_cast<double>(mu));
        check(cell->std, static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size()))));
      }
    }
  }
  return verdict(4, failures == 0,
                 std::to_string(trials) + " randomized trials, " + std::to_string(failures) + " mismatches, " +
                     fmt("max abs deviation %.3e", worst));
}

bool criterion5() {
  const auto cohort = desk_cohort(10);
  const auto series = series_of(cohort);
  ExperimentConfig c = desk_config();
  c.fold = 0;
  c.out_dir = g_work / "c5";
  const auto t0 = Clock::now();
  const RegistrationResult r = train_registration(c, series);
  const double secs = seconds_since(t0);
  detail(fmt("registration training %.1f s", secs) + fmt(", final loss %.4f", r.final_loss));

  const RegistrationNetwork net = registration_from(load_checkpoint(r.checkpoint));
  const TrainingData data = prepare_data(series, c);
  auto pairs_of = [&](const std::vector<int>& subjects, std::size_t stride) {
    std::vector<std::pair<int, std::pair<int, int>>> pairs;
    std::size_t k = 0;
    for (int s : subjects) {
      const int n = static_cast<int>(data.series(s).num_frames());
      for (int t = 0; t < n; ++t) {
        for (int dt = 1; dt <= c.delta_t && t + dt < n; ++dt) {
          if (k++ % stride == 0) pairs.push_back({s, {t, t + dt}});
        }
      }
    }
    return pairs;
  };

  double train_smooth = 0.0;
  const auto train_pairs = pairs_of(data.train_subjects, 5);
  for (const auto& [s, tt] : train_pairs) {
    train_smooth += grad_smoothness(forward_reg(net, data.frame(s, tt.first), data.frame(s, tt.second)));
  }
  train_smooth /= static_cast<double>(train_pairs.size());

  std::vector<int> held = data.test_subjects;
  held.insert(held.end(), data.val_subjects.begin(), data.val_subjects.end());
  const auto held_pairs = pairs_of(held, 1);
  std::size_t improved = 0;
  double max_smooth = 0.0, gain = 0.0;
  for (const auto& [s, tt] : held_pairs) {
    const Volume3D& fixed = data.frame(s, tt.first);
    const Volume3D& moving = data.frame(s, tt.second);
    const DisplacementField f = forward_reg(net, fixed, moving);
    const double before = local_ncc(fixed, moving);
    const double after = local_ncc(fixed, warp(f, moving));
    improved += after > before;
    gain += after - before;
    max_smooth = std::max(max_smooth, grad_smoothness(f));
  }
  const double frac = static_cast<double>(improved) / static_cast<double>(held_pairs.size());
  detail(std::to_string(held_pairs.size()) + " held-out pairs from " + std::to_string(held.size()) + " subjects" +
         fmt(", mean NCC gain %.4f", gain / static_cast<double>(held_pairs.size())));
  detail(fmt("training-pair mean smoothness %.5f", train_smooth) + fmt(", held-out max %.5f", max_smooth));
  const bool ok = frac >= 0.9 && max_smooth < 10.0 * train_smooth && secs <= 600.0;
  return verdict(5, ok, fmt("warped NCC higher on %.1f%% of held-out pairs", 100.0 * frac));
}

struct RunScores {
  double dice = 0.0;
  double temporal = 0.0;
  double seconds = 0.0;
};

RunScores run_and_score(const ExperimentConfig& c, const std::vector<PhantomSubject>& cohort) {
  const TrainResult r = train(c, series_of(cohort));
  const auto scores = score_test_subjects(r.best_checkpoint, cohort, c, setting_name(c.setting));
  RunScores out;
  out.seconds = r.seconds;
  for (const auto& s : scores) {
    out.dice += s.dice_gt;
    out.temporal += s.temporal_dice;
  }
  out.dice /= static_cast<double>(scores.size());
  out.temporal /= static_cast<double>(scores.size());
  write_scores_csv(c.out_dir / "test_scores.csv", scores);
  return out;
}

bool criterion6() {
  const auto cohort = desk_cohort(20);
  const ExperimentConfig base = desk_config();
  ExperimentConfig reg_config = base;
  reg_config.out_dir = g_work / "c6" / "registration";
  const RegistrationResult reg = train_registration(reg_config, series_of(cohort));
  detail(fmt("registration pretraining %.1f s", reg.seconds));

  double max_seconds = reg.seconds;
  RunScores mean_basic, mean_st;
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  for (std::uint64_t seed : seeds) {
    ExperimentConfig b = base;
    b.setting = Setting::basic;
    b.seed = seed;
    b.out_dir = g_work / "c6" / ("basic_seed" + std::to_string(seed));
    const RunScores rb = run_and_score(b, cohort);
    detail("basic seed " + std::to_string(seed) + fmt(": dice %.4f", rb.dice) + fmt(", temporal dice %.4f", rb.temporal) +
           fmt(", %.0f s", rb.seconds));

    ExperimentConfig st = base;
    st.setting = Setting::s_plus_t;
    st.lambda0 = 0.01;
    st.seed = seed;
    st.registration_checkpoint = reg.checkpoint;
    st.out_dir = g_work / "c6" / ("s_plus_t_seed" + std::to_string(seed));
    const RunScores rs = run_and_score(st, cohort);
    detail("s_plus_t seed " + std::to_string(seed) + fmt(": dice %.4f", rs.dice) +
           fmt(", temporal dice %.4f", rs.temporal) + fmt(", %.0f s", rs.seconds));

    mean_basic.dice += rb.dice / seeds.size();
    mean_basic.temporal += rb.temporal / seeds.size();
    mean_st.dice += rs.dice / seeds.size();
    mean_st.temporal += rs.temporal / seeds.size();
    max_seconds = std::max({max_seconds, rb.seconds, rs.seconds});
  }
  const bool basic_ok = mean_basic.dice >= 0.80;
  const bool dice_ok = mean_st.dice >= mean_basic.dice - 0.01;
  const bool td_ok = mean_st.temporal >= mean_basic.temporal;
  const bool time_ok = max_seconds <= 7200.0;
  detail(std::string("basic >= 0.80: ") + (basic_ok ? "yes" : "no") + ", s_plus_t dice within 0.01: " +
         (dice_ok ? "yes" : "no") + ", temporal dice not lower: " + (td_ok ? "yes" : "no") +
         fmt(", longest run %.0f s", max_seconds));
  return verdict(6, basic_ok && dice_ok && td_ok && time_ok,
                 fmt("basic dice %.4f", mean_basic.dice) + fmt(" / temporal %.4f", mean_basic.temporal) +
                     fmt(", s_plus_t dice %.4f", mean_st.dice) + fmt(" / temporal %.4f", mean_st.temporal) +
                     " (mean of 3 seeds)");
}

std::vector<std::string> column(const fs::path& csv, const std::string& name) {
  const auto lines = read_lines(csv);
  const auto header = split_csv(lines.at(0));
  const auto idx = static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  std::vector<std::string> out;
  for (std::size_t i = 1; i < lines.size(); ++i) out.push_back(split_csv(lines[i]).at(idx));
  return out;
}

bool criterion7() {
  const auto cohort = small_cohort();
  const auto series = series_of(cohort);
  int trace_mismatch = 0, count_mismatch = 0, dt_violations = 0, leaks = 0;
  std::size_t steps = 0, pairs = 0;
  for (int fold = 0; fold < 5; ++fold) {
    const fs::path dir = g_work / "c7" / ("fold" + std::to_string(fold));
    ExperimentConfig reg = small_config(Setting::basic, dir / "registration");
    reg.fold = fold;
    const RegistrationResult r = train_registration(reg, series);

    ExperimentConfig basic = small_config(Setting::basic, dir / "basic");
    basic.fold = fold;
    basic.lambda0 = 0.0;
    ExperimentConfig spt = basic;
    spt.setting = Setting::s_plus_t;
    spt.registration_checkpoint = r.checkpoint;
    spt.out_dir = dir / "s_plus_t";
    train(basic, series);
    train(spt, series);

    const auto a = column(basic.out_dir / "train_log.csv", "L_sup");
    const auto b = column(spt.out_dir / "train_log.csv", "L_sup");
    if (a != b || a.empty()) ++trace_mismatch;
    steps += a.size();

    const TrainingData data = prepare_data(series, basic);
    const std::set<std::string> test(data.split.test_subjects.begin(), data.split.test_subjects.end());
    for (const auto& run : {basic.out_dir, spt.out_dir}) {
      std::map<std::string, std::pair<int, int>> per_step;
      const auto lines = read_lines(run / "batches.csv");
      for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto cells = split_csv(lines[i]);
        const std::string& role = cells.at(1);
        if (test.count(cells.at(2))) ++leaks;
        if (role == "labeled") {
          ++per_step[cells[0]].first;
        } else {
          ++per_step[cells[0]].second;
          const int dt = std::stoi(cells.at(5));
          ++pairs;
          if (dt == 0 || std::abs(dt) > 5) ++dt_violations;
        }
      }
      if (run == spt.out_dir) {
        for (const auto& [step, counts] : per_step) count_mismatch += counts.first != counts.second;
      }
    }
  }
  detail(std::to_string(steps) + " steps compared across 5 folds, " + std::to_string(pairs) + " temporal pairs logged");
  detail("trace mismatches " + std::to_string(trace_mismatch) + ", |D_l| != |D_u| batches " +
         std::to_string(count_mismatch) + ", pairs outside 5 frames " + std::to_string(dt_violations) +
         ", test-subject rows " + std::to_string(leaks));
  return verdict(7, trace_mismatch == 0 && count_mismatch == 0 && dt_violations == 0 && leaks == 0 && pairs > 0,
                 "zero-weight s_plus_t reproduces the basic supervised trace");
}

bool criterion8() {
  const auto cohort = desk_cohort(20);
  const ExperimentConfig base = [] {
    ExperimentConfig c = desk_config();
    c.epochs = 50;
    c.val_every = 5;
    return c;
  }();
  const std::vector<std::pair<std::string, int>> levels{{"all", 0}, {"10", 10}, {"5", 5}};
  std::map<std::string, std::map<std::string, std::vector<double>>> raw;
  for (const auto& [level, size] : levels) {
    const fs::path dir = g_work / "c8" / ("level_" + level);
    ExperimentConfig stage1 = base;
    stage1.subset_size = size;
    stage1.out_dir = dir / "basic";
    const TrainResult r1 = train(stage1, series_of(cohort));
    for (const auto& s : score_test_subjects(r1.best_checkpoint, cohort, stage1, "basic")) raw["basic"][level].push_back(s.dice_gt);

    ExperimentConfig mt = stage1;
    mt.setting = Setting::mean_teacher;
    mt.out_dir = dir / "mean_teacher";
    const TrainResult rm = train(mt, series_of(cohort));
    for (const auto& s : score_test_subjects(rm.best_checkpoint, cohort, mt, "mean_teacher")) {
      raw["mean_teacher"][level].push_back(s.dice_gt);
    }

    ExperimentConfig st = stage1;
    st.setting = Setting::self_training;
    st.stage1_checkpoint = r1.best_checkpoint;
    st.out_dir = dir / "self_training";
    const TrainResult rs = train(st, series_of(cohort));
    for (const auto& s : score_test_subjects(rs.best_checkpoint, cohort, st, "self_training")) {
      raw["self_training"][level].push_back(s.dice_gt);
    }
    detail("level " + level + fmt(": basic %.0f s", r1.seconds) + fmt(", mean_teacher %.0f s", rm.seconds) +
           fmt(", self_training %.0f s", rs.seconds));
  }
  const SummaryTable table = summarize(raw, {"all", "10", "5"});
  write_table2_csv(g_work / "c8" / "table2.csv", table);
  std::istringstream text(format_table2(table));
  for (std::string line; std::getline(text, line);) detail(line);
  bool ok = true;
  for (const char* method : {"mean_teacher", "self_training"}) {
    for (const auto& [level, size] : levels) {
      const auto cell = table.cell(method, level);
      ok = ok && cell && cell->n >= 3 && std::isfinite(cell->mean) && std::isfinite(cell->std);
    }
  }
  return verdict(8, ok, "mean_teacher and self_training cells for levels all, 10, 5");
}

bool criterion9() {
  const auto cohort = small_cohort();
  const auto series = series_of(cohort);
  const fs::path dir = g_work / "c9";
  const RegistrationResult reg = train_registration(small_config(Setting::basic, dir / "registration"), series);
  int compared = 0, differing = 0;
  fs::path stage1;
  for (Setting s : {Setting::basic, Setting::s, Setting::s_plus, Setting::s_plus_t, Setting::mean_teacher,
                    Setting::self_training}) {
    std::string logs[2][2];
    for (int run = 0; run < 2; ++run) {
      ExperimentConfig c = small_config(s, dir / (setting_name(s) + "_run" + std::to_string(run)));
      c.seed = 42;
      c.registration_checkpoint = reg.checkpoint;
      c.stage1_checkpoint = stage1;
      const TrainResult r = train(c, series);
      if (s == Setting::basic && run == 0) stage1 = r.best_checkpoint;
      for (int f = 0; f < 2; ++f) {
        std::ifstream in(c.out_dir / (f == 0 ? "train_log.csv" : "batches.csv"));
        std::stringstream ss;
        ss << in.rdbuf();
        logs[run][f] = ss.str();
      }
    }
    for (int f = 0; f < 2; ++f) {
      ++compared;
      if (logs[0][f] != logs[1][f] || logs[0][f].empty()) {
        ++differing;
        detail(setting_name(s) + (f == 0 ? " train_log.csv" : " batches.csv") + " differs");
      }
    }
  }
  return verdict(9, differing == 0,
                 std::to_string(compared - differing) + "/" + std::to_string(compared) + " log pairs identical across 6 settings");
}

}  // namespace

int main(int argc, char** argv) {
  simd::enable_flush_to_zero();
  CLI::App app{"cseg acceptance suite"};
  std::vector<int> criteria;
  std::string work = "acceptance_work";
  app.add_option("--criterion", criteria, "criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "scratch directory for runs");
  CLI11_PARSE(app, argc, argv);
  if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  g_work = work;
  fs::create_directories(g_work);

  bool all = true;
  for (int c : criteria) {
    bool ok = false;
    try {
      switch (c) {
        case 1: ok = criterion1(); break;
        case 2: ok = criterion2(); break;
        case 3: ok = criterion3(); break;
        case 4: ok = criterion4(); break;
        case 5: ok = criterion5(); break;
        case 6: ok = criterion6(); break;
        case 7: ok = criterion7(); break;
        case 8: ok = criterion8(); break;
        case 9: ok = criterion9(); break;
      }
    } catch (const std::exception& e) {
      ok = verdict(c, false, std::string("exception: ") + e.what());
    }
    all = all && ok;
  }
  return all ? 0 : 1;
}
