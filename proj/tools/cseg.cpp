#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "cseg/core/errors.hpp"
#include "cseg/core/series_io.hpp"
#include "cseg/eval/report.hpp"
#include "cseg/phantom/phantom.hpp"
#include "cseg/simd/kernels.hpp"
#include "cseg/trainer/trainer.hpp"

namespace fs = std::filesystem;
using namespace cseg;

namespace {

// Phantom output directories hold series/ and truth/; plain cohort directories are used as is.
fs::path series_dir(const fs::path& data) { return fs::is_directory(data / "series") ? data / "series" : data; }

std::optional<fs::path> truth_dir(const fs::path& data) {
  if (fs::is_directory(data / "truth")) return data / "truth";
  return std::nullopt;
}

std::vector<TimeSeries> load_data(const fs::path& data) {
  if (data.empty()) throw ConfigError("no data directory given (--data or data_dir)");
  auto cohort = io::load_cohort(series_dir(data));
  if (cohort.empty()) throw IoError("no series found under " + data.string());
  return cohort;
}

Shape3 parse_shape(const std::string& text) {
  Shape3 s;
  if (std::sscanf(text.c_str(), "%d,%d,%d", &s.h, &s.w, &s.d) != 3) throw ArgumentError("--size expects H,W,D");
  return s;
}

struct RunOptions {
  fs::path config;
  fs::path data;
  fs::path out;
  std::string setting;
  int fold = -1;
  long long seed = -1;
  double lambda0 = -1.0;
  int epochs = -1;
  fs::path registration;
  fs::path stage1;
  int subset = -1;
};

void add_run_options(CLI::App* cmd, RunOptions& o, bool single_lambda0 = true) {
  cmd->add_option("--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
  cmd->add_option("--data", o.data, "cohort directory (overrides data_dir)");
  cmd->add_option("--out", o.out, "output directory (overrides out_dir)");
  cmd->add_option("--setting", o.setting, "basic|s|s_plus|s_plus_t|mean_teacher|self_training");
  cmd->add_option("--fold", o.fold, "fold index");
  cmd->add_option("--seed", o.seed, "training seed");
  if (single_lambda0) cmd->add_option("--lambda0", o.lambda0, "consistency weight");
  cmd->add_option("--epochs", o.epochs, "number of epochs");
  cmd->add_option("--registration", o.registration, "registration checkpoint");
  cmd->add_option("--stage1", o.stage1, "stage-1 checkpoint for self_training");
  cmd->add_option("--subset", o.subset, "train+validation subjects kept (0 = all)");
}

ExperimentConfig resolve(const RunOptions& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (!o.setting.empty()) c.setting = parse_setting(o.setting);
  if (o.fold >= 0) c.fold = o.fold;
  if (o.seed >= 0) c.seed = static_cast<std::uint64_t>(o.seed);
  if (o.lambda0 >= 0.0) c.lambda0 = o.lambda0;
  if (o.epochs > 0) c.epochs = o.epochs;
  if (o.subset >= 0) c.subset_size = o.subset;
  if (!o.data.empty()) c.data_dir = o.data;
  if (!o.out.empty()) c.out_dir = o.out;
  if (!o.registration.empty()) c.registration_checkpoint = o.registration;
  if (!o.stage1.empty()) c.stage1_checkpoint = o.stage1;
  c.validate();
  return c;
}

std::string level_name(int subset) { return subset > 0 ? std::to_string(subset) : "all"; }

int cmd_phantom(const fs::path& out, int subjects, int frames, const std::string& size, double label_fraction,
                std::uint64_t seed, double motion, double noise) {
  PhantomConfig pc;
  pc.num_subjects = subjects;
  pc.num_frames = frames;
  pc.grid = parse_shape(size);
  pc.label_fraction = label_fraction;
  pc.seed = seed;
  pc.motion_amplitude = motion;
  pc.noise_sigma = noise;
  pc.validate();
  const auto cohort = generate_cohort(pc);
  write_cohort(out, cohort);
  double maxd = 0.0;
  for (const auto& s : cohort) maxd = std::max(maxd, s.max_displacement);
  std::printf("wrote %d subjects x %d frames (%s) to %s; max displacement %.3f voxels\n", subjects, frames,
              pc.grid.str().c_str(), out.string().c_str(), maxd);
  return 0;
}

int cmd_train(const RunOptions& o) {
  const ExperimentConfig c = resolve(o);
  const auto cohort = load_data(c.data_dir);
  const TrainResult r = train(c, cohort);
  std::printf("%s fold %d seed %llu: %lld steps, best val Dice %.4f at epoch %d, %.1f s\n  %s\n",
              setting_name(c.setting).c_str(), c.fold, static_cast<unsigned long long>(c.seed),
              static_cast<long long>(r.steps), r.best_val_dice, r.best_epoch, r.seconds, r.best_checkpoint.string().c_str());
  return 0;
}

int cmd_train_reg(const RunOptions& o) {
  const ExperimentConfig c = resolve(o);
  const auto cohort = load_data(c.data_dir);
  const RegistrationResult r = train_registration(c, cohort);
  std::printf("registration fold %d: %lld steps, final loss %.5f, %.1f s\n  %s\n", c.fold, static_cast<long long>(r.steps),
              r.final_loss, r.seconds, r.checkpoint.string().c_str());
  return 0;
}

int cmd_sweep(const RunOptions& o, const std::vector<double>& values) {
  ExperimentConfig c = resolve(o);
  if (!values.empty()) c.sweep_lambda0 = values;
  const auto cohort = load_data(c.data_dir);
  const SweepResult r = sweep(c, cohort);
  for (const auto& run : r.runs) std::printf("%s: best val Dice %.4f\n", run.run_dir.string().c_str(), run.best_val_dice);
  std::printf("best lambda0 = %g\n", r.best_lambda0);
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data, const fs::path& out, bool export_logits, bool all_subjects,
             bool dense) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const SegmentationNetwork net = segmentation_from(ckpt);
  const auto cohort = load_data(data);
  const auto truth = truth_dir(data);
  if (dense && !truth) throw ArgumentError("--dense-truth given but " + data.string() + " has no truth/ directory");

  std::set<std::string> wanted;
  if (!all_subjects && ckpt.meta.contains("test_subjects")) {
    for (const auto& s : ckpt.meta.at("test_subjects")) wanted.insert(s.get<std::string>());
  }
  const std::string setting = ckpt.meta.value("setting", std::string("unknown"));
  std::string level = "all";
  if (ckpt.meta.contains("config")) level = level_name(ckpt.meta.at("config").value("subset_size", 0));

  std::vector<SubjectScore> scores;
  for (const TimeSeries& ts : cohort) {
    if (!wanted.empty() && !wanted.count(ts.subject_id)) continue;
    const SeriesPrediction p = predict_series(net, ts, export_logits);
    std::vector<LabelMap> dense_truth;
    if (dense) dense_truth = io::load_truth(*truth, ts.subject_id);
    SubjectScore s = score_subject(ts, p, dense ? &dense_truth : nullptr);
    s.setting = setting;
    s.level = level;
    scores.push_back(s);
    if (export_logits) {
      const fs::path dir = out / "predictions" / ts.subject_id;
      fs::create_directories(dir);
      for (std::size_t t = 0; t < p.labels.size(); ++t) {
        char name[32];
        std::snprintf(name, sizeof name, "%04zu", t);
        io::save_label(dir / (std::string("label_") + name + ".raw"), p.labels[t]);
        io::save_channels(dir / (std::string("logits_") + name + ".raw"), p.logits[t]);
      }
    }
    std::printf("%-14s dice_gt %.4f  temporal_dice %.4f\n", ts.subject_id.c_str(), s.dice_gt, s.temporal_dice);
  }
  if (scores.empty()) throw ArgumentError("eval: no subjects selected");
  write_scores_csv(out / "scores.csv", scores);
  std::vector<double> d, td;
  for (const auto& s : scores) {
    d.push_back(s.dice_gt);
    td.push_back(s.temporal_dice);
  }
  std::printf("%s (%zu subjects): dice_gt %.4f ± %.4f, temporal_dice %.4f ± %.4f\n", setting.c_str(), scores.size(), mean(d),
              population_std(d), mean(td), population_std(td));
  return 0;
}

// Merges every scores.csv below `runs`; repeated (setting, level, subject) rows are averaged.
int cmd_report(const fs::path& runs, const fs::path& out) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<SubjectScore>> rows;
  for (const auto& e : fs::recursive_directory_iterator(runs)) {
    if (!e.is_regular_file() || e.path().filename() != "scores.csv") continue;
    if (fs::exists(out) && fs::equivalent(e.path().parent_path(), out)) continue;
    for (auto& s : read_scores_csv(e.path())) rows[{s.setting, s.level, s.subject_id}].push_back(s);
  }
  if (rows.empty()) throw ArgumentError("report: no scores.csv found under " + runs.string());
  std::vector<SubjectScore> merged;
  for (const auto& [key, v] : rows) {
    SubjectScore s = v.front();
    std::vector<double> d, td;
    for (const auto& x : v) {
      d.push_back(x.dice_gt);
      td.push_back(x.temporal_dice);
    }
    s.dice_gt = mean(d);
    s.temporal_dice = mean(td);
    merged.push_back(s);
  }

  std::map<std::string, std::vector<SubjectScore>> basic_by_level;
  for (const auto& s : merged) {
    if (s.setting == "basic") basic_by_level[s.level].push_back(s);
  }
  for (auto& s : merged) {
    const auto it = basic_by_level.find(s.level);
    if (it == basic_by_level.end()) continue;
    s = group_low_high({s}, it->second).front();
  }
  write_scores_csv(out / "scores.csv", merged);

  std::vector<ImprovementTable> tables;
  if (basic_by_level.count("all")) {
    std::map<std::string, std::vector<SubjectScore>> by_setting;
    for (const auto& s : merged) {
      if (s.level == "all" && s.setting != "basic") by_setting[s.setting].push_back(s);
    }
    for (const auto& [name, v] : by_setting) tables.push_back(improvement_table(v, basic_by_level.at("all")));
  }
  write_table1_csv(out / "table1.csv", tables);

  std::map<std::string, std::map<std::string, std::vector<double>>> cells;
  for (const auto& s : merged) cells[s.setting][s.level].push_back(s.dice_gt);
  const SummaryTable t2 = summarize(cells);
  write_table2_csv(out / "table2.csv", t2);

  const std::string t1 = format_table1(tables);
  const std::string t2s = format_table2(t2);
  std::ofstream(out / "table1.txt") << t1;
  std::ofstream(out / "table2.txt") << t2s;
  std::cout << "Median (IQR) per-subject change against basic\n" << t1 << "\nDice w. ground truth, mean ± std\n" << t2s;
  return 0;
}

int cmd_plot(const fs::path& report, const fs::path& out_in, const std::string& level) {
  const fs::path out = out_in.empty() ? report / "figures" : out_in;
  std::vector<SubjectScore> scores;
  for (auto& s : read_scores_csv(report / "scores.csv")) {
    if (s.level == level) scores.push_back(std::move(s));
  }
  if (scores.empty()) throw ArgumentError("plot: no scores at level " + level);
  for (const auto& p : emit_plots(scores, out)) std::printf("%s\n", p.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  simd::enable_flush_to_zero();
  CLI::App app{"cseg: consistency-regularized segmentation of volumetric time series"};
  app.require_subcommand(1);
  std::string isa;
  app.add_option("--isa", isa, "force scalar|avx2|avx512 kernels");

  auto* phantom = app.add_subcommand("phantom", "synthetic data");
  auto* gen = phantom->add_subcommand("generate", "write a phantom cohort");
  phantom->require_subcommand(1);
  fs::path p_out;
  int p_subjects = 10, p_frames = 30;
  std::string p_size = "32,32,32";
  double p_lf = 0.1, p_motion = 2.0, p_noise = 0.03;
  std::uint64_t p_seed = 0;
  gen->add_option("--out", p_out, "output directory")->required();
  gen->add_option("--subjects", p_subjects, "number of subjects");
  gen->add_option("--frames", p_frames, "frames per series");
  gen->add_option("--size", p_size, "grid H,W,D");
  gen->add_option("--label-fraction", p_lf, "fraction of labeled frames");
  gen->add_option("--seed", p_seed, "seed");
  gen->add_option("--motion", p_motion, "motion amplitude in voxels");
  gen->add_option("--noise", p_noise, "noise standard deviation");

  RunOptions train_o, reg_o, sweep_o;
  add_run_options(app.add_subcommand("train", "train a segmentation model"), train_o);
  add_run_options(app.add_subcommand("train-reg", "pretrain the registration network"), reg_o);
  auto* sweep_cmd = app.add_subcommand("sweep", "train once per lambda0 value, select by validation Dice");
  add_run_options(sweep_cmd, sweep_o, false);
  std::vector<double> sweep_values;
  sweep_cmd->add_option("--lambda0", sweep_values, "comma-separated lambda0 grid")->delimiter(',');

  auto* ev = app.add_subcommand("eval", "score a checkpoint");
  fs::path e_ckpt, e_data, e_out;
  bool e_logits = false, e_all = false, e_dense = false;
  ev->add_option("--checkpoint", e_ckpt, "segmentation checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", e_data, "cohort directory")->required();
  ev->add_option("--out", e_out, "output directory")->required();
  ev->add_flag("--export-logits", e_logits, "write per-frame labels and logits");
  ev->add_flag("--all-subjects", e_all, "score every subject, not only the checkpoint's test split");
  ev->add_flag("--dense-truth", e_dense, "score against every frame of <data>/truth");

  auto* rep = app.add_subcommand("report", "merge scores into the comparison tables");
  fs::path r_runs, r_out;
  rep->add_option("--runs", r_runs, "directory searched for scores.csv")->required()->check(CLI::ExistingDirectory);
  rep->add_option("--out", r_out, "report directory")->required();

  auto* plot = app.add_subcommand("plot", "density and box plots from a report");
  fs::path pl_report, pl_out;
  std::string pl_level = "all";
  plot->add_option("--report", pl_report, "report directory")->required()->check(CLI::ExistingDirectory);
  plot->add_option("--out", pl_out, "figure directory (default <report>/figures)");
  plot->add_option("--level", pl_level, "data-availability level to plot");

  CLI11_PARSE(app, argc, argv);
  try {
    if (!isa.empty()) {
      const std::map<std::string, simd::Isa> names{
          {"scalar", simd::Isa::scalar}, {"avx2", simd::Isa::avx2}, {"avx512", simd::Isa::avx512}};
      const auto it = names.find(isa);
      if (it == names.end()) throw ArgumentError("unknown --isa " + isa);
      simd::set_active_isa(it->second);
    }
    if (gen->parsed()) return cmd_phantom(p_out, p_subjects, p_frames, p_size, p_lf, p_seed, p_motion, p_noise);
    if (app.got_subcommand("train")) return cmd_train(train_o);
    if (app.got_subcommand("train-reg")) return cmd_train_reg(reg_o);
    if (app.got_subcommand("sweep")) return cmd_sweep(sweep_o, sweep_values);
    if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_out, e_logits, e_all, e_dense);
    if (rep->parsed()) {
      fs::create_directories(r_out);
      return cmd_report(r_runs, r_out);
    }
    if (plot->parsed()) return cmd_plot(pl_report, pl_out, pl_level);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
