#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cseg/core/folds.hpp"
#include "cseg/core/random.hpp"
#include "cseg/core/volume.hpp"
#include "cseg/losses/losses.hpp"
#include "cseg/models/models.hpp"
#include "cseg/trainer/config.hpp"
#include "cseg/transforms/transforms.hpp"

namespace cseg {

struct LabeledEntry {
  int subject = 0;
  int t = 0;
  const LabelMap* label = nullptr;
  bool pseudo = false;
};

struct FrameId {
  int subject = 0;
  int t = 0;
};

/// Fold-resolved view of a cohort: which frames may enter training and which subjects are
/// held out.
struct TrainingData {
  const std::vector<TimeSeries>* cohort = nullptr;
  DatasetSplit split;
  std::vector<int> train_subjects;
  std::vector<int> val_subjects;
  std::vector<int> test_subjects;
  std::vector<LabeledEntry> labeled_pool;
  std::vector<FrameId> unlabeled_pool;
  std::deque<LabelMap> pseudo_labels;

  const TimeSeries& series(int subject) const { return (*cohort)[static_cast<std::size_t>(subject)]; }
  const Volume3D& frame(int subject, int t) const { return series(subject).frames[static_cast<std::size_t>(t)]; }
};

/// Resolves the configured fold (and optional subset) against the cohort.
TrainingData prepare_data(const std::vector<TimeSeries>& cohort, const ExperimentConfig& config);

/// Adds every unlabeled training frame to the labeled pool with the network's argmax
/// prediction as its label, and empties the unlabeled pool.
void add_pseudo_labels(TrainingData& data, const SegmentationNetwork& stage1);

struct LabeledSample {
  int entry = 0;
  std::optional<PairedTransform> transform;
};

struct UnlabeledSample {
  FrameId frame;
  std::optional<int> partner_t;
  std::optional<PairedTransform> transform;
};

struct Batch {
  std::vector<LabeledSample> labeled;
  std::vector<UnlabeledSample> unlabeled;
};

/// Independent random streams so that enabling a term never shifts the draws of another.
struct SamplerStreams {
  Rng labeled;
  Rng unlabeled;
  Rng transform;

  explicit SamplerStreams(std::uint64_t seed);
};

/// batch_size/2 labeled frames drawn uniformly with replacement; for settings that use
/// unlabeled data, as many unlabeled frames, each with a partner frame t' of the same
/// subject, 1 <= |t' - t| <= delta_t, when the setting needs one.
Batch sample_batch(const TrainingData& data, const ExperimentConfig& config, SamplerStreams& streams);

/// Uniform partner frame with 1 <= |t' - t| <= delta_t; throws DegenerateInputError if none exists.
int sample_partner(Rng& rng, int t, int num_frames, int delta_t);

struct StepLog {
  std::int64_t step = 0;
  double epoch = 0.0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainState {
  std::vector<double> student;
  std::optional<std::vector<double>> teacher;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::int64_t adam_steps = 0;
  std::int64_t step = 0;
  std::string rng_labeled;
  std::string rng_unlabeled;
  std::string rng_transform;
};

/// Owns the student (and teacher), optimizer and sampler state of one run.
class Trainer {
 public:
  Trainer(ExperimentConfig config, TrainingData& data, const RegistrationNetwork* registration = nullptr);

  const ExperimentConfig& config() const { return config_; }
  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const { return total_steps_; }
  double ramp_length() const { return 0.5 * static_cast<double>(total_steps_); }
  std::int64_t step_count() const { return step_; }

  SegmentationNetwork& student() { return student_; }
  const SegmentationNetwork& student() const { return student_; }
  const std::optional<TeacherState>& teacher() const { return teacher_; }

  Batch next_batch() { return sample_batch(data_, config_, streams_); }
  /// One optimizer step on `batch`, then the EMA update when a teacher exists.
  StepLog train_step(const Batch& batch);
  StepLog step() { return train_step(next_batch()); }

  /// Weights actually applied at step S.
  double lambda1_at(std::int64_t step) const;
  double lambda2_at(std::int64_t step) const;

  /// Mean Dice over the labeled frames of validation subjects.
  double validation_dice() const;

  TrainState state() const;
  void restore(const TrainState& s);

  Checkpoint checkpoint() const;

 private:
  bool uses_spatial() const;
  bool uses_temporal() const;
  bool uses_unlabeled() const;
  bool has_teacher() const;

  ExperimentConfig config_;
  TrainingData& data_;
  const RegistrationNetwork* registration_;
  SegmentationNetwork student_;
  std::optional<TeacherState> teacher_;
  Adam adam_;
  SamplerStreams streams_;
  std::int64_t steps_per_epoch_ = 1;
  std::int64_t total_steps_ = 0;
  std::int64_t step_ = 0;
  std::filesystem::path dump_dir_;
};

struct TrainResult {
  std::filesystem::path run_dir;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  double best_val_dice = -1.0;
  int best_epoch = -1;
  double final_val_dice = -1.0;
  std::int64_t steps = 0;
  double seconds = 0.0;
};

/// Full training loop for setting basic/s/s_plus/s_plus_t/mean_teacher/self_training. Writes
/// train_log.csv, batches.csv, summary.json, best.ckpt and final.ckpt into config.out_dir.
TrainResult train(const ExperimentConfig& config, const std::vector<TimeSeries>& cohort);

struct RegistrationResult {
  std::filesystem::path checkpoint;
  double final_loss = 0.0;
  double seconds = 0.0;
  std::int64_t steps = 0;
};

/// Registration pretraining on random frame pairs of the fold's training subjects. Writes
/// <out_dir>/fold_<k>.ckpt and a per-step CSV log next to it.
RegistrationResult train_registration(const ExperimentConfig& config, const std::vector<TimeSeries>& cohort);

struct SweepResult {
  double best_lambda0 = 0.0;
  std::vector<TrainResult> runs;
};

/// Trains config.setting once per sweep_lambda0 value and keeps the best validation Dice.
SweepResult sweep(const ExperimentConfig& config, const std::vector<TimeSeries>& cohort);

std::string rng_to_string(const Rng& rng);
Rng rng_from_string(const std::string& s);

}  // namespace cseg
