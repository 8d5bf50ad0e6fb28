#include "cseg/trainer/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <sstream>

#include "cseg/core/errors.hpp"
#include "cseg/eval/metrics.hpp"
#include "cseg/warp/warp.hpp"

namespace cseg {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

enum StreamTag : std::uint64_t {
  kInitTag = 0x5EED1,
  kLabeledTag = 0x1AB,
  kUnlabeledTag = 0x0BAB,
  kTransformTag = 0x7F0,
  kRegInitTag = 0x4E61,
  kRegPairTag = 0x4E62,
  kSubsetTag = 0x5B5E7,
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

LabelMap transform_label(const GeometricPlan& plan, const LabelMap& y) {
  LabelMap out(y.shape(), y.num_classes());
  const auto taps = static_cast<std::size_t>(plan.taps);
  for (std::size_t p = 0; p < y.shape().voxels(); ++p) {
    if (!plan.valid[p]) continue;
    // Nearest tap for interpolating plans.
    std::size_t best = 0;
    for (std::size_t t = 1; t < taps; ++t) {
      if (plan.weight[p * taps + t] > plan.weight[p * taps + best]) best = t;
    }
    out.data()[p] = y.data()[static_cast<std::size_t>(plan.index[p * taps + best])];
  }
  return out;
}

// One student forward pass kept alive until its gradient has been propagated.
struct Pass {
  Volume3D input;
  std::unique_ptr<nn::UNetTape> tape;
  LogitMap logits;
  std::vector<double> grad;
};

struct TransformedInput {
  GeometricPlan plan;
  Volume3D image;
  VoxelMask valid;
};

TransformedInput transform_input(const PairedTransform& t, const Volume3D& x) {
  TransformedInput r;
  r.plan = make_plan(t.geometric, x.shape());
  r.image = Volume3D(x.shape(), x.spacing());
  apply_plan(r.plan, x.data(), r.image.data());
  apply_intensity(t.intensity, r.image.data());
  r.valid = r.plan.valid;
  return r;
}

void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  if (src.empty()) return;
  if (dst.empty()) dst.assign(src.size(), 0.0);
  for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
}

json transform_json(const PairedTransform& t) {
  const auto& g = t.geometric;
  return {{"flip", g.flip},
          {"quarter_turns", g.quarter_turns},
          {"angles_degrees", g.angles_degrees},
          {"continuous", g.continuous},
          {"translation", g.translation},
          {"gamma", t.intensity.gamma},
          {"noise_sigma", t.intensity.noise_sigma},
          {"noise_seed", t.intensity.noise_seed}};
}

std::string transform_summary(const std::optional<PairedTransform>& t) {
  if (!t) return ",,,,";
  const auto& g = t->geometric;
  std::ostringstream s;
  s << g.flip[0] << g.flip[1] << g.flip[2] << ',';
  if (g.continuous) {
    s << fmt(g.angles_degrees[0]) << ' ' << fmt(g.angles_degrees[1]) << ' ' << fmt(g.angles_degrees[2]);
  } else {
    s << g.quarter_turns[0] << ' ' << g.quarter_turns[1] << ' ' << g.quarter_turns[2];
  }
  s << ',' << g.translation[0] << ' ' << g.translation[1] << ' ' << g.translation[2] << ',' << fmt(t->intensity.gamma)
    << ',' << fmt(t->intensity.noise_sigma);
  return s.str();
}

}  // namespace

TrainingData prepare_data(const std::vector<TimeSeries>& cohort, const ExperimentConfig& config) {
  if (cohort.empty()) throw ConfigError("empty cohort");
  std::vector<std::string> ids;
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    cohort[i].validate();
    if (!index.emplace(cohort[i].subject_id, static_cast<int>(i)).second) {
      throw ValidationError("duplicate subject id " + cohort[i].subject_id);
    }
    ids.push_back(cohort[i].subject_id);
  }
  TrainingData d;
  d.cohort = &cohort;
  d.split = make_folds(ids, config.num_folds, config.fold_seed, config.val_fraction).at(static_cast<std::size_t>(config.fold));
  if (config.subset_size > 0) {
    d.split = subsample_split(d.split, config.subset_size,
                              derive_seed(config.fold_seed, {kSubsetTag, static_cast<std::uint64_t>(config.fold)}),
                              config.val_fraction);
  }
  auto resolve = [&](const std::vector<std::string>& names) {
    std::vector<int> out;
    for (const auto& n : names) out.push_back(index.at(n));
    std::sort(out.begin(), out.end());
    return out;
  };
  d.train_subjects = resolve(d.split.train_subjects);
  d.val_subjects = resolve(d.split.val_subjects);
  d.test_subjects = resolve(d.split.test_subjects);
  for (int s : d.train_subjects) {
    const TimeSeries& ts = d.series(s);
    for (const auto& [t, label] : ts.labels) d.labeled_pool.push_back({s, t, &label, false});
    for (int t : ts.unlabeled_indices()) d.unlabeled_pool.push_back({s, t});
  }
  return d;
}

void add_pseudo_labels(TrainingData& data, const SegmentationNetwork& stage1) {
  for (const FrameId& f : data.unlabeled_pool) {
    data.pseudo_labels.push_back(logits_to_labels(forward_seg(stage1, data.frame(f.subject, f.t))));
    data.labeled_pool.push_back({f.subject, f.t, &data.pseudo_labels.back(), true});
  }
  data.unlabeled_pool.clear();
}

SamplerStreams::SamplerStreams(std::uint64_t seed)
    : labeled(derive_seed(seed, {kLabeledTag})),
      unlabeled(derive_seed(seed, {kUnlabeledTag})),
      transform(derive_seed(seed, {kTransformTag})) {}

int sample_partner(Rng& rng, int t, int num_frames, int delta_t) {
  const int lo = std::max(0, t - delta_t);
  const int hi = std::min(num_frames - 1, t + delta_t);
  const int candidates = hi - lo;  // window minus t itself
  if (candidates <= 0) throw DegenerateInputError("no partner frame within delta_t of frame " + std::to_string(t));
  int k = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(candidates))) + lo;
  if (k >= t) ++k;
  return k;
}

Batch sample_batch(const TrainingData& data, const ExperimentConfig& config, SamplerStreams& streams) {
  if (data.labeled_pool.empty()) throw ConfigError("labeled pool is empty");
  const Setting s = config.setting;
  const bool spatial = s == Setting::s || s == Setting::s_plus || s == Setting::s_plus_t;
  const bool unlabeled = s == Setting::s_plus || s == Setting::s_plus_t || s == Setting::mean_teacher;
  const bool temporal = s == Setting::s_plus_t;
  const int half = config.batch_size / 2;
  Batch b;
  for (int i = 0; i < half; ++i) {
    LabeledSample ls;
    ls.entry = static_cast<int>(uniform_index(streams.labeled, data.labeled_pool.size()));
    b.labeled.push_back(ls);
  }
  if (unlabeled) {
    if (data.unlabeled_pool.empty()) throw ConfigError("setting " + setting_name(s) + " needs unlabeled frames");
    for (int i = 0; i < half; ++i) {
      UnlabeledSample us;
      us.frame = data.unlabeled_pool[uniform_index(streams.unlabeled, data.unlabeled_pool.size())];
      if (temporal) {
        us.partner_t = sample_partner(streams.unlabeled, us.frame.t,
                                      static_cast<int>(data.series(us.frame.subject).num_frames()), config.delta_t);
      }
      b.unlabeled.push_back(us);
    }
  }
  // Transforms come last from their own stream, labeled samples first.
  if (spatial || config.augment_supervised) {
    for (auto& ls : b.labeled) {
      const LabeledEntry& e = data.labeled_pool[static_cast<std::size_t>(ls.entry)];
      ls.transform = sample_transform(streams.transform, config.transforms, data.frame(e.subject, e.t).shape());
    }
  }
  if (spatial) {
    for (auto& us : b.unlabeled) {
      us.transform = sample_transform(streams.transform, config.transforms, data.frame(us.frame.subject, us.frame.t).shape());
    }
  }
  return b;
}

Trainer::Trainer(ExperimentConfig config, TrainingData& data, const RegistrationNetwork* registration)
    : config_(std::move(config)),
      data_(data),
      registration_(registration),
      streams_(config_.seed) {
  config_.validate();
  if (config_.setting == Setting::s_plus_t && !registration_) {
    throw ConfigError("setting s_plus_t needs a registration checkpoint");
  }
  if (data_.labeled_pool.empty()) throw ConfigError("no labeled frames among the training subjects");
  if (uses_unlabeled() && data_.unlabeled_pool.empty()) {
    throw ConfigError("setting " + setting_name(config_.setting) + " needs unlabeled training frames");
  }
  student_ = init_segmentation(config_.seg_arch, derive_seed(config_.seed, {kInitTag}));
  if (has_teacher()) teacher_ = make_teacher(student_.net, config_.ema_alpha);
  adam_ = Adam(student_.net.parameters().size(), AdamConfig{0.9, 0.999, 1e-8, config_.weight_decay});
  const auto half = static_cast<std::int64_t>(config_.batch_size / 2);
  steps_per_epoch_ = (static_cast<std::int64_t>(data_.labeled_pool.size()) + half - 1) / half;
  total_steps_ = steps_per_epoch_ * config_.epochs;
  dump_dir_ = config_.out_dir;
}

bool Trainer::uses_spatial() const {
  return config_.setting == Setting::s || config_.setting == Setting::s_plus || config_.setting == Setting::s_plus_t;
}
bool Trainer::uses_temporal() const { return config_.setting == Setting::s_plus_t; }
bool Trainer::uses_unlabeled() const {
  return config_.setting == Setting::s_plus || config_.setting == Setting::s_plus_t ||
         config_.setting == Setting::mean_teacher;
}
bool Trainer::has_teacher() const {
  return config_.setting == Setting::mean_teacher || (config_.teacher_student && uses_spatial());
}

double Trainer::lambda1_at(std::int64_t step) const {
  if (!uses_spatial() && config_.setting != Setting::mean_teacher) return 0.0;
  const double ramp = ramp_length();
  const double base = config_.lambda1_base_value();
  return ramp > 0.0 ? lambda_schedule(static_cast<double>(step), ramp, base) : base;
}

double Trainer::lambda2_at(std::int64_t step) const {
  if (!uses_temporal()) return 0.0;
  const double ramp = ramp_length();
  const double base = config_.lambda2_base_value();
  return ramp > 0.0 ? lambda_schedule(static_cast<double>(step), ramp, base) : base;
}

StepLog Trainer::train_step(const Batch& batch) {
  const bool ts = has_teacher();
  const bool mean_teacher = config_.setting == Setting::mean_teacher;
  const nn::UNet& net = student_.net;

  std::deque<Pass> passes;
  auto run_student = [&](const Volume3D& x) -> int {
    Pass p;
    p.input = x;
    p.tape = std::make_unique<nn::UNetTape>();
    p.logits = LogitMap(net.forward(as_tensor(x), p.tape.get()));
    passes.push_back(std::move(p));
    return static_cast<int>(passes.size()) - 1;
  };
  auto run_teacher = [&](const Volume3D& x) { return forward_teacher(*teacher_, x); };

  // Per-term bookkeeping: pass index of each student branch (-1 for teacher outputs).
  struct LabeledRefs {
    int sup = -1, aug = -1, ref = -1;
    std::unique_ptr<TransformedInput> tx;
    LogitMap ref_aug;
    LabelMap label_aug;
    VoxelMask full;
  };
  struct UnlabeledRefs {
    int aug = -1, ref = -1, plain = -1, partner = -1;
    std::unique_ptr<TransformedInput> tx;
    LogitMap ref_aug;
    LogitMap ref_warped;
    DisplacementField phi;
    VoxelMask temporal_mask;
    VoxelMask full;
  };
  std::vector<LabeledRefs> lr(batch.labeled.size());
  std::vector<UnlabeledRefs> ur(batch.unlabeled.size());
  std::vector<LabeledTerm> lterms(batch.labeled.size());
  std::vector<UnlabeledTerm> uterms(batch.unlabeled.size());

  for (std::size_t i = 0; i < batch.labeled.size(); ++i) {
    const LabeledSample& s = batch.labeled[i];
    const LabeledEntry& e = data_.labeled_pool[static_cast<std::size_t>(s.entry)];
    const Volume3D& x = data_.frame(e.subject, e.t);
    LabeledRefs& r = lr[i];
    if (s.transform) r.tx = std::make_unique<TransformedInput>(transform_input(*s.transform, x));
    if (config_.augment_supervised && r.tx) {
      r.sup = run_student(r.tx->image);
      r.label_aug = transform_label(r.tx->plan, *e.label);
    } else {
      r.sup = run_student(x);
    }
    if (uses_spatial() && r.tx) {
      r.aug = (config_.augment_supervised) ? r.sup : run_student(r.tx->image);
      LogitMap ref;
      if (ts) {
        ref = run_teacher(x);
      } else {
        r.ref = config_.augment_supervised ? run_student(x) : r.sup;
        ref = passes[static_cast<std::size_t>(r.ref)].logits;
      }
      r.ref_aug = LogitMap(apply_plan_channels(r.tx->plan, ref));
    } else if (mean_teacher) {
      r.aug = r.sup;
      r.ref_aug = run_teacher(x);
      r.full.assign(x.shape().voxels(), 1);
    }
  }
  for (std::size_t j = 0; j < batch.unlabeled.size(); ++j) {
    const UnlabeledSample& s = batch.unlabeled[j];
    const Volume3D& x = data_.frame(s.frame.subject, s.frame.t);
    UnlabeledRefs& r = ur[j];
    if (mean_teacher) {
      r.aug = run_student(x);
      r.ref_aug = run_teacher(x);
      r.full.assign(x.shape().voxels(), 1);
      continue;
    }
    if (s.transform) {
      r.tx = std::make_unique<TransformedInput>(transform_input(*s.transform, x));
      r.aug = run_student(r.tx->image);
      LogitMap ref;
      if (ts) {
        ref = run_teacher(x);
      } else {
        r.plain = run_student(x);
        r.ref = r.plain;
        ref = passes[static_cast<std::size_t>(r.ref)].logits;
      }
      r.ref_aug = LogitMap(apply_plan_channels(r.tx->plan, ref));
    }
    if (s.partner_t) {
      const Volume3D& x2 = data_.frame(s.frame.subject, *s.partner_t);
      if (r.plain < 0) r.plain = run_student(x);
      LogitMap ref2;
      if (ts) {
        ref2 = run_teacher(x2);
      } else {
        r.partner = run_student(x2);
        ref2 = passes[static_cast<std::size_t>(r.partner)].logits;
      }
      r.phi = forward_reg(*registration_, x, x2);
      r.ref_warped = warp(r.phi, ref2);
      r.temporal_mask = warp_valid_mask(r.phi);
    }
  }

  // Terms reference logits stored in `passes` (a deque, so addresses are stable).
  auto logits_of = [&](int pass) -> const LogitMap* { return pass >= 0 ? &passes[static_cast<std::size_t>(pass)].logits : nullptr; };
  for (std::size_t i = 0; i < lr.size(); ++i) {
    LabeledRefs& r = lr[i];
    const LabeledEntry& e = data_.labeled_pool[static_cast<std::size_t>(batch.labeled[i].entry)];
    LabeledTerm& t = lterms[i];
    t.student = logits_of(r.sup);
    t.label = (config_.augment_supervised && r.tx) ? &r.label_aug : e.label;
    if (r.aug >= 0) {
      t.student_aug = logits_of(r.aug);
      t.ref_aug = &r.ref_aug;
      t.spatial_mask = mean_teacher ? &r.full : &r.tx->valid;
    }
  }
  for (std::size_t j = 0; j < ur.size(); ++j) {
    UnlabeledRefs& r = ur[j];
    UnlabeledTerm& t = uterms[j];
    if (r.aug >= 0) {
      t.student_aug = logits_of(r.aug);
      t.ref_aug = &r.ref_aug;
      t.spatial_mask = mean_teacher ? &r.full : &r.tx->valid;
    }
    if (batch.unlabeled[j].partner_t) {
      t.student = logits_of(r.plain);
      t.ref_warped = &r.ref_warped;
      t.temporal_mask = &r.temporal_mask;
    }
  }

  const double lam1 = lambda1_at(step_);
  const double lam2 = lambda2_at(step_);
  CombinedGrads grads;
  const LossBreakdown loss = combined_loss(lterms, uterms, lam1, lam2, &grads);

  if (!std::isfinite(loss.total)) {
    json dump{{"step", step_}, {"sup", loss.sup}, {"spatial", loss.spatial}, {"temporal", loss.temporal}};
    for (const auto& s : batch.labeled) {
      const auto& e = data_.labeled_pool[static_cast<std::size_t>(s.entry)];
      dump["labeled"].push_back({{"subject", data_.series(e.subject).subject_id},
                                 {"t", e.t},
                                 {"transform", s.transform ? transform_json(*s.transform) : json()}});
    }
    for (const auto& s : batch.unlabeled) {
      dump["unlabeled"].push_back({{"subject", data_.series(s.frame.subject).subject_id},
                                   {"t", s.frame.t},
                                   {"partner_t", s.partner_t ? json(*s.partner_t) : json()},
                                   {"transform", s.transform ? transform_json(*s.transform) : json()}});
    }
    std::filesystem::create_directories(dump_dir_);
    const auto path = dump_dir_ / ("nonfinite_step_" + std::to_string(step_) + ".json");
    std::ofstream(path) << dump.dump(2);
    throw NumericalError("non-finite loss at step " + std::to_string(step_) + "; batch dumped to " + path.string());
  }

  auto grad_of = [&](int pass) -> std::vector<double>& { return passes[static_cast<std::size_t>(pass)].grad; };
  for (std::size_t i = 0; i < lr.size(); ++i) {
    LabeledRefs& r = lr[i];
    auto& g = grads.labeled[i];
    add_into(grad_of(r.sup), g.student);
    if (r.aug >= 0) add_into(grad_of(r.aug), g.student_aug);
    if (r.ref >= 0 && !g.ref_aug.empty()) {
      ChannelVolume gz(r.ref_aug.channels(), r.ref_aug.shape());
      for (std::size_t k = 0; k < gz.size(); ++k) gz.data()[k] = static_cast<float>(g.ref_aug[k]);
      const ChannelVolume back = apply_plan_channels_adjoint(r.tx->plan, gz);
      std::vector<double> bd(back.data().begin(), back.data().end());
      add_into(grad_of(r.ref), bd);
    }
  }
  for (std::size_t j = 0; j < ur.size(); ++j) {
    UnlabeledRefs& r = ur[j];
    auto& g = grads.unlabeled[j];
    if (r.aug >= 0) add_into(grad_of(r.aug), g.student_aug);
    if (r.ref >= 0 && !g.ref_aug.empty()) {
      ChannelVolume gz(r.ref_aug.channels(), r.ref_aug.shape());
      for (std::size_t k = 0; k < gz.size(); ++k) gz.data()[k] = static_cast<float>(g.ref_aug[k]);
      const ChannelVolume back = apply_plan_channels_adjoint(r.tx->plan, gz);
      std::vector<double> bd(back.data().begin(), back.data().end());
      add_into(grad_of(r.ref), bd);
    }
    if (r.plain >= 0) add_into(grad_of(r.plain), g.student);
    if (r.partner >= 0 && !g.ref_warped.empty()) {
      const std::size_t nv = r.ref_warped.shape().voxels();
      std::vector<float> back(g.ref_warped.size(), 0.0f);
      std::vector<float> gc(nv);
      for (int c = 0; c < r.ref_warped.channels(); ++c) {
        for (std::size_t p = 0; p < nv; ++p) gc[p] = static_cast<float>(g.ref_warped[c * nv + p]);
        warp_adjoint_values(r.phi, gc, std::span<float>(back).subspan(c * nv, nv));
      }
      std::vector<double> bd(back.begin(), back.end());
      add_into(grad_of(r.partner), bd);
    }
  }

  std::vector<double> param_grad(net.parameters().size(), 0.0);
  for (Pass& p : passes) {
    if (!p.grad.empty()) {
      nn::Tensor g(p.logits.channels(), p.logits.shape());
      for (std::size_t k = 0; k < g.size(); ++k) g.data()[k] = static_cast<float>(p.grad[k]);
      net.backward(*p.tape, g, param_grad);
    }
    p.tape.reset();
  }

  StepLog log;
  log.step = step_;
  log.epoch = static_cast<double>(step_) / static_cast<double>(steps_per_epoch_);
  log.lr = learning_rate_at(log.epoch, config_);
  log.loss = loss;
  adam_.step(student_.net.parameters(), param_grad, log.lr);
  if (teacher_) ema_update(*teacher_, student_.net.parameters());
  ++step_;
  return log;
}

double Trainer::validation_dice() const {
  std::vector<double> scores;
  for (int s : data_.val_subjects) {
    const TimeSeries& ts = data_.series(s);
    for (const auto& [t, label] : ts.labels) {
      scores.push_back(dice_coefficient(logits_to_labels(forward_seg(student_, ts.frames[static_cast<std::size_t>(t)])), label));
    }
  }
  return scores.empty() ? -1.0 : mean(scores);
}

std::string rng_to_string(const Rng& rng) {
  std::ostringstream s;
  s << rng;
  return s.str();
}

Rng rng_from_string(const std::string& text) {
  Rng rng;
  std::istringstream s(text);
  s >> rng;
  if (!s) throw IoError("corrupt random-generator state");
  return rng;
}

TrainState Trainer::state() const {
  TrainState s;
  s.student = student_.net.parameters().values();
  if (teacher_) s.teacher = teacher_->net.parameters().values();
  s.adam_m = adam_.first_moment();
  s.adam_v = adam_.second_moment();
  s.adam_steps = adam_.steps();
  s.step = step_;
  s.rng_labeled = rng_to_string(streams_.labeled);
  s.rng_unlabeled = rng_to_string(streams_.unlabeled);
  s.rng_transform = rng_to_string(streams_.transform);
  return s;
}

void Trainer::restore(const TrainState& s) {
  auto& p = student_.net.parameters();
  if (s.student.size() != p.size()) throw ArgumentError("restore: parameter count mismatch");
  p.values() = s.student;
  p.refresh();
  if (teacher_) {
    if (!s.teacher) throw ArgumentError("restore: state has no teacher");
    teacher_->net.parameters().values() = *s.teacher;
    teacher_->net.parameters().refresh();
  }
  adam_.restore(s.adam_m, s.adam_v, s.adam_steps);
  step_ = s.step;
  streams_.labeled = rng_from_string(s.rng_labeled);
  streams_.unlabeled = rng_from_string(s.rng_unlabeled);
  streams_.transform = rng_from_string(s.rng_transform);
}

Checkpoint Trainer::checkpoint() const {
  const TrainState s = state();
  Checkpoint c;
  c.kind = "segmentation";
  c.arch = student_.net.config();
  c.params = s.student;
  c.teacher = s.teacher;
  c.ema_alpha = teacher_ ? teacher_->alpha : 0.0;
  c.adam_m = s.adam_m;
  c.adam_v = s.adam_v;
  c.adam_steps = s.adam_steps;
  c.step = s.step;
  c.meta = {{"setting", setting_name(config_.setting)},
            {"fold", config_.fold},
            {"seed", config_.seed},
            {"lambda0", config_.lambda0},
            {"train_subjects", data_.split.train_subjects},
            {"val_subjects", data_.split.val_subjects},
            {"test_subjects", data_.split.test_subjects},
            {"rng_labeled", s.rng_labeled},
            {"rng_unlabeled", s.rng_unlabeled},
            {"rng_transform", s.rng_transform},
            {"config", to_json(config_)}};
  return c;
}

TrainResult train(const ExperimentConfig& config_in, const std::vector<TimeSeries>& cohort) {
  ExperimentConfig config = config_in;
  config.validate();
  const auto start = Clock::now();
  TrainingData data = prepare_data(cohort, config);

  std::optional<RegistrationNetwork> reg;
  if (config.setting == Setting::s_plus_t) {
    if (config.registration_checkpoint.empty() || !std::filesystem::exists(config.registration_checkpoint)) {
      throw ConfigError("setting s_plus_t needs an existing registration checkpoint (got '" +
                        config.registration_checkpoint.string() + "')");
    }
    reg = registration_from(load_checkpoint(config.registration_checkpoint));
  }
  std::size_t pseudo_count = 0;
  if (config.setting == Setting::self_training) {
    if (config.stage1_checkpoint.empty() || !std::filesystem::exists(config.stage1_checkpoint)) {
      throw ConfigError("self_training needs an existing stage-1 checkpoint (got '" + config.stage1_checkpoint.string() + "')");
    }
    const SegmentationNetwork stage1 = segmentation_from(load_checkpoint(config.stage1_checkpoint));
    pseudo_count = data.unlabeled_pool.size();
    add_pseudo_labels(data, stage1);
  }

  std::filesystem::create_directories(config.out_dir);
  Trainer trainer(config, data, reg ? &*reg : nullptr);

  std::ofstream log(config.out_dir / "train_log.csv");
  log << "step,epoch,L_sup,L_s,L_t,lambda1,lambda2,lr,total\n";
  std::ofstream batches;
  if (config.log_batches) {
    batches.open(config.out_dir / "batches.csv");
    batches << "step,role,subject,t,partner_t,dt,pseudo,flip,rotation,translation,gamma,noise_sigma\n";
  }

  TrainResult result;
  result.run_dir = config.out_dir;
  std::vector<double> best_params = trainer.student().net.parameters().values();
  auto consider = [&](int epoch) {
    const double v = trainer.validation_dice();
    result.final_val_dice = v;
    if (result.best_epoch < 0 || v > result.best_val_dice) {
      result.best_val_dice = v;
      result.best_epoch = epoch;
      best_params = trainer.student().net.parameters().values();
    }
  };
  consider(0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::int64_t k = 0; k < trainer.steps_per_epoch(); ++k) {
      const Batch batch = trainer.next_batch();
      const StepLog s = trainer.train_step(batch);
      log << s.step << ',' << fmt(s.epoch) << ',' << fmt(s.loss.sup) << ',' << fmt(s.loss.spatial) << ','
          << fmt(s.loss.temporal) << ',' << fmt(s.loss.lambda1) << ',' << fmt(s.loss.lambda2) << ',' << fmt(s.lr) << ','
          << fmt(s.loss.total) << '\n';
      if (config.log_batches) {
        for (const auto& ls : batch.labeled) {
          const LabeledEntry& e = data.labeled_pool[static_cast<std::size_t>(ls.entry)];
          batches << s.step << ",labeled," << data.series(e.subject).subject_id << ',' << e.t << ",,," << e.pseudo << ','
                  << transform_summary(ls.transform) << '\n';
        }
        for (const auto& us : batch.unlabeled) {
          batches << s.step << ",unlabeled," << data.series(us.frame.subject).subject_id << ',' << us.frame.t << ',';
          if (us.partner_t) batches << *us.partner_t << ',' << (*us.partner_t - us.frame.t);
          else batches << ',';
          batches << ",0," << transform_summary(us.transform) << '\n';
        }
      }
    }
    if ((epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs) consider(epoch + 1);
  }
  log.flush();

  Checkpoint final_ckpt = trainer.checkpoint();
  final_ckpt.meta["epoch"] = config.epochs;
  final_ckpt.meta["val_dice"] = result.final_val_dice;
  result.final_checkpoint = config.out_dir / "final.ckpt";
  save_checkpoint(result.final_checkpoint, final_ckpt);

  Checkpoint best = final_ckpt;
  best.params = best_params;
  best.teacher.reset();
  best.adam_m.clear();
  best.adam_v.clear();
  best.meta["epoch"] = result.best_epoch;
  best.meta["val_dice"] = result.best_val_dice;
  result.best_checkpoint = config.out_dir / "best.ckpt";
  save_checkpoint(result.best_checkpoint, best);

  result.steps = trainer.step_count();
  result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  json summary{{"setting", setting_name(config.setting)},
               {"fold", config.fold},
               {"seed", config.seed},
               {"lambda0", config.lambda0},
               {"steps", result.steps},
               {"steps_per_epoch", trainer.steps_per_epoch()},
               {"ramp_length", trainer.ramp_length()},
               {"labeled_pool", data.labeled_pool.size()},
               {"pseudo_labeled", pseudo_count},
               {"unlabeled_pool", data.unlabeled_pool.size()},
               {"best_epoch", result.best_epoch},
               {"best_val_dice", result.best_val_dice},
               {"final_val_dice", result.final_val_dice},
               {"train_subjects", data.split.train_subjects},
               {"val_subjects", data.split.val_subjects},
               {"test_subjects", data.split.test_subjects},
               {"seconds", result.seconds},
               {"config", to_json(config)}};
  std::ofstream(config.out_dir / "summary.json") << summary.dump(2) << '\n';
  return result;
}

RegistrationResult train_registration(const ExperimentConfig& config_in, const std::vector<TimeSeries>& cohort) {
  ExperimentConfig config = config_in;
  config.validate();
  const auto start = Clock::now();
  const TrainingData data = prepare_data(cohort, config);
  if (data.train_subjects.empty()) throw ConfigError("registration: fold has no training subjects");

  RegistrationNetwork net = init_registration(config.reg_arch, derive_seed(config.seed, {kRegInitTag}));
  Adam adam(net.net.parameters().size(), AdamConfig{0.9, 0.999, 1e-8, config.weight_decay});
  Rng rng(derive_seed(config.seed, {kRegPairTag, static_cast<std::uint64_t>(config.fold)}));

  std::filesystem::create_directories(config.out_dir);
  const std::string stem = "fold_" + std::to_string(config.fold);
  std::ofstream log(config.out_dir / (stem + "_log.csv"));
  log << "step,loss,ncc,smoothness\n";

  RegistrationResult result;
  const double scale = 1.0 / config.reg_batch_size;
  for (int step = 0; step < config.reg_steps; ++step) {
    std::vector<double> grad(net.net.parameters().size(), 0.0);
    RegistrationLoss mean_loss;
    for (int b = 0; b < config.reg_batch_size; ++b) {
      const int s = data.train_subjects[uniform_index(rng, data.train_subjects.size())];
      const TimeSeries& ts = data.series(s);
      const auto n = static_cast<std::uint64_t>(ts.num_frames());
      const int t = static_cast<int>(uniform_index(rng, n));
      int t2 = static_cast<int>(uniform_index(rng, n - 1));
      if (t2 >= t) ++t2;
      const Volume3D& fixed = ts.frames[static_cast<std::size_t>(t)];
      const Volume3D& moving = ts.frames[static_cast<std::size_t>(t2)];
      nn::UNetTape tape;
      const DisplacementField field(net.net.forward(stack_pair(fixed, moving), &tape));
      std::vector<double> gfield(field.size(), 0.0);
      const RegistrationLoss l = registration_loss_grad(fixed, moving, field, config.reg_lambda, gfield);
      if (!std::isfinite(l.total)) {
        throw NumericalError("registration: non-finite loss at step " + std::to_string(step) + " (" + ts.subject_id +
                             ", frames " + std::to_string(t) + "/" + std::to_string(t2) + ")");
      }
      nn::Tensor g(3, field.shape());
      for (std::size_t k = 0; k < g.size(); ++k) g.data()[k] = static_cast<float>(scale * gfield[k]);
      net.net.backward(tape, g, grad);
      mean_loss.total += scale * l.total;
      mean_loss.ncc += scale * l.ncc;
      mean_loss.smoothness += scale * l.smoothness;
    }
    adam.step(net.net.parameters(), grad, config.reg_learning_rate);
    log << step << ',' << fmt(mean_loss.total) << ',' << fmt(mean_loss.ncc) << ',' << fmt(mean_loss.smoothness) << '\n';
    result.final_loss = mean_loss.total;
  }

  Checkpoint c;
  c.kind = "registration";
  c.arch = net.net.config();
  c.params = net.net.parameters().values();
  c.adam_m = adam.first_moment();
  c.adam_v = adam.second_moment();
  c.adam_steps = adam.steps();
  c.step = config.reg_steps;
  c.meta = {{"fold", config.fold},
            {"seed", config.seed},
            {"train_subjects", data.split.train_subjects},
            {"val_subjects", data.split.val_subjects},
            {"test_subjects", data.split.test_subjects},
            {"config", to_json(config)}};
  result.checkpoint = config.out_dir / (stem + ".ckpt");
  save_checkpoint(result.checkpoint, c);
  result.steps = config.reg_steps;
  result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return result;
}

SweepResult sweep(const ExperimentConfig& config, const std::vector<TimeSeries>& cohort) {
  if (config.sweep_lambda0.empty()) throw ConfigError("sweep: no lambda0 values");
  SweepResult r;
  json summary = json::array();
  double best = -1.0;
  for (double v : config.sweep_lambda0) {
    ExperimentConfig c = config;
    c.lambda0 = v;
    c.out_dir = config.out_dir / ("lambda0_" + fmt(v));
    TrainResult t = train(c, cohort);
    summary.push_back({{"lambda0", v}, {"best_val_dice", t.best_val_dice}, {"run_dir", t.run_dir.string()}});
    if (r.runs.empty() || t.best_val_dice > best) {
      best = t.best_val_dice;
      r.best_lambda0 = v;
    }
    r.runs.push_back(std::move(t));
  }
  std::ofstream(config.out_dir / "sweep.json")
      << json{{"setting", setting_name(config.setting)}, {"best_lambda0", r.best_lambda0}, {"runs", summary}}.dump(2) << '\n';
  return r;
}

}  // namespace cseg
