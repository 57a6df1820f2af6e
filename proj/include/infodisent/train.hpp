#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "infodisent/errors.hpp"
#include "infodisent/feature_map.hpp"
#include "infodisent/head.hpp"
#include "infodisent/linalg.hpp"
#include "infodisent/parallel.hpp"

namespace infodisent {

struct TrainConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double damping = 0.9;
  double weight_decay = 0.001;
  // Per-tensor overrides of weight_decay.
  std::optional<double> weight_decay_generator;
  std::optional<double> weight_decay_class_weights;
  std::optional<double> weight_decay_bias;
  int epochs = 50;
  int batch_size = 32;
  double tau_start = 1.0;
  double tau_end = 0.2;
  // tau decays linearly over the first anneal_fraction of the epochs; the rest run hard.
  double anneal_fraction = 0.8;
  bool gumbel_noise = true;
  int plateau_patience = 5;
  double plateau_factor = 0.1;
  double plateau_min_delta = 1e-4;
  double val_fraction = 0.1;
  double init_scale = 0.1;
  std::uint64_t seed = 0;
  HeadKind head_kind = HeadKind::InfoDisent;

  void validate() const {
    if (!(lr > 0.0)) throw ParameterError("TrainConfig: lr must be > 0");
    if (!(tau_end > 0.0) || tau_end > tau_start) {
      throw ParameterError("TrainConfig: require 0 < tau_end <= tau_start");
    }
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
      throw ParameterError("TrainConfig: plateau_factor must lie in (0, 1)");
    }
    if (epochs < 1) throw ParameterError("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw ParameterError("TrainConfig: batch_size must be >= 1");
    if (plateau_patience < 1) throw ParameterError("TrainConfig: plateau_patience must be >= 1");
    if (anneal_fraction < 0.0 || anneal_fraction > 1.0) {
      throw ParameterError("TrainConfig: anneal_fraction must lie in [0, 1]");
    }
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
      throw ParameterError("TrainConfig: val_fraction must lie in [0, 1)");
    }
  }
};

/// Gradients (or velocities) with the shapes of the three parameter tensors.
struct ParamGrads {
  Matrix generator;
  Matrix class_weights;
  Vector bias;

  static ParamGrads zeros_like(const HeadParams& p) {
    return {Matrix::Zero(p.generator.rows(), p.generator.cols()),
            Matrix::Zero(p.class_weights_raw.rows(), p.class_weights_raw.cols()),
            Vector::Zero(p.bias.size())};
  }
  ParamGrads& operator+=(const ParamGrads& o) {
    generator += o.generator;
    class_weights += o.class_weights;
    bias += o.bias;
    return *this;
  }
  ParamGrads& operator*=(double s) {
    generator *= s;
    class_weights *= s;
    bias *= s;
    return *this;
  }
};

// ---------------------------------------------------------------------------------------
// loss

inline void require_label(Eigen::Index k, std::uint32_t label) {
  if (label >= static_cast<std::uint64_t>(k)) {
    throw ParameterError("label " + std::to_string(label) + " out of range for " +
                         std::to_string(k) + " classes");
  }
}

/// -log softmax(logits)[label] via log-sum-exp.
inline double cross_entropy_from_logits(const Vector& logits, std::uint32_t label) {
  require_label(logits.size(), label);
  return log_sum_exp(logits) - logits[label];
}

inline double cross_entropy(const Vector& probs, std::uint32_t label) {
  require_label(probs.size(), label);
  return -std::log(probs[label]);
}

inline double cross_entropy(const HeadOutput& out, std::uint32_t label) {
  return cross_entropy_from_logits(out.logits, label);
}

struct ExampleResult {
  double loss = 0.0;
  bool correct = false;
  // For InfoDisent `generator` holds dL/dU; the batch reduction converts it to dL/dG once.
  ParamGrads grads;
};

/// Training-mode forward and backward for one labelled image.
inline ExampleResult example_loss_grad(const FeatureMap& f, const HeadParams& p, const Matrix& u,
                                       GumbelNoise* noise) {
  if (!f.label) throw ParameterError("training image " + std::to_string(f.image_id) + " has no label");
  const std::uint32_t label = *f.label;
  ExampleResult r;
  r.grads = ParamGrads::zeros_like(p);

  if (p.kind == HeadKind::Default) {
    HeadOutput out = avg_pool_head(f, p.class_weights_raw, p.bias);
    r.loss = cross_entropy(out, label);
    r.correct = first_argmax(out.logits) == static_cast<Eigen::Index>(label);
    Vector g = out.probs;
    g[label] -= 1.0;
    r.grads.class_weights = out.pooled.values * g.transpose();
    r.grads.bias = g;
    return r;
  }

  SoftPoolTrace trace;
  FeatureMap mixed;
  HeadOutput out = infodisent_forward(f, p, u, PoolMode::Training, noise, &trace, &mixed);
  r.loss = cross_entropy(out, label);
  r.correct = first_argmax(out.logits) == static_cast<Eigen::Index>(label);

  Vector g = out.probs;
  g[label] -= 1.0;
  const Matrix a = effective_weights(p);
  Matrix grad_a = out.pooled.values * g.transpose();
  // max(raw, 0) passes gradient where raw >= 0 (one-sided at the kink so projected weights can
  // regrow), and blocks it where raw < 0.
  r.grads.class_weights = (p.class_weights_raw.array() < 0.0).select(0.0, grad_a);
  r.grads.bias = g;
  const Vector grad_v = a * g;
  const Matrix grad_j = soft_pool_backward(mixed, trace, grad_v);
  r.grads.generator = grad_j * f.as_matrix().transpose();  // dL/dU
  return r;
}

/// Mean loss and gradients over a set of images with deterministic summation order.
///
/// `noise_seeds[i]` seeds the Gumbel noise of image i (ignored when `use_noise` is false).
struct BatchResult {
  double loss = 0.0;
  std::size_t correct = 0;
  ParamGrads grads;
};

inline BatchResult batch_loss_grad(const std::vector<const FeatureMap*>& batch, const HeadParams& p,
                                   const Matrix& u, bool use_noise,
                                   const std::vector<std::uint64_t>& noise_seeds) {
  std::vector<ExampleResult> per(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    if (use_noise) {
      GumbelNoise noise(noise_seeds.at(i));
      per[i] = example_loss_grad(*batch[i], p, u, &noise);
    } else {
      per[i] = example_loss_grad(*batch[i], p, u, nullptr);
    }
  });
  BatchResult out;
  out.grads = ParamGrads::zeros_like(p);
  for (const auto& r : per) {
    out.loss += r.loss;
    out.correct += r.correct ? 1 : 0;
    out.grads += r.grads;
  }
  const double scale = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  out.loss *= scale;
  out.grads *= scale;
  if (p.kind == HeadKind::InfoDisent) {
    out.grads.generator = skew_expm_generator_grad(p.generator, out.grads.generator);
  }
  return out;
}

/// Loss and full parameter gradients (dL/dG included) for a single image.
inline std::pair<double, ParamGrads> loss_and_gradient(const FeatureMap& f, const HeadParams& p,
                                                       GumbelNoise* noise = nullptr) {
  const Matrix u = channel_map(p);
  ExampleResult r = example_loss_grad(f, p, u, noise);
  if (p.kind == HeadKind::InfoDisent) {
    r.grads.generator = skew_expm_generator_grad(p.generator, r.grads.generator);
  }
  return {r.loss, r.grads};
}

/// Training-mode loss alone (same noise consumption as loss_and_gradient).
inline double training_loss(const FeatureMap& f, const HeadParams& p, GumbelNoise* noise = nullptr) {
  if (!f.label) throw ParameterError("training_loss: image has no label");
  if (p.kind == HeadKind::Default) return cross_entropy(forward(f, p), *f.label);
  return cross_entropy(infodisent_forward(f, p, channel_map(p), PoolMode::Training, noise), *f.label);
}

// ---------------------------------------------------------------------------------------
// optimizer state

struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  int bad_evals = 0;
  int reductions = 0;
};

struct TrainState {
  HeadParams params;
  ParamGrads velocity;
  double lr = 0.001;
  double tau = 1.0;
  int epoch = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  PlateauState plateau;

  static TrainState start(HeadParams p, const TrainConfig& cfg) {
    TrainState s;
    s.velocity = ParamGrads::zeros_like(p);
    s.params = std::move(p);
    s.lr = cfg.lr;
    s.tau = cfg.tau_start;
    s.seed = cfg.seed;
    return s;
  }
};

inline void require_finite_grads(const ParamGrads& g) {
  if (!g.generator.allFinite()) throw TrainingError("sgd_step: non-finite generator gradient");
  if (!g.class_weights.allFinite()) throw TrainingError("sgd_step: non-finite class-weight gradient");
  if (!g.bias.allFinite()) throw TrainingError("sgd_step: non-finite bias gradient");
}

/// g <- g + wd * theta; v <- m * v + (1 - damping) * g; theta <- theta - lr * v. Class
/// weights of the InfoDisent head are projected onto the nonnegative orthant afterwards.
inline void sgd_step(TrainState& state, const ParamGrads& grads, const TrainConfig& cfg) {
  require_finite_grads(grads);
  HeadParams& p = state.params;
  if (grads.generator.rows() != p.generator.rows() ||
      grads.class_weights.rows() != p.class_weights_raw.rows() ||
      grads.class_weights.cols() != p.class_weights_raw.cols() || grads.bias.size() != p.bias.size()) {
    throw DimensionError("sgd_step: gradient shapes do not match parameters");
  }
  auto update = [&](auto& theta, const auto& g, auto& v, double wd) {
    auto eff = (g + wd * theta).eval();
    v = cfg.momentum * v + (1.0 - cfg.damping) * eff;
    theta -= state.lr * v;
  };
  if (p.kind == HeadKind::InfoDisent) {
    update(p.generator, grads.generator, state.velocity.generator,
           cfg.weight_decay_generator.value_or(cfg.weight_decay));
  }
  update(p.class_weights_raw, grads.class_weights, state.velocity.class_weights,
         cfg.weight_decay_class_weights.value_or(cfg.weight_decay));
  update(p.bias, grads.bias, state.velocity.bias, cfg.weight_decay_bias.value_or(cfg.weight_decay));
  if (p.kind == HeadKind::InfoDisent) p.class_weights_raw = constrain(p.class_weights_raw);
  ++state.step;
}

/// Reduce-on-plateau: after `plateau_patience` evaluations without an improvement larger
/// than min_delta, lr is multiplied by plateau_factor and the counter restarts.
inline bool plateau_scheduler(TrainState& state, double val_loss, const TrainConfig& cfg) {
  PlateauState& ps = state.plateau;
  if (val_loss < ps.best - cfg.plateau_min_delta) {
    ps.best = val_loss;
    ps.bad_evals = 0;
    return false;
  }
  if (++ps.bad_evals >= cfg.plateau_patience) {
    state.lr *= cfg.plateau_factor;
    ps.bad_evals = 0;
    ++ps.reductions;
    return true;
  }
  return false;
}

struct TauSetting {
  double tau = 1.0;
  bool hard = false;
};

/// Index of the last annealing epoch; epochs after it run in hard mode. Capped so that at
/// least the final epoch is hard.
inline int anneal_end_epoch(int total_epochs, const TrainConfig& cfg) {
  return std::min(static_cast<int>(std::floor(cfg.anneal_fraction * total_epochs)), total_epochs - 2);
}

/// Linear decay from tau_start (epoch 0) to tau_end (epoch anneal_end), hard mode afterwards.
inline TauSetting tau_schedule(int epoch, int total_epochs, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= total_epochs) throw ParameterError("tau_schedule: epoch out of range");
  const int end = anneal_end_epoch(total_epochs, cfg);
  if (end <= 0) return {cfg.tau_end, epoch > end};
  const double t = std::min(1.0, static_cast<double>(epoch) / end);
  return {(1.0 - t) * cfg.tau_start + t * cfg.tau_end, epoch > end};
}

// ---------------------------------------------------------------------------------------
// training driver

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t count = 0;
};

/// Hard-mode inference over a labelled dataset.
inline EvalResult evaluate(const std::vector<const FeatureMap*>& images, const HeadParams& p) {
  if (images.empty()) throw ParameterError("evaluate: empty dataset");
  p.validate();
  const Matrix u = channel_map(p);
  std::vector<std::pair<double, bool>> per(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const FeatureMap& f = *images[i];
    require_channels(f, p.channels(), "evaluate");
    if (!f.label) throw ParameterError("evaluate: image " + std::to_string(f.image_id) + " has no label");
    HeadOutput out = forward(f, p, u);
    per[i] = {cross_entropy(out, *f.label), first_argmax(out.logits) == static_cast<Eigen::Index>(*f.label)};
  });
  EvalResult r;
  r.count = images.size();
  for (const auto& [loss, ok] : per) {
    r.mean_loss += loss;
    r.accuracy += ok ? 1.0 : 0.0;
  }
  r.mean_loss /= static_cast<double>(r.count);
  r.accuracy /= static_cast<double>(r.count);
  return r;
}

inline std::vector<const FeatureMap*> pointers(const FeatureSet& set) {
  std::vector<const FeatureMap*> v;
  v.reserve(set.size());
  for (const auto& f : set.images) v.push_back(&f);
  return v;
}

inline EvalResult evaluate(const FeatureSet& set, const HeadParams& p) {
  if (set.empty()) throw ParameterError("evaluate: empty dataset");
  return evaluate(pointers(set), p);
}

struct EpochMetrics {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  double acc = 0.0;
  double lr = 0.0;
  double tau = 0.0;
};

inline std::string format_metrics(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "epoch=%d split=%s loss=%.6f acc=%.6f lr=%.6g tau=%.6f", m.epoch,
                m.split.c_str(), m.loss, m.acc, m.lr, m.tau);
  return buf;
}

/// Initial parameters: G = 0 (U = I); class weights uniform in [0, init_scale) for InfoDisent
/// and N(0, init_scale^2) for the default head; zero bias.
inline HeadParams init_params(HeadKind kind, int d, int k, const TrainConfig& cfg) {
  HeadParams p = HeadParams::zeros(kind, d, k);
  p.tau = cfg.tau_start;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x1417));
  if (kind == HeadKind::InfoDisent) {
    std::uniform_real_distribution<double> dist(0.0, cfg.init_scale);
    for (Eigen::Index i = 0; i < p.class_weights_raw.size(); ++i) p.class_weights_raw.data()[i] = dist(rng);
  } else {
    std::normal_distribution<double> dist(0.0, cfg.init_scale);
    for (Eigen::Index i = 0; i < p.class_weights_raw.size(); ++i) p.class_weights_raw.data()[i] = dist(rng);
  }
  return p;
}

struct TrainSplit {
  std::vector<const FeatureMap*> train;
  std::vector<const FeatureMap*> val;
};

/// Seeded shuffle, first ceil(fraction * n) images become validation. A single image is used
/// for both splits.
inline TrainSplit split_validation(const FeatureSet& set, double fraction, std::uint64_t seed) {
  std::vector<const FeatureMap*> all = pointers(set);
  std::mt19937_64 rng(mix_seed(seed, 0x5A11));
  std::shuffle(all.begin(), all.end(), rng);
  TrainSplit s;
  std::size_t n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(all.size())));
  if (all.size() < 2 || n_val == 0) {
    s.train = all;
    s.val = all;
    return s;
  }
  n_val = std::min(n_val, all.size() - 1);
  s.val.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end());
  return s;
}

struct TrainResult {
  HeadParams params;
  TrainState state;
  std::vector<EpochMetrics> metrics;
};

struct TrainCallbacks {
  std::function<void(const EpochMetrics&)> on_metrics;
  // Invoked after every completed epoch with finite losses (checkpoint hook).
  std::function<void(const TrainState&)> on_epoch_end;
};

/// Mini-batch SGD on the training-mode forward. When `val` is empty a validation split is
/// carved out of `train_images` with cfg.val_fraction.
inline TrainResult train(const FeatureSet& train_set, const FeatureSet* val_set, const TrainConfig& cfg,
                         const TrainCallbacks& callbacks = {}) {
  cfg.validate();
  if (train_set.empty()) throw ParameterError("train: empty dataset");
  train_set.validate();
  if (train_set.num_classes < 1) throw ParameterError("train: dataset has no classes");

  TrainSplit split;
  if (val_set && !val_set->empty()) {
    if (val_set->channels != train_set.channels) throw DimensionError("train: validation channel mismatch");
    split.train = pointers(train_set);
    split.val = pointers(*val_set);
  } else {
    split = split_validation(train_set, cfg.val_fraction, cfg.seed);
  }

  TrainState state =
      TrainState::start(init_params(cfg.head_kind, train_set.channels, train_set.num_classes, cfg), cfg);
  TrainResult result;
  HeadParams last_good = state.params;

  auto emit = [&](const EpochMetrics& m) {
    result.metrics.push_back(m);
    if (callbacks.on_metrics) callbacks.on_metrics(m);
  };

  std::vector<const FeatureMap*> order = split.train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const TauSetting ts = tau_schedule(epoch, cfg.epochs, cfg);
    state.epoch = epoch;
    state.tau = ts.tau;
    state.params.tau = ts.tau;
    state.params.hard_mode = ts.hard;

    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x100000ULL + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    const bool noisy = cfg.gumbel_noise && !ts.hard && cfg.head_kind == HeadKind::InfoDisent;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const FeatureMap*> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<std::uint64_t> seeds(batch.size());
      for (std::size_t i = 0; i < batch.size(); ++i) {
        seeds[i] = mix_seed(mix_seed(cfg.seed, state.step), start + i);
      }
      const Matrix u = channel_map(state.params);
      BatchResult br = batch_loss_grad(batch, state.params, u, noisy, seeds);
      if (!std::isfinite(br.loss)) {
        state.params = last_good;
        throw TrainingError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss_sum += br.loss * static_cast<double>(batch.size());
      correct += br.correct;
      try {
        sgd_step(state, br.grads, cfg);
      } catch (const TrainingError&) {
        state.params = last_good;
        throw;
      }
    }

    const EvalResult val = evaluate(split.val, state.params);
    if (!std::isfinite(val.mean_loss)) {
      state.params = last_good;
      throw TrainingError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    const double n = static_cast<double>(order.size());
    emit({epoch, "train", loss_sum / n, static_cast<double>(correct) / n, state.lr, ts.tau});
    emit({epoch, "val", val.mean_loss, val.accuracy, state.lr, ts.tau});
    plateau_scheduler(state, val.mean_loss, cfg);

    last_good = state.params;
    if (callbacks.on_epoch_end) callbacks.on_epoch_end(state);
  }

  result.params = state.params;
  result.state = std::move(state);
  return result;
}

}  // namespace infodisent
