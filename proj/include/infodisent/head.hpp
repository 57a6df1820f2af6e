#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "infodisent/errors.hpp"
#include "infodisent/feature_map.hpp"
#include "infodisent/linalg.hpp"

namespace infodisent {

enum class HeadKind : std::uint8_t { Default = 0, InfoDisent = 1 };

inline const char* to_string(HeadKind kind) {
  return kind == HeadKind::Default ? "default" : "infodisent";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "default") return HeadKind::Default;
  if (s == "infodisent") return HeadKind::InfoDisent;
  throw ParameterError("unknown head kind '" + s + "' (expected default|infodisent)");
}

/// Trainable head state.
///
/// For the InfoDisent head the effective class matrix is max(class_weights_raw, 0) and the
/// channel map is exp(G - G^T). The default head ignores the generator and uses the raw
/// weights unconstrained.
struct HeadParams {
  HeadKind kind = HeadKind::InfoDisent;
  Matrix generator;          // d x d
  Matrix class_weights_raw;  // d x k
  Vector bias;               // k
  double tau = 1.0;
  bool hard_mode = false;

  int channels() const { return static_cast<int>(class_weights_raw.rows()); }
  int classes() const { return static_cast<int>(class_weights_raw.cols()); }

  static HeadParams zeros(HeadKind kind, int d, int k) {
    HeadParams p;
    p.kind = kind;
    p.generator = Matrix::Zero(d, d);
    p.class_weights_raw = Matrix::Zero(d, k);
    p.bias = Vector::Zero(k);
    return p;
  }

  void validate() const {
    const auto d = class_weights_raw.rows();
    if (d < 1 || class_weights_raw.cols() < 1) throw DimensionError("HeadParams: empty weights");
    if (generator.rows() != d || generator.cols() != d) {
      throw DimensionError("HeadParams: generator must be d x d");
    }
    if (bias.size() != class_weights_raw.cols()) throw DimensionError("HeadParams: bias size != k");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("HeadParams: tau must be > 0");
    if (!generator.allFinite() || !class_weights_raw.allFinite() || !bias.allFinite()) {
      throw NumericError("HeadParams: non-finite parameter");
    }
  }
};

/// Nonnegativity projection (InfoDisent) or identity (default head).
inline Matrix constrain(const Matrix& raw, HeadKind kind = HeadKind::InfoDisent) {
  return kind == HeadKind::InfoDisent ? Matrix(raw.cwiseMax(0.0)) : raw;
}

inline Matrix effective_weights(const HeadParams& p) { return constrain(p.class_weights_raw, p.kind); }

struct PooledVector {
  Vector values;   // pos_val - neg_val
  Vector pos_val;  // >= 0
  Vector neg_val;  // >= 0
  std::vector<GridLoc> pos_loc;
  std::vector<GridLoc> neg_loc;
};

struct HeadOutput {
  Vector logits;
  Vector probs;
  PooledVector pooled;
};

// ---------------------------------------------------------------------------------------
// scalar kernels

inline double log_sum_exp(const Vector& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

inline Vector softmax(const Vector& x) {
  const double m = x.maxCoeff();
  Vector e = (x.array() - m).exp();
  return e / e.sum();
}

/// Seedable standard Gumbel source: -log(-log(u)), u clamped into [1e-12, 1 - 1e-12].
class GumbelNoise {
 public:
  explicit GumbelNoise(std::uint64_t seed = 0) : engine_(seed) {}

  double sample() {
    constexpr double kEps = 1e-12;
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
    u = std::clamp(u, kEps, 1.0 - kEps);
    return -std::log(-std::log(u));
  }

  Vector sample(Eigen::Index n) {
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = sample();
    return v;
  }

 private:
  std::mt19937_64 engine_;
};

/// y_i = exp((x_i + eta_i) / tau) / sum_j exp((x_j + eta_j) / tau). Empty `noise` means eta = 0.
inline Vector gumbel_softmax(const Vector& x, double tau, const Vector& noise = Vector()) {
  if (!(tau > 0.0)) throw ParameterError("gumbel_softmax: tau must be > 0");
  if (noise.size() != 0 && noise.size() != x.size()) {
    throw DimensionError("gumbel_softmax: noise length mismatch");
  }
  Vector z = noise.size() == 0 ? Vector(x / tau) : Vector((x + noise) / tau);
  return softmax(z);
}

inline Eigen::Index first_argmax(const Vector& x) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------------------
// heads

inline void require_channels(const FeatureMap& f, Eigen::Index d, const char* what) {
  if (f.channels() != d) {
    throw DimensionError(std::string(what) + ": feature map has " + std::to_string(f.channels()) +
                         " channels, head expects " + std::to_string(d));
  }
}

/// Per-channel spatial mean.
inline Vector avg_pool(const FeatureMap& f) {
  if (f.pixels() < 1) throw DimensionError("avg_pool: empty grid");
  return f.as_matrix().rowwise().mean();
}

inline HeadOutput make_output(Vector logits, PooledVector pooled) {
  HeadOutput out;
  out.probs = softmax(logits);
  out.logits = std::move(logits);
  out.pooled = std::move(pooled);
  return out;
}

/// Baseline head: v = avg_pool(f), logits = A^T v + b.
inline HeadOutput avg_pool_head(const FeatureMap& f, const Matrix& a, const Vector& b) {
  require_channels(f, a.rows(), "avg_pool_head");
  if (b.size() != a.cols()) throw DimensionError("avg_pool_head: bias size != k");
  PooledVector pooled;
  pooled.values = avg_pool(f);
  Vector logits = a.transpose() * pooled.values + b;
  return make_output(std::move(logits), std::move(pooled));
}

/// J_rs = U I_rs at every grid location.
inline FeatureMap mix_channels(const FeatureMap& f, const Matrix& u) {
  if (u.rows() != u.cols()) throw DimensionError("mix_channels: U must be square");
  require_channels(f, u.rows(), "mix_channels");
  FeatureMap out(f.channels(), f.height(), f.width());
  out.image_id = f.image_id;
  out.label = f.label;
  out.as_matrix() = u * f.as_matrix();
  return out;
}

inline FeatureMap mix_channels(const FeatureMap& f, const OrthogonalMap& u) {
  return mix_channels(f, u.u);
}

inline GridLoc loc_of(const FeatureMap& f, Eigen::Index flat) {
  return GridLoc{static_cast<int>(flat / f.width()), static_cast<int>(flat % f.width())};
}

/// mx_pool(K) = max(ReLU(K)) - max(ReLU(-K)) per channel, with the argmax of each branch
/// (first occurrence in row-major order).
inline PooledVector mx_pool(const FeatureMap& f) {
  if (f.pixels() < 1) throw DimensionError("mx_pool: empty grid");
  const int d = f.channels();
  const int n = f.pixels();
  const auto k = f.as_matrix();
  PooledVector out;
  out.values.resize(d);
  out.pos_val.resize(d);
  out.neg_val.resize(d);
  out.pos_loc.resize(d);
  out.neg_loc.resize(d);
  for (int c = 0; c < d; ++c) {
    double best_pos = 0.0, best_neg = 0.0;
    int at_pos = 0, at_neg = 0;
    for (int p = 0; p < n; ++p) {
      const double pos = std::max(k(c, p), 0.0);
      const double neg = std::max(-k(c, p), 0.0);
      if (pos > best_pos) best_pos = pos, at_pos = p;
      if (neg > best_neg) best_neg = neg, at_neg = p;
    }
    out.pos_val[c] = best_pos;
    out.neg_val[c] = best_neg;
    out.values[c] = best_pos - best_neg;
    out.pos_loc[c] = loc_of(f, at_pos);
    out.neg_loc[c] = loc_of(f, at_neg);
  }
  return out;
}

/// Selection weights kept per channel and branch for the backward pass.
struct SoftPoolTrace {
  bool hard = false;
  double tau = 1.0;
  // Row c holds channel c. `soft_*` are the relaxed one-hot weights; `used_*` the weights the
  // forward value was computed with (soft, or the exact one-hot in hard mode).
  Matrix soft_pos, soft_neg;
  Matrix used_pos, used_neg;
};

/// Differentiable replacement for mx_pool over flattened spatial positions.
///
/// Each branch (ReLU(K), ReLU(-K)) goes through gumbel_softmax, and the pooled scalar is the
/// selection-weighted sum of the branch values. In hard mode the selection is the exact
/// one-hot at the first argmax of (branch + noise), so with no noise it equals mx_pool.
/// `noise` may be null (eta = 0); otherwise 2 * d * H * W Gumbel samples are drawn.
inline PooledVector soft_pool(const FeatureMap& f, double tau, bool hard, GumbelNoise* noise,
                              SoftPoolTrace* trace = nullptr) {
  if (f.pixels() < 1) throw DimensionError("soft_pool: empty grid");
  if (!(tau > 0.0)) throw ParameterError("soft_pool: tau must be > 0");
  const int d = f.channels();
  const int n = f.pixels();
  const auto k = f.as_matrix();

  PooledVector out;
  out.values.resize(d);
  out.pos_val.resize(d);
  out.neg_val.resize(d);
  out.pos_loc.resize(d);
  out.neg_loc.resize(d);
  if (trace) {
    trace->hard = hard;
    trace->tau = tau;
    trace->soft_pos.resize(d, n);
    trace->soft_neg.resize(d, n);
    trace->used_pos.resize(d, n);
    trace->used_neg.resize(d, n);
  }

  auto branch = [&](const Vector& x, double& value, GridLoc& loc, Matrix* soft_row_dst,
                    Matrix* used_row_dst, int c) {
    Vector eta = noise ? noise->sample(n) : Vector();
    Vector y = gumbel_softmax(x, tau, eta);
    const Eigen::Index pick = first_argmax(eta.size() ? Vector(x + eta) : x);
    if (hard) {
      value = x[pick];
    } else {
      value = y.dot(x);
    }
    loc = loc_of(f, pick);
    if (soft_row_dst) {
      soft_row_dst->row(c) = y.transpose();
      if (hard) {
        used_row_dst->row(c).setZero();
        (*used_row_dst)(c, pick) = 1.0;
      } else {
        used_row_dst->row(c) = y.transpose();
      }
    }
  };

  for (int c = 0; c < d; ++c) {
    const Vector row = k.row(c).transpose();
    const Vector pos = row.cwiseMax(0.0);
    const Vector neg = (-row).cwiseMax(0.0);
    branch(pos, out.pos_val[c], out.pos_loc[c], trace ? &trace->soft_pos : nullptr,
           trace ? &trace->used_pos : nullptr, c);
    branch(neg, out.neg_val[c], out.neg_loc[c], trace ? &trace->soft_neg : nullptr,
           trace ? &trace->used_neg : nullptr, c);
    out.values[c] = out.pos_val[c] - out.neg_val[c];
  }
  return out;
}

/// Given dL/dv for the pooled values, returns dL/dJ (d x H*W) for the mixed map J.
///
/// Per branch with values x, weights y = softmax((x + eta) / tau) and pooled value
/// q = sum_p w_p x_p (w = y soft, or the one-hot in hard mode), the straight-through
/// derivative is dq/dx_p = w_p + y_p (x_p - sum_j y_j x_j) / tau.
inline Matrix soft_pool_backward(const FeatureMap& mixed, const SoftPoolTrace& trace,
                                 const Vector& grad_values) {
  const int d = mixed.channels();
  const int n = mixed.pixels();
  const auto k = mixed.as_matrix();
  Matrix grad(d, n);
  for (int c = 0; c < d; ++c) {
    const Vector row = k.row(c).transpose();
    const Vector pos = row.cwiseMax(0.0);
    const Vector neg = (-row).cwiseMax(0.0);
    const Vector ys = trace.soft_pos.row(c).transpose();
    const Vector yn = trace.soft_neg.row(c).transpose();
    const double mean_pos = ys.dot(pos);
    const double mean_neg = yn.dot(neg);
    for (int p = 0; p < n; ++p) {
      const double dpos = trace.used_pos(c, p) + ys[p] * (pos[p] - mean_pos) / trace.tau;
      const double dneg = trace.used_neg(c, p) + yn[p] * (neg[p] - mean_neg) / trace.tau;
      // v = pos - neg; dpos/dK = [K > 0], dneg/dK = -[K < 0]
      double g = 0.0;
      if (row[p] > 0.0) g = dpos;
      else if (row[p] < 0.0) g = dneg;
      grad(c, p) = grad_values[c] * g;
    }
  }
  return grad;
}

/// How the InfoDisent head pools.
enum class PoolMode {
  Inference,  // exact mx_pool, no noise
  Training,   // soft_pool at params.tau; hard selection when params.hard_mode
};

/// InfoDisent head with a precomputed orthogonal map `u`.
inline HeadOutput infodisent_forward(const FeatureMap& f, const HeadParams& p, const Matrix& u,
                                     PoolMode mode, GumbelNoise* noise = nullptr,
                                     SoftPoolTrace* trace = nullptr, FeatureMap* mixed_out = nullptr) {
  require_channels(f, p.channels(), "infodisent_forward");
  FeatureMap mixed = mix_channels(f, u);
  PooledVector pooled = mode == PoolMode::Training
                            ? soft_pool(mixed, p.tau, p.hard_mode, noise, trace)
                            : mx_pool(mixed);
  Vector logits = effective_weights(p).transpose() * pooled.values + p.bias;
  if (mixed_out) *mixed_out = std::move(mixed);
  return make_output(std::move(logits), std::move(pooled));
}

inline HeadOutput infodisent_forward(const FeatureMap& f, const HeadParams& p, PoolMode mode,
                                     GumbelNoise* noise = nullptr) {
  return infodisent_forward(f, p, expm(skew(p.generator)), mode, noise);
}

/// Dispatches on the head kind; `u` is ignored by the default head.
inline HeadOutput forward(const FeatureMap& f, const HeadParams& p, const Matrix& u,
                          PoolMode mode = PoolMode::Inference, GumbelNoise* noise = nullptr) {
  if (p.kind == HeadKind::Default) return avg_pool_head(f, p.class_weights_raw, p.bias);
  return infodisent_forward(f, p, u, mode, noise);
}

inline HeadOutput forward(const FeatureMap& f, const HeadParams& p) {
  if (p.kind == HeadKind::Default) return avg_pool_head(f, p.class_weights_raw, p.bias);
  return infodisent_forward(f, p, PoolMode::Inference);
}

/// The map used at inference: exp(G - G^T) for InfoDisent, identity for the default head.
inline Matrix channel_map(const HeadParams& p) {
  if (p.kind == HeadKind::Default) return Matrix::Identity(p.channels(), p.channels());
  return expm(skew(p.generator));
}

}  // namespace infodisent
