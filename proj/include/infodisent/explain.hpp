#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "infodisent/errors.hpp"
#include "infodisent/feature_map.hpp"
#include "infodisent/head.hpp"
#include "infodisent/linalg.hpp"
#include "infodisent/parallel.hpp"

namespace infodisent {

// ---------------------------------------------------------------------------------------
// attribution

/// contributions[c] = A[c, class] * v[c]; logit = sum(contributions) + bias[class].
struct Attribution {
  int class_id = 0;
  Vector contributions;
  std::vector<int> ranking;  // by contribution descending, ties by channel index
  double bias = 0.0;
  double logit = 0.0;
};

inline Attribution attribution_from_pooled(const Vector& pooled, const Matrix& a, const Vector& bias,
                                           int class_id) {
  if (class_id < 0 || class_id >= a.cols()) {
    throw ParameterError("attribute: class " + std::to_string(class_id) + " out of range");
  }
  if (pooled.size() != a.rows()) throw DimensionError("attribute: pooled size != d");
  Attribution out;
  out.class_id = class_id;
  out.contributions = a.col(class_id).cwiseProduct(pooled);
  out.bias = bias[class_id];
  out.logit = a.col(class_id).dot(pooled) + out.bias;
  out.ranking.resize(static_cast<std::size_t>(pooled.size()));
  std::iota(out.ranking.begin(), out.ranking.end(), 0);
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [&](int x, int y) { return out.contributions[x] > out.contributions[y]; });
  return out;
}

/// Pooled vector the head classifies with (hard mx_pool for InfoDisent, mean for the default head).
inline PooledVector inference_pool(const FeatureMap& f, const HeadParams& p, const Matrix& u) {
  require_channels(f, p.channels(), "inference_pool");
  if (p.kind == HeadKind::Default) {
    PooledVector v;
    v.values = avg_pool(f);
    return v;
  }
  return mx_pool(mix_channels(f, u));
}

inline Attribution attribute(const FeatureMap& f, const HeadParams& p, const Matrix& u, int class_id) {
  return attribution_from_pooled(inference_pool(f, p, u).values, effective_weights(p), p.bias, class_id);
}

inline Attribution attribute(const FeatureMap& f, const HeadParams& p, int class_id) {
  return attribute(f, p, channel_map(p), class_id);
}

inline int predicted_class(const FeatureMap& f, const HeadParams& p, const Matrix& u) {
  return static_cast<int>(first_argmax(forward(f, p, u).logits));
}

/// Leading entries of the ranking with strictly positive contribution.
inline std::vector<int> top_channels(const Attribution& attr, int count = 5) {
  if (count < 1) throw ParameterError("top_channels: count must be >= 1");
  std::vector<int> out;
  for (int c : attr.ranking) {
    if (static_cast<int>(out.size()) >= count || !(attr.contributions[c] > 0.0)) break;
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------------------
// prototypes

struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

struct Shape2 {
  int height = 0;
  int width = 0;
};

/// Proportional rectangle of grid cell (r, s) on an image: x0 = floor(s*Wi/Wf),
/// x1 = ceil((s+1)*Wi/Wf), likewise for y.
inline Box box_from_feat_loc(GridLoc loc, Shape2 feat, Shape2 image) {
  if (feat.height < 1 || feat.width < 1 || image.height < 1 || image.width < 1) {
    throw DimensionError("box_from_feat_loc: shapes must be positive");
  }
  if (loc.row < 0 || loc.row >= feat.height || loc.col < 0 || loc.col >= feat.width) {
    throw DimensionError("box_from_feat_loc: location outside the feature grid");
  }
  auto lo = [](long i, long img, long grid) { return static_cast<int>((i * img) / grid); };
  auto hi = [](long i, long img, long grid) { return static_cast<int>(((i + 1) * img + grid - 1) / grid); };
  return Box{lo(loc.col, image.width, feat.width), lo(loc.row, image.height, feat.height),
             hi(loc.col, image.width, feat.width), hi(loc.row, image.height, feat.height)};
}

struct PrototypeRecord {
  int channel = 0;
  std::uint32_t image_id = 0;
  double activation = 0.0;  // pos_val of the channel on that image
  GridLoc feat_loc;
  std::optional<Box> input_box;
};

/// Top `top` images by pos_val for each requested channel; ties by image id ascending.
///
/// `image_shape`, when given, is the source-image resolution used to place input boxes.
inline std::vector<std::vector<PrototypeRecord>> mine_prototypes(const std::vector<const FeatureMap*>& images,
                                                                 const HeadParams& p,
                                                                 const std::vector<int>& channels, int top = 5,
                                                                 std::optional<Shape2> image_shape = {}) {
  if (images.empty()) throw ParameterError("mine_prototypes: empty dataset");
  if (top < 1) throw ParameterError("mine_prototypes: top must be >= 1");
  for (int c : channels) {
    if (c < 0 || c >= p.channels()) throw ParameterError("mine_prototypes: channel out of range");
  }
  const Matrix u = channel_map(p);
  std::vector<std::vector<PrototypeRecord>> candidates(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const FeatureMap& f = *images[i];
    require_channels(f, p.channels(), "mine_prototypes");
    const PooledVector pooled = mx_pool(p.kind == HeadKind::Default ? f : mix_channels(f, u));
    for (int c : channels) {
      PrototypeRecord r;
      r.channel = c;
      r.image_id = f.image_id;
      r.activation = pooled.pos_val[c];
      r.feat_loc = pooled.pos_loc[c];
      if (image_shape) r.input_box = box_from_feat_loc(r.feat_loc, {f.height(), f.width()}, *image_shape);
      candidates[i].push_back(r);
    }
  });
  std::vector<std::vector<PrototypeRecord>> out(channels.size());
  for (std::size_t j = 0; j < channels.size(); ++j) {
    std::vector<PrototypeRecord> all;
    all.reserve(images.size());
    for (const auto& per_image : candidates) all.push_back(per_image[j]);
    auto better = [](const PrototypeRecord& a, const PrototypeRecord& b) {
      if (a.activation != b.activation) return a.activation > b.activation;
      return a.image_id < b.image_id;
    };
    const std::size_t keep = std::min(all.size(), static_cast<std::size_t>(top));
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
    all.resize(keep);
    out[j] = std::move(all);
  }
  return out;
}

inline std::vector<PrototypeRecord> mine_prototypes(const std::vector<const FeatureMap*>& images,
                                                    const HeadParams& p, int channel, int top = 5,
                                                    std::optional<Shape2> image_shape = {}) {
  return mine_prototypes(images, p, std::vector<int>{channel}, top, image_shape).front();
}

// ---------------------------------------------------------------------------------------
// class-level channels

enum class ClassScoreRule {
  MeanPositiveContribution,  // mean over class images of max(a_kc * v_c, 0)
  ActivationFrequency,       // fraction of class images with a_kc * v_c > 0
};

struct ChannelScore {
  int channel = 0;
  double score = 0.0;
};

/// Channels ranked by score over all images labelled `class_id`; only positive scores are kept.
inline std::vector<ChannelScore> class_key_channels(const std::vector<const FeatureMap*>& images,
                                                    const HeadParams& p, int class_id, int count,
                                                    ClassScoreRule rule = ClassScoreRule::MeanPositiveContribution) {
  if (count < 1) throw ParameterError("class_key_channels: count must be >= 1");
  if (class_id < 0 || class_id >= p.classes()) throw ParameterError("class_key_channels: class out of range");
  const Matrix u = channel_map(p);
  const Matrix a = effective_weights(p);
  Vector total = Vector::Zero(p.channels());
  std::size_t members = 0;
  for (const FeatureMap* f : images) {
    if (!f->label || static_cast<int>(*f->label) != class_id) continue;
    ++members;
    const Vector contrib = attribution_from_pooled(inference_pool(*f, p, u).values, a, p.bias, class_id).contributions;
    if (rule == ClassScoreRule::MeanPositiveContribution) {
      total += contrib.cwiseMax(0.0);
    } else {
      total += (contrib.array() > 0.0).cast<double>().matrix();
    }
  }
  if (members == 0) throw ParameterError("class_key_channels: class " + std::to_string(class_id) + " has no images");
  total /= static_cast<double>(members);
  std::vector<ChannelScore> scores;
  for (int c = 0; c < p.channels(); ++c) {
    if (total[c] > 0.0) scores.push_back({c, total[c]});
  }
  std::stable_sort(scores.begin(), scores.end(),
                   [](const ChannelScore& x, const ChannelScore& y) { return x.score > y.score; });
  if (static_cast<int>(scores.size()) > count) scores.resize(static_cast<std::size_t>(count));
  return scores;
}

// ---------------------------------------------------------------------------------------
// heatmaps

enum class Interpolation { Bilinear, Nearest };

struct HeatmapGrid {
  int height = 0;
  int width = 0;
  Matrix values;                   // H x W
  std::optional<Matrix> upsampled;  // target resolution
};

/// Resamples with pixel-center alignment; samples beyond the border clamp to the edge.
inline Matrix upsample(const Matrix& grid, int out_h, int out_w, Interpolation mode = Interpolation::Bilinear) {
  if (out_h < 1 || out_w < 1 || grid.size() == 0) throw DimensionError("upsample: empty shape");
  const auto in_h = grid.rows(), in_w = grid.cols();
  Matrix out(out_h, out_w);
  const double sy = static_cast<double>(in_h) / out_h, sx = static_cast<double>(in_w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      if (mode == Interpolation::Nearest) {
        const auto r = std::min<Eigen::Index>(in_h - 1, static_cast<Eigen::Index>(std::floor((y + 0.5) * sy)));
        const auto c = std::min<Eigen::Index>(in_w - 1, static_cast<Eigen::Index>(std::floor((x + 0.5) * sx)));
        out(y, x) = grid(r, c);
        continue;
      }
      const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
      const auto r0 = static_cast<Eigen::Index>(std::floor(fy)), c0 = static_cast<Eigen::Index>(std::floor(fx));
      const auto r1 = std::min(r0 + 1, in_h - 1), c1 = std::min(c0 + 1, in_w - 1);
      const double wy = fy - r0, wx = fx - c0;
      out(y, x) = (1 - wy) * ((1 - wx) * grid(r0, c0) + wx * grid(r0, c1)) +
                  wy * ((1 - wx) * grid(r1, c0) + wx * grid(r1, c1));
    }
  }
  return out;
}

/// From a mixed map: +pos_val at pos_loc and -neg_val at neg_loc for every channel,
/// accumulated on the feature grid, optionally weighted by A[c, class].
inline HeatmapGrid heatmap_from_mixed(const FeatureMap& mixed, const std::optional<Vector>& channel_weights) {
  const PooledVector pooled = mx_pool(mixed);
  HeatmapGrid h;
  h.height = mixed.height();
  h.width = mixed.width();
  h.values = Matrix::Zero(h.height, h.width);
  for (int c = 0; c < mixed.channels(); ++c) {
    const double w = channel_weights ? (*channel_weights)[c] : 1.0;
    h.values(pooled.pos_loc[c].row, pooled.pos_loc[c].col) += w * pooled.pos_val[c];
    h.values(pooled.neg_loc[c].row, pooled.neg_loc[c].col) -= w * pooled.neg_val[c];
  }
  return h;
}

inline HeatmapGrid heatmap(const FeatureMap& f, const HeadParams& p, std::optional<int> class_weighting = {},
                           std::optional<Shape2> upsample_to = {},
                           Interpolation mode = Interpolation::Bilinear) {
  require_channels(f, p.channels(), "heatmap");
  std::optional<Vector> weights;
  if (class_weighting) {
    if (*class_weighting < 0 || *class_weighting >= p.classes()) throw ParameterError("heatmap: class out of range");
    weights = effective_weights(p).col(*class_weighting);
  }
  HeatmapGrid h = heatmap_from_mixed(mix_channels(f, channel_map(p)), weights);
  if (upsample_to) h.upsampled = upsample(h.values, upsample_to->height, upsample_to->width, mode);
  return h;
}

// ---------------------------------------------------------------------------------------
// significant channels

/// Smallest n such that the n largest |contributions| carry at least `threshold` of the total
/// absolute mass. All-zero contributions give 0.
inline int significant_channels(const Vector& contributions, double threshold = 0.95) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ParameterError("significant_channels: threshold must lie in (0, 1]");
  std::vector<double> mags(static_cast<std::size_t>(contributions.size()));
  for (Eigen::Index i = 0; i < contributions.size(); ++i) mags[static_cast<std::size_t>(i)] = std::abs(contributions[i]);
  std::sort(mags.begin(), mags.end(), std::greater<>());
  const double total = std::accumulate(mags.begin(), mags.end(), 0.0);
  if (total == 0.0) return 0;
  double prefix = 0.0;
  for (std::size_t n = 0; n < mags.size(); ++n) {
    prefix += mags[n];
    if (prefix / total >= threshold) return static_cast<int>(n + 1);
  }
  return static_cast<int>(mags.size());
}

inline int significant_channels(const Attribution& attr, double threshold = 0.95) {
  return significant_channels(attr.contributions, threshold);
}

struct SignificanceEntry {
  std::uint32_t image_id = 0;
  int predicted = 0;
  int n = 0;
};

struct SignificanceSummary {
  std::vector<SignificanceEntry> entries;
  double mean = 0.0;
  double median = 0.0;
  double variance = 0.0;  // population variance
};

inline SignificanceSummary summarize_significance(std::vector<SignificanceEntry> entries) {
  SignificanceSummary s;
  s.entries = std::move(entries);
  if (s.entries.empty()) return s;
  std::vector<double> ns;
  for (const auto& e : s.entries) ns.push_back(e.n);
  std::sort(ns.begin(), ns.end());  // sorted first so the sums do not depend on image order
  const double count = static_cast<double>(ns.size());
  s.mean = std::accumulate(ns.begin(), ns.end(), 0.0) / count;
  for (double v : ns) s.variance += (v - s.mean) * (v - s.mean);
  s.variance /= count;
  const std::size_t mid = ns.size() / 2;
  s.median = ns.size() % 2 ? ns[mid] : 0.5 * (ns[mid - 1] + ns[mid]);
  return s;
}

/// significant_channels at each image's predicted class.
inline SignificanceSummary significance_density(const std::vector<const FeatureMap*>& images, const HeadParams& p,
                                                double threshold = 0.95) {
  if (images.empty()) throw ParameterError("significance_density: empty dataset");
  const Matrix u = channel_map(p);
  const Matrix a = effective_weights(p);
  std::vector<SignificanceEntry> entries(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const FeatureMap& f = *images[i];
    const Vector pooled = inference_pool(f, p, u).values;
    const Vector logits = a.transpose() * pooled + p.bias;
    const int k = static_cast<int>(first_argmax(logits));
    entries[i] = {f.image_id, k, significant_channels(attribution_from_pooled(pooled, a, p.bias, k), threshold)};
  });
  return summarize_significance(std::move(entries));
}

// ---------------------------------------------------------------------------------------
// RV coefficient

/// RV = tr(Sxy Syx) / sqrt(tr(Sxx^2) tr(Syy^2)) on column-centered X (n x p), Y (n x q).
inline double rv_coefficient(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw DimensionError("rv_coefficient: row counts differ");
  if (x.rows() < 2) throw DimensionError("rv_coefficient: need at least 2 observations");
  if (x.cols() < 1 || y.cols() < 1) throw DimensionError("rv_coefficient: empty configuration");
  const Matrix xc = x.rowwise() - x.colwise().mean();
  const Matrix yc = y.rowwise() - y.colwise().mean();
  const Matrix sxy = xc.transpose() * yc;
  const double sxx2 = (xc.transpose() * xc).squaredNorm();
  const double syy2 = (yc.transpose() * yc).squaredNorm();
  if (sxx2 == 0.0 || syy2 == 0.0) throw NumericError("rv_coefficient: zero-variance configuration");
  return std::clamp(sxy.squaredNorm() / std::sqrt(sxx2 * syy2), 0.0, 1.0);
}

struct ChannelRvSummary {
  double mean_pairwise_rv = 0.0;
  std::size_t pairs = 0;
  std::vector<int> excluded;  // constant channels
};

/// Mean of RV(v_i, v_j) over channel pairs i < j of an images x channels matrix. For single
/// columns RV reduces to the squared Pearson correlation.
inline ChannelRvSummary channel_rv_summary(const Matrix& features) {
  if (features.rows() < 2) throw DimensionError("channel_rv_summary: need at least 2 images");
  ChannelRvSummary s;
  const Matrix centered = features.rowwise() - features.colwise().mean();
  std::vector<Eigen::Index> keep;
  for (Eigen::Index c = 0; c < centered.cols(); ++c) {
    if (centered.col(c).squaredNorm() > 0.0) keep.push_back(c);
    else s.excluded.push_back(static_cast<int>(c));
  }
  if (keep.size() < 2) return s;
  Matrix z(centered.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) z.col(static_cast<Eigen::Index>(j)) = centered.col(keep[j]).normalized();
  const Matrix corr = z.transpose() * z;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < corr.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < corr.cols(); ++j) sum += corr(i, j) * corr(i, j);
  }
  s.pairs = keep.size() * (keep.size() - 1) / 2;
  s.mean_pairwise_rv = sum / static_cast<double>(s.pairs);
  return s;
}

/// Images x d matrix of the pooled channel values the head classifies with.
inline Matrix pooled_feature_matrix(const std::vector<const FeatureMap*>& images, const HeadParams& p) {
  const Matrix u = channel_map(p);
  Matrix out(static_cast<Eigen::Index>(images.size()), p.channels());
  parallel_for(images.size(), [&](std::size_t i) {
    out.row(static_cast<Eigen::Index>(i)) = inference_pool(*images[i], p, u).values.transpose();
  });
  return out;
}

inline Matrix avg_pooled_feature_matrix(const std::vector<const FeatureMap*>& images, int channels) {
  Matrix out(static_cast<Eigen::Index>(images.size()), channels);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require_channels(*images[i], channels, "avg_pooled_feature_matrix");
    out.row(static_cast<Eigen::Index>(i)) = avg_pool(*images[i]).transpose();
  }
  return out;
}

struct RvReport {
  ChannelRvSummary head;      // pooled features of the given head
  ChannelRvSummary baseline;  // avg-pooled backbone features
  std::vector<std::string> warnings;
};

inline RvReport channel_rv_report(const std::vector<const FeatureMap*>& images, const HeadParams& p) {
  if (images.empty()) throw ParameterError("channel_rv_report: empty dataset");
  RvReport r;
  r.head = channel_rv_summary(pooled_feature_matrix(images, p));
  r.baseline = channel_rv_summary(avg_pooled_feature_matrix(images, p.channels()));
  auto warn = [&](const char* which, const ChannelRvSummary& s) {
    if (!s.excluded.empty()) {
      r.warnings.push_back(std::string(which) + ": excluded " + std::to_string(s.excluded.size()) +
                           " constant channel(s)");
    }
    if (s.pairs == 0) r.warnings.push_back(std::string(which) + ": fewer than 2 non-constant channels");
  };
  warn("head", r.head);
  warn("baseline", r.baseline);
  return r;
}

}  // namespace infodisent
