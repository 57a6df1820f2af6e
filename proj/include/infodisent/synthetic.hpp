#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "infodisent/errors.hpp"
#include "infodisent/feature_map.hpp"
#include "infodisent/linalg.hpp"
#include "infodisent/parallel.hpp"

namespace infodisent {

/// Rotated-Gaussian feature maps: latent pixels are N(0, noise^2) in every dimension; one
/// random pixel per image additionally carries `amplitude` along latent axis `label`. The
/// latent grid is then mixed by a fixed random rotation R = exp(S), S skew, so every observed
/// channel sees a blend of all class directions.
struct SyntheticSpec {
  int classes = 2;
  int channels = 16;
  int train_per_class = 500;
  int test_per_class = 200;
  int height = 3;
  int width = 3;
  double amplitude = 12.0;
  double noise = 1.0;
  std::uint64_t seed = 7;
};

struct SyntheticData {
  FeatureSet train;
  FeatureSet test;
  Matrix rotation;
};

inline Matrix random_rotation(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix g(d, d);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n01(rng);
  return expm(skew(g));
}

inline FeatureMap synthetic_image(const SyntheticSpec& spec, const Matrix& rotation, std::uint32_t label,
                                  std::uint32_t image_id, std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, spec.height * spec.width - 1);
  Matrix latent(spec.channels, spec.height * spec.width);
  for (Eigen::Index i = 0; i < latent.size(); ++i) latent.data()[i] = spec.noise * n01(rng);
  latent(static_cast<Eigen::Index>(label), pick(rng)) += spec.amplitude;
  FeatureMap f(spec.channels, spec.height, spec.width);
  f.as_matrix() = rotation * latent;
  f.image_id = image_id;
  f.label = label;
  return f;
}

inline SyntheticData make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.classes > spec.channels) {
    throw ParameterError("make_synthetic: need 1 <= classes <= channels");
  }
  std::mt19937_64 rng(mix_seed(spec.seed));
  SyntheticData data;
  data.rotation = random_rotation(spec.channels, rng);
  auto fill = [&](FeatureSet& set, int per_class, std::uint32_t first_id) {
    set.channels = spec.channels;
    set.num_classes = spec.classes;
    std::uint32_t id = first_id;
    for (int i = 0; i < per_class; ++i) {
      for (int k = 0; k < spec.classes; ++k) {
        set.images.push_back(synthetic_image(spec, data.rotation, static_cast<std::uint32_t>(k), id++, rng));
      }
    }
  };
  fill(data.train, spec.train_per_class, 0);
  fill(data.test, spec.test_per_class, static_cast<std::uint32_t>(spec.train_per_class * spec.classes));
  return data;
}

}  // namespace infodisent
