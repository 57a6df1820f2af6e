#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "infodisent/errors.hpp"

namespace infodisent {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols() || m.rows() < 1) {
    throw DimensionError(std::string(what) + ": expected a non-empty square matrix, got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

/// Unconstrained d x d parameter whose skew part generates the orthogonal channel map.
class SkewGenerator {
 public:
  SkewGenerator() = default;
  explicit SkewGenerator(Matrix g) : g_(std::move(g)) {
    require_square(g_, "SkewGenerator");
    if (!all_finite(g_)) throw NumericError("SkewGenerator: non-finite entry");
  }
  static SkewGenerator zeros(Eigen::Index d) { return SkewGenerator(Matrix::Zero(d, d)); }

  Eigen::Index dim() const { return g_.rows(); }
  const Matrix& matrix() const { return g_; }
  Matrix& mutable_matrix() { return g_; }

 private:
  Matrix g_;
};

/// S = G - G^T. Antisymmetry is exact because each pair is formed by the same subtraction.
inline Matrix skew(const Matrix& g) {
  require_square(g, "skew");
  return g - g.transpose();
}

inline Matrix skew(const SkewGenerator& g) { return skew(g.matrix()); }

namespace detail {

// Scaled argument norm bound and Taylor degree for expm. With ||A||_1 <= 0.5 the
// truncation remainder is below 0.5^15 / 15! ~ 2.3e-17, i.e. under double epsilon.
inline constexpr double kExpmNormThreshold = 0.5;
inline constexpr int kExpmTaylorDegree = 14;

}  // namespace detail

/// Matrix exponential by scaling and squaring with a fixed-degree Taylor polynomial.
///
/// The input is scaled by 2^-s so that its 1-norm is at most 0.5, the degree-14 Taylor
/// polynomial is evaluated in Horner form, and the result is squared s times.
inline Matrix expm(const Matrix& a) {
  require_square(a, "expm");
  if (!all_finite(a)) throw NumericError("expm: non-finite input");

  const Eigen::Index n = a.rows();
  const double norm1 = a.cwiseAbs().colwise().sum().maxCoeff();
  int squarings = 0;
  if (norm1 > detail::kExpmNormThreshold) {
    squarings = static_cast<int>(std::ceil(std::log2(norm1 / detail::kExpmNormThreshold)));
  }
  const Matrix scaled = a * std::ldexp(1.0, -squarings);

  const Matrix eye = Matrix::Identity(n, n);
  Matrix result = eye + scaled / static_cast<double>(detail::kExpmTaylorDegree);
  for (int j = detail::kExpmTaylorDegree - 1; j >= 1; --j) {
    result = eye + (scaled * result) / static_cast<double>(j);
  }
  for (int i = 0; i < squarings; ++i) result = result * result;
  return result;
}

/// Frechet derivative of expm at `a` in direction `e`: the upper-right block of
/// exp([[a, e], [0, a]]).
inline Matrix expm_frechet(const Matrix& a, const Matrix& e) {
  require_square(a, "expm_frechet");
  if (e.rows() != a.rows() || e.cols() != a.cols()) {
    throw DimensionError("expm_frechet: direction shape does not match the matrix");
  }
  const Eigen::Index n = a.rows();
  Matrix block = Matrix::Zero(2 * n, 2 * n);
  block.topLeftCorner(n, n) = a;
  block.topRightCorner(n, n) = e;
  block.bottomRightCorner(n, n) = a;
  return expm(block).topRightCorner(n, n);
}

/// Vector-Jacobian product of expm at `a` applied to the cotangent `cotangent`.
///
/// The adjoint of Dexp_A under the Frobenius inner product is Dexp_{A^T}, so the result is
/// the upper-right block of exp([[A^T, cotangent], [0, A^T]]).
inline Matrix expm_vjp(const Matrix& a, const Matrix& cotangent) {
  require_square(a, "expm_vjp");
  if (cotangent.rows() != a.rows() || cotangent.cols() != a.cols()) {
    throw DimensionError("expm_vjp: cotangent shape does not match the matrix");
  }
  if (!all_finite(cotangent)) throw NumericError("expm_vjp: non-finite cotangent");
  return expm_frechet(a.transpose(), cotangent);
}

/// Gradient with respect to the generator G of f(exp(G - G^T)), given dF/dU.
inline Matrix skew_expm_generator_grad(const Matrix& g, const Matrix& grad_u) {
  const Matrix m = expm_vjp(skew(g), grad_u);
  return m - m.transpose();
}

/// 64-bit FNV-1a over the raw bytes of the matrix, including its shape.
inline std::uint64_t fingerprint(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  const std::int64_t shape[2] = {static_cast<std::int64_t>(m.rows()),
                                 static_cast<std::int64_t>(m.cols())};
  mix(shape, sizeof(shape));
  mix(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  return h;
}

/// U = exp(G - G^T) together with the fingerprint of the generator it came from.
struct OrthogonalMap {
  Matrix u;
  std::uint64_t source_hash = 0;

  static OrthogonalMap from_generator(const Matrix& g) {
    return OrthogonalMap{expm(skew(g)), fingerprint(g)};
  }
  static OrthogonalMap from_generator(const SkewGenerator& g) { return from_generator(g.matrix()); }

  Eigen::Index dim() const { return u.rows(); }
};

/// Single-entry cache of the orthogonal map keyed by generator fingerprint.
///
/// Concurrent readers share the lock; a miss recomputes under the exclusive lock.
class OrthogonalCache {
 public:
  std::shared_ptr<const OrthogonalMap> get(const Matrix& g) const {
    const std::uint64_t key = fingerprint(g);
    {
      std::shared_lock lock(mutex_);
      if (cached_ && cached_->source_hash == key) return cached_;
    }
    auto fresh = std::make_shared<const OrthogonalMap>(OrthogonalMap{expm(skew(g)), key});
    std::unique_lock lock(mutex_);
    cached_ = fresh;
    ++misses_;
    return fresh;
  }

  std::size_t misses() const {
    std::shared_lock lock(mutex_);
    return misses_;
  }

 private:
  mutable std::shared_mutex mutex_;
  mutable std::shared_ptr<const OrthogonalMap> cached_;
  mutable std::size_t misses_ = 0;
};

}  // namespace infodisent
