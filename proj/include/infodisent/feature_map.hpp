#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "infodisent/errors.hpp"
#include "infodisent/linalg.hpp"

namespace infodisent {

struct GridLoc {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridLoc&, const GridLoc&) = default;
};

/// One image's backbone output: C channels over an H x W grid.
///
/// Values are stored channel-major, row-major (index = (c * H + r) * W + s), matching the
/// on-disk record layout. Storage is double; file readers widen from 32-bit.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int channels, int height, int width)
      : channels_(channels), height_(height), width_(width) {
    if (channels < 1) throw DimensionError("FeatureMap: channel count must be >= 1");
    if (height < 1 || width < 1) throw DimensionError("FeatureMap: empty spatial grid");
    data_.assign(static_cast<std::size_t>(channels) * height * width, 0.0);
  }
  FeatureMap(int channels, int height, int width, std::vector<double> data)
      : FeatureMap(channels, height, width) {
    if (data.size() != data_.size()) throw DimensionError("FeatureMap: data size mismatch");
    data_ = std::move(data);
  }

  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int pixels() const { return height_ * width_; }

  double& at(int c, int r, int s) { return data_[index(c, r, s)]; }
  double at(int c, int r, int s) const { return data_[index(c, r, s)]; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  /// d x (H*W) view: column p is the channel vector of pixel p (row-major).
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
  as_matrix() const {
    return {data_.data(), channels_, pixels()};
  }
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> as_matrix() {
    return {data_.data(), channels_, pixels()};
  }

  bool finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::uint32_t image_id = 0;
  std::optional<std::uint32_t> label;

 private:
  std::size_t index(int c, int r, int s) const {
    return (static_cast<std::size_t>(c) * height_ + r) * width_ + s;
  }

  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// In-memory dataset: images share the channel count, resolutions may differ.
struct FeatureSet {
  int channels = 0;
  int num_classes = 0;
  std::vector<FeatureMap> images;

  bool empty() const { return images.empty(); }
  std::size_t size() const { return images.size(); }

  void validate() const {
    if (channels < 1) throw DimensionError("FeatureSet: channel count must be >= 1");
    for (const auto& f : images) {
      if (f.channels() != channels) {
        throw DimensionError("FeatureSet: image " + std::to_string(f.image_id) + " has " +
                             std::to_string(f.channels()) + " channels, expected " +
                             std::to_string(channels));
      }
      if (f.label && num_classes > 0 && *f.label >= static_cast<std::uint32_t>(num_classes)) {
        throw ParameterError("FeatureSet: label out of range for image " +
                             std::to_string(f.image_id));
      }
    }
  }
};

}  // namespace infodisent
