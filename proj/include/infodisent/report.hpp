#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "infodisent/errors.hpp"
#include "infodisent/explain.hpp"
#include "infodisent/linalg.hpp"

namespace infodisent {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Tab-separated records with a leading `# field\tfield...` schema line.
class TsvWriter {
 public:
  TsvWriter(const std::string& path, const std::vector<std::string>& fields)
      : out_(path, std::ios::trunc), path_(path), width_(fields.size()) {
    if (!out_) throw FormatError("cannot write '" + path + "'");
    out_ << "# ";
    row_impl(fields);
  }

  void row(const std::vector<std::string>& values) {
    if (values.size() != width_) throw FormatError("TsvWriter: row width mismatch in '" + path_ + "'");
    row_impl(values);
  }

 private:
  void row_impl(const std::vector<std::string>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "\t" : "") << values[i];
    out_ << '\n';
    if (!out_) throw FormatError("write failed for '" + path_ + "'");
  }
  std::ofstream out_;
  std::string path_;
  std::size_t width_;
};

struct TsvTable {
  std::vector<std::string> fields;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    auto it = std::find(fields.begin(), fields.end(), name);
    if (it == fields.end()) throw FormatError("TSV: no column '" + name + "'");
    return static_cast<std::size_t>(it - fields.begin());
  }
};

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) out.push_back(cell);
  return out;
}

inline TsvTable read_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  TsvTable t;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw FormatError("TSV: missing schema line in '" + path + "'");
  t.fields = split_tabs(line.substr(2));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_tabs(line);
    if (cells.size() != t.fields.size()) throw FormatError("TSV: ragged row in '" + path + "'");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

// ---------------------------------------------------------------------------------------
// record exports

inline std::string fmt_loc(GridLoc l) { return std::to_string(l.row) + "," + std::to_string(l.col); }

inline void write_attribution(const std::string& path, const Attribution& attr, const PooledVector& pooled,
                              const Vector& class_column) {
  TsvWriter w(path, {"rank", "channel", "class", "contribution", "weight", "value", "pos_val", "pos_loc", "neg_val",
                     "neg_loc"});
  const bool locs = pooled.pos_loc.size() == static_cast<std::size_t>(pooled.values.size());
  for (std::size_t r = 0; r < attr.ranking.size(); ++r) {
    const int c = attr.ranking[r];
    w.row({std::to_string(r), std::to_string(c), std::to_string(attr.class_id), fmt_double(attr.contributions[c]),
           fmt_double(class_column[c]), fmt_double(pooled.values[c]),
           locs ? fmt_double(pooled.pos_val[c]) : "NA", locs ? fmt_loc(pooled.pos_loc[c]) : "NA",
           locs ? fmt_double(pooled.neg_val[c]) : "NA", locs ? fmt_loc(pooled.neg_loc[c]) : "NA"});
  }
}

inline void write_prototypes(const std::string& path, const std::vector<PrototypeRecord>& records) {
  TsvWriter w(path, {"channel", "rank", "image_id", "activation", "feat_row", "feat_col", "x0", "y0", "x1", "y1"});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const PrototypeRecord& p = records[i];
    auto box = [&](int v) { return p.input_box ? std::to_string(v) : std::string("NA"); };
    const Box b = p.input_box.value_or(Box{});
    w.row({std::to_string(p.channel), std::to_string(i), std::to_string(p.image_id), fmt_double(p.activation),
           std::to_string(p.feat_loc.row), std::to_string(p.feat_loc.col), box(b.x0), box(b.y0), box(b.x1), box(b.y1)});
  }
}

// ---------------------------------------------------------------------------------------
// heatmap images

struct HeatmapScale {
  double bound = 1.0;  // values map from [-bound, bound]; zero is mid-gray (128)
};

inline HeatmapScale heatmap_scale(const Matrix& values) {
  const double b = values.size() ? values.cwiseAbs().maxCoeff() : 0.0;
  return {b > 0.0 ? b : 1.0};
}

inline int to_gray(double v, double bound) {
  const double t = std::clamp(v / bound, -1.0, 1.0);
  return static_cast<int>(std::lround(127.5 * (1.0 + t)));
}

/// Writes <base>.pgm (signed diverging gray), <base>.ppm (blue/gray/red) and <base>.scale.txt.
inline HeatmapScale write_heatmap_images(const std::string& base, const Matrix& values) {
  if (values.size() == 0) throw DimensionError("write_heatmap_images: empty grid");
  const HeatmapScale scale = heatmap_scale(values);
  const auto h = values.rows(), w = values.cols();

  std::ofstream pgm(base + ".pgm", std::ios::binary | std::ios::trunc);
  std::ofstream ppm(base + ".ppm", std::ios::binary | std::ios::trunc);
  if (!pgm || !ppm) throw FormatError("cannot write heatmap '" + base + "'");
  pgm << "P5\n" << w << ' ' << h << "\n255\n";
  ppm << "P6\n" << w << ' ' << h << "\n255\n";
  for (Eigen::Index r = 0; r < h; ++r) {
    for (Eigen::Index c = 0; c < w; ++c) {
      const double t = std::clamp(values(r, c) / scale.bound, -1.0, 1.0);
      pgm.put(static_cast<char>(to_gray(values(r, c), scale.bound)));
      const int hot = static_cast<int>(std::lround(128.0 + 127.0 * std::abs(t)));
      const int cold = static_cast<int>(std::lround(128.0 * (1.0 - std::abs(t))));
      const int red = t > 0 ? hot : (t < 0 ? cold : 128);
      const int blue = t < 0 ? hot : (t > 0 ? cold : 128);
      const int green = t == 0 ? 128 : cold;
      ppm.put(static_cast<char>(red));
      ppm.put(static_cast<char>(green));
      ppm.put(static_cast<char>(blue));
    }
  }
  std::ofstream side(base + ".scale.txt", std::ios::trunc);
  side << "min=" << fmt_double(-scale.bound) << "\nmax=" << fmt_double(scale.bound) << "\nzero_gray=128\nheight=" << h
       << "\nwidth=" << w << "\n";
  if (!pgm || !ppm || !side) throw FormatError("write failed for heatmap '" + base + "'");
  return scale;
}

}  // namespace infodisent
