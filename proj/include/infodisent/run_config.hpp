#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>

#include "infodisent/errors.hpp"
#include "infodisent/head.hpp"
#include "infodisent/train.hpp"

namespace infodisent {

/// Settings for one CLI invocation: a key=value file plus flag overrides.
struct RunConfig {
  TrainConfig train;
  std::string features;
  std::string val_features;
  std::string gallery_features;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint32_t> image;
  std::optional<int> class_id;
  int top_k = 5;
  int prototypes = 5;
  double threshold = 0.95;
  std::optional<int> source_height;
  std::optional<int> source_width;
};

class ConfigError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config: invalid value '" + std::string(v) + "' for '" + std::string(key) + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: invalid boolean '" + std::string(v) + "' for '" + std::string(key) + "'");
}

}  // namespace detail

/// Applies one setting; unknown keys are rejected. Keys accept '-' or '_' as separator.
inline void apply_setting(RunConfig& rc, std::string key, std::string_view value) {
  using detail::parse_number;
  for (auto& ch : key) {
    if (ch == '-') ch = '_';
  }
  const std::string_view v = detail::trim(value);
  TrainConfig& t = rc.train;
  if (key == "lr") t.lr = parse_number<double>(key, v);
  else if (key == "momentum") t.momentum = parse_number<double>(key, v);
  else if (key == "damping") t.damping = parse_number<double>(key, v);
  else if (key == "weight_decay") t.weight_decay = parse_number<double>(key, v);
  else if (key == "weight_decay_generator") t.weight_decay_generator = parse_number<double>(key, v);
  else if (key == "weight_decay_class_weights") t.weight_decay_class_weights = parse_number<double>(key, v);
  else if (key == "weight_decay_bias") t.weight_decay_bias = parse_number<double>(key, v);
  else if (key == "epochs") t.epochs = parse_number<int>(key, v);
  else if (key == "batch_size") t.batch_size = parse_number<int>(key, v);
  else if (key == "tau_start") t.tau_start = parse_number<double>(key, v);
  else if (key == "tau_end") t.tau_end = parse_number<double>(key, v);
  else if (key == "anneal_fraction") t.anneal_fraction = parse_number<double>(key, v);
  else if (key == "gumbel_noise") t.gumbel_noise = detail::parse_bool(key, v);
  else if (key == "plateau_patience") t.plateau_patience = parse_number<int>(key, v);
  else if (key == "plateau_factor") t.plateau_factor = parse_number<double>(key, v);
  else if (key == "plateau_min_delta") t.plateau_min_delta = parse_number<double>(key, v);
  else if (key == "val_fraction") t.val_fraction = parse_number<double>(key, v);
  else if (key == "init_scale") t.init_scale = parse_number<double>(key, v);
  else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "head" || key == "head_kind") t.head_kind = parse_head_kind(std::string(v));
  else if (key == "features") rc.features = std::string(v);
  else if (key == "val_features") rc.val_features = std::string(v);
  else if (key == "gallery_features") rc.gallery_features = std::string(v);
  else if (key == "checkpoint") rc.checkpoint = std::string(v);
  else if (key == "out") rc.out = std::string(v);
  else if (key == "image") rc.image = parse_number<std::uint32_t>(key, v);
  else if (key == "class") rc.class_id = parse_number<int>(key, v);
  else if (key == "top_k") rc.top_k = parse_number<int>(key, v);
  else if (key == "prototypes") rc.prototypes = parse_number<int>(key, v);
  else if (key == "threshold") rc.threshold = parse_number<double>(key, v);
  else if (key == "source_height") rc.source_height = parse_number<int>(key, v);
  else if (key == "source_width") rc.source_width = parse_number<int>(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

/// Parses `key = value` lines; '#' starts a comment line.
inline void parse_config_text(RunConfig& rc, std::string_view text) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = detail::trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    apply_setting(rc, std::string(detail::trim(line.substr(0, eq))), line.substr(eq + 1));
  }
}

inline void load_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  const std::string text(std::istreambuf_iterator<char>(in), {});
  parse_config_text(rc, text);
}

/// Serialized settings, echoed into checkpoints. Only training-relevant keys are emitted.
inline std::string echo_train_config(const TrainConfig& t) {
  std::string s;
  auto put = [&s](const char* k, const std::string& v) { s += std::string(k) + "=" + v + "\n"; };
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  put("head", to_string(t.head_kind));
  put("lr", num(t.lr));
  put("momentum", num(t.momentum));
  put("damping", num(t.damping));
  put("weight_decay", num(t.weight_decay));
  if (t.weight_decay_generator) put("weight_decay_generator", num(*t.weight_decay_generator));
  if (t.weight_decay_class_weights) put("weight_decay_class_weights", num(*t.weight_decay_class_weights));
  if (t.weight_decay_bias) put("weight_decay_bias", num(*t.weight_decay_bias));
  put("epochs", std::to_string(t.epochs));
  put("batch_size", std::to_string(t.batch_size));
  put("tau_start", num(t.tau_start));
  put("tau_end", num(t.tau_end));
  put("anneal_fraction", num(t.anneal_fraction));
  put("gumbel_noise", t.gumbel_noise ? "true" : "false");
  put("plateau_patience", std::to_string(t.plateau_patience));
  put("plateau_factor", num(t.plateau_factor));
  put("plateau_min_delta", num(t.plateau_min_delta));
  put("val_fraction", num(t.val_fraction));
  put("init_scale", num(t.init_scale));
  put("seed", std::to_string(t.seed));
  return s;
}

inline void require_readable(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("missing required ") + what);
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError(std::string(what) + " '" + path + "' does not exist or is not a file");
  }
}

}  // namespace infodisent
