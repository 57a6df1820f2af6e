// Command-line front end: train, evaluate, explain-image, explain-class, analyze, export, synth.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "infodisent/infodisent.hpp"

namespace fs = std::filesystem;
using namespace infodisent;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Flag name -> config key; flags override the config file.
struct FlagSet {
  std::optional<std::string> config;
  std::map<std::string, std::optional<std::string>> values;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    app->add_option(flag, values[key], help);
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (config) {
      require_readable(*config, "config file");
      load_config_file(rc, *config);
    }
    for (const auto& [key, v] : values) {
      if (v) apply_setting(rc, key, *v);
    }
    return rc;
  }
};

void add_common(CLI::App* app, FlagSet& flags) {
  app->add_option("--config", flags.config, "key=value config file");
  flags.add(app, "--features", "features", "IDFM feature set");
  flags.add(app, "--checkpoint", "checkpoint", "head checkpoint");
  flags.add(app, "--out", "out", "output directory");
  flags.add(app, "--seed", "seed", "random seed");
}

void ensure_out_dir(const RunConfig& rc) {
  if (rc.out.empty()) throw ConfigError("missing required --out");
  std::error_code ec;
  fs::create_directories(rc.out, ec);
  if (ec || !fs::is_directory(rc.out)) throw ConfigError("cannot create output directory '" + rc.out + "'");
}

std::string out_path(const RunConfig& rc, const std::string& name) { return (fs::path(rc.out) / name).string(); }

void save_atomic(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  save_checkpoint(tmp, ck);
  fs::rename(tmp, path);
}

Checkpoint load_for(const RunConfig& rc, int channels) {
  require_readable(rc.checkpoint, "checkpoint");
  return load_checkpoint(rc.checkpoint, ExpectedDims{channels, 0});
}

FeatureSet load_features(const std::string& path, const char* what) {
  require_readable(path, what);
  return read_featureset(path);
}

std::optional<Shape2> source_shape(const RunConfig& rc) {
  if (rc.source_height && rc.source_width) return Shape2{*rc.source_height, *rc.source_width};
  return std::nullopt;
}

void write_galleries(const RunConfig& rc, const FeatureSet& gallery, const HeadParams& p, const std::vector<int>& channels) {
  if (channels.empty()) return;
  const auto galleries = mine_prototypes(pointers(gallery), p, channels, rc.prototypes, source_shape(rc));
  for (std::size_t i = 0; i < channels.size(); ++i) {
    write_prototypes(out_path(rc, "gallery_channel_" + std::to_string(channels[i]) + ".tsv"), galleries[i]);
  }
}

// ---------------------------------------------------------------------------------------

int cmd_train(const RunConfig& rc) {
  require_readable(rc.features, "--features");
  if (!rc.val_features.empty()) require_readable(rc.val_features, "val_features");
  ensure_out_dir(rc);
  const FeatureSet train_set = read_featureset(rc.features);
  std::optional<FeatureSet> val_set;
  if (!rc.val_features.empty()) val_set = read_featureset(rc.val_features);

  const std::string ck_path = rc.checkpoint.empty() ? out_path(rc, "checkpoint.idck") : rc.checkpoint;
  std::ofstream log(out_path(rc, "metrics.log"), std::ios::trunc);
  if (!log) throw ConfigError("cannot write metrics log in '" + rc.out + "'");
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[64];
  std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  log << "# infodisent train started=" << stamp << "\n";

  const std::string echo = echo_train_config(rc.train);
  TrainCallbacks cb;
  cb.on_metrics = [&](const EpochMetrics& m) { log << format_metrics(m) << "\n" << std::flush; };
  cb.on_epoch_end = [&](const TrainState& s) { save_atomic(ck_path, Checkpoint{s.params, snapshot(s), echo}); };
  const TrainResult result = train(train_set, val_set ? &*val_set : nullptr, rc.train, cb);
  save_atomic(ck_path, Checkpoint{result.params, snapshot(result.state), echo});

  const auto& last = result.metrics.back();
  std::cout << "trained " << to_string(rc.train.head_kind) << " head: " << format_metrics(last) << "\n"
            << "checkpoint: " << ck_path << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& rc) {
  const FeatureSet set = load_features(rc.features, "--features");
  const Checkpoint ck = load_for(rc, set.channels);
  const EvalResult r = evaluate(set, ck.params);
  char line[160];
  std::snprintf(line, sizeof(line), "accuracy=%.6f loss=%.6f count=%zu", r.accuracy, r.mean_loss, r.count);
  std::cout << line << "\n";
  if (!rc.out.empty()) {
    ensure_out_dir(rc);
    TsvWriter w(out_path(rc, "evaluation.tsv"), {"count", "accuracy", "mean_loss"});
    w.row({std::to_string(r.count), fmt_double(r.accuracy), fmt_double(r.mean_loss)});
  }
  return 0;
}

int cmd_explain_image(const RunConfig& rc) {
  const FeatureSet set = load_features(rc.features, "--features");
  if (!rc.gallery_features.empty()) require_readable(rc.gallery_features, "gallery_features");
  const Checkpoint ck = load_for(rc, set.channels);
  if (!rc.image) throw ConfigError("missing required --image");
  ensure_out_dir(rc);
  const HeadParams& p = ck.params;

  const FeatureMap* image = nullptr;
  for (const auto& f : set.images) {
    if (f.image_id == *rc.image) image = &f;
  }
  if (!image) throw ParameterError("image " + std::to_string(*rc.image) + " not found in '" + rc.features + "'");

  const Matrix u = channel_map(p);
  const HeadOutput out = forward(*image, p, u);
  const int predicted = static_cast<int>(first_argmax(out.logits));
  const int k = rc.class_id.value_or(predicted);
  const Attribution attr = attribute(*image, p, u, k);
  const PooledVector pooled = inference_pool(*image, p, u);
  const Matrix a = effective_weights(p);

  {
    TsvWriter w(out_path(rc, "explanation.tsv"), {"image_id", "label", "predicted", "class", "logit", "bias",
                                                  "contribution_sum", "significant_channels"});
    w.row({std::to_string(image->image_id), image->label ? std::to_string(*image->label) : "NA",
           std::to_string(predicted), std::to_string(k), fmt_double(out.logits[k]), fmt_double(attr.bias),
           fmt_double(attr.contributions.sum()), std::to_string(significant_channels(attr, rc.threshold))});
  }
  write_attribution(out_path(rc, "attribution.tsv"), attr, pooled, a.col(k));

  const std::vector<int> top = top_channels(attr, rc.top_k);
  {
    TsvWriter w(out_path(rc, "top_channels.tsv"), {"rank", "channel", "contribution"});
    for (std::size_t i = 0; i < top.size(); ++i) {
      w.row({std::to_string(i), std::to_string(top[i]), fmt_double(attr.contributions[top[i]])});
    }
  }
  const FeatureSet gallery = rc.gallery_features.empty() ? FeatureSet{} : read_featureset(rc.gallery_features);
  write_galleries(rc, rc.gallery_features.empty() ? set : gallery, p, top);

  const HeatmapGrid h = heatmap(*image, p, k, source_shape(rc));
  {
    TsvWriter w(out_path(rc, "heatmap_grid.tsv"), {"row", "col", "value"});
    for (int r = 0; r < h.height; ++r) {
      for (int c = 0; c < h.width; ++c) w.row({std::to_string(r), std::to_string(c), fmt_double(h.values(r, c))});
    }
  }
  write_heatmap_images(out_path(rc, "heatmap"), h.upsampled.value_or(h.values));
  std::cout << "image " << image->image_id << ": predicted " << predicted << ", explained class " << k << ", "
            << top.size() << " positive channel(s) written to " << rc.out << "\n";
  return 0;
}

int cmd_explain_class(const RunConfig& rc) {
  const FeatureSet set = load_features(rc.features, "--features");
  if (!rc.gallery_features.empty()) require_readable(rc.gallery_features, "gallery_features");
  const Checkpoint ck = load_for(rc, set.channels);
  if (!rc.class_id) throw ConfigError("missing required --class");
  ensure_out_dir(rc);
  const auto scores = class_key_channels(pointers(set), ck.params, *rc.class_id, rc.top_k);
  {
    TsvWriter w(out_path(rc, "key_channels.tsv"), {"rank", "channel", "score"});
    for (std::size_t i = 0; i < scores.size(); ++i) {
      w.row({std::to_string(i), std::to_string(scores[i].channel), fmt_double(scores[i].score)});
    }
  }
  std::vector<int> channels;
  for (const auto& s : scores) channels.push_back(s.channel);
  const FeatureSet gallery = rc.gallery_features.empty() ? FeatureSet{} : read_featureset(rc.gallery_features);
  write_galleries(rc, rc.gallery_features.empty() ? set : gallery, ck.params, channels);
  std::cout << "class " << *rc.class_id << ": " << scores.size() << " key channel(s) written to " << rc.out << "\n";
  return 0;
}

int cmd_analyze(const RunConfig& rc) {
  const FeatureSet set = load_features(rc.features, "--features");
  const Checkpoint ck = load_for(rc, set.channels);
  ensure_out_dir(rc);
  const auto images = pointers(set);
  const SignificanceSummary sig = significance_density(images, ck.params, rc.threshold);
  {
    TsvWriter w(out_path(rc, "significant_channels.tsv"), {"image_id", "predicted", "n"});
    for (const auto& e : sig.entries) w.row({std::to_string(e.image_id), std::to_string(e.predicted), std::to_string(e.n)});
  }
  {
    TsvWriter w(out_path(rc, "significance_summary.tsv"), {"count", "threshold", "mean", "median", "variance", "channels"});
    w.row({std::to_string(sig.entries.size()), fmt_double(rc.threshold), fmt_double(sig.mean), fmt_double(sig.median),
           fmt_double(sig.variance), std::to_string(ck.params.channels())});
  }
  const RvReport rv = channel_rv_report(images, ck.params);
  {
    TsvWriter w(out_path(rc, "rv_report.tsv"), {"features", "mean_pairwise_rv", "pairs", "excluded_channels"});
    auto row = [&](const char* name, const ChannelRvSummary& s) {
      w.row({name, s.pairs ? fmt_double(s.mean_pairwise_rv) : "NA", std::to_string(s.pairs),
             std::to_string(s.excluded.size())});
    };
    row(to_string(ck.params.kind), rv.head);
    row("avg_pool_baseline", rv.baseline);
  }
  for (const auto& w : rv.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "significant channels: mean=" << sig.mean << " median=" << sig.median << " variance=" << sig.variance
            << "; mean pairwise RV head=" << rv.head.mean_pairwise_rv << " baseline=" << rv.baseline.mean_pairwise_rv
            << "\n";
  return 0;
}

int cmd_export(const RunConfig& rc) {
  const FeatureSet set = load_features(rc.features, "--features");
  const Checkpoint ck = load_for(rc, set.channels);
  ensure_out_dir(rc);
  const HeadParams& p = ck.params;
  std::vector<std::string> fields = {"image_id", "label", "predicted"};
  for (int c = 0; c < p.channels(); ++c) fields.push_back("v" + std::to_string(c));
  for (int k = 0; k < p.classes(); ++k) fields.push_back("logit" + std::to_string(k));
  TsvWriter w(out_path(rc, "pooled.tsv"), fields);
  const Matrix u = channel_map(p);
  for (const auto& f : set.images) {
    const HeadOutput out = forward(f, p, u);
    std::vector<std::string> row = {std::to_string(f.image_id), f.label ? std::to_string(*f.label) : "NA",
                                    std::to_string(first_argmax(out.logits))};
    for (int c = 0; c < p.channels(); ++c) row.push_back(fmt_double(out.pooled.values[c]));
    for (int k = 0; k < p.classes(); ++k) row.push_back(fmt_double(out.logits[k]));
    w.row(row);
  }
  std::cout << "exported " << set.size() << " pooled vector(s) to " << out_path(rc, "pooled.tsv") << "\n";
  return 0;
}

int cmd_synth(const std::string& out, const SyntheticSpec& spec) {
  if (out.empty()) throw ConfigError("missing required --out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw ConfigError("cannot create output directory '" + out + "'");
  const SyntheticData data = make_synthetic(spec);
  write_featureset((fs::path(out) / "train.idfm").string(), data.train);
  write_featureset((fs::path(out) / "test.idfm").string(), data.test);
  std::cout << "wrote " << data.train.size() << " train / " << data.test.size() << " test images to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"InfoDisent interpretable classification head over precomputed feature maps"};
  app.require_subcommand(1);

  FlagSet train_flags, eval_flags, image_flags, class_flags, analyze_flags, export_flags;

  auto* train_cmd = app.add_subcommand("train", "train a head; writes checkpoint.idck and metrics.log");
  add_common(train_cmd, train_flags);
  train_flags.add(train_cmd, "--head", "head", "default|infodisent");
  train_flags.add(train_cmd, "--val-features", "val_features", "explicit validation IDFM set");
  train_flags.add(train_cmd, "--epochs", "epochs", "number of epochs");
  train_flags.add(train_cmd, "--lr", "lr", "initial learning rate");

  auto* eval_cmd = app.add_subcommand("evaluate", "hard-mode accuracy and mean loss");
  add_common(eval_cmd, eval_flags);

  auto* image_cmd = app.add_subcommand("explain-image", "attribution, top channels, galleries and heatmap of one image");
  add_common(image_cmd, image_flags);
  image_flags.add(image_cmd, "--image", "image", "image id");
  image_flags.add(image_cmd, "--class", "class", "explained class (default: predicted)");
  image_flags.add(image_cmd, "--top-k", "top_k", "number of channels");
  image_flags.add(image_cmd, "--threshold", "threshold", "significant-channel mass threshold");
  image_flags.add(image_cmd, "--gallery-features", "gallery_features", "IDFM set prototypes are mined from");

  auto* class_cmd = app.add_subcommand("explain-class", "key channels of a class with prototype galleries");
  add_common(class_cmd, class_flags);
  class_flags.add(class_cmd, "--class", "class", "class id");
  class_flags.add(class_cmd, "--top-k", "top_k", "number of channels");
  class_flags.add(class_cmd, "--gallery-features", "gallery_features", "IDFM set prototypes are mined from");

  auto* analyze_cmd = app.add_subcommand("analyze", "significant-channel counts and channel RV report");
  add_common(analyze_cmd, analyze_flags);
  analyze_flags.add(analyze_cmd, "--threshold", "threshold", "significant-channel mass threshold");

  auto* export_cmd = app.add_subcommand("export", "pooled channel values and logits for every image");
  add_common(export_cmd, export_flags);

  SyntheticSpec spec;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic rotated-Gaussian train/test IDFM pair");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--classes", spec.classes, "number of classes");
  synth_cmd->add_option("--channels", spec.channels, "channel count d");
  synth_cmd->add_option("--train-per-class", spec.train_per_class);
  synth_cmd->add_option("--test-per-class", spec.test_per_class);
  synth_cmd->add_option("--height", spec.height);
  synth_cmd->add_option("--width", spec.width);
  synth_cmd->add_option("--amplitude", spec.amplitude);
  synth_cmd->add_option("--seed", spec.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_flags.resolve());
    if (*eval_cmd) return cmd_evaluate(eval_flags.resolve());
    if (*image_cmd) return cmd_explain_image(image_flags.resolve());
    if (*class_cmd) return cmd_explain_class(class_flags.resolve());
    if (*analyze_cmd) return cmd_analyze(analyze_flags.resolve());
    if (*export_cmd) return cmd_export(export_flags.resolve());
    if (*synth_cmd) return cmd_synth(synth_out, spec);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
