// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>

#include "infodisent/infodisent.hpp"
#include "test_util.hpp"

using namespace infodisent;
using testing::random_map;
using testing::random_matrix;
using testing::random_vector;

namespace {

int failures = 0;

void report(const char* name, bool ok, const std::string& detail) {
  std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void orthogonality() {
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<int> dim(2, 64);
  std::uniform_real_distribution<double> scale(0.01, 3.0);
  double worst_orth = 0.0, worst_norm = 0.0;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 1000; ++i) {
    const int d = dim(rng);
    const Matrix u = expm(skew(random_matrix(d, d, rng, scale(rng))));
    worst_orth = std::max(worst_orth, (u * u.transpose() - Matrix::Identity(d, d)).cwiseAbs().maxCoeff());
    for (int px = 0; px < 4; ++px) {
      const Vector x = random_vector(d, rng);
      worst_norm = std::max(worst_norm, std::abs((u * x).norm() - x.norm()) / x.norm());
    }
  }
  const double t = seconds_since(t0);
  report("orthogonality", worst_orth <= 1e-6 && worst_norm <= 1e-8 && t < 10.0,
         fmt("max|UU^T-I|=%.3g (<=1e-6) max norm rel err=%.3g (<=1e-8) time=%.2fs (<10s)", worst_orth, worst_norm, t));
}

void gradient_integrity() {
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<int> dim(2, 8), grid(1, 4), classes(2, 5);
  std::uniform_real_distribution<double> tau(0.2, 1.0);
  double worst = 0.0;
  const double step = 1e-6;
  for (int inst = 0; inst < 100; ++inst) {
    const int d = dim(rng), k = classes(rng);
    HeadParams p = HeadParams::zeros(HeadKind::InfoDisent, d, k);
    p.generator = random_matrix(d, d, rng, 0.5);
    p.class_weights_raw = random_matrix(d, k, rng).cwiseAbs().array() + 0.05;
    p.bias = random_vector(k, rng);
    p.tau = tau(rng);
    FeatureMap f = random_map(d, grid(rng), grid(rng), rng, 2.0);
    f.label = static_cast<std::uint32_t>(inst % k);
    const auto [loss, g] = loss_and_gradient(f, p);
    auto check = [&](Matrix HeadParams::*member, const Matrix& analytic) {
      for (Eigen::Index i = 0; i < analytic.size(); ++i) {
        HeadParams plus = p, minus = p;
        (plus.*member).data()[i] += step;
        (minus.*member).data()[i] -= step;
        const double fd = (training_loss(f, plus) - training_loss(f, minus)) / (2 * step);
        worst = std::max(worst, testing::rel_err_floor(analytic.data()[i], fd, 1e-2));
      }
    };
    check(&HeadParams::generator, g.generator);
    check(&HeadParams::class_weights_raw, g.class_weights);
    for (Eigen::Index i = 0; i < k; ++i) {
      HeadParams plus = p, minus = p;
      plus.bias[i] += step;
      minus.bias[i] -= step;
      const double fd = (training_loss(f, plus) - training_loss(f, minus)) / (2 * step);
      worst = std::max(worst, testing::rel_err_floor(g.bias[i], fd, 1e-2));
    }
    (void)loss;
  }
  report("gradient_integrity", worst <= 1e-4, fmt("100 instances, max rel err=%.3g (<=1e-4)", worst));
}

void pooling_equivalence() {
  std::mt19937_64 rng(1003);
  std::uniform_int_distribution<int> dim(1, 12), grid(1, 7);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const FeatureMap f = random_map(dim(rng), grid(rng), grid(rng), rng);
    const PooledVector a = soft_pool(f, 0.5, true, nullptr), b = mx_pool(f);
    if (a.values != b.values || a.pos_loc != b.pos_loc || a.neg_loc != b.neg_loc) ++mismatches;
  }
  // Soft pooling at a small temperature, on maps whose positive and negative extremes lead
  // the runner-up by at least 0.5.
  double worst = 0.0;
  int tested = 0;
  while (tested < 1000) {
    const FeatureMap f = random_map(dim(rng), grid(rng), grid(rng), rng, 3.0);
    bool gapped = true;
    for (int c = 0; c < f.channels() && gapped; ++c) {
      std::vector<double> pos, neg;
      for (int r = 0; r < f.height(); ++r) {
        for (int s = 0; s < f.width(); ++s) {
          pos.push_back(std::max(0.0, f.at(c, r, s)));
          neg.push_back(std::max(0.0, -f.at(c, r, s)));
        }
      }
      for (auto* v : {&pos, &neg}) {
        std::sort(v->begin(), v->end(), std::greater<>());
        if (v->size() > 1 && (*v)[0] - (*v)[1] < 0.5) gapped = false;
      }
    }
    if (!gapped) continue;
    ++tested;
    const Vector diff = soft_pool(f, 0.01, false, nullptr).values - mx_pool(f).values;
    worst = std::max(worst, diff.cwiseAbs().maxCoeff());
  }
  report("pooling_equivalence", mismatches == 0 && worst <= 1e-4,
         fmt("hard==mx_pool mismatches=%d/1000; tau=0.01 max|diff|=%.3g (<=1e-4) on %d gapped maps", mismatches, worst,
             tested));
}

struct SyntheticOutcome {
  double infodisent_acc = 0.0, default_acc = 0.0;
  double infodisent_seconds = 0.0;
  double infodisent_sig = 0.0, default_sig = 0.0;
  bool deterministic = false;
};

TrainConfig synthetic_config(HeadKind kind) {
  TrainConfig cfg;
  cfg.head_kind = kind;
  cfg.epochs = 50;
  cfg.lr = 0.05;
  cfg.seed = 11;
  return cfg;
}

SyntheticOutcome run_synthetic(int classes) {
  SyntheticSpec spec;
  spec.classes = classes;
  spec.channels = 16;
  spec.train_per_class = 500;
  spec.test_per_class = 200;
  const SyntheticData data = make_synthetic(spec);
  SyntheticOutcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult info = train(data.train, nullptr, synthetic_config(HeadKind::InfoDisent));
  o.infodisent_seconds = seconds_since(t0);
  const TrainResult def = train(data.train, nullptr, synthetic_config(HeadKind::Default));
  o.infodisent_acc = evaluate(data.test, info.params).accuracy;
  o.default_acc = evaluate(data.test, def.params).accuracy;
  const auto test = pointers(data.test);
  o.infodisent_sig = significance_density(test, info.params).mean;
  o.default_sig = significance_density(test, def.params).mean;
  const TrainResult again = train(data.train, nullptr, synthetic_config(HeadKind::InfoDisent));
  o.deterministic = again.params.generator == info.params.generator &&
                    again.params.class_weights_raw == info.params.class_weights_raw &&
                    again.params.bias == info.params.bias && again.metrics.size() == info.metrics.size();
  for (std::size_t i = 0; o.deterministic && i < info.metrics.size(); ++i) {
    o.deterministic = format_metrics(again.metrics[i]) == format_metrics(info.metrics[i]);
  }
  return o;
}

void synthetic_end_to_end(const SyntheticOutcome& two, const SyntheticOutcome& ten) {
  auto ok = [](const SyntheticOutcome& o) {
    return o.infodisent_acc >= 0.95 && o.infodisent_acc >= o.default_acc - 0.03 && o.deterministic &&
           o.infodisent_seconds < 120.0;
  };
  auto line = [](int k, const SyntheticOutcome& o) {
    return fmt("%d-class acc=%.4f default=%.4f deterministic=%s train=%.1fs", k, o.infodisent_acc, o.default_acc,
               o.deterministic ? "yes" : "no", o.infodisent_seconds);
  };
  report("synthetic_end_to_end", ok(two) && ok(ten), line(2, two) + "; " + line(10, ten));
}

void attribution_consistency() {
  std::mt19937_64 rng(1005);
  std::uniform_int_distribution<int> dim(2, 32), grid(1, 7), classes(1, 10);
  double worst_logit = 0.0, worst_heat = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int d = dim(rng), k = classes(rng);
    HeadParams p = HeadParams::zeros(HeadKind::InfoDisent, d, k);
    p.generator = random_matrix(d, d, rng);
    p.class_weights_raw = random_matrix(d, k, rng).cwiseAbs();
    p.bias = random_vector(k, rng);
    const FeatureMap f = random_map(d, grid(rng), grid(rng), rng);
    const HeadOutput out = forward(f, p);
    for (int c = 0; c < k; ++c) {
      const Attribution a = attribute(f, p, c);
      worst_logit = std::max(worst_logit, std::abs(a.contributions.sum() + a.bias - out.logits[c]));
      worst_heat = std::max(worst_heat, std::abs(heatmap(f, p, c).values.sum() - (out.logits[c] - p.bias[c])));
    }
  }
  report("attribution_consistency", worst_logit <= 1e-9 && worst_heat <= 1e-9,
         fmt("max logit err=%.3g max heatmap err=%.3g (<=1e-9)", worst_logit, worst_heat));
}

// Smallest subset size reaching the threshold, by exhaustive enumeration.
int brute_force_significant(const Vector& v, double threshold) {
  const int n = static_cast<int>(v.size());
  const double total = v.cwiseAbs().sum();
  if (total == 0.0) return 0;
  int best = n;
  for (unsigned mask = 1; mask < (1u << n); ++mask) {
    const int size = std::popcount(mask);
    if (size >= best) continue;
    double mass = 0.0;
    for (int i = 0; i < n; ++i) {
      if (mask & (1u << i)) mass += std::abs(v[i]);
    }
    if (mass / total >= threshold) best = size;
  }
  return best;
}

void significant_channel_oracle() {
  std::mt19937_64 rng(1006);
  std::uniform_int_distribution<int> len(1, 12);
  std::uniform_real_distribution<double> thr(0.05, 1.0);
  int mismatches = 0;
  for (int i = 0; i < 10000; ++i) {
    Vector v = random_vector(len(rng), rng);
    if (i % 5 == 0) v = v.array().round();
    const double t = i % 3 == 0 ? 0.95 : thr(rng);
    if (significant_channels(v, t) != brute_force_significant(v, t)) ++mismatches;
  }
  Vector small(3);
  small << 9.0, 0.3, 0.2;
  const int uniform = significant_channels(Vector::Ones(20), 0.95);
  const int example = significant_channels(small, 0.95);
  report("significant_channel_oracle", mismatches == 0 && uniform == 19 && example == 2,
         fmt("mismatches=%d/10000 uniform20=%d (want 19) (9,0.3,0.2)=%d (want 2)", mismatches, uniform, example));
}

void rv_properties() {
  std::mt19937_64 rng(1007);
  std::uniform_int_distribution<int> cols(1, 6), rows(8, 40);
  double self = 0.0, sym = 0.0, range = 0.0, orth = 0.0;
  for (int i = 0; i < 200; ++i) {
    const int n = rows(rng), p = cols(rng), q = cols(rng);
    const Matrix x = random_matrix(n, p, rng), y = random_matrix(n, q, rng);
    self = std::max(self, std::abs(rv_coefficient(x, x) - 1.0));
    const double r = rv_coefficient(x, y);
    sym = std::max(sym, std::abs(r - rv_coefficient(y, x)));
    range = std::max(range, std::max(-r, r - 1.0));
    // Orthonormal columns orthogonal to the constant vector, split between X and Y.
    Matrix basis = random_matrix(n, p + q + 1, rng);
    basis.col(0).setOnes();
    const Matrix qm = Eigen::HouseholderQR<Matrix>(basis).householderQ() * Matrix::Identity(n, p + q + 1);
    const Matrix xo = qm.middleCols(1, p) * random_matrix(p, p, rng);
    const Matrix yo = qm.middleCols(1 + p, q) * random_matrix(q, q, rng);
    orth = std::max(orth, rv_coefficient(xo, yo));
  }
  report("rv_properties", self <= 1e-9 && sym <= 1e-9 && range <= 1e-9 && orth <= 1e-9,
         fmt("|RV(X,X)-1|=%.3g symmetry=%.3g range violation=%.3g orthogonal RV=%.3g (all <=1e-9)", self, sym,
             std::max(range, 0.0), orth));
}

bool throws_format(auto fn) {
  try {
    fn();
  } catch (const FormatError&) {
    return true;
  }
  return false;
}

void format_round_trips() {
  std::mt19937_64 rng(1008);
  const auto dir = testing::temp_dir("acceptance_formats");
  bool ok = true;
  FeatureSet set;
  set.channels = 8;
  set.num_classes = 3;
  for (std::uint32_t i = 0; i < 50; ++i) {
    FeatureMap f = random_map(8, i % 2 ? 7 : 14, i % 2 ? 7 : 14, rng);
    for (auto& v : f.data()) v = static_cast<float>(v);
    f.image_id = i;
    f.label = i % 3;
    set.images.push_back(std::move(f));
  }
  const std::string a = (dir / "a.idfm").string(), b = (dir / "b.idfm").string();
  write_featureset(a, set);
  const FeatureSet back = read_featureset(a);
  write_featureset(b, back);
  const std::string idfm = read_file(a);
  ok = ok && idfm == read_file(b);
  for (std::size_t i = 0; i < set.images.size(); ++i) ok = ok && back.images[i].data() == set.images[i].data();

  int idfm_rejected = 0, idfm_trials = 0;
  for (std::size_t cut : {idfm.size() - 1, idfm.size() / 2, std::size_t{30}, std::size_t{5}}) {
    write_file(b, idfm.substr(0, cut));
    ++idfm_trials;
    idfm_rejected += throws_format([&] { read_featureset(b); });
  }
  std::string bad = idfm;
  bad[1] = 'X';
  write_file(b, bad);
  ++idfm_trials;
  idfm_rejected += throws_format([&] { read_featureset(b); });

  Checkpoint ck;
  ck.params = HeadParams::zeros(HeadKind::InfoDisent, 8, 3);
  ck.params.generator = random_matrix(8, 8, rng);
  ck.params.class_weights_raw = random_matrix(8, 3, rng).cwiseAbs();
  ck.params.bias = random_vector(3, rng);
  ck.optimizer = snapshot(TrainState::start(ck.params, TrainConfig{}));
  ck.config_echo = echo_train_config(TrainConfig{});
  const std::string bytes = encode_checkpoint(ck);
  ok = ok && encode_checkpoint(decode_checkpoint(bytes)) == bytes;
  int ck_rejected = 0, ck_trials = 0;
  for (std::size_t i = 0; i < bytes.size(); i += 13) {
    std::string c = bytes;
    c[i] = static_cast<char>(c[i] ^ 0x01);
    ++ck_trials;
    ck_rejected += throws_format([&] { decode_checkpoint(c); });
  }
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{6}}) {
    ++ck_trials;
    ck_rejected += throws_format([&] { decode_checkpoint(bytes.substr(0, cut)); });
  }
  const bool all_rejected = idfm_rejected == idfm_trials && ck_rejected == ck_trials;
  report("format_round_trips", ok && all_rejected,
         fmt("bitwise=%s idfm corrupt rejected=%d/%d checkpoint corrupt rejected=%d/%d", ok ? "yes" : "no",
             idfm_rejected, idfm_trials, ck_rejected, ck_trials));
}

void sparsity_effect(const SyntheticOutcome& ten) {
  report("sparsity_effect", ten.infodisent_sig < ten.default_sig,
         fmt("10-class mean significant channels: infodisent=%.3f default=%.3f", ten.infodisent_sig, ten.default_sig));
}

}  // namespace

int main() {
  try {
    orthogonality();
    gradient_integrity();
    pooling_equivalence();
    const SyntheticOutcome two = run_synthetic(2);
    const SyntheticOutcome ten = run_synthetic(10);
    synthetic_end_to_end(two, ten);
    attribution_consistency();
    significant_channel_oracle();
    rv_properties();
    format_round_trips();
    sparsity_effect(ten);
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criterion(s) failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
