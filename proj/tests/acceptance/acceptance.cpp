#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "gramsmear/alserver.hpp"
#include "gramsmear/autodiff.hpp"
#include "gramsmear/error.hpp"
#include "gramsmear/evaluate.hpp"
#include "gramsmear/imaging.hpp"
#include "gramsmear/model.hpp"
#include "gramsmear/optimize.hpp"
#include "gramsmear/synthsmear.hpp"

using namespace gramsmear;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances
constexpr double kGradEps = 1e-6;
constexpr double kGradTol = 1e-5;
constexpr double kGradFloor = 1e-3;
constexpr double kGradBudgetSeconds = 60.0;
constexpr double kPermTolF32 = 1e-4;
constexpr double kAdamTol = 1e-9;
constexpr double kPeakLr = 3e-4;
constexpr double kRatioTol = 0.15;
constexpr int kGeometryImages = 20;
constexpr double kBenchAccuracy = 0.90;
constexpr double kBenchAuc = 0.95;
constexpr int kBenchEpochs = 40;
constexpr double kBenchMinutes = 30.0;
constexpr double kFrozenAccuracy = 0.99;
constexpr double kFrozenSeparability = 10.0;
constexpr int kFrozenEpochs = 45;

struct Outcome {
  bool pass = true;
  std::string detail;
};

using SteadyClock = std::chrono::steady_clock;

double seconds_since(SteadyClock::time_point t0) { return std::chrono::duration<double>(SteadyClock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = fs::temp_directory_path() / ("gramsmear-accept-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

ad::Var weighted_sum(ad::Tape<double>& t, ad::Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ad::sum(t, ad::mul(t, out, t.constant(random_tensor(t.value(out).shape(), rng))));
}

// gradient oracle

Outcome gradient_oracle() {
  using namespace ad;
  const auto t0 = SteadyClock::now();
  std::mt19937_64 rng(2024);
  struct Case {
    std::string name;
    std::vector<Tensor<double>> params;
    LossFn fn;
  };
  std::vector<Case> cases;
  auto P = [](Tape<double>& t, const ParamStore<double>& s, std::size_t i) { return t.parameter(s, i); };
  auto spread = [&](Shape s) {
    auto x = random_tensor(std::move(s), rng);
    for (auto& v : x.values()) v = v < 0 ? v - 0.1 : v + 0.1;
    return x;
  };
  cases.push_back({"matmul", {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, matmul(t, P(t, s, 0), P(t, s, 1)), 1); }});
  cases.push_back({"matmul_nt", {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, matmul_nt(t, P(t, s, 0), P(t, s, 1)), 2); }});
  cases.push_back({"add", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, add(t, P(t, s, 0), P(t, s, 1)), 3); }});
  cases.push_back({"add_row", {random_tensor({3, 4}, rng), random_tensor({4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, add_row(t, P(t, s, 0), P(t, s, 1)), 4); }});
  cases.push_back({"mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, mul(t, P(t, s, 0), P(t, s, 1)), 5); }});
  cases.push_back({"scalar_mul", {random_tensor({6}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, scalar_mul(t, P(t, s, 0), -1.7), 6); }});
  cases.push_back({"sum", {random_tensor({2, 5}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return scalar_mul(t, sum(t, P(t, s, 0)), 0.5); }});
  cases.push_back({"relu", {spread({4, 5})},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, relu(t, P(t, s, 0)), 7); }});
  cases.push_back({"tanh", {random_tensor({4, 5}, rng, -2, 2)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, ad::tanh(t, P(t, s, 0)), 8); }});
  cases.push_back({"softmax_rows", {random_tensor({3, 6}, rng, -3, 3)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, softmax_rows(t, P(t, s, 0)), 9); }});
  cases.push_back({"reshape", {random_tensor({3, 4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, reshape(t, P(t, s, 0), {2, 6}), 10); }});
  cases.push_back({"concat", {random_tensor({1, 3}, rng), random_tensor({1, 4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, concat(t, {P(t, s, 0), P(t, s, 1)}), 11); }});
  cases.push_back({"gather_rows", {random_tensor({4, 3}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, gather_rows(t, P(t, s, 0), {2, 0, 2, 3}), 12); }});
  cases.push_back({"cross_entropy", {random_tensor({5}, rng, -2, 2)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return cross_entropy(t, P(t, s, 0), 3); }});
  cases.push_back({"conv2d", {random_tensor({2, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) {
                     return weighted_sum(t, conv2d(t, P(t, s, 0), P(t, s, 1), P(t, s, 2)), 13);
                   }});
  {
    // distinct values keep the max away from ties
    Tensor<double> x({2, 3, 6, 6});
    std::vector<double> v(x.size());
    std::iota(v.begin(), v.end(), 0.0);
    std::shuffle(v.begin(), v.end(), rng);
    for (std::size_t i = 0; i < v.size(); ++i) x[i] = v[i] * 0.05;
    cases.push_back({"maxpool2d", {x},
                     [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, maxpool2d(t, P(t, s, 0)), 14); }});
  }
  cases.push_back({"global_avg_pool", {random_tensor({2, 3, 4, 4}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) { return weighted_sum(t, global_avg_pool(t, P(t, s, 0)), 15); }});
  cases.push_back({"attention", {random_tensor({4, 5}, rng), random_tensor({4}, rng), random_tensor({6, 5}, rng)},
                   [&](Tape<double>& t, const ParamStore<double>& s) {
                     return weighted_sum(t, graph::attention(t, P(t, s, 0), P(t, s, 1), P(t, s, 2)), 16);
                   }});

  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  bool ok = true;
  for (auto& c : cases) {
    ParamStore<double> store;
    for (std::size_t i = 0; i < c.params.size(); ++i) store.add("p" + std::to_string(i), c.params[i]);
    const auto r = grad_check(c.fn, store, kGradEps, kGradTol, kGradFloor);
    checked += r.checked;
    ok = ok && r.passed && r.checked > 0;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = c.name;
    }
  }

  ModelConfig cfg = ModelConfig::defaults(Mode::bacteria);
  cfg.channels = {3, 4, 8};
  cfg.embed_dim = 8;
  cfg.attn_hidden = 4;
  cfg.heads = 2;
  cfg.categories = 3;
  cfg.patch_size = 8;
  auto m = MilModel<double>::init(cfg, 21);
  const BagInput<double> in{random_tensor({3, 3, 8, 8}, rng, -2, 2), false};
  const auto full = grad_check(
      [&](Tape<double>& t, const ParamStore<double>& s) {
        MilModel<double> view{cfg, s};
        return cross_entropy(t, graph::forward(t, view, graph::bind(t, s), in), 1);
      },
      m.params, kGradEps, kGradTol, kGradFloor);
  checked += full.checked;
  ok = ok && full.passed;
  if (full.max_rel_error >= worst) {
    worst = full.max_rel_error;
    worst_name = "full model";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kGradBudgetSeconds;
  return {ok, std::to_string(cases.size()) + " ops + full tiny model, " + std::to_string(checked) +
                  " elements, worst rel " + fmt(worst) + " (" + worst_name + "), " + fmt(secs) + " s"};
}

// MIL invariance

double max_rel_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]);
    worst = std::max(worst, d / std::max({std::abs(static_cast<double>(a[i])), std::abs(static_cast<double>(b[i])), 1e-6}));
  }
  return worst;
}

Outcome mil_invariance() {
  std::mt19937_64 rng(77);
  auto cfg = ModelConfig::defaults(Mode::bacteria);
  cfg.categories = 7;
  const auto model = MilModel<float>::init(cfg, 5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Bag bag;
    bag.bag_id = "perm" + std::to_string(trial);
    bag.mode = Mode::bacteria;
    const int k = 1 + static_cast<int>(rng() % 6);
    for (int i = 0; i < k; ++i) {
      Patch p;
      p.patch_id = make_patch_id(bag.bag_id, static_cast<std::uint32_t>(i + 1));
      p.pixels = RasterImage(kBacteriaPatch, kBacteriaPatch);
      for (auto& v : p.pixels.data) v = static_cast<std::uint8_t>(rng() % 256);
      bag.patches.push_back(std::move(p));
    }
    Bag shuffled = bag;
    std::shuffle(shuffled.patches.begin(), shuffled.patches.end(), rng);
    worst = std::max(worst, max_rel_diff(forward_bag(model, bag), forward_bag(model, shuffled)));
  }

  bool collapse = true;
  const auto md = MilModel<double>::init(cfg, 6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<double> h({1, cfg.embed_dim});
    for (auto& v : h.values()) v = std::normal_distribution<double>(0, 1)(rng);
    const auto zd = mil_pool(md, h);
    const auto zf = mil_pool(model, h.cast<float>());
    for (int head = 0; head < cfg.heads; ++head)
      for (int c = 0; c < cfg.embed_dim; ++c) {
        collapse = collapse && zd[head * cfg.embed_dim + c] == h[c];
        collapse = collapse && zf[head * cfg.embed_dim + c] == static_cast<float>(h[c]);
      }
  }
  return {worst <= kPermTolF32 && collapse,
          "100 pixel bags (full CNN, 32-bit) worst rel " + fmt(worst) + "; K=1 collapse " + (collapse ? "exact" : "NOT exact")};
}

// optimizer oracle

Outcome optimizer_oracle() {
  ParamStore<double> p;
  p.add("theta", Tensor<double>({1}, {1.0}));
  auto st = AdamWState<double>::init(p);
  adamw_step(st, p, {Tensor<double>({1}, {0.5})}, 3e-4);
  const double expected = 1.0 - 3e-4 * (0.5 / (0.5 + 1e-8)) - 3e-4 * 0.01 * 1.0;
  const double err = std::abs(p.value(0)[0] - expected);

  const auto s = OneCycleSchedule::make(150, 41, 10);
  const bool peak = onecycle_lr(s, s.warmup_steps) == kPeakLr;
  int peaks = 0, ups = 0, downs = 0;
  for (int i = 0; i < s.total_steps; ++i) {
    const double lr = onecycle_lr(s, i);
    if (lr == kPeakLr) ++peaks;
    if (i == 0) continue;
    const double prev = onecycle_lr(s, i - 1);
    if (i <= s.warmup_steps) ups += lr > prev;
    else downs += lr < prev;
  }
  const bool unimodal = peaks == 1 && ups == s.warmup_steps && downs == s.total_steps - 1 - s.warmup_steps;
  return {err <= kAdamTol && peak && unimodal, "adamw |err| " + fmt(err) + ", theta' " + fmt(p.value(0)[0]) +
                                                   "; lr(warmup end) " + (peak ? "== 3e-4" : "!= 3e-4") + ", " +
                                                   (unimodal ? "strictly unimodal" : "NOT unimodal")};
}

// ROC AUC

Outcome roc_auc_exact() {
  std::mt19937_64 rng(99);
  int mismatches = 0, sets = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 4 + static_cast<int>(rng() % 60), cats = 2 + static_cast<int>(rng() % 4);
    const int levels = 1 + static_cast<int>(rng() % 8);
    std::vector<int> labels(n);
    std::vector<std::vector<double>> scores(n, std::vector<double>(cats));
    for (int i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng() % cats);
      for (auto& v : scores[i]) v = static_cast<double>(rng() % levels) / levels;
    }
    labels[0] = 0;
    labels[1] = 1;
    const auto auc = roc_auc_ovr(scores, labels, cats);
    for (int c = 0; c < cats; ++c) {
      long pos = 0, neg = 0, twice_wins = 0;
      for (int i = 0; i < n; ++i) {
        if (labels[i] != c) continue;
        ++pos;
        for (int j = 0; j < n; ++j) {
          if (labels[j] == c) continue;
          twice_wins += scores[i][c] > scores[j][c] ? 2 : (scores[i][c] == scores[j][c] ? 1 : 0);
        }
      }
      for (int j = 0; j < n; ++j) neg += labels[j] != c;
      if (pos == 0 || neg == 0) {
        mismatches += auc.per_category[c].has_value();
        continue;
      }
      const double oracle = static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos * neg));
      mismatches += !auc.per_category[c] || *auc.per_category[c] != oracle;
    }
    ++sets;
  }
  return {mismatches == 0, std::to_string(sets) + " tied score sets, " + std::to_string(mismatches) + " mismatches vs pair counting"};
}

// split protocol

Outcome split_protocol() {
  std::mt19937_64 rng(31);
  int disjoint_fail = 0, balance_fail = 0;
  for (int trial = 0; trial < 100; ++trial) {
    DatasetManifest m;
    const int cats = 2 + static_cast<int>(rng() % 6);
    for (int c = 0; c < cats; ++c) m.category_names.push_back("c" + std::to_string(c));
    for (int c = 0; c < cats; ++c) {
      const int patients = 3 + static_cast<int>(rng() % 12);
      for (int p = 0; p < patients; ++p) {
        const int images = 1 + static_cast<int>(rng() % 6);
        const std::string pid = "t" + std::to_string(trial) + "c" + std::to_string(c) + "p" + std::to_string(p);
        for (int i = 0; i < images; ++i) m.entries.push_back({pid + "i" + std::to_string(i), pid, c, "", ""});
      }
    }
    const auto fa = patient_stratified_folds(m, 3, rng());
    for (int f = 0; f < 3; ++f) {
      std::set<std::string> train, test;
      for (auto i : fa.train_indices(m, f)) train.insert(m.entries[i].patient_id);
      for (auto i : fa.test_indices(m, f)) test.insert(m.entries[i].patient_id);
      for (const auto& p : test) disjoint_fail += train.count(p);
      disjoint_fail += train.size() + test.size() != fa.fold_of_patient.size();
    }
    for (int c = 0; c < cats; ++c) {
      std::vector<int> per(3, 0);
      for (const auto& [pid, fold] : fa.fold_of_patient) {
        if (pid.find("c" + std::to_string(c) + "p") != std::string::npos) ++per[fold];
      }
      balance_fail += *std::max_element(per.begin(), per.end()) - *std::min_element(per.begin(), per.end()) > 1;
    }
  }

  DatasetManifest eq;
  for (int c = 0; c < 7; ++c) eq.category_names.push_back("k" + std::to_string(c));
  for (int c = 0; c < 7; ++c)
    for (int p = 0; p < 7; ++p)
      for (int i = 0; i < 10; ++i) {
        const std::string pid = "k" + std::to_string(c) + "p" + std::to_string(p);
        eq.entries.push_back({pid + "i" + std::to_string(i), pid, c, "", ""});
      }
  const auto fa = patient_stratified_folds(eq, 3, 1);
  double worst = 0.0;
  for (int f = 0; f < 3; ++f) {
    const double r = static_cast<double>(fa.train_indices(eq, f).size()) / static_cast<double>(fa.test_indices(eq, f).size());
    worst = std::max(worst, std::abs(r - 2.0) / 2.0);
  }
  return {disjoint_fail == 0 && balance_fail == 0 && worst <= kRatioTol,
          "100 manifests: " + std::to_string(disjoint_fail) + " leakage, " + std::to_string(balance_fail) +
              " unbalanced categories; 7x7x10 train:test worst deviation from 2:1 " + fmt(worst * 100) + "%"};
}

// geometry

Outcome geometry() {
  const auto spec = DatasetSpec::default_bacteria();
  SceneParams scene;
  scene.width = 2048;
  scene.height = 1536;
  SegmenterParams p;
  int equal = 0, instances = 0, straddling = 0;
  for (int i = 0; i < kGeometryImages; ++i) {
    auto morph = spec.categories[static_cast<std::size_t>(i) % spec.categories.size()].morphotypes[0];
    morph.cells_min = 150;
    morph.cells_max = 200;
    const auto truth = generate_image(morph, PatientStyle{}, 500 + static_cast<std::uint64_t>(i), scene);
    const auto whole = relabel_raster_order(segment_baseline(truth.image, p));
    const auto tiled = relabel_raster_order(segment_tiled(truth.image, p, 1024));
    equal += whole == tiled;
    instances += static_cast<int>(whole.instance_count());
    for (const auto& px : instance_pixels(whole)) {
      bool left = false, right = false, top = false, bottom = false;
      for (auto k : px) {
        const int r = static_cast<int>(k / 2048), c = static_cast<int>(k % 2048);
        (c < 1024 ? left : right) = true;
        (r < 1024 ? top : bottom) = true;
      }
      straddling += (left && right) || (top && bottom);
    }
  }
  InstanceMask m(420, 10);
  for (int c = 0; c < 402; ++c) m.at(2, c) = 1;
  for (int c = 0; c < 400; ++c) m.at(6, c) = 2;
  const auto kept = filter_by_diameter(m, 400.0);
  const bool dia = mask_diameter(m, 1) == 401.0 && mask_diameter(m, 2) == 399.0 && kept.instance_count() == 1 &&
                   kept.at(6, 0) != 0 && kept.at(2, 0) == 0;
  return {equal == kGeometryImages && straddling > 0 && dia,
          std::to_string(equal) + "/" + std::to_string(kGeometryImages) + " 2048x1536 images tiled == whole (" +
              std::to_string(instances) + " instances, " + std::to_string(straddling) + " crossing tile seams); 401 px " +
              (dia ? "dropped, 399 px kept" : "filter WRONG")};
}

// end-to-end benchmark

Outcome e2e_benchmark() {
  const auto t0 = SteadyClock::now();
  auto spec = DatasetSpec::default_bacteria();
  spec.seed = 7;
  const int threads = std::max(1u, std::thread::hardware_concurrency());
  auto model = ModelConfig::defaults(Mode::bacteria);
  auto train = TrainConfig::defaults(Mode::bacteria);
  train.epochs = kBenchEpochs;
  train.seed = 1;
  train.threads = threads;
  LoadOptions load;
  load.threads = threads;
  load.context_margin = train.augment.translate_jitter;
  auto [manifest, bags] = synthesize_bags(spec, load);
  model.categories = manifest.category_count();
  const auto report = crossval(manifest, bags, model, train, CrossvalOptions{3, 1});
  const double minutes = seconds_since(t0) / 60.0;

  const auto& names = manifest.category_names;
  const auto idx = [&](const std::string& n) {
    return static_cast<int>(std::find(names.begin(), names.end(), n) - names.begin());
  };
  const int a = idx("staph-uniform"), b = idx("staph-varied");
  auto mutual = [&](int i, int j) { return report.aggregate.mean[i][j].value_or(0.0) + report.aggregate.mean[j][i].value_or(0.0); };
  const double confusable = mutual(a, b);
  double other = 0.0;
  std::string other_pair;
  const int c = static_cast<int>(names.size());
  for (int i = 0; i < c; ++i)
    for (int j = i + 1; j < c; ++j) {
      if (i == a && j == b) continue;
      if (mutual(i, j) > other) {
        other = mutual(i, j);
        other_pair = names[i] + "/" + names[j];
      }
    }
  const bool ok = report.mean_accuracy >= kBenchAccuracy && report.mean_macro_auc >= kBenchAuc && confusable > other &&
                  minutes < kBenchMinutes;
  return {ok, "accuracy " + fmt(report.mean_accuracy) + " +- " + fmt(report.std_accuracy) + ", macro AUC " +
                  fmt(report.mean_macro_auc) + ", staph mutual confusion " + fmt(confusable) + "% vs next " + fmt(other) +
                  "% (" + (other_pair.empty() ? "none" : other_pair) + "), " + fmt(minutes) + " min on " +
                  std::to_string(threads) + " hardware thread(s)"};
}

// frozen mode

Outcome frozen_mode() {
  auto spec = DatasetSpec::default_fungi();
  spec.seed = 3;
  spec.patients_per_category = 12;
  spec.images_per_patient = 10;
  LoadOptions load;
  load.threads = std::max(1u, std::thread::hardware_concurrency());
  auto [manifest, bags] = synthesize_bags(spec, load);
  for (auto& b : bags)
    for (auto& p : b.patches) p.pixels = RasterImage();
  const auto table = generate_embeddings(bags, kFrozenSeparability, 8, 17);
  const auto before = encode_embeddings(table);
  auto model = ModelConfig::defaults(Mode::fungi);
  model.encoder = EncoderKind::frozen_table;
  model.embed_dim = 8;
  model.categories = manifest.category_count();
  auto train = TrainConfig::defaults(Mode::fungi);
  train.seed = 2;
  train.threads = load.threads;
  const auto report = crossval(manifest, bags, model, train, CrossvalOptions{3, 2}, &table);
  const bool identical = encode_embeddings(table) == before;
  double grad = 0.0;
  int epochs = 0;
  for (const auto& f : report.folds) {
    epochs = std::max(epochs, static_cast<int>(f.history.size()));
    for (const auto& h : f.history) grad = std::max(grad, h.encoder_grad_norm);
  }
  return {report.mean_accuracy >= kFrozenAccuracy && identical && grad == 0.0 && epochs <= kFrozenEpochs,
          std::to_string(bags.size()) + " bags, 3-fold accuracy " + fmt(report.mean_accuracy) + " in " + std::to_string(epochs) +
              " epochs; table " + (identical ? "bit-identical" : "CHANGED") + ", encoder grad norm " + fmt(grad)};
}

// active-learning refit

Outcome al_refit() {
  const auto spec = DatasetSpec::default_bacteria();
  SceneParams scene;
  scene.width = 192;
  scene.height = 192;
  std::vector<GroundTruthPair> gt;
  for (int i = 0; i < 8; ++i) {
    const auto& morph = spec.categories[static_cast<std::size_t>(i) % spec.categories.size()].morphotypes[0];
    auto t = generate_image(morph, PatientStyle{}, 900 + static_cast<std::uint64_t>(i), scene);
    gt.push_back({"g" + std::to_string(i), t.image, t.mask});
  }
  ParamGrid grid;
  grid.thresholds = {15, 30, 45, 60, 90, 120};
  grid.min_areas = {2, 8, 20, 60};
  grid.max_areas = {200, 2000, 1 << 20};
  int optimal = 0, regressions = 0, runs = 0;
  for (const SegmenterParams inc : {SegmenterParams{}, SegmenterParams{150, 4, 1 << 20, 8}, SegmenterParams{30, 8, 2000, 8}}) {
    const auto r = refit_segmenter(gt, grid, inc);
    double best = score_params(gt, inc);
    auto best_key = std::make_tuple(inc.chroma_threshold, inc.min_area, inc.max_area);
    for (double t : grid.thresholds)
      for (int lo : grid.min_areas)
        for (int hi : grid.max_areas) {
          const double s = score_params(gt, SegmenterParams{t, lo, hi, inc.connectivity});
          const auto key = std::make_tuple(t, lo, hi);
          if (s > best || (s == best && key < best_key)) {
            best = s;
            best_key = key;
          }
        }
    optimal += r.score == best && std::make_tuple(r.params.chroma_threshold, r.params.min_area, r.params.max_area) == best_key;
    regressions += r.score < r.incumbent_score;
    ++runs;
  }

  TempDir dir("replay");
  std::mt19937_64 rng(4);
  std::int64_t now = 1'000'000;
  const gramsmear::Clock clock = [&now] { return now; };
  std::vector<std::string> ids;
  std::vector<std::pair<std::string, RasterImage>> images;
  for (int i = 0; i < 4; ++i) images.emplace_back("img" + std::to_string(i), gt[static_cast<std::size_t>(i)].image);
  {
    AnnotationStore store(dir.path(), clock);
    ids = store.propose(images, SegmenterParams{}, 96);
  }
  int replay_equal = 0, rounds = 0;
  const char* reviewers[] = {"ann", "ben", "cat"};
  for (int round = 0; round < 5; ++round) {
    AnnotationStore store(dir.path(), clock);
    for (int k = 0; k < 20; ++k) {
      store.decide(ids[rng() % ids.size()], static_cast<Action>(rng() % 3), reviewers[rng() % 3]);
      now += 13;
    }
    const auto live = store.state_json().dump();
    AnnotationStore reopened(dir.path(), clock);
    replay_equal += reopened.state_json().dump() == live;
    ++rounds;
  }
  return {optimal == runs && regressions == 0 && replay_equal == rounds,
          std::to_string(optimal) + "/" + std::to_string(runs) + " refits grid-optimal (" +
              std::to_string(grid.thresholds.size() * grid.min_areas.size() * grid.max_areas.size()) + " candidates), " +
              std::to_string(regressions) + " regressions; replay identical " + std::to_string(replay_equal) + "/" +
              std::to_string(rounds)};
}

// determinism

Outcome determinism(const std::string& cli) {
  if (cli.empty()) return {false, "no CLI path given"};
  TempDir dir("determinism");
  auto spec = DatasetSpec::default_bacteria();
  spec.categories.resize(3);
  spec.patients_per_category = 3;
  spec.images_per_patient = 2;
  spec.scene.width = 192;
  spec.scene.height = 192;
  for (auto& c : spec.categories)
    for (auto& m : c.morphotypes) {
      m.cells_min = 2;
      m.cells_max = 3;
    }
  spec.seed = 12;
  generate_dataset(spec, dir.path() / "data", 1);
  auto run = [&](const std::string& out, int threads) {
    const std::string cmd = "\"" + cli + "\" crossval --manifest \"" + (dir.path() / "data" / "manifest.jsonl").string() +
                            "\" --seed 5 --epochs 2 --threads " + std::to_string(threads) + " --out \"" +
                            (dir.path() / out).string() + "\" > /dev/null 2>&1";
    return std::system(cmd.c_str());
  };
  const int rc = run("a", 1) | run("b", 1) | run("c", 8);
  if (rc != 0) return {false, "crossval exited non-zero"};
  const auto a = tree_bytes(dir.path() / "a");
  const bool same_run = a == tree_bytes(dir.path() / "b");
  const bool same_threads = a == tree_bytes(dir.path() / "c");
  std::size_t bytes = 0;
  for (const auto& [_, v] : a) bytes += v.size();
  return {same_run && same_threads && !a.empty(),
          std::to_string(a.size()) + " bundle files (" + std::to_string(bytes) + " bytes); rerun " +
              (same_run ? "identical" : "DIFFERS") + ", --threads 1 vs 8 " + (same_threads ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli;
  std::vector<std::string> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cli" && i + 1 < argc) cli = argv[++i];
    else wanted.push_back(a);
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-oracle", gradient_oracle},
      {"mil-invariance", mil_invariance},
      {"optimizer-oracle", optimizer_oracle},
      {"roc-auc-exact", roc_auc_exact},
      {"split-protocol", split_protocol},
      {"geometry", geometry},
      {"e2e-benchmark", e2e_benchmark},
      {"frozen-mode", frozen_mode},
      {"al-refit", al_refit},
      {"determinism", [&] { return determinism(cli); }},
  };
  if (wanted.empty()) {
    for (const auto& [name, _] : criteria) wanted.push_back(name);
  }
  int failed = 0;
  for (const auto& w : wanted) {
    auto it = std::find_if(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == w; });
    if (it == criteria.end()) {
      std::cout << "FAIL " << w << ": unknown criterion\n";
      ++failed;
      continue;
    }
    Outcome o;
    try {
      o = it->second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << w << ": " << o.detail << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
