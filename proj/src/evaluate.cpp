#include "gramsmear/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "gramsmear/error.hpp"
#include "gramsmear/parallel.hpp"

namespace gramsmear {

namespace {

std::vector<std::size_t> fold_indices(const FoldAssignment& fa, const DatasetManifest& m, int fold, bool test) {
  if (fold < 0 || fold >= fa.k) throw DataError("fold index out of range");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    auto it = fa.fold_of_patient.find(m.entries[i].patient_id);
    if (it == fa.fold_of_patient.end()) throw DataError("patient " + m.entries[i].patient_id + " has no fold");
    if ((it->second == fold) == test) out.push_back(i);
  }
  return out;
}

nlohmann::json opt_json(const std::optional<double>& v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

nlohmann::json num_json(double v) {
  if (!std::isfinite(v)) return nullptr;
  return v;
}

template <class M>
nlohmann::json matrix_json(const M& m) {
  auto out = nlohmann::json::array();
  for (const auto& row : m) {
    auto r = nlohmann::json::array();
    for (const auto& v : row) r.push_back(opt_json(v));
    out.push_back(r);
  }
  return out;
}

std::vector<double> softmax(const std::vector<float>& logits) {
  double mx = -INFINITY;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - mx);
    s += out[i];
  }
  for (auto& v : out) v /= s;
  return out;
}

}  // namespace

std::vector<std::size_t> FoldAssignment::test_indices(const DatasetManifest& m, int fold) const {
  return fold_indices(*this, m, fold, true);
}

std::vector<std::size_t> FoldAssignment::train_indices(const DatasetManifest& m, int fold) const {
  return fold_indices(*this, m, fold, false);
}

FoldAssignment patient_stratified_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  if (k < 2) throw DataError("fold count must be at least 2");
  const int C = manifest.category_count();
  std::map<std::string, std::vector<int>> votes;
  for (const auto& e : manifest.entries) {
    if (e.label < 0 || e.label >= C) throw DataError("bag " + e.bag_id + " label out of range");
    auto& v = votes[e.patient_id];
    if (v.empty()) v.assign(C, 0);
    ++v[e.label];
  }
  std::vector<std::vector<std::string>> by_category(C);
  for (const auto& [patient, v] : votes) {
    const int majority = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    if (std::count_if(v.begin(), v.end(), [](int n) { return n > 0; }) > 1) {
      std::cerr << "warning: patient " << patient << " has bags of several categories; stratifying by "
                << manifest.category_names[majority] << "\n";
    }
    by_category[majority].push_back(patient);
  }

  FoldAssignment fa;
  fa.k = k;
  std::size_t dealer = 0;
  for (int c = 0; c < C; ++c) {
    auto& patients = by_category[c];
    if (patients.empty()) continue;
    if (static_cast<int>(patients.size()) < k) {
      std::cerr << "warning: category " << manifest.category_names[c] << " has " << patients.size()
                << " patients, fewer than " << k << " folds\n";
    }
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
    std::shuffle(patients.begin(), patients.end(), rng);
    for (const auto& p : patients) fa.fold_of_patient[p] = static_cast<int>(dealer++ % k);
  }
  return fa;
}

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.empty()) throw DataError("accuracy of an empty prediction set");
  if (preds.size() != labels.size()) throw ShapeError("accuracy: prediction and label counts differ");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, int categories) {
  if (preds.size() != labels.size()) throw ShapeError("confusion: prediction and label counts differ");
  if (categories < 1) throw DataError("confusion: category count must be positive");
  ConfusionMatrix cm;
  cm.categories = categories;
  cm.counts.assign(categories, std::vector<long>(categories, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= categories || preds[i] < 0 || preds[i] >= categories) {
      throw DataError("confusion: label or prediction out of range");
    }
    ++cm.counts[labels[i]][preds[i]];
  }
  cm.percent.assign(categories, std::vector<std::optional<double>>(categories));
  for (int r = 0; r < categories; ++r) {
    const long support = std::accumulate(cm.counts[r].begin(), cm.counts[r].end(), 0L);
    if (support == 0) continue;
    for (int c = 0; c < categories; ++c) cm.percent[r][c] = 100.0 * cm.counts[r][c] / support;
  }
  return cm;
}

AggregateConfusion aggregate(const std::vector<ConfusionMatrix>& folds) {
  if (folds.empty()) throw DataError("aggregate of zero folds");
  const int C = folds[0].categories;
  AggregateConfusion agg;
  agg.categories = C;
  agg.mean.assign(C, std::vector<std::optional<double>>(C));
  agg.std.assign(C, std::vector<std::optional<double>>(C));
  agg.folds_per_row.assign(C, 0);
  for (const auto& f : folds) {
    if (f.categories != C) throw ShapeError("aggregate: folds disagree on category count");
  }
  for (int r = 0; r < C; ++r) {
    std::vector<const ConfusionMatrix*> defined;
    for (const auto& f : folds) {
      if (f.percent[r][0]) defined.push_back(&f);
    }
    agg.folds_per_row[r] = static_cast<int>(defined.size());
    if (defined.empty()) continue;
    const double n = static_cast<double>(defined.size());
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (const auto* f : defined) s += *f->percent[r][c];
      const double mean = s / n;
      agg.mean[r][c] = mean;
      if (defined.size() < 2) continue;
      double ss = 0.0;
      for (const auto* f : defined) ss += (*f->percent[r][c] - mean) * (*f->percent[r][c] - mean);
      agg.std[r][c] = std::sqrt(ss / (n - 1.0));
    }
  }
  return agg;
}

RocAuc roc_auc_ovr(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels, int categories) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc_ovr: score and label counts differ");
  const std::size_t n = labels.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<int>(scores[i].size()) != categories) throw ShapeError("roc_auc_ovr: score row has wrong length");
    if (labels[i] < 0 || labels[i] >= categories) throw DataError("roc_auc_ovr: label out of range");
  }
  RocAuc out;
  out.per_category.resize(categories);
  std::vector<std::size_t> order(n);
  double macro = 0.0;
  int defined = 0;
  for (int c = 0; c < categories; ++c) {
    long long npos = 0;
    for (int l : labels) npos += l == c;
    const long long nneg = static_cast<long long>(n) - npos;
    if (npos == 0 || nneg == 0) continue;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a][c] < scores[b][c]; });
    // doubled ranks keep tied (half-integer) ranks integral
    long long rank2_pos = 0;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && scores[order[j + 1]][c] == scores[order[i]][c]) ++j;
      const long long r2 = static_cast<long long>(i + 1) + static_cast<long long>(j + 1);
      for (std::size_t t = i; t <= j; ++t) {
        if (labels[order[t]] == c) rank2_pos += r2;
      }
      i = j + 1;
    }
    const long long u2 = rank2_pos - npos * (npos + 1);
    const double auc = static_cast<double>(u2) / static_cast<double>(2 * npos * nneg);
    out.per_category[c] = auc;
    macro += auc;
    ++defined;
  }
  if (defined == 0) throw DataError("roc_auc_ovr: no category has both positive and negative samples");
  out.macro = macro / defined;
  return out;
}

FoldEvaluation evaluate_fold(const MilModel<float>& model, const std::vector<const Bag*>& test_bags,
                             const EmbeddingTable* table, int threads) {
  if (test_bags.empty()) throw DataError("evaluate_fold: no test bags");
  const int C = model.config.categories;
  FoldEvaluation ev;
  ev.scored.resize(test_bags.size());
  parallel_for(test_bags.size(), threads, [&](std::size_t i) {
    const Bag& bag = *test_bags[i];
    auto& s = ev.scored[i];
    s.bag_id = bag.bag_id;
    s.label = bag.label;
    if (bag.label < 0 || bag.label >= C) throw DataError("bag " + bag.bag_id + " label outside model categories");
    if (bag.empty || bag.patches.empty()) {
      s.prediction = C - 1;
      s.scores.assign(C, 0.0);
      s.scores[C - 1] = 1.0;
      return;
    }
    s.scores = softmax(forward_bag<float>(model, bag, table));
    s.prediction = static_cast<int>(std::max_element(s.scores.begin(), s.scores.end()) - s.scores.begin());
  });

  std::vector<int> preds, labels;
  std::vector<std::vector<double>> scores;
  for (const auto& s : ev.scored) {
    preds.push_back(s.prediction);
    labels.push_back(s.label);
    scores.push_back(s.scores);
  }
  ev.confusion = confusion(preds, labels, C);
  auto& m = ev.metrics;
  m.bags = static_cast<int>(preds.size());
  m.accuracy = accuracy(preds, labels);
  m.recall.resize(C);
  double rsum = 0.0;
  int rn = 0;
  for (int r = 0; r < C; ++r) {
    if (!ev.confusion.percent[r][r]) continue;
    m.recall[r] = *ev.confusion.percent[r][r] / 100.0;
    rsum += *m.recall[r];
    ++rn;
  }
  m.macro_recall = rsum / rn;
  try {
    m.auc = roc_auc_ovr(scores, labels, C);
  } catch (const DataError&) {
    m.auc.per_category.assign(C, std::nullopt);
    m.auc.macro = NAN;
  }
  return ev;
}

CrossvalReport crossval(const DatasetManifest& manifest, const std::vector<Bag>& bags, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, const CrossvalOptions& options, const EmbeddingTable* table) {
  manifest.validate();
  if (bags.size() != manifest.entries.size()) throw DataError("crossval: bag count does not match manifest");
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (bags[i].bag_id != manifest.entries[i].bag_id) throw DataError("crossval: bags are not in manifest order");
  }
  if (model_cfg.mode != manifest.mode || train_cfg.mode != manifest.mode) {
    throw DataError("crossval: configuration mode " + to_string(model_cfg.mode) + " does not match manifest mode " +
                    to_string(manifest.mode));
  }
  ModelConfig mcfg = model_cfg;
  mcfg.categories = manifest.category_count();
  mcfg.validate();
  train_cfg.validate();

  CrossvalReport report;
  report.category_names = manifest.category_names;
  report.resolved_config = {{"model", to_json(mcfg)},
                            {"train", to_json(train_cfg)},
                            {"folds", options.folds},
                            {"split_seed", options.split_seed},
                            {"categories", manifest.category_names}};

  const auto fa = patient_stratified_folds(manifest, options.folds, options.split_seed);
  std::vector<ConfusionMatrix> matrices;
  for (int f = 0; f < options.folds; ++f) {
    FoldResult fr;
    fr.fold = f;
    std::set<std::string> train_p, test_p;
    std::vector<Bag> train_bags;
    std::vector<const Bag*> test_bags;
    for (auto i : fa.train_indices(manifest, f)) {
      train_bags.push_back(bags[i]);
      train_p.insert(bags[i].patient_id);
    }
    for (auto i : fa.test_indices(manifest, f)) {
      test_bags.push_back(&bags[i]);
      test_p.insert(bags[i].patient_id);
    }
    fr.train_patients.assign(train_p.begin(), train_p.end());
    fr.test_patients.assign(test_p.begin(), test_p.end());
    if (test_bags.empty()) throw DataError("crossval: fold " + std::to_string(f) + " has no test bags");

    auto trained = train(mcfg, train_bags, train_cfg, table);
    fr.history = std::move(trained.history);
    fr.evaluation = evaluate_fold(trained.eval_model(), test_bags, table, train_cfg.threads);
    for (auto& s : fr.evaluation.scored) s.fold = f;
    matrices.push_back(fr.evaluation.confusion);
    report.folds.push_back(std::move(fr));
  }

  report.aggregate = aggregate(matrices);
  const double n = static_cast<double>(report.folds.size());
  double acc = 0.0, rec = 0.0, auc = 0.0;
  int auc_n = 0;
  for (const auto& fr : report.folds) {
    acc += fr.evaluation.metrics.accuracy;
    rec += fr.evaluation.metrics.macro_recall;
    if (std::isfinite(fr.evaluation.metrics.auc.macro)) {
      auc += fr.evaluation.metrics.auc.macro;
      ++auc_n;
    }
  }
  report.mean_accuracy = acc / n;
  report.mean_macro_recall = rec / n;
  report.mean_macro_auc = auc_n ? auc / auc_n : NAN;
  double ss = 0.0;
  for (const auto& fr : report.folds) {
    const double d = fr.evaluation.metrics.accuracy - report.mean_accuracy;
    ss += d * d;
  }
  report.std_accuracy = n > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  return report;
}

std::pair<DatasetManifest, std::vector<Bag>> restrict_to_categories(const DatasetManifest& manifest,
                                                                     const std::vector<Bag>& bags,
                                                                     const std::vector<std::string>& names) {
  if (names.size() < 2) throw DataError("subset needs at least two categories");
  std::set<int> chosen;
  for (const auto& name : names) {
    const int idx = manifest.category_index(name);
    if (idx < 0) throw DataError("unknown category '" + name + "'");
    if (!chosen.insert(idx).second) throw DataError("category '" + name + "' listed twice");
  }
  if (bags.size() != manifest.entries.size()) throw DataError("subset: bag count does not match manifest");
  std::vector<int> remap(manifest.category_count(), -1);
  DatasetManifest sub;
  sub.mode = manifest.mode;
  for (int idx : chosen) {
    remap[idx] = static_cast<int>(sub.category_names.size());
    sub.category_names.push_back(manifest.category_names[idx]);
  }
  std::vector<Bag> sub_bags;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (remap[e.label] < 0) continue;
    auto entry = e;
    entry.label = remap[e.label];
    sub.entries.push_back(entry);
    sub_bags.push_back(bags[i]);
    sub_bags.back().label = entry.label;
  }
  return {std::move(sub), std::move(sub_bags)};
}

CrossvalReport subset_experiment(const DatasetManifest& manifest, const std::vector<Bag>& bags,
                                 const std::vector<std::string>& names, const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg, const CrossvalOptions& options,
                                 const EmbeddingTable* table) {
  auto [sub, sub_bags] = restrict_to_categories(manifest, bags, names);
  return crossval(sub, sub_bags, model_cfg, train_cfg, options, table);
}

EmbeddingTable export_embeddings(const MilModel<float>& model, const std::vector<Bag>& bags, const EmbeddingTable* table,
                                 int threads) {
  std::vector<std::vector<float>> rows(bags.size());
  parallel_for(bags.size(), threads, [&](std::size_t i) {
    if (bags[i].empty || bags[i].patches.empty()) return;
    rows[i] = pooled_embedding(model, bags[i], table);
  });
  EmbeddingTable out(model.config.pooled_dim());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (rows[i].empty()) {
      std::cerr << "warning: bag " << bags[i].bag_id << " is empty; no embedding exported\n";
      continue;
    }
    out.add(bags[i].bag_id, rows[i]);
  }
  return out;
}

nlohmann::json to_json(const MetricsReport& m) {
  auto recall = nlohmann::json::array();
  for (const auto& r : m.recall) recall.push_back(opt_json(r));
  auto auc = nlohmann::json::array();
  for (const auto& a : m.auc.per_category) auc.push_back(opt_json(a));
  return {{"bags", m.bags},
          {"accuracy", m.accuracy},
          {"macro_recall", num_json(m.macro_recall)},
          {"recall", recall},
          {"roc_auc", auc},
          {"macro_roc_auc", num_json(m.auc.macro)}};
}

nlohmann::json to_json(const CrossvalReport& r) {
  auto folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"train_patients", f.train_patients},
                     {"test_patients", f.test_patients},
                     {"metrics", to_json(f.evaluation.metrics)},
                     {"confusion_counts", f.evaluation.confusion.counts},
                     {"confusion_percent", matrix_json(f.evaluation.confusion.percent)}});
  }
  return {{"categories", r.category_names},
          {"folds", folds},
          {"aggregate",
           {{"mean_percent", matrix_json(r.aggregate.mean)},
            {"std_percent", matrix_json(r.aggregate.std)},
            {"folds_per_row", r.aggregate.folds_per_row}}},
          {"summary",
           {{"accuracy_mean", r.mean_accuracy},
            {"accuracy_std", r.std_accuracy},
            {"macro_recall_mean", num_json(r.mean_macro_recall)},
            {"macro_roc_auc_mean", num_json(r.mean_macro_auc)}}},
          {"config", r.resolved_config}};
}

std::string confusion_csv(const AggregateConfusion& agg, const std::vector<std::string>& names) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "true,predicted,mean_percent,std_percent,folds\n";
  for (int r = 0; r < agg.categories; ++r) {
    for (int c = 0; c < agg.categories; ++c) {
      out << names[r] << ',' << names[c] << ',';
      if (agg.mean[r][c]) out << *agg.mean[r][c];
      out << ',';
      if (agg.std[r][c]) out << *agg.std[r][c];
      out << ',' << agg.folds_per_row[r] << '\n';
    }
  }
  return out.str();
}

std::string confusion_table(const AggregateConfusion& agg, const std::vector<std::string>& names) {
  std::size_t label_w = 4;
  for (const auto& n : names) label_w = std::max(label_w, n.size());
  std::vector<std::vector<std::string>> cells(agg.categories, std::vector<std::string>(agg.categories));
  std::size_t cell_w = 3;
  for (int c = 0; c < agg.categories; ++c) cell_w = std::max(cell_w, names[c].size());
  for (int r = 0; r < agg.categories; ++r) {
    for (int c = 0; c < agg.categories; ++c) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(1);
      if (!agg.mean[r][c]) {
        s << "n/a";
      } else {
        s << *agg.mean[r][c];
        if (agg.std[r][c]) s << " +-" << *agg.std[r][c];
      }
      cells[r][c] = s.str();
      cell_w = std::max(cell_w, cells[r][c].size());
    }
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(label_w)) << "true" << " |";
  for (const auto& n : names) out << ' ' << std::right << std::setw(static_cast<int>(cell_w)) << n;
  out << '\n' << std::string(label_w + 2 + (cell_w + 1) * names.size(), '-') << '\n';
  for (int r = 0; r < agg.categories; ++r) {
    out << std::left << std::setw(static_cast<int>(label_w)) << names[r] << " |";
    for (int c = 0; c < agg.categories; ++c) out << ' ' << std::right << std::setw(static_cast<int>(cell_w)) << cells[r][c];
    out << '\n';
  }
  return out.str();
}

std::string scores_jsonl(const std::vector<ScoredBag>& scored) {
  std::string out;
  for (const auto& s : scored) {
    nlohmann::json j = {{"bag_id", s.bag_id}, {"label", s.label}, {"scores", s.scores}, {"prediction", s.prediction},
                        {"fold", s.fold}};
    out += j.dump() + "\n";
  }
  return out;
}

void write_report_bundle(const std::filesystem::path& dir, const CrossvalReport& report) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", to_json(report).dump(2) + "\n");
  write_text(dir / "confusion.csv", confusion_csv(report.aggregate, report.category_names));
  write_text(dir / "confusion.txt", confusion_table(report.aggregate, report.category_names));
  std::string roc;
  std::string history = "fold,epoch,mean_loss,lr\n";
  for (const auto& f : report.folds) {
    roc += scores_jsonl(f.evaluation.scored);
    const auto csv = history_csv(f.history);
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) history += std::to_string(f.fold) + "," + line + "\n";
  }
  write_text(dir / "roc.jsonl", roc);
  write_text(dir / "history.csv", history);
  write_text(dir / "resolved-config.json", report.resolved_config.dump(2) + "\n");
}

}  // namespace gramsmear
