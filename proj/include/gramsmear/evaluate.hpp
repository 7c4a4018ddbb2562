#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gramsmear/bagging.hpp"
#include "gramsmear/model.hpp"
#include "gramsmear/optimize.hpp"

namespace gramsmear {

struct FoldAssignment {
  int k = 3;
  std::map<std::string, int> fold_of_patient;

  /// Bag indices whose patient is (test) or is not (train) in `fold`.
  std::vector<std::size_t> test_indices(const DatasetManifest& m, int fold) const;
  std::vector<std::size_t> train_indices(const DatasetManifest& m, int fold) const;
};

/// Each patient is stratified by its majority label (lowest label on ties).
/// Within each category, patients are sorted, shuffled by seed and dealt
/// round-robin; the dealing position carries over between categories so fold
/// sizes stay balanced overall.
FoldAssignment patient_stratified_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

struct ConfusionMatrix {
  int categories = 0;
  std::vector<std::vector<long>> counts;
  /// Row-normalised percentages; std::nullopt for rows without support.
  std::vector<std::vector<std::optional<double>>> percent;
};

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, int categories);

struct AggregateConfusion {
  int categories = 0;
  std::vector<std::vector<std::optional<double>>> mean;
  /// Sample standard deviation (n - 1) over folds that define the row.
  std::vector<std::vector<std::optional<double>>> std;
  std::vector<int> folds_per_row;
};

AggregateConfusion aggregate(const std::vector<ConfusionMatrix>& folds);

struct RocAuc {
  std::vector<std::optional<double>> per_category;
  double macro = 0.0;
};

/// One-vs-rest AUC per category by Mann-Whitney rank sums (ties count half).
/// Categories without both positives and negatives are undefined and left out
/// of the macro mean; throws if no category is defined.
RocAuc roc_auc_ovr(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels, int categories);

struct MetricsReport {
  double accuracy = 0.0;
  /// Mean recall over categories with test support.
  double macro_recall = 0.0;
  std::vector<std::optional<double>> recall;
  RocAuc auc;
  int bags = 0;
};

struct ScoredBag {
  std::string bag_id;
  int label = 0;
  int prediction = 0;
  std::vector<double> scores;
  int fold = 0;
};

struct FoldEvaluation {
  MetricsReport metrics;
  ConfusionMatrix confusion;
  std::vector<ScoredBag> scored;
};

/// Softmax scores per bag. Empty bags are predicted as the last ("other")
/// category with a one-hot score vector.
FoldEvaluation evaluate_fold(const MilModel<float>& model, const std::vector<const Bag*>& test_bags,
                             const EmbeddingTable* table, int threads = 1);

struct CrossvalOptions {
  int folds = 3;
  std::uint64_t split_seed = 0;
};

struct FoldResult {
  int fold = 0;
  std::vector<std::string> train_patients;
  std::vector<std::string> test_patients;
  FoldEvaluation evaluation;
  std::vector<EpochRecord> history;
};

struct CrossvalReport {
  std::vector<std::string> category_names;
  std::vector<FoldResult> folds;
  AggregateConfusion aggregate;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double mean_macro_recall = 0.0;
  double mean_macro_auc = 0.0;
  nlohmann::json resolved_config;
};

/// folds -> train -> evaluate -> aggregate over every fold.
CrossvalReport crossval(const DatasetManifest& manifest, const std::vector<Bag>& bags, const ModelConfig& model_cfg,
                        const TrainConfig& train_cfg, const CrossvalOptions& options, const EmbeddingTable* table = nullptr);

/// Keeps only bags of the named categories and relabels them compactly in
/// their original category order.
std::pair<DatasetManifest, std::vector<Bag>> restrict_to_categories(const DatasetManifest& manifest,
                                                                     const std::vector<Bag>& bags,
                                                                     const std::vector<std::string>& names);

CrossvalReport subset_experiment(const DatasetManifest& manifest, const std::vector<Bag>& bags,
                                 const std::vector<std::string>& names, const ModelConfig& model_cfg,
                                 const TrainConfig& train_cfg, const CrossvalOptions& options,
                                 const EmbeddingTable* table = nullptr);

/// One pooled vector per bag, keyed by bag_id (EMB1 layout).
EmbeddingTable export_embeddings(const MilModel<float>& model, const std::vector<Bag>& bags, const EmbeddingTable* table,
                                 int threads = 1);

nlohmann::json to_json(const MetricsReport& m);
nlohmann::json to_json(const CrossvalReport& r);
std::string confusion_csv(const AggregateConfusion& agg, const std::vector<std::string>& names);
/// mean +-std per cell, percentages, "n/a" for rows without support.
std::string confusion_table(const AggregateConfusion& agg, const std::vector<std::string>& names);
std::string scores_jsonl(const std::vector<ScoredBag>& scored);

/// Writes report.json, confusion.csv, confusion.txt, roc.jsonl, history.csv and resolved-config.json.
void write_report_bundle(const std::filesystem::path& dir, const CrossvalReport& report);

}  // namespace gramsmear
