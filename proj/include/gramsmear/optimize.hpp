#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "gramsmear/bagging.hpp"
#include "gramsmear/model.hpp"

namespace gramsmear {

using Rng = std::mt19937_64;

/// Mixes a base seed with stream indices into an independent generator seed.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> stream);

/// -log softmax(logits)[label]
double cross_entropy(std::span<const double> logits, int label);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <class T>
struct AdamWState {
  AdamWConfig config;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;

  static AdamWState init(const ParamStore<T>& params, AdamWConfig cfg = {});
};

/// Bias-corrected Adam update with decoupled weight decay:
/// theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta.
template <class T>
void adamw_step(AdamWState<T>& state, ParamStore<T>& params, const std::vector<Tensor<T>>& grads, double lr);

struct OneCycleSchedule {
  double max_lr = 3e-4;
  int warmup_steps = 0;
  int total_steps = 1;
  double div_start = 25.0;
  double div_final = 1e4;

  /// Warmup covers warmup_epochs; if that would not leave at least one
  /// annealing step, 30% of the run is used instead.
  static OneCycleSchedule make(int epochs, int steps_per_epoch, int warmup_epochs, double max_lr = 3e-4,
                               double div_start = 25.0, double div_final = 1e4);
};

/// Cosine ramp from max_lr/div_start to max_lr over the warmup, then cosine
/// anneal to max_lr/div_final at the last step.
double onecycle_lr(const OneCycleSchedule& sched, int step);

template <class T>
struct EmaState {
  double decay = 0.999;
  ParamStore<T> shadow;
};

/// shadow <- decay * shadow + (1 - decay) * params
template <class T>
void ema_update(EmaState<T>& ema, const ParamStore<T>& params);

struct AugmentConfig {
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  /// Probability of a uniformly chosen rotation from {0, 90, 180, 270} degrees.
  double rotate_p = 1.0;
  int translate_jitter = 8;
  double patch_dropout_p = 0.2;
};

RasterImage flip_horizontal(const RasterImage& img);
RasterImage flip_vertical(const RasterImage& img);
/// Counter-clockwise rotation by quarter_turns * 90 degrees (square images).
RasterImage rotate90(const RasterImage& img, int quarter_turns);

/// Per-patch jittered re-crop (when the patch carries a context window),
/// flips and quarter-turn rotation. Labels and patch count are unchanged.
Bag augment_bag(Rng& rng, const Bag& bag, const AugmentConfig& cfg);

/// Drops each patch with probability p; keeps one uniformly chosen patch if
/// all would be dropped.
Bag patch_dropout(Rng& rng, const Bag& bag, double p);

struct TrainConfig {
  Mode mode = Mode::bacteria;
  int epochs = 150;
  int bag_batch = 8;
  std::uint64_t seed = 0;
  bool use_ema = true;
  double ema_decay = 0.999;
  double max_lr = 3e-4;
  int warmup_epochs = 10;
  double div_start = 25.0;
  double div_final = 1e4;
  AdamWConfig adamw;
  AugmentConfig augment;
  int threads = 1;

  /// Bacteria: 150 epochs with EMA. Fungi: 45 epochs, no EMA.
  static TrainConfig defaults(Mode mode);
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Fields absent from `j` keep the values of `base`.
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base);

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  /// Largest L2 norm of any encoder-parameter gradient seen during the epoch.
  double encoder_grad_norm = 0.0;
};

struct TrainResult {
  MilModel<float> model;
  std::optional<MilModel<float>> ema;
  std::vector<EpochRecord> history;

  /// EMA weights when present, raw weights otherwise.
  const MilModel<float>& eval_model() const { return ema ? *ema : model; }
};

/// Trains from a seeded initialisation. Empty bags are skipped. The result is
/// a pure function of the inputs and seed, independent of cfg.threads.
TrainResult train(const ModelConfig& model_cfg, const std::vector<Bag>& bags, const TrainConfig& cfg,
                  const EmbeddingTable* table = nullptr);

std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace gramsmear
