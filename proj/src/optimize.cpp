#include "gramsmear/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "gramsmear/error.hpp"
#include "gramsmear/parallel.hpp"

namespace gramsmear {

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  auto mix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  std::uint64_t h = mix(seed);
  for (auto s : stream) h = mix(h ^ mix(s));
  return h;
}

double cross_entropy(std::span<const double> logits, int label) {
  ad::Tape<double> tape;
  const auto z = tape.constant(Tensor<double>({static_cast<int>(logits.size())}, {logits.begin(), logits.end()}));
  return tape.value(ad::cross_entropy(tape, z, label))[0];
}

template <class T>
AdamWState<T> AdamWState<T>::init(const ParamStore<T>& params, AdamWConfig cfg) {
  AdamWState s;
  s.config = cfg;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.value(i).shape());
    s.v.emplace_back(params.value(i).shape());
  }
  return s;
}

template <class T>
void adamw_step(AdamWState<T>& state, ParamStore<T>& params, const std::vector<Tensor<T>>& grads, double lr) {
  if (!(lr > 0.0)) throw DataError("adamw_step: learning rate must be > 0");
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adamw_step: gradient/state count does not match parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params.value(i).shape() || state.m[i].shape() != params.value(i).shape()) {
      throw ShapeError("adamw_step: shape mismatch for " + params.name(i));
    }
  }
  const auto& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params.mutable_values(i);
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = g[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double m_hat = mk / bc1;
      const double v_hat = vk / bc2;
      const double old = theta[k];
      theta[k] = static_cast<T>(old - lr * m_hat / (std::sqrt(v_hat) + c.eps) - lr * c.weight_decay * old);
    }
  }
}

OneCycleSchedule OneCycleSchedule::make(int epochs, int steps_per_epoch, int warmup_epochs, double max_lr,
                                        double div_start, double div_final) {
  OneCycleSchedule s;
  s.max_lr = max_lr;
  s.div_start = div_start;
  s.div_final = div_final;
  s.total_steps = std::max(1, epochs * steps_per_epoch);
  s.warmup_steps = warmup_epochs * steps_per_epoch;
  if (s.warmup_steps >= s.total_steps) s.warmup_steps = static_cast<int>(0.3 * s.total_steps);
  return s;
}

double onecycle_lr(const OneCycleSchedule& s, int step) {
  if (step < 0 || step >= s.total_steps) {
    throw DataError("onecycle_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + ")");
  }
  const double start = s.max_lr / s.div_start;
  const double final_lr = s.max_lr / s.div_final;
  if (step <= s.warmup_steps) {
    if (s.warmup_steps == 0) return s.max_lr;
    // written so that step == warmup_steps yields max_lr exactly
    const double cos_t = std::cos(std::numbers::pi * step / s.warmup_steps);
    return s.max_lr - (s.max_lr - start) * (1.0 + cos_t) / 2.0;
  }
  const double t = static_cast<double>(step - s.warmup_steps) / (s.total_steps - 1 - s.warmup_steps);
  return final_lr + (s.max_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

template <class T>
void ema_update(EmaState<T>& ema, const ParamStore<T>& params) {
  if (ema.shadow.size() != params.size()) throw ShapeError("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ema.shadow.value(i).shape() != params.value(i).shape()) throw ShapeError("ema_update: shape mismatch for " + params.name(i));
    auto sh = ema.shadow.mutable_values(i);
    const auto& p = params.value(i);
    for (std::size_t k = 0; k < sh.size(); ++k) {
      sh[k] = static_cast<T>(ema.decay * sh[k] + (1.0 - ema.decay) * p[k]);
    }
  }
}

RasterImage flip_horizontal(const RasterImage& img) {
  RasterImage out(img.width, img.height);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(r, img.width - 1 - c, ch);
    }
  }
  return out;
}

RasterImage flip_vertical(const RasterImage& img) {
  RasterImage out(img.width, img.height);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(img.height - 1 - r, c, ch);
    }
  }
  return out;
}

RasterImage rotate90(const RasterImage& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  if (img.width != img.height) throw ShapeError("rotate90 needs a square image");
  const int n = img.width;
  RasterImage out(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      int sr = r, sc = c;
      if (k == 1) {
        sr = c;
        sc = n - 1 - r;
      } else if (k == 2) {
        sr = n - 1 - r;
        sc = n - 1 - c;
      } else {
        sr = n - 1 - c;
        sc = r;
      }
      for (int ch = 0; ch < 3; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
    }
  }
  return out;
}

Bag augment_bag(Rng& rng, const Bag& bag, const AugmentConfig& cfg) {
  Bag out = bag;
  std::bernoulli_distribution hflip(cfg.hflip_p), vflip(cfg.vflip_p), rotate(cfg.rotate_p);
  std::uniform_int_distribution<int> quarter(0, 3);
  for (auto& p : out.patches) {
    if (cfg.translate_jitter > 0 && !p.context.data.empty()) {
      const int side = p.pixels.width;
      const int margin = (p.context.width - side) / 2;
      const int j = std::min(cfg.translate_jitter, margin);
      std::uniform_int_distribution<int> shift(-j, j);
      const int dy = shift(rng);
      const int dx = shift(rng);
      p.pixels = crop(p.context, {margin + dy, margin + dx, side, side});
    }
    if (hflip(rng)) p.pixels = flip_horizontal(p.pixels);
    if (vflip(rng)) p.pixels = flip_vertical(p.pixels);
    if (rotate(rng)) p.pixels = rotate90(p.pixels, quarter(rng));
  }
  return out;
}

Bag patch_dropout(Rng& rng, const Bag& bag, double p) {
  if (p < 0.0 || p >= 1.0) throw DataError("patch_dropout: p must be in [0, 1)");
  if (p == 0.0 || bag.patches.empty()) return bag;
  Bag out = bag;
  out.patches.clear();
  std::bernoulli_distribution drop(p);
  for (const auto& patch : bag.patches) {
    if (!drop(rng)) out.patches.push_back(patch);
  }
  if (out.patches.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, bag.patches.size() - 1);
    out.patches.push_back(bag.patches[pick(rng)]);
  }
  return out;
}

TrainConfig TrainConfig::defaults(Mode mode) {
  TrainConfig c;
  c.mode = mode;
  if (mode == Mode::fungi) {
    c.epochs = 45;
    c.use_ema = false;
  }
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw DataError("epochs must be >= 0");
  if (bag_batch < 1) throw DataError("bag_batch must be >= 1");
  if (!(max_lr > 0.0)) throw DataError("max_lr must be > 0");
  if (warmup_epochs < 0) throw DataError("warmup_epochs must be >= 0");
  if (ema_decay < 0.0 || ema_decay > 1.0) throw DataError("ema_decay must be in [0, 1]");
  for (double p : {augment.hflip_p, augment.vflip_p, augment.rotate_p}) {
    if (p < 0.0 || p > 1.0) throw DataError("augmentation probabilities must be in [0, 1]");
  }
  if (augment.patch_dropout_p < 0.0 || augment.patch_dropout_p >= 1.0) throw DataError("patch_dropout_p must be in [0, 1)");
  if (augment.translate_jitter < 0) throw DataError("translate_jitter must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"epochs", c.epochs},
          {"bag_batch", c.bag_batch},
          {"seed", c.seed},
          {"use_ema", c.use_ema},
          {"ema_decay", c.ema_decay},
          {"max_lr", c.max_lr},
          {"warmup_epochs", c.warmup_epochs},
          {"div_start", c.div_start},
          {"div_final", c.div_final},
          {"adamw", {{"beta1", c.adamw.beta1}, {"beta2", c.adamw.beta2}, {"eps", c.adamw.eps}, {"weight_decay", c.adamw.weight_decay}}},
          {"augment",
           {{"hflip_p", c.augment.hflip_p},
            {"vflip_p", c.augment.vflip_p},
            {"rotate_p", c.augment.rotate_p},
            {"translate_jitter", c.augment.translate_jitter},
            {"patch_dropout_p", c.augment.patch_dropout_p}}}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base) {
  static const std::vector<std::string> known = {"mode",    "epochs",        "bag_batch",  "seed",      "use_ema",
                                                 "ema_decay", "max_lr",      "warmup_epochs", "div_start", "div_final",
                                                 "adamw",   "augment"};
  TrainConfig c = base;
  try {
    for (const auto& [key, _] : j.items()) {
      if (std::find(known.begin(), known.end(), key) == known.end()) throw DataError("unknown train config field '" + key + "'");
    }
    if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
    c.epochs = j.value("epochs", c.epochs);
    c.bag_batch = j.value("bag_batch", c.bag_batch);
    c.seed = j.value("seed", c.seed);
    c.use_ema = j.value("use_ema", c.use_ema);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.max_lr = j.value("max_lr", c.max_lr);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.div_start = j.value("div_start", c.div_start);
    c.div_final = j.value("div_final", c.div_final);
    if (j.contains("adamw")) {
      const auto& a = j.at("adamw");
      c.adamw.beta1 = a.value("beta1", c.adamw.beta1);
      c.adamw.beta2 = a.value("beta2", c.adamw.beta2);
      c.adamw.eps = a.value("eps", c.adamw.eps);
      c.adamw.weight_decay = a.value("weight_decay", c.adamw.weight_decay);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.hflip_p = a.value("hflip_p", c.augment.hflip_p);
      c.augment.vflip_p = a.value("vflip_p", c.augment.vflip_p);
      c.augment.rotate_p = a.value("rotate_p", c.augment.rotate_p);
      c.augment.translate_jitter = a.value("translate_jitter", c.augment.translate_jitter);
      c.augment.patch_dropout_p = a.value("patch_dropout_p", c.augment.patch_dropout_p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

struct BagStep {
  std::vector<Tensor<float>> grads;
  double loss = 0.0;
};

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const std::vector<Bag>& bags, const TrainConfig& cfg,
                  const EmbeddingTable* table) {
  cfg.validate();
  model_cfg.validate();
  std::vector<const Bag*> usable;
  for (const auto& b : bags) {
    if (b.empty || b.patches.empty()) continue;
    if (b.label < 0 || b.label >= model_cfg.categories) throw DataError("bag " + b.bag_id + " label outside model categories");
    usable.push_back(&b);
  }
  if (usable.empty()) throw DataError("train: no non-empty training bags");
  const bool frozen = model_cfg.encoder == EncoderKind::frozen_table;
  if (frozen) {
    if (!table) throw DataError("train: frozen-table model needs an embedding table");
    if (table->dim() != model_cfg.embed_dim) throw ShapeError("train: embedding table dimension does not match model");
    for (const Bag* b : usable) {
      for (const auto& p : b->patches) {
        if (!table->contains(p.patch_id)) throw DataError("train: no frozen embedding for patch_id '" + p.patch_id + "'");
      }
    }
  }

  TrainResult result;
  result.model = MilModel<float>::init(model_cfg, derive_seed(cfg.seed, {1}));
  auto& params = result.model.params;
  std::vector<std::size_t> encoder_params;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.name(i).rfind("encoder.", 0) == 0) encoder_params.push_back(i);
  }
  std::optional<EmaState<float>> ema;
  if (cfg.use_ema) ema = EmaState<float>{cfg.ema_decay, params};

  const int n = static_cast<int>(usable.size());
  const int steps_per_epoch = (n + cfg.bag_batch - 1) / cfg.bag_batch;
  const auto sched = OneCycleSchedule::make(cfg.epochs, steps_per_epoch, cfg.warmup_epochs, cfg.max_lr, cfg.div_start, cfg.div_final);
  auto opt = AdamWState<float>::init(params, cfg.adamw);

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch + 1;
    double loss_sum = 0.0;
    for (int start = 0; start < n; start += cfg.bag_batch) {
      const int count = std::min(cfg.bag_batch, n - start);
      std::vector<BagStep> results(count);
      parallel_for(static_cast<std::size_t>(count), cfg.threads, [&](std::size_t j) {
        const int pos = start + static_cast<int>(j);
        Rng rng(derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(pos)}));
        const Bag& src = *usable[order[pos]];
        Bag bag = frozen ? src : augment_bag(rng, src, cfg.augment);
        bag = patch_dropout(rng, bag, cfg.augment.patch_dropout_p);
        const auto input = make_bag_input<float>(model_cfg, bag, table);
        ad::Tape<float> tape;
        const auto vars = graph::bind(tape, params);
        const auto logits = graph::forward(tape, result.model, vars, input);
        const auto loss = ad::cross_entropy(tape, logits, bag.label);
        results[j].loss = tape.value(loss)[0];
        results[j].grads = tape.backward(loss, params);
      });

      std::vector<Tensor<float>> grads = std::move(results[0].grads);
      for (int j = 1; j < count; ++j) {
        for (std::size_t i = 0; i < grads.size(); ++i) {
          auto& g = grads[i];
          const auto& h = results[j].grads[i];
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += h[k];
        }
      }
      const float scale = 1.0f / static_cast<float>(count);
      for (auto& g : grads) {
        for (auto& v : g.values()) v *= scale;
      }
      for (int j = 0; j < count; ++j) loss_sum += results[j].loss;
      for (auto i : encoder_params) {
        double s = 0.0;
        for (float v : grads[i].values()) s += static_cast<double>(v) * v;
        rec.encoder_grad_norm = std::max(rec.encoder_grad_norm, std::sqrt(s));
      }

      rec.lr = onecycle_lr(sched, step);
      adamw_step(opt, params, grads, rec.lr);
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.value(i).all_finite()) throw NumericalError("non-finite parameter " + params.name(i) + " after update");
      }
      if (ema) {
        ema->decay = std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step));
        ema_update(*ema, params);
      }
      ++step;
    }
    rec.mean_loss = loss_sum / n;
    result.history.push_back(rec);
  }
  if (ema) result.ema = MilModel<float>{model_cfg, ema->shadow};
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,mean_loss,lr\n";
  for (const auto& r : history) out << r.epoch << ',' << r.mean_loss << ',' << r.lr << '\n';
  return out.str();
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_step<float>(AdamWState<float>&, ParamStore<float>&, const std::vector<Tensor<float>>&, double);
template void adamw_step<double>(AdamWState<double>&, ParamStore<double>&, const std::vector<Tensor<double>>&, double);
template void ema_update<float>(EmaState<float>&, const ParamStore<float>&);
template void ema_update<double>(EmaState<double>&, const ParamStore<double>&);

}  // namespace gramsmear
