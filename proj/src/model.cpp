#include "gramsmear/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "gramsmear/checkpoint.hpp"
#include "gramsmear/error.hpp"

namespace gramsmear {

ModelConfig ModelConfig::defaults(Mode mode) {
  ModelConfig cfg;
  cfg.mode = mode;
  if (mode == Mode::bacteria) {
    cfg.encoder = EncoderKind::builtin_cnn;
    cfg.categories = 15;
    cfg.patch_size = kBacteriaPatch;
  } else {
    cfg.encoder = EncoderKind::frozen_table;
    cfg.categories = 4;
    cfg.patch_size = kFungiPatch;
  }
  return cfg;
}

void ModelConfig::validate() const {
  if (heads < 1 || attn_hidden < 1 || embed_dim < 1) throw DataError("model: heads, attn_hidden and embed_dim must be >= 1");
  if (categories < 2) throw DataError("model: need at least 2 categories");
  if (encoder == EncoderKind::builtin_cnn) {
    if (channels.size() < 2 || channels.front() != 3) throw DataError("model: conv channels must start at 3");
    if (channels.back() != embed_dim) throw DataError("model: last conv width must equal embed_dim");
    int side = patch_size;
    for (std::size_t i = 1; i < channels.size(); ++i) side /= 2;
    if (side < 1) throw DataError("model: patch_size too small for the number of conv blocks");
  }
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"mode", to_string(cfg.mode)},
          {"encoder", cfg.encoder == EncoderKind::builtin_cnn ? "builtin-cnn" : "frozen-table"},
          {"channels", cfg.channels},
          {"embed_dim", cfg.embed_dim},
          {"heads", cfg.heads},
          {"attn_hidden", cfg.attn_hidden},
          {"categories", cfg.categories},
          {"patch_size", cfg.patch_size}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg = ModelConfig::defaults(mode_from_string(j.value("mode", std::string("bacteria"))));
    if (j.contains("encoder")) {
      const auto e = j.at("encoder").get<std::string>();
      if (e == "builtin-cnn") {
        cfg.encoder = EncoderKind::builtin_cnn;
      } else if (e == "frozen-table") {
        cfg.encoder = EncoderKind::frozen_table;
      } else {
        throw DataError("unknown encoder '" + e + "'");
      }
    }
    cfg.channels = j.value("channels", cfg.channels);
    cfg.embed_dim = j.value("embed_dim", cfg.embed_dim);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.attn_hidden = j.value("attn_hidden", cfg.attn_hidden);
    cfg.categories = j.value("categories", cfg.categories);
    cfg.patch_size = j.value("patch_size", cfg.patch_size);
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
}

EmbeddingTable::EmbeddingTable(int dim) : dim_(dim) {
  if (dim < 1) throw DataError("embedding dimension must be >= 1");
}

void EmbeddingTable::add(const std::string& key, std::span<const float> vec) {
  if (static_cast<int>(vec.size()) != dim_) throw ShapeError("embedding for " + key + " has wrong dimension");
  if (contains(key)) throw DataError("duplicate embedding key " + key);
  index_.emplace(key, keys_.size());
  keys_.push_back(key);
  data_.insert(data_.end(), vec.begin(), vec.end());
}

std::span<const float> EmbeddingTable::lookup(const std::string& key) const {
  const auto it = index_.find(key);
  if (it == index_.end()) throw DataError("no frozen embedding for patch_id '" + key + "'");
  return {data_.data() + it->second * dim_, static_cast<std::size_t>(dim_)};
}

Bytes encode_embeddings(const EmbeddingTable& table) {
  Bytes out = {'E', 'M', 'B', '1'};
  put_u32(out, static_cast<std::uint32_t>(table.size()));
  put_u32(out, static_cast<std::uint32_t>(table.dim()));
  const auto* p = reinterpret_cast<const std::uint8_t*>(table.data().data());
  out.insert(out.end(), p, p + table.data().size() * sizeof(float));
  const std::string keys = nlohmann::json(table.keys()).dump();
  out.insert(out.end(), keys.begin(), keys.end());
  return out;
}

EmbeddingTable decode_embeddings(const Bytes& bytes) {
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "EMB1") throw DataError("not an EMB1 file");
  const auto count = get_u32(bytes.data() + 4);
  const auto dim = get_u32(bytes.data() + 8);
  const std::size_t payload = static_cast<std::size_t>(count) * dim * sizeof(float);
  if (12 + payload > bytes.size()) throw DataError("EMB1 file truncated");
  std::vector<std::string> keys;
  try {
    keys = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(12 + payload), bytes.end())
               .get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("EMB1 key index malformed: ") + e.what());
  }
  if (keys.size() != count) throw DataError("EMB1 key count does not match header");
  EmbeddingTable table(static_cast<int>(dim));
  std::vector<float> row(dim);
  for (std::size_t i = 0; i < count; ++i) {
    std::memcpy(row.data(), bytes.data() + 12 + i * dim * sizeof(float), dim * sizeof(float));
    table.add(keys[i], row);
  }
  return table;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  write_file(path, encode_embeddings(table));
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) { return decode_embeddings(read_file(path)); }

template <class T>
Tensor<T> patch_tensor(const std::vector<const RasterImage*>& patches, int patch_size) {
  const int k = static_cast<int>(patches.size());
  Tensor<T> out({k, 3, patch_size, patch_size});
  const std::size_t plane = static_cast<std::size_t>(patch_size) * patch_size;
  for (int i = 0; i < k; ++i) {
    const RasterImage& img = *patches[i];
    if (img.width != patch_size || img.height != patch_size) {
      throw ShapeError("patch is " + std::to_string(img.width) + "x" + std::to_string(img.height) + ", model expects " +
                       std::to_string(patch_size) + "x" + std::to_string(patch_size));
    }
    T* dst = out.data() + static_cast<std::size_t>(i) * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      for (int ch = 0; ch < 3; ++ch) {
        const double v = img.data[p * 3 + ch] / 255.0;
        dst[ch * plane + p] = static_cast<T>((v - kInputMean) / kInputStd);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> embedding_matrix(const EmbeddingTable& table, const std::vector<std::string>& patch_ids) {
  const int d = table.dim();
  Tensor<T> out({static_cast<int>(patch_ids.size()), d});
  for (std::size_t i = 0; i < patch_ids.size(); ++i) {
    const auto row = table.lookup(patch_ids[i]);
    for (int j = 0; j < d; ++j) out[i * d + j] = static_cast<T>(row[j]);
  }
  return out;
}

namespace {

template <class T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <class T>
MilModel<T> MilModel<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  MilModel<T> m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  if (cfg.encoder == EncoderKind::builtin_cnn) {
    for (std::size_t i = 1; i < cfg.channels.size(); ++i) {
      const int cin = cfg.channels[i - 1], cout = cfg.channels[i];
      const std::string base = "encoder.conv" + std::to_string(i);
      m.params.add(base + ".weight", normal_tensor<T>({cout, cin, 3, 3}, std::sqrt(2.0 / (cin * 9)), rng));
      m.params.add(base + ".bias", Tensor<T>({cout}));
    }
  }
  const int d = cfg.embed_dim, l = cfg.attn_hidden;
  for (int h = 0; h < cfg.heads; ++h) {
    const std::string base = "pool.head" + std::to_string(h);
    m.params.add(base + ".V", normal_tensor<T>({l, d}, std::sqrt(1.0 / d), rng));
    m.params.add(base + ".w", normal_tensor<T>({l}, std::sqrt(1.0 / l), rng));
  }
  m.params.add("classifier.W", normal_tensor<T>({cfg.categories, cfg.pooled_dim()}, std::sqrt(1.0 / cfg.pooled_dim()), rng));
  m.params.add("classifier.b", Tensor<T>({cfg.categories}));
  return m;
}

template <class T>
BagInput<T> make_bag_input(const ModelConfig& cfg, const Bag& bag, const EmbeddingTable* table) {
  if (bag.patches.empty()) throw DataError("bag " + bag.bag_id + " has no patches");
  BagInput<T> in;
  if (cfg.encoder == EncoderKind::frozen_table) {
    if (!table) throw DataError("frozen-table model needs an embedding table");
    if (table->dim() != cfg.embed_dim) throw ShapeError("embedding table dimension does not match model embed_dim");
    std::vector<std::string> ids;
    for (const auto& p : bag.patches) ids.push_back(p.patch_id);
    in.data = embedding_matrix<T>(*table, ids);
    in.embeddings = true;
  } else {
    std::vector<const RasterImage*> imgs;
    for (const auto& p : bag.patches) imgs.push_back(&p.pixels);
    in.data = patch_tensor<T>(imgs, cfg.patch_size);
  }
  return in;
}

namespace graph {

template <class T>
std::vector<ad::Var> bind(ad::Tape<T>& tape, const ParamStore<T>& params) {
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) vars.push_back(tape.parameter(params, i));
  return vars;
}

template <class T>
ad::Var encode(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, ad::Var pixels) {
  const auto& cfg = model.config;
  if (cfg.encoder != EncoderKind::builtin_cnn) throw DataError("encode: model has no trainable encoder");
  ad::Var x = pixels;
  const std::size_t blocks = cfg.channels.size() - 1;
  for (std::size_t i = 0; i < blocks; ++i) {
    x = ad::conv2d(tape, x, vars[2 * i], vars[2 * i + 1]);
    x = ad::relu(tape, x);
    x = ad::maxpool2d(tape, x);
  }
  return ad::global_avg_pool(tape, x);
}

template <class T>
ad::Var attention(ad::Tape<T>& tape, ad::Var V, ad::Var w, ad::Var instances) {
  const auto& H = tape.value(instances);
  if (H.rank() != 2 || H.dim(0) < 1) throw DataError("attention needs at least one instance");
  const int k = H.dim(0);
  const int l = static_cast<int>(tape.value(w).size());
  ad::Var hidden = ad::tanh(tape, ad::matmul_nt(tape, instances, V));    // [K,L]
  ad::Var scores = ad::matmul(tape, hidden, ad::reshape(tape, w, {l, 1}));  // [K,1]
  return ad::softmax_rows(tape, ad::reshape(tape, scores, {1, k}));
}

template <class T>
std::size_t head_offset(const MilModel<T>& model) {
  return model.config.encoder == EncoderKind::builtin_cnn ? 2 * (model.config.channels.size() - 1) : 0;
}

template <class T>
ad::Var pool(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, ad::Var instances) {
  const std::size_t off = head_offset(model);
  std::vector<ad::Var> heads;
  for (int h = 0; h < model.config.heads; ++h) {
    ad::Var a = attention(tape, vars[off + 2 * h], vars[off + 2 * h + 1], instances);
    heads.push_back(ad::matmul(tape, a, instances));  // [1,D]
  }
  return heads.size() == 1 ? heads[0] : ad::concat(tape, heads);
}

template <class T>
ad::Var classify(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, ad::Var pooled) {
  const std::size_t off = head_offset(model) + 2 * model.config.heads;
  const auto& z = tape.value(pooled);
  if (static_cast<int>(z.size()) != model.config.pooled_dim()) {
    throw ShapeError("classify: pooled vector has length " + std::to_string(z.size()) + ", expected " +
                     std::to_string(model.config.pooled_dim()));
  }
  ad::Var row = z.rank() == 2 ? pooled : ad::reshape(tape, pooled, {1, static_cast<int>(z.size())});
  return ad::add_row(tape, ad::matmul_nt(tape, row, vars[off]), vars[off + 1]);
}

template <class T>
ad::Var forward(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, const BagInput<T>& input) {
  if (input.instances() < 1) throw DataError("forward: empty bag");
  ad::Var x = tape.constant(input.data);
  ad::Var h = input.embeddings ? x : encode(tape, model, vars, x);
  return classify(tape, model, vars, pool(tape, model, vars, h));
}

}  // namespace graph

std::vector<float> encode_patch(const MilModel<float>& model, const Patch& patch) {
  ad::Tape<float> tape;
  const auto vars = graph::bind(tape, model.params);
  const auto x = tape.constant(patch_tensor<float>({&patch.pixels}, model.config.patch_size));
  return tape.value(graph::encode(tape, model, vars, x)).vector();
}

template <class T>
std::vector<T> attention_weights(const Tensor<T>& V, const Tensor<T>& w, const Tensor<T>& instances) {
  if (instances.rank() != 2 || instances.dim(0) < 1) throw DataError("attention_weights: need K >= 1 instances");
  ad::Tape<T> tape;
  const auto a = graph::attention(tape, tape.constant(V), tape.constant(w), tape.constant(instances));
  return tape.value(a).vector();
}

template <class T>
std::vector<T> mil_pool(const MilModel<T>& model, const Tensor<T>& instances) {
  if (instances.rank() != 2 || instances.dim(0) < 1) throw DataError("mil_pool: need K >= 1 instances");
  ad::Tape<T> tape;
  const auto vars = graph::bind(tape, model.params);
  return tape.value(graph::pool(tape, model, vars, tape.constant(instances))).vector();
}

template <class T>
std::vector<T> classify(const MilModel<T>& model, const std::vector<T>& pooled) {
  ad::Tape<T> tape;
  const auto vars = graph::bind(tape, model.params);
  const auto z = tape.constant(Tensor<T>({1, static_cast<int>(pooled.size())}, pooled));
  return tape.value(graph::classify(tape, model, vars, z)).vector();
}

template <class T>
std::vector<T> forward_input(const MilModel<T>& model, const BagInput<T>& input) {
  ad::Tape<T> tape;
  const auto vars = graph::bind(tape, model.params);
  return tape.value(graph::forward(tape, model, vars, input)).vector();
}

template <class T>
std::vector<T> forward_bag(const MilModel<T>& model, const Bag& bag, const EmbeddingTable* table) {
  return forward_input(model, make_bag_input<T>(model.config, bag, table));
}

std::vector<float> pooled_embedding(const MilModel<float>& model, const Bag& bag, const EmbeddingTable* table) {
  const auto input = make_bag_input<float>(model.config, bag, table);
  ad::Tape<float> tape;
  const auto vars = graph::bind(tape, model.params);
  ad::Var x = tape.constant(input.data);
  ad::Var h = input.embeddings ? x : graph::encode(tape, model, vars, x);
  return tape.value(graph::pool(tape, model, vars, h)).vector();
}

std::filesystem::path model_config_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".config.json";
  return p;
}

void save_model(const std::filesystem::path& path, const MilModel<float>& model) {
  save_checkpoint(path, model.params);
  write_text(model_config_path(path), to_json(model.config).dump(2) + "\n");
}

MilModel<float> load_model(const std::filesystem::path& path) {
  const auto cfg_path = model_config_path(path);
  if (!std::filesystem::exists(cfg_path)) throw DataError("model config sidecar not found: " + cfg_path.string());
  MilModel<float> model;
  try {
    model.config = model_config_from_json(nlohmann::json::parse(read_text(cfg_path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(cfg_path.string() + ": " + e.what());
  }
  model.params = load_checkpoint(path);
  const auto expected = MilModel<float>::init(model.config, 0).params;
  if (expected.names() != model.params.names()) throw DataError("checkpoint parameters do not match its model config");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected.value(i).shape() != model.params.value(i).shape()) {
      throw DataError("checkpoint parameter " + expected.name(i) + " has the wrong shape");
    }
  }
  return model;
}

#define GRAMSMEAR_INSTANTIATE(T)                                                                                       \
  template Tensor<T> patch_tensor<T>(const std::vector<const RasterImage*>&, int);                                     \
  template Tensor<T> embedding_matrix<T>(const EmbeddingTable&, const std::vector<std::string>&);                      \
  template struct MilModel<T>;                                                                                         \
  template BagInput<T> make_bag_input<T>(const ModelConfig&, const Bag&, const EmbeddingTable*);                       \
  template std::vector<ad::Var> graph::bind<T>(ad::Tape<T>&, const ParamStore<T>&);                                    \
  template ad::Var graph::encode<T>(ad::Tape<T>&, const MilModel<T>&, const std::vector<ad::Var>&, ad::Var);           \
  template ad::Var graph::attention<T>(ad::Tape<T>&, ad::Var, ad::Var, ad::Var);                                       \
  template ad::Var graph::pool<T>(ad::Tape<T>&, const MilModel<T>&, const std::vector<ad::Var>&, ad::Var);             \
  template ad::Var graph::classify<T>(ad::Tape<T>&, const MilModel<T>&, const std::vector<ad::Var>&, ad::Var);         \
  template ad::Var graph::forward<T>(ad::Tape<T>&, const MilModel<T>&, const std::vector<ad::Var>&, const BagInput<T>&); \
  template std::vector<T> attention_weights<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template std::vector<T> mil_pool<T>(const MilModel<T>&, const Tensor<T>&);                                           \
  template std::vector<T> classify<T>(const MilModel<T>&, const std::vector<T>&);                                      \
  template std::vector<T> forward_input<T>(const MilModel<T>&, const BagInput<T>&);                                    \
  template std::vector<T> forward_bag<T>(const MilModel<T>&, const Bag&, const EmbeddingTable*);

GRAMSMEAR_INSTANTIATE(float)
GRAMSMEAR_INSTANTIATE(double)

#undef GRAMSMEAR_INSTANTIATE

}  // namespace gramsmear
