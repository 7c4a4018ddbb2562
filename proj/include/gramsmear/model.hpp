#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gramsmear/autodiff.hpp"
#include "gramsmear/bagging.hpp"
#include "gramsmear/tensor.hpp"

namespace gramsmear {

enum class EncoderKind { builtin_cnn, frozen_table };

struct ModelConfig {
  Mode mode = Mode::bacteria;
  EncoderKind encoder = EncoderKind::builtin_cnn;
  /// Conv block widths: input channels first, embedding dimension last.
  std::vector<int> channels{3, 16, 32, 64, 128};
  int embed_dim = 128;
  int heads = 4;
  int attn_hidden = 128;
  int categories = 15;
  int patch_size = 96;

  /// Bacteria: builtin CNN, 15 categories, 96 px. Fungi: frozen table, 4 categories, 224 px.
  static ModelConfig defaults(Mode mode);
  void validate() const;
  int pooled_dim() const { return heads * embed_dim; }
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Frozen per-patch embeddings keyed by patch_id.
/// File layout: "EMB1", u32 count, u32 dim, count*dim float32 row-major (all
/// little-endian), then a JSON array of keys in row order.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(int dim);

  int dim() const { return dim_; }
  std::size_t size() const { return keys_.size(); }
  void add(const std::string& key, std::span<const float> vec);
  bool contains(const std::string& key) const { return index_.count(key) != 0; }
  std::span<const float> lookup(const std::string& key) const;
  const std::vector<std::string>& keys() const { return keys_; }
  const std::vector<float>& data() const { return data_; }
  bool operator==(const EmbeddingTable& o) const { return dim_ == o.dim_ && keys_ == o.keys_ && data_ == o.data_; }

 private:
  int dim_ = 0;
  std::vector<std::string> keys_;
  std::vector<float> data_;
  std::unordered_map<std::string, std::size_t> index_;
};

Bytes encode_embeddings(const EmbeddingTable& table);
EmbeddingTable decode_embeddings(const Bytes& bytes);
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::filesystem::path& path);

/// Pixel scaling: v/255, then (x - 0.5) / 0.25 on every channel.
inline constexpr double kInputMean = 0.5;
inline constexpr double kInputStd = 0.25;

template <class T>
Tensor<T> patch_tensor(const std::vector<const RasterImage*>& patches, int patch_size);

template <class T>
Tensor<T> embedding_matrix(const EmbeddingTable& table, const std::vector<std::string>& patch_ids);

/// Model parameters plus their configuration.
template <class T>
struct MilModel {
  ModelConfig config;
  ParamStore<T> params;

  static MilModel init(const ModelConfig& cfg, std::uint64_t seed);

  template <class U>
  MilModel<U> cast() const {
    return {config, params.template cast<U>()};
  }
};

/// Instance inputs of one bag: pixels [K,3,S,S] (CNN) or embeddings [K,D] (frozen).
template <class T>
struct BagInput {
  Tensor<T> data;
  bool embeddings = false;
  int instances() const { return data.rank() > 0 ? data.dim(0) : 0; }
};

template <class T>
BagInput<T> make_bag_input(const ModelConfig& cfg, const Bag& bag, const EmbeddingTable* table);

namespace graph {

/// Binds every parameter of the store as a tape leaf, in store order.
template <class T>
std::vector<ad::Var> bind(ad::Tape<T>& tape, const ParamStore<T>& params);

template <class T>
ad::Var encode(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, ad::Var pixels);

/// softmax_k(w . tanh(V h_k)) as a [1,K] row.
template <class T>
ad::Var attention(ad::Tape<T>& tape, ad::Var V, ad::Var w, ad::Var instances);

/// Concatenation over heads of the attention-weighted mean of the instance rows: [1, H*D].
template <class T>
ad::Var pool(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, ad::Var instances);

template <class T>
ad::Var classify(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, ad::Var pooled);

/// encode (or embedding lookup) -> pool -> classify, giving [1,C] logits.
template <class T>
ad::Var forward(ad::Tape<T>& tape, const MilModel<T>& model, const std::vector<ad::Var>& vars, const BagInput<T>& input);

}  // namespace graph

// Convenience evaluations on a private tape.

std::vector<float> encode_patch(const MilModel<float>& model, const Patch& patch);

template <class T>
std::vector<T> attention_weights(const Tensor<T>& V, const Tensor<T>& w, const Tensor<T>& instances);

template <class T>
std::vector<T> mil_pool(const MilModel<T>& model, const Tensor<T>& instances);

template <class T>
std::vector<T> classify(const MilModel<T>& model, const std::vector<T>& pooled);

template <class T>
std::vector<T> forward_bag(const MilModel<T>& model, const Bag& bag, const EmbeddingTable* table = nullptr);

template <class T>
std::vector<T> forward_input(const MilModel<T>& model, const BagInput<T>& input);

/// Pooled bag vector z (length H*D).
std::vector<float> pooled_embedding(const MilModel<float>& model, const Bag& bag, const EmbeddingTable* table);

void save_model(const std::filesystem::path& path, const MilModel<float>& model);
MilModel<float> load_model(const std::filesystem::path& path);
std::filesystem::path model_config_path(const std::filesystem::path& checkpoint);

}  // namespace gramsmear
