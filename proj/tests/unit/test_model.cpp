#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gramsmear/autodiff.hpp"
#include "gramsmear/checkpoint.hpp"
#include "gramsmear/error.hpp"
#include "gramsmear/model.hpp"
#include "support.hpp"

using namespace gramsmear;

namespace {

ModelConfig frozen_config(int dim, int heads, int hidden, int categories) {
  ModelConfig cfg = ModelConfig::defaults(Mode::fungi);
  cfg.embed_dim = dim;
  cfg.heads = heads;
  cfg.attn_hidden = hidden;
  cfg.categories = categories;
  return cfg;
}

ModelConfig tiny_cnn() {
  ModelConfig cfg = ModelConfig::defaults(Mode::bacteria);
  cfg.channels = {3, 4, 8};
  cfg.embed_dim = 8;
  cfg.attn_hidden = 4;
  cfg.heads = 2;
  cfg.categories = 3;
  cfg.patch_size = 8;
  return cfg;
}

template <class T>
Tensor<T> random_rows(int k, int d, std::mt19937_64& rng) {
  Tensor<T> t({k, d});
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : t.values()) v = static_cast<T>(n(rng));
  return t;
}

// Scalar-loop evaluation of attention pooling for one head.
std::vector<double> brute_attention(const Tensor<double>& V, const Tensor<double>& w, const Tensor<double>& H) {
  const int l = V.dim(0), d = V.dim(1), k = H.dim(0);
  std::vector<double> e(k);
  for (int i = 0; i < k; ++i) {
    double s = 0;
    for (int j = 0; j < l; ++j) {
      double vh = 0;
      for (int c = 0; c < d; ++c) vh += V.at(j, c) * H.at(i, c);
      s += w[j] * std::tanh(vh);
    }
    e[i] = s;
  }
  const double mx = *std::max_element(e.begin(), e.end());
  double z = 0;
  for (auto& v : e) z += (v = std::exp(v - mx));
  for (auto& v : e) v /= z;
  return e;
}

std::vector<double> brute_pool(const MilModel<double>& m, const Tensor<double>& H) {
  std::vector<double> out;
  for (int h = 0; h < m.config.heads; ++h) {
    const auto& V = m.params.value(m.params.index("pool.head" + std::to_string(h) + ".V"));
    const auto& w = m.params.value(m.params.index("pool.head" + std::to_string(h) + ".w"));
    const auto a = brute_attention(V, w, H);
    for (int c = 0; c < H.dim(1); ++c) {
      double s = 0;
      for (int i = 0; i < H.dim(0); ++i) s += a[i] * H.at(i, c);
      out.push_back(s);
    }
  }
  return out;
}

template <class T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(static_cast<double>(a[i]) - b[i]);
    worst = std::max(worst, d / std::max(std::abs(static_cast<double>(b[i])), 1.0));
  }
  return worst;
}

template <class T>
Tensor<T> permute_rows(const Tensor<T>& x, const std::vector<int>& perm) {
  Tensor<T> out(x.shape());
  const int d = x.dim(1);
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (int c = 0; c < d; ++c) out.at(static_cast<int>(i), c) = x.at(perm[i], c);
  return out;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("attention examples") {
    const Tensor<double> V({1, 1}, {1.0}), w({1}, {1.0});
    const auto a = attention_weights(V, w, Tensor<double>({2, 1}, {0.0, 10.0}));
    CHECK(a[0] == doctest::Approx(0.2689).epsilon(1e-3));
    CHECK(a[1] == doctest::Approx(0.7311).epsilon(1e-3));
    CHECK(a == brute_attention(V, w, Tensor<double>({2, 1}, {0.0, 10.0})));

    std::mt19937_64 rng(1);
    const auto V3 = random_rows<double>(4, 3, rng);
    const auto w3 = random_rows<double>(1, 4, rng).reshaped({4});
    CHECK(attention_weights(V3, w3, random_rows<double>(1, 3, rng)) == std::vector<double>{1.0});
    const auto row = random_rows<double>(1, 3, rng);
    Tensor<double> twin({2, 3});
    for (int c = 0; c < 3; ++c) twin.at(0, c) = twin.at(1, c) = row.at(0, c);
    const auto half = attention_weights(V3, w3, twin);
    CHECK(half[0] == 0.5);
    CHECK(half[1] == 0.5);
    CHECK_THROWS_AS(attention_weights(V3, w3, Tensor<double>({0, 3})), DataError);
  }

  TEST_CASE("attention weights are a positive simplex on every head") {
    std::mt19937_64 rng(2);
    const auto m = MilModel<double>::init(frozen_config(6, 3, 5, 4), 11);
    for (int trial = 0; trial < 20; ++trial) {
      const auto H = random_rows<double>(1 + trial * 3, 6, rng);
      for (int h = 0; h < 3; ++h) {
        const auto a = attention_weights(m.params.value(m.params.index("pool.head" + std::to_string(h) + ".V")),
                                         m.params.value(m.params.index("pool.head" + std::to_string(h) + ".w")), H);
        CHECK(std::all_of(a.begin(), a.end(), [](double v) { return v > 0; }));
        CHECK(std::abs(std::accumulate(a.begin(), a.end(), 0.0) - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("pooling matches the scalar-loop oracle") {
    std::mt19937_64 rng(3);
    const auto m = MilModel<double>::init(frozen_config(5, 2, 4, 3), 12);
    for (int k : {1, 2, 3, 7}) {
      const auto H = random_rows<double>(k, 5, rng);
      const auto z = mil_pool(m, H);
      const auto oracle = brute_pool(m, H);
      REQUIRE(z.size() == oracle.size());
      for (std::size_t i = 0; i < z.size(); ++i) CHECK(z[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("single instance pools to itself on every head exactly") {
    std::mt19937_64 rng(4);
    const auto md = MilModel<double>::init(frozen_config(7, 4, 3, 3), 5);
    const auto mf = MilModel<float>::init(frozen_config(7, 4, 3, 3), 5);
    for (int trial = 0; trial < 10; ++trial) {
      const auto H = random_rows<double>(1, 7, rng);
      const auto zd = mil_pool(md, H);
      const auto zf = mil_pool(mf, H.cast<float>());
      for (int h = 0; h < 4; ++h)
        for (int c = 0; c < 7; ++c) {
          CHECK(zd[h * 7 + c] == H[c]);
          CHECK(zf[h * 7 + c] == static_cast<float>(H[c]));
        }
    }
  }

  TEST_CASE("classifier matches dot products") {
    std::mt19937_64 rng(5);
    auto m = MilModel<double>::init(frozen_config(3, 2, 2, 4), 6);
    std::vector<double> z(6);
    for (auto& v : z) v = std::normal_distribution<double>(0, 1)(rng);
    const auto& W = m.params.value(m.params.index("classifier.W"));
    const auto logits = classify(m, z);
    for (int c = 0; c < 4; ++c) {
      double s = m.params.value(m.params.index("classifier.b"))[c];
      for (int j = 0; j < 6; ++j) s += W.at(c, j) * z[j];
      CHECK(logits[c] == doctest::Approx(s).epsilon(1e-12));
    }
    m.params.set(m.params.index("classifier.W"), Tensor<double>({4, 6}));
    m.params.set(m.params.index("classifier.b"), Tensor<double>({4}, {1, -2, 3, 0.5}));
    CHECK(classify(m, z) == std::vector<double>{1, -2, 3, 0.5});
    CHECK_THROWS_AS(classify(m, std::vector<double>(5)), ShapeError);
  }

  TEST_CASE("permuting a bag leaves the logits unchanged") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 100; ++trial) {
      const int k = 1 + static_cast<int>(rng() % 64);
      const auto cfg = frozen_config(8, 2, 6, 5);
      const auto md = MilModel<double>::init(cfg, 100 + trial);
      const auto mf = md.cast<float>();
      const auto H = random_rows<double>(k, 8, rng);
      std::vector<int> perm(k);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      const auto base_d = forward_input(md, BagInput<double>{H, true});
      const auto perm_d = forward_input(md, BagInput<double>{permute_rows(H, perm), true});
      const auto base_f = forward_input(mf, BagInput<float>{H.cast<float>(), true});
      const auto perm_f = forward_input(mf, BagInput<float>{permute_rows(H.cast<float>(), perm), true});
      CHECK(max_rel_diff(perm_d, base_d) <= 1e-10);
      CHECK(max_rel_diff(perm_f, base_f) <= 1e-4);
    }
  }

  TEST_CASE("duplicating every patch keeps attention proportions and logits") {
    std::mt19937_64 rng(7);
    const auto m = MilModel<float>::init(frozen_config(8, 3, 4, 3), 9);
    const auto H = random_rows<float>(5, 8, rng);
    Tensor<float> twice({10, 8});
    for (int i = 0; i < 10; ++i)
      for (int c = 0; c < 8; ++c) twice.at(i, c) = H.at(i % 5, c);
    const auto& V = m.params.value(m.params.index("pool.head0.V"));
    const auto& w = m.params.value(m.params.index("pool.head0.w"));
    const auto a = attention_weights(V, w, H);
    const auto a2 = attention_weights(V, w, twice);
    for (int i = 0; i < 5; ++i) CHECK(a2[i] + a2[i + 5] == doctest::Approx(a[i]).epsilon(1e-5));
    CHECK(max_rel_diff(forward_input(m, BagInput<float>{twice, true}), forward_input(m, BagInput<float>{H, true})) <= 1e-4);
  }

  TEST_CASE("encoder behaviour") {
    auto m = MilModel<float>::init(tiny_cnn(), 3);
    std::mt19937_64 rng(8);
    Patch p;
    p.pixels = RasterImage(8, 8);
    for (auto& v : p.pixels.data) v = static_cast<std::uint8_t>(rng() % 256);
    const auto h = encode_patch(m, p);
    CHECK(h.size() == 8);
    CHECK(encode_patch(m, p) == h);
    Patch q = p;
    q.pixels.at(3, 4, 1) ^= 0x40;
    CHECK(encode_patch(m, q) != h);
    Patch wrong;
    wrong.pixels = RasterImage(9, 9);
    CHECK_THROWS_AS(encode_patch(m, wrong), DataError);

    for (std::size_t i = 0; i < m.params.size(); ++i) {
      const auto& name = m.params.name(i);
      if (name.rfind("encoder.", 0) != 0) continue;
      Tensor<float> t(m.params.value(i).shape());
      if (name.find(".bias") != std::string::npos)
        for (std::size_t k = 0; k < t.size(); ++k) t[k] = static_cast<float>(k) * 0.25f - 0.5f;
      m.params.set(i, t);
    }
    const auto hz = encode_patch(m, p);
    CHECK(encode_patch(m, q) == hz);
    for (int k = 0; k < 8; ++k) CHECK(hz[k] == std::max(0.0f, static_cast<float>(k) * 0.25f - 0.5f));
  }

  TEST_CASE("tiny full model passes the finite-difference check") {
    const auto cfg = tiny_cnn();
    auto m = MilModel<double>::init(cfg, 21);
    std::mt19937_64 rng(9);
    Tensor<double> px({3, 3, 8, 8});
    for (auto& v : px.values()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
    const BagInput<double> in{px, false};
    const auto r = ad::grad_check([&](ad::Tape<double>& t, const ParamStore<double>& s) {
      MilModel<double> view{cfg, s};
      const auto vars = graph::bind(t, s);
      return ad::cross_entropy(t, graph::forward(t, view, vars, in), 1);
    }, m.params, 1e-6, 1e-5, 1e-3);
    INFO(r.worst_parameter << "[" << r.worst_index << "] rel " << r.max_rel_error);
    CHECK(r.passed);
  }

  TEST_CASE("frozen bags look up embeddings by patch id") {
    EmbeddingTable table(3);
    table.add("b/p0001", std::vector<float>{1, 2, 3});
    table.add("b/p0002", std::vector<float>{4, 5, 6});
    Bag bag;
    bag.bag_id = "b";
    Patch p1, p2;
    p1.patch_id = "b/p0002";
    p2.patch_id = "b/p0001";
    bag.patches = {p1, p2};
    const auto cfg = frozen_config(3, 1, 2, 2);
    const auto in = make_bag_input<float>(cfg, bag, &table);
    CHECK(in.embeddings);
    CHECK(in.data.vector() == std::vector<float>{4, 5, 6, 1, 2, 3});
    bag.patches[0].patch_id = "b/p0404";
    try {
      make_bag_input<float>(cfg, bag, &table);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("b/p0404") != std::string::npos);
    }
    Bag empty;
    CHECK_THROWS_AS(make_bag_input<float>(cfg, empty, &table), DataError);
  }

  TEST_CASE("embedding table file round-trip") {
    testutil::TempDir dir("emb");
    EmbeddingTable t(4);
    t.add("x", std::vector<float>{1.5f, -2, 0, 3});
    t.add("y", std::vector<float>{0.25f, 9, -1, 7});
    const auto bytes = encode_embeddings(t);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "EMB1");
    CHECK(decode_embeddings(bytes) == t);
    save_embeddings(dir / "t.emb", t);
    CHECK(load_embeddings(dir / "t.emb") == t);
    CHECK_THROWS_AS(t.add("x", std::vector<float>{1, 2, 3, 4}), DataError);
    CHECK_THROWS_AS(t.add("z", std::vector<float>{1, 2}), DataError);
    CHECK_THROWS_AS(decode_embeddings(Bytes(bytes.begin(), bytes.begin() + 20)), DataError);
  }

  TEST_CASE("checkpoint and model round-trip") {
    testutil::TempDir dir("ckpt");
    const auto m = MilModel<float>::init(tiny_cnn(), 4);
    auto bytes = encode_checkpoint(m.params);
    const auto back = decode_checkpoint(bytes);
    REQUIRE(back.size() == m.params.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      CHECK(back.name(i) == m.params.name(i));
      CHECK(back.value(i) == m.params.value(i));
    }
    bytes[bytes.size() / 2] ^= 1;
    CHECK_THROWS_AS(decode_checkpoint(bytes), DataError);

    save_model(dir / "m.ckpt", m);
    const auto loaded = load_model(dir / "m.ckpt");
    CHECK(to_json(loaded.config) == to_json(m.config));
    CHECK(encode_checkpoint(loaded.params) == encode_checkpoint(m.params));
    CHECK(MilModel<float>::init(tiny_cnn(), 4).params.value(0) == m.params.value(0));
  }

  TEST_CASE("config validation") {
    auto cfg = tiny_cnn();
    cfg.categories = 1;
    CHECK_THROWS_AS(cfg.validate(), DataError);
    cfg = tiny_cnn();
    cfg.embed_dim = 9;
    CHECK_THROWS_AS(cfg.validate(), DataError);
    CHECK(to_json(model_config_from_json(to_json(tiny_cnn()))) == to_json(tiny_cnn()));
    CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"encoder", "resnet"}}), DataError);
  }
}
