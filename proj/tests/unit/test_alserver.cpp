#include <atomic>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "gramsmear/alserver.hpp"
#include "gramsmear/error.hpp"
#include "gramsmear/synthsmear.hpp"
#include "httplib.h"
#include "support.hpp"

using namespace gramsmear;

namespace {

struct FakeClock {
  std::shared_ptr<std::atomic<std::int64_t>> now = std::make_shared<std::atomic<std::int64_t>>(1'000'000);
  Clock clock() const {
    auto n = now;
    return [n] { return n->load(); };
  }
  void advance(std::int64_t ms) { *now += ms; }
};

std::vector<std::pair<std::string, RasterImage>> smears(int count, int w, int h, std::uint64_t seed) {
  std::vector<std::pair<std::string, RasterImage>> out;
  for (int i = 0; i < count; ++i) out.emplace_back("img" + std::to_string(i), testutil::random_smear(w, h, 8, seed + i));
  return out;
}

double brute_iou(const InstanceMask& a, std::uint32_t ia, const InstanceMask& b, std::uint32_t ib) {
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    const bool x = a.labels[i] == ia, y = b.labels[i] == ib;
    inter += x && y;
    uni += x || y;
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::vector<GroundTruthPair> generator_truth(int count, std::uint64_t seed) {
  const auto spec = DatasetSpec::default_bacteria();
  std::vector<GroundTruthPair> gt;
  SceneParams scene;
  scene.width = 160;
  scene.height = 160;
  for (int i = 0; i < count; ++i) {
    const auto& morph = spec.categories[static_cast<std::size_t>(i) % spec.categories.size()].morphotypes[0];
    auto t = generate_image(morph, PatientStyle{}, seed + static_cast<std::uint64_t>(i), scene);
    gt.push_back({"g" + std::to_string(i), t.image, t.mask});
  }
  return gt;
}

class ServerThread {
 public:
  explicit ServerThread(AnnotationStore& store) : server_(store) {
    port_ = server_.bind("127.0.0.1", 0);
    REQUIRE(port_ > 0);
    thread_ = std::thread([this] { server_.run(); });
    for (int i = 0; i < 200 && !server_.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ~ServerThread() {
    server_.stop();
    thread_.join();
  }
  int port() const { return port_; }

 private:
  AlServer server_;
  int port_ = -1;
  std::thread thread_;
};

}  // namespace

TEST_SUITE("alserver") {
  TEST_CASE("action names") {
    CHECK(to_string(Action::clear) == "CLEAR");
    CHECK(action_from_string("SKIP") == Action::skip);
    CHECK_THROWS_AS(action_from_string("MAYBE"), DataError);
  }

  TEST_CASE("matched iou against brute force") {
    InstanceMask gt(20, 20), pred(20, 20);
    CHECK(matched_iou(gt, pred) == 1.0);
    for (int r = 2; r < 8; ++r)
      for (int c = 2; c < 8; ++c) gt.at(r, c) = 1;
    for (int r = 12; r < 15; ++r)
      for (int c = 12; c < 15; ++c) gt.at(r, c) = 2;
    CHECK(matched_iou(gt, pred) == 0.0);
    CHECK(matched_iou(gt, gt) == 1.0);
    for (int r = 3; r < 9; ++r)
      for (int c = 2; c < 8; ++c) pred.at(r, c) = 1;
    pred.at(0, 19) = 2;
    pred.at(1, 19) = 3;
    const double iou = brute_iou(gt, 1, pred, 1);
    CHECK(iou == doctest::Approx(30.0 / 42.0));
    CHECK(matched_iou(gt, pred) == doctest::Approx(iou / 3.0));
    CHECK_THROWS_AS(matched_iou(gt, InstanceMask(5, 5)), ShapeError);
  }

  TEST_CASE("contours and overlay") {
    InstanceMask m(5, 5);
    for (int r = 1; r < 4; ++r)
      for (int c = 1; c < 4; ++c) m.at(r, c) = 1;
    const auto contour = contour_map(m);
    int count = 0;
    for (auto v : contour) count += v != 0;
    CHECK(count == 8);
    CHECK(contour[2 * 5 + 2] == 0);
    const auto img = testutil::random_smear(5, 5, 1, 3);
    const auto ov = render_overlay(img, m);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c) {
        bool same = true;
        for (int ch = 0; ch < 3; ++ch) same = same && ov.at(r, c, ch) == img.at(r, c, ch);
        CHECK(same == (contour[r * 5 + c] == 0));
      }
  }

  TEST_CASE("refit equals the exhaustive grid oracle and never regresses") {
    const auto gt = generator_truth(6, 40);
    ParamGrid grid;
    grid.thresholds = {20, 45, 70, 95};
    grid.min_areas = {4, 12, 30};
    grid.max_areas = {300, 1 << 20};
    for (const SegmenterParams incumbent : {SegmenterParams{150, 4, 1 << 20, 8}, SegmenterParams{}}) {
      const auto r = refit_segmenter(gt, grid, incumbent);
      SegmenterParams best = incumbent;
      double best_score = score_params(gt, incumbent);
      std::vector<SegmenterParams> all{incumbent};
      for (double t : grid.thresholds)
        for (int lo : grid.min_areas)
          for (int hi : grid.max_areas) all.push_back({t, lo, hi, 8});
      for (const auto& p : all) {
        const double s = score_params(gt, p);
        const auto key = std::make_tuple(p.chroma_threshold, p.min_area, p.max_area);
        const auto bkey = std::make_tuple(best.chroma_threshold, best.min_area, best.max_area);
        if (s > best_score || (s == best_score && key < bkey)) {
          best = p;
          best_score = s;
        }
      }
      CHECK(r.params.chroma_threshold == best.chroma_threshold);
      CHECK(r.params.min_area == best.min_area);
      CHECK(r.params.max_area == best.max_area);
      CHECK(r.score == best_score);
      CHECK(r.score >= r.incumbent_score);
      CHECK(r.incumbent_score == score_params(gt, incumbent));
      CHECK(r.candidates == 25);
    }
    std::vector<GroundTruthPair> blank{{"z", RasterImage(8, 8), InstanceMask(8, 8)}};
    CHECK_THROWS_AS(refit_segmenter(blank, grid, SegmenterParams{}), DataError);
  }

  TEST_CASE("queue leases, expiry and idempotent decisions") {
    testutil::TempDir dir("store");
    FakeClock fc;
    AnnotationStore store(dir.path(), fc.clock());
    const auto ids = store.propose(smears(2, 100, 60, 1), SegmenterParams{}, 64);
    CHECK(ids.size() == 4);
    CHECK(store.items().size() == 4);
    store.propose(smears(2, 100, 60, 1), SegmenterParams{}, 64);
    CHECK(store.items().size() == 4);
    CHECK(store.items()[1].tile == Tile{0, 64, 36, 60});

    const auto a = store.next("alice");
    const auto b = store.next("bob");
    REQUIRE(a);
    REQUIRE(b);
    CHECK(a->item.item_id != b->item.item_id);
    CHECK(store.next("alice")->item.item_id == a->item.item_id);
    CHECK(a->lease_until == fc.now->load() + kLeaseMs);
    CHECK(store.stats().leased == 2);

    fc.advance(kLeaseMs + 1);
    CHECK(store.stats().leased == 0);
    CHECK(store.next("carol")->item.item_id == a->item.item_id);

    CHECK(store.decide(a->item.item_id, Action::ok, "carol"));
    CHECK(!store.decide(a->item.item_id, Action::ok, "carol"));
    CHECK(store.log().size() == 1);
    CHECK(store.decide(a->item.item_id, Action::clear, "carol"));
    CHECK(store.outcome(a->item.item_id) == Action::clear);
    CHECK(store.log().size() == 2);
    CHECK_THROWS_AS(store.decide("0000", Action::ok, "carol"), DataError);
    CHECK_THROWS_AS(store.decide(a->item.item_id, Action::ok, ""), DataError);

    store.decide(ids[1], Action::ok, "bob");
    store.decide(ids[2], Action::skip, "bob");
    const auto s = store.stats();
    CHECK(s.decided == 3);
    CHECK(s.ok == 1);
    CHECK(s.clear == 1);
    CHECK(s.skip == 1);
    CHECK(s.pending == 1);
    CHECK(store.next("bob")->item.item_id == ids[3]);
    store.decide(ids[3], Action::ok, "bob");
    CHECK(!store.next("bob"));
  }

  TEST_CASE("export keeps OK masks, blanks CLEAR and drops SKIP") {
    testutil::TempDir dir("export");
    FakeClock fc;
    AnnotationStore store(dir.path(), fc.clock());
    const auto ids = store.propose(smears(3, 80, 80, 7), SegmenterParams{});
    REQUIRE(ids.size() == 3);
    store.decide(ids[0], Action::ok, "r");
    store.decide(ids[1], Action::clear, "r");
    store.decide(ids[2], Action::skip, "r");
    const auto gt = store.ground_truth();
    REQUIRE(gt.size() == 2);
    CHECK(gt[0].mask == decode_mask_png(store.item_file(ids[0], "mask")));
    CHECK(gt[1].mask.instance_count() == 0);
    CHECK(store.export_training_set(dir / "out") == 2);
    std::vector<nlohmann::json> rows;
    std::istringstream lines(read_text(dir / "out" / "manifest.jsonl"));
    for (std::string line; std::getline(lines, line);) rows.push_back(nlohmann::json::parse(line));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].at("action") == "OK");
    CHECK(rows[1].at("action") == "CLEAR");
    CHECK(read_mask(dir / "out" / rows[0].at("mask").get<std::string>()) == gt[0].mask);
    CHECK(read_mask(dir / "out" / rows[1].at("mask").get<std::string>()).instance_count() == 0);
    CHECK(read_png(dir / "out" / rows[0].at("image").get<std::string>()) == gt[0].image);
  }

  TEST_CASE("replaying the log reproduces the store byte for byte") {
    testutil::TempDir dir("replay");
    FakeClock fc;
    std::mt19937_64 rng(5);
    std::vector<std::string> ids;
    std::map<std::string, Action> oracle;
    {
      AnnotationStore store(dir.path(), fc.clock());
      ids = store.propose(smears(4, 130, 70, 11), SegmenterParams{}, 64);
    }
    const std::vector<std::string> reviewers{"ann", "ben", "cat"};
    for (int round = 0; round < 6; ++round) {
      AnnotationStore store(dir.path(), fc.clock());
      for (const auto& [id, a] : oracle) CHECK(store.outcome(id) == a);
      for (int k = 0; k < 15; ++k) {
        const auto& id = ids[rng() % ids.size()];
        const auto action = static_cast<Action>(rng() % 3);
        store.decide(id, action, reviewers[rng() % 3]);
        oracle[id] = action;
        fc.advance(17);
      }
      const auto live = store.state_json().dump();
      AnnotationStore reopened(dir.path(), fc.clock());
      CHECK(reopened.state_json().dump() == live);
    }
    std::ofstream(dir / "decisions.jsonl", std::ios::app) << "{\"seq\": 99, \"item_";
    AnnotationStore torn(dir.path(), fc.clock());
    for (const auto& [id, a] : oracle) CHECK(torn.outcome(id) == a);
  }

  TEST_CASE("store refit persists the winning parameters") {
    testutil::TempDir dir("refit");
    FakeClock fc;
    AnnotationStore store(dir.path(), fc.clock());
    const auto gt = generator_truth(3, 70);
    std::vector<std::pair<std::string, RasterImage>> imgs;
    for (const auto& g : gt) imgs.emplace_back(g.item_id, g.image);
    const auto ids = store.propose(imgs, SegmenterParams{120, 40, 1 << 20, 8});
    for (const auto& id : ids) store.decide(id, Action::ok, "r");
    ParamGrid grid;
    grid.thresholds = {40, 80, 120};
    grid.min_areas = {4, 40};
    grid.max_areas = {1 << 20};
    const auto r = store.refit(grid);
    CHECK(r.score >= r.incumbent_score);
    CHECK(r.images == 3);
    AnnotationStore reopened(dir.path(), fc.clock());
    CHECK(reopened.segmenter().chroma_threshold == r.params.chroma_threshold);
    CHECK(reopened.segmenter().min_area == r.params.min_area);
  }

  TEST_CASE("http api") {
    testutil::TempDir dir("http");
    AnnotationStore store(dir.path());
    const auto ids = store.propose(smears(2, 90, 90, 21), SegmenterParams{});
    ServerThread srv(store);
    httplib::Client cli("127.0.0.1", srv.port());

    CHECK(cli.Get("/api/queue/next")->status == 400);
    auto res = cli.Get("/api/queue/next?reviewer=zoe");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const auto item = nlohmann::json::parse(res->body);
    const std::string id = item.at("item_id");
    CHECK(id == ids[0]);
    CHECK(item.at("reviewer") == "zoe");

    auto png = cli.Get("/api/items/" + id + "/overlay");
    REQUIRE(png->status == 200);
    CHECK(decode_png(Bytes(png->body.begin(), png->body.end())).width == 90);
    auto mpng = cli.Get("/api/items/" + id + "/mask");
    CHECK(decode_mask_png(Bytes(mpng->body.begin(), mpng->body.end())) == decode_mask_png(store.item_file(id, "mask")));
    CHECK(cli.Get("/api/items/abcdef/image")->status == 404);

    const auto body = nlohmann::json{{"item_id", id}, {"action", "OK"}, {"reviewer", "zoe"}}.dump();
    auto post = cli.Post("/api/decisions", body, "application/json");
    REQUIRE(post->status == 200);
    CHECK(nlohmann::json::parse(post->body).at("logged") == true);
    CHECK(nlohmann::json::parse(cli.Post("/api/decisions", body, "application/json")->body).at("logged") == false);
    CHECK(store.log().size() == 1);
    CHECK(cli.Post("/api/decisions", nlohmann::json{{"item_id", "beef"}, {"action", "OK"}, {"reviewer", "z"}}.dump(),
                   "application/json")->status == 404);
    CHECK(cli.Post("/api/decisions", nlohmann::json{{"item_id", id}, {"action", "NOPE"}, {"reviewer", "z"}}.dump(),
                   "application/json")->status == 400);
    CHECK(cli.Post("/api/decisions", "{not json", "application/json")->status == 400);

    auto detail = nlohmann::json::parse(cli.Get("/api/items/" + id)->body);
    CHECK(detail.at("outcome") == "OK");
    auto stats = nlohmann::json::parse(cli.Get("/api/stats")->body);
    CHECK(stats.at("decided") == 1);
    CHECK(stats.at("actions").at("OK") == 1);
    CHECK(stats.at("pending") == 1);

    cli.Post("/api/decisions", nlohmann::json{{"item_id", ids[1]}, {"action", "CLEAR"}, {"reviewer", "zoe"}}.dump(),
             "application/json");
    CHECK(cli.Get("/api/queue/next?reviewer=zoe")->status == 204);

    auto exp = cli.Post("/api/export", nlohmann::json{{"out", (dir / "exp").string()}}.dump(), "application/json");
    REQUIRE(exp->status == 200);
    CHECK(nlohmann::json::parse(exp->body).at("pairs") == 2);
    auto refit = cli.Post("/api/refit", nlohmann::json{{"grid", {{"thresholds", {40, 60}}, {"min_areas", {4}}, {"max_areas", {100000}}}}}.dump(),
                          "application/json");
    REQUIRE(refit->status == 200);
    CHECK(nlohmann::json::parse(refit->body).at("candidates") == 3);
  }

  TEST_CASE("sixteen concurrent reviewers never share a lease") {
    testutil::TempDir dir("stress");
    AnnotationStore store(dir.path());
    const auto ids = store.propose(smears(6, 128, 128, 31), SegmenterParams{}, 64);
    REQUIRE(ids.size() == 24);
    ServerThread srv(store);
    std::mutex mu;
    std::map<std::string, std::set<std::string>> leased_by;
    std::atomic<int> errors{0};
    std::vector<std::thread> clients;
    for (int c = 0; c < 16; ++c) {
      clients.emplace_back([&, c] {
        httplib::Client cli("127.0.0.1", srv.port());
        const std::string who = "rev" + std::to_string(c);
        for (;;) {
          auto res = cli.Get("/api/queue/next?reviewer=" + who);
          if (!res) {
            ++errors;
            return;
          }
          if (res->status == 204) return;
          const std::string id = nlohmann::json::parse(res->body).at("item_id");
          {
            std::lock_guard lock(mu);
            leased_by[id].insert(who);
          }
          const auto action = c % 3 == 0 ? "SKIP" : (c % 3 == 1 ? "OK" : "CLEAR");
          auto post = cli.Post("/api/decisions", nlohmann::json{{"item_id", id}, {"action", action}, {"reviewer", who}}.dump(),
                               "application/json");
          if (!post || post->status != 200) ++errors;
        }
      });
    }
    for (auto& t : clients) t.join();
    CHECK(errors == 0);
    CHECK(leased_by.size() == ids.size());
    for (const auto& [id, who] : leased_by) CHECK(who.size() == 1);
    CHECK(store.log().size() == ids.size());
    CHECK(store.stats().decided == 24);
  }
}
