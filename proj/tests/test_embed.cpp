#include <doctest.h>
#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "helpers.hpp"
#include "prefcurate/embed.hpp"

using namespace prefcurate;
using namespace prefcurate::embed;

namespace {

double norm(const EmbeddingVector& v) {
  double s = 0;
  for (double x : v.values) s += x * x;
  return std::sqrt(s);
}

EmbeddingVector unit(std::vector<double> v) { return normalized(std::move(v)); }

}  // namespace

TEST_SUITE("embed") {
  TEST_CASE("hashing provider is deterministic and normalized") {
    HashingProvider h(256);
    auto p = testutil::make_pair("a", "tell me a joke");
    auto attrs = default_attributes("a");
    auto e1 = embed_pair(p, attrs, h);
    auto e2 = embed_pair(p, attrs, h);
    CHECK(e1.context.values == e2.context.values);
    CHECK(e1.chosen.values == e2.chosen.values);
    for (const auto* v : {&e1.context, &e1.chosen, &e1.rejected}) {
      CHECK(v->dim() == 256);
      CHECK(norm(*v) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK(HashingProvider(256).embed_text("abc").values == h.embed_text("abc").values);
  }

  TEST_CASE("task category changes the context vector") {
    HashingProvider h(256);
    auto p = testutil::make_pair("a", "tell me a joke");
    auto a = default_attributes("a");
    auto b = a;
    b.task_category = "humor";
    CHECK(canonical_context(p, a) != canonical_context(p, b));
    CHECK(embed_context(p, a, h).values != embed_context(p, b, h).values);
  }

  TEST_CASE("canonical context layout") {
    auto p = testutil::make_pair("a", "q?");
    p.conversation.insert(p.conversation.begin(), {Turn{Role::user, "hi"}, Turn{Role::assistant, "be nice"}});
    auto s = canonical_context(p, default_attributes("a"));
    CHECK(s.rfind("user: hi\nassistant: be nice\nuser: q?", 0) == 0);
    CHECK(canonical_response(p, "x").find("x") != std::string::npos);
  }

  TEST_CASE("normalization edge cases") {
    CHECK(normalized({0, 0, 0}).values == std::vector<double>{1, 0, 0});
    CHECK_THROWS(normalized({1, std::nan("")}));
    std::mt19937_64 rng(1);
    for (int i = 0; i < 50; ++i) {
      auto v = normalized(testutil::random_vec(rng, 16).values);
      CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("top_k order, k=0 and id tie-break") {
    SimilarityIndex idx(2);
    auto at = [](double c) { return unit({c, std::sqrt(1 - c * c)}); };
    idx.add("low", at(0.1));
    idx.add("high", at(0.9));
    idx.add("mid", at(0.5));
    auto r = idx.top_k(unit({1, 0}), 2);
    REQUIRE(r.size() == 2);
    CHECK(r[0].pair_id == "high");
    CHECK(r[0].cosine == doctest::Approx(0.9));
    CHECK(r[1].pair_id == "mid");
    CHECK(idx.top_k(unit({1, 0}), 0).empty());
    CHECK(idx.top_k(unit({1, 0}), 10).size() == 3);

    SimilarityIndex ties(2);
    ties.add("b", unit({1, 1}));
    ties.add("a", unit({1, 1}));
    auto t = ties.top_k(unit({1, 0}), 2);
    CHECK(t[0].pair_id == "a");
    CHECK(t[1].pair_id == "b");
    CHECK_THROWS(ties.add("c", unit({1, 0, 0})));
  }

  TEST_CASE("top_k equals a brute-force sort") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      std::size_t n = 1 + rng() % 2000, dim = 8;
      SimilarityIndex idx(dim);
      std::vector<std::pair<std::string, EmbeddingVector>> all;
      for (std::size_t i = 0; i < n; ++i) {
        auto v = normalized(testutil::random_vec(rng, dim).values);
        // Some exact duplicates to exercise ties.
        if (i % 17 == 3) v = all.back().second;
        all.emplace_back("id" + std::to_string(i), v);
        idx.add(all.back().first, v);
      }
      auto q = normalized(testutil::random_vec(rng, dim).values);
      std::vector<Neighbor> brute;
      for (const auto& [id, v] : all) brute.push_back({id, dot(q, v)});
      std::sort(brute.begin(), brute.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.cosine != b.cosine ? a.cosine > b.cosine : a.pair_id < b.pair_id;
      });
      std::size_t k = 1 + rng() % 20;
      brute.resize(std::min(k, brute.size()));
      auto got = idx.top_k(q, k);
      REQUIRE(got.size() == brute.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].pair_id == brute[i].pair_id);
        CHECK(got[i].cosine == doctest::Approx(brute[i].cosine).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("cache round trip keeps values bit-exact") {
    testutil::TempDir dir("embed");
    std::mt19937_64 rng(3);
    std::map<std::string, PairEmbeddings> m;
    for (int i = 0; i < 5; ++i)
      m["p" + std::to_string(i)] = PairEmbeddings{testutil::random_vec(rng, 4), testutil::random_vec(rng, 4),
                                                  testutil::random_vec(rng, 4)};
    auto path = dir.path / "e.bin";
    save_pair_embeddings(path, "tag/4", m);
    std::string tag;
    auto back = load_pair_embeddings(path, &tag);
    CHECK(tag == "tag/4");
    REQUIRE(back.size() == m.size());
    for (const auto& [id, e] : m) {
      CHECK(back.at(id).context.values == e.context.values);
      CHECK(back.at(id).rejected.values == e.rejected.values);
    }
    CHECK_THROWS(load_cache(dir.path / "missing.bin"));
  }

  TEST_CASE("remote provider batches, retries on 503 and checks dims") {
    httplib::Server srv;
    std::atomic<int> calls{0}, fail_next{1};
    srv.Post("/embed", [&](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      if (fail_next.exchange(0)) {
        res.status = 503;
        return;
      }
      auto body = json::parse(req.body);
      json vecs = json::array();
      for (const auto& s : body["inputs"]) vecs.push_back({double(s.get<std::string>().size()), 1.0, 0.0});
      res.set_content(json{{"vectors", vecs}}.dump(), "application/json");
    });
    int port = srv.bind_to_any_port("127.0.0.1");
    std::thread t([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    RemoteProvider::Options o;
    o.url = "http://127.0.0.1:" + std::to_string(port) + "/embed";
    o.model = "m";
    o.batch_size = 2;
    RemoteProvider r(o);
    auto out = r.embed_batch({"a", "bb", "ccc"});
    REQUIRE(out.size() == 3);
    CHECK(r.dim() == 3);
    CHECK(out[2].values[0] == doctest::Approx(3 / std::sqrt(10.0)));
    CHECK(calls == 3);  // one retried 503, then two batches

    o.dim = 5;
    RemoteProvider wrong(o);
    CHECK_THROWS_AS(wrong.embed_batch({"a"}), EmbeddingError);

    srv.stop();
    t.join();
  }
}
