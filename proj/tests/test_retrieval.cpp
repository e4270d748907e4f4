#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "prefcurate/retrieval.hpp"

using namespace prefcurate;
using namespace prefcurate::retrieval;

namespace {

// Linear model w = (1, 0); an eval pair with chosen (logit p, 0) and rejected
// (0, 0) gets exactly probability p.
struct Fixture {
  Corpus corpus;
  btrm::RewardModel model = btrm::RewardModel::linear(2);
  Fixture() { model.params = {1.0, 0.0}; }

  void eval_pair(const std::string& id, double p, std::vector<double> ctx) {
    corpus.add(testutil::make_pair(id));
    corpus.set_attributes(default_attributes(id));
    corpus.set_embeddings(id, PairEmbeddings{embed::normalized(std::move(ctx)),
                                             EmbeddingVector{{std::log(p / (1 - p)), 0.0}}, EmbeddingVector{{0.0, 0.0}}});
  }
  void pool_pair(const std::string& id, std::vector<double> ctx) {
    corpus.add(testutil::make_pair(id, id));
    corpus.set_attributes(default_attributes(id));
    corpus.set_embeddings(id, PairEmbeddings{embed::normalized(std::move(ctx)), EmbeddingVector{{0, 0}},
                                             EmbeddingVector{{0, 0}}});
  }
};

}  // namespace

TEST_SUITE("retrieval") {
  TEST_CASE("dynamic_k examples") {
    CHECK(dynamic_k(0.5, 8) == 8);
    CHECK(dynamic_k(0.75, 8) == 2);
    CHECK(dynamic_k(1.0, 8) == 0);
    CHECK(dynamic_k(0.51, 8) == 4);
    CHECK(dynamic_k(0.0, 8) == 8);
    CHECK_THROWS(dynamic_k(1.5, 8));
    CHECK_THROWS(dynamic_k(0.5, -1));
  }

  TEST_CASE("dynamic_k equals the exact rational rule on the full grid") {
    for (int k_max : {1, 3, 8, 16}) {
      int prev = k_max;
      for (long i = 0; i <= 1000; ++i) {
        int k = dynamic_k(static_cast<double>(i) / 1000.0, k_max);
        CHECK(k == oracle::dynamic_k_rational(i, 1000, k_max));
        CHECK(k <= prev);
        prev = k;
      }
    }
  }

  TEST_CASE("confident correct model queues nothing") {
    Fixture f;
    f.eval_pair("e1", 1.0 - 1e-15, {1, 0});
    f.pool_pair("u1", {1, 0});
    auto idx = build_context_index(f.corpus, {"u1"}, 2);
    auto s = select_for_annotation(f.model, {"e1"}, f.corpus, idx);
    CHECK(s.queue.empty());
    REQUIRE(s.budgets.size() == 1);
    CHECK(s.budgets[0].k == 0);
  }

  TEST_CASE("k is truncated by the index size") {
    Fixture f;
    f.eval_pair("e1", 0.3, {1, 0});
    for (auto id : {"u1", "u2", "u3"}) f.pool_pair(id, {1, 0.1});
    auto idx = build_context_index(f.corpus, {"u1", "u2", "u3"}, 2);
    auto s = select_for_annotation(f.model, {"e1"}, f.corpus, idx);
    CHECK(s.budgets[0].k == 8);
    CHECK(s.queue.size() == 3);
  }

  TEST_CASE("a pair retrieved twice appears once at the lower source p") {
    Fixture f;
    f.eval_pair("e-hi", 0.7, {1, 0});
    f.eval_pair("e-lo", 0.2, {0, 1});
    f.pool_pair("shared", {1, 1});
    f.pool_pair("near-hi", {1, 0.05});
    f.pool_pair("near-lo", {0.05, 1});
    // k_max 2: e-lo gets k 2 and e-hi gets ceil(2 * 0.3 / 0.5) = 2, so both reach "shared".
    auto idx = build_context_index(f.corpus, {"shared", "near-hi", "near-lo"}, 2);
    auto s = select_for_annotation(f.model, {"e-hi", "e-lo"}, f.corpus, idx, 2);
    REQUIRE(s.queue.size() == 3);
    CHECK(s.queue[0].pair_id == "near-lo");
    CHECK(s.queue[1].pair_id == "shared");
    CHECK(s.queue[1].source_pair_id == "e-lo");
    CHECK(s.queue[1].source_p == doctest::Approx(0.2));
    CHECK(s.queue[2].pair_id == "near-hi");
    CHECK(s.queue[2].source_p == doctest::Approx(0.7));
  }

  TEST_CASE("eval pairs without embeddings are skipped") {
    Fixture f;
    f.corpus.add(testutil::make_pair("bare"));
    f.pool_pair("u1", {1, 0});
    auto idx = build_context_index(f.corpus, {"u1"}, 2);
    auto s = select_for_annotation(f.model, {"bare"}, f.corpus, idx);
    CHECK(s.skipped == 1);
    CHECK(s.queue.empty());
  }

  TEST_CASE("queue file round trip") {
    testutil::TempDir dir("retrieval");
    std::vector<QueueEntry> q{{"a", "e", 0.25, 0.5}, {"b", "e", 0.25, 0.125}};
    write_queue(dir.path / "q.jsonl", q);
    CHECK(read_queue(dir.path / "q.jsonl") == q);
  }
}
