#include <doctest.h>

#include "helpers.hpp"
#include "oracles.hpp"
#include "prefcurate/ingest.hpp"

using namespace prefcurate;
using namespace prefcurate::ingest;

namespace {

json record(json rejected = "no") {
  return json{{"conversation", json::array({{{"role", "user"}, {"content", "hi"}},
                                            {{"role", "assistant"}, {"content", "hello"}},
                                            {{"role", "user"}, {"content", "what is 2+2?"}}})},
              {"chosen", "4"},
              {"rejected", rejected},
              {"source", "unit"}};
}

std::string code_of(const CheckResult& r) {
  if (auto* rej = std::get_if<Rejection>(&r)) return rej->code;
  return "ok";
}

}  // namespace

TEST_SUITE("ingest") {
  TEST_CASE("structural check: null content, identical responses, malformed") {
    CHECK(code_of(structural_check(record(nullptr))) == "null-content");
    CHECK(code_of(structural_check(record("None"))) == "null-content");
    auto same = record("4");
    CHECK(code_of(structural_check(same)) == "identical-responses");
    auto missing = record();
    missing.erase("chosen");
    CHECK(code_of(structural_check(missing)) == "malformed");
    CHECK(code_of(structural_check(json::array())) == "malformed");
    auto ends_with_assistant = record();
    ends_with_assistant["conversation"].erase(2);
    CHECK(code_of(structural_check(ends_with_assistant)) == "final-turn-not-user");
    auto empty = record();
    empty["conversation"] = json::array();
    CHECK(code_of(structural_check(empty)) == "empty-conversation");
  }

  TEST_CASE("well-formed record normalizes with a derived id") {
    auto r = structural_check(record());
    REQUIRE(std::holds_alternative<PreferencePair>(r));
    const auto& p = std::get<PreferencePair>(r);
    CHECK(p.conversation.back().role == Role::user);
    CHECK(p.id == derive_pair_id(p));
    CHECK(first_user_turn(p) == "hi");
  }

  TEST_CASE("dedup keeps first occurrences in order") {
    auto a = testutil::make_pair("a", "q", "x", "y");
    auto b = testutil::make_pair("b", "q", "x", "y");
    auto c = testutil::make_pair("c", "q", "x", "z");
    auto r = dedup({a, b, c});
    CHECK(r.duplicates == 1);
    REQUIRE(r.unique.size() == 2);
    CHECK(r.unique[0].id == "a");
    CHECK(r.unique[1].id == "c");

    auto again = dedup(r.unique);
    CHECK(again.duplicates == 0);
    CHECK(again.unique == r.unique);

    std::vector<PreferencePair> many;
    for (int i = 0; i < 100; ++i) many.push_back(testutil::make_pair(std::to_string(i), "q" + std::to_string(i)));
    CHECK(dedup(many).unique.size() == 100);
  }

  TEST_CASE("the seen-set persists across shards") {
    Deduplicator d;
    CHECK(d.insert(testutil::make_pair("a")));
    CHECK_FALSE(d.insert(testutil::make_pair("b")));
    CHECK(d.contains(testutil::make_pair("z")));
    CHECK(d.size() == 1);
  }

  TEST_CASE("tokenizer lowercases and strips edge punctuation") {
    CHECK(tokenize("Hello,  WORLD! (ok)") == std::vector<std::string>{"hello", "world", "ok"});
    CHECK(tokenize("a\xC2\xA0" "b") == std::vector<std::string>{"a", "b"});
    CHECK(tokenize(" ... ").empty());
    CHECK(tokenize("don't") == std::vector<std::string>{"don't"});
  }

  TEST_CASE("index sizes for 13, 15 and 5 token prompts") {
    oracle::PromptFactory f(1);
    CHECK(build_contamination_index({oracle::PromptFactory::text(f.words(13))}).size() == 1);
    CHECK(build_contamination_index({oracle::PromptFactory::text(f.words(15))}).size() == 3);
    auto shorty = build_contamination_index({oracle::PromptFactory::text(f.words(5))});
    CHECK(shorty.size() == 1);
    CHECK(shorty.short_lengths == std::set<std::size_t>{5});
    CHECK_THROWS_AS(build_contamination_index({}), std::invalid_argument);
  }

  TEST_CASE("13-token overlap removed, 12-token overlap retained") {
    oracle::PromptFactory f(2);
    auto bench = f.words(40);
    auto idx = build_contamination_index({oracle::PromptFactory::text(bench)});
    auto hit = f.with_overlap(bench, 13);
    auto near = f.with_overlap(bench, 12);
    CHECK(find_contamination(idx, hit).has_value());
    CHECK_FALSE(find_contamination(idx, near).has_value());

    std::vector<PreferencePair> pairs{testutil::make_pair("hit", hit), testutil::make_pair("near", near),
                                      testutil::make_pair("verbatim", oracle::PromptFactory::text(bench))};
    auto r = decontaminate(pairs, idx);
    REQUIRE(r.clean.size() == 1);
    CHECK(r.clean[0].id == "near");
    CHECK(r.removed.size() == 2);
    CHECK(decontaminate(r.clean, idx).removed.empty());
    CHECK_THROWS_AS(decontaminate(pairs, idx, "other/v0"), std::invalid_argument);
  }

  TEST_CASE("short benchmark prompts match as a whole") {
    auto idx = build_contamination_index({"Name three primes."});
    CHECK(find_contamination(idx, "please: name THREE primes. thanks").has_value());
    CHECK_FALSE(find_contamination(idx, "name three prime numbers").has_value());
  }

  TEST_CASE("only the first user turn is checked") {
    auto idx = build_contamination_index({"secret benchmark prompt"});
    auto p = testutil::make_pair("a", "harmless");
    p.conversation.push_back(Turn{Role::assistant, "ok"});
    p.conversation.push_back(Turn{Role::user, "secret benchmark prompt"});
    CHECK(decontaminate({p}, idx).clean.size() == 1);
  }

  TEST_CASE("hashed decisions equal the exact-set oracle on random prompts") {
    oracle::PromptFactory f(3);
    std::vector<std::vector<std::string>> bench;
    std::vector<std::string> bench_text;
    for (int i = 0; i < 50; ++i) {
      bench.push_back(f.words(20 + i % 10));
      bench_text.push_back(oracle::PromptFactory::text(bench.back()));
    }
    bench_text.push_back("tiny prompt");
    auto idx = build_contamination_index(bench_text);
    oracle::ExactNgramSet exact(bench_text);
    std::mt19937_64 rng(4);
    int removed = 0;
    for (int i = 0; i < 1000; ++i) {
      std::string t;
      switch (i % 4) {
        case 0: t = f.with_overlap(bench[i % bench.size()], 13); break;
        case 1: t = f.with_overlap(bench[i % bench.size()], 12); break;
        case 2: t = oracle::PromptFactory::text(f.words(30)); break;
        default: t = "x tiny prompt y"; break;
      }
      bool hashed = find_contamination(idx, t).has_value();
      CHECK(hashed == exact.contaminated(t));
      removed += hashed;
    }
    CHECK(removed == 500);
  }
}
