// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Worlds are sized so each check runs well inside its time budget.

#include <httplib.h>

#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "helpers.hpp"
#include "prefcurate/hash.hpp"
#include "oracles.hpp"
#include "prefcurate/curate.hpp"
#include "prefcurate/eval.hpp"
#include "prefcurate/ingest.hpp"
#include "prefcurate/retrieval.hpp"
#include "prefcurate/serve.hpp"
#include "serve_fixture.hpp"

using namespace prefcurate;

namespace {

struct CheckResult {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;
  std::function<CheckResult()> check;
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << x;
  return s.str();
}

btrm::TrainConfig strong() {
  btrm::TrainConfig c;
  c.learning_rate = 1.0;
  c.momentum = 0.9;
  c.epochs = 50;
  c.eval_interval = 10;
  return c;
}

// ---------------------------------------------------------------------------

CheckResult dynamic_k_exact() {
  std::size_t mismatches = 0;
  for (long i = 0; i <= 1000; ++i)
    if (retrieval::dynamic_k(static_cast<double>(i) / 1000.0, 8) != oracle::dynamic_k_rational(i, 1000, 8))
      ++mismatches;
  bool ends = retrieval::dynamic_k(0.5, 8) == 8 && retrieval::dynamic_k(1.0, 8) == 0;
  return {mismatches == 0 && ends, std::to_string(mismatches) + " mismatches on 1001 grid points"};
}

CheckResult gradient_check() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  int instances = 0;
  for (; instances < 200; ++instances) {
    auto arch = instances % 2 ? btrm::Arch::mlp : btrm::Arch::linear;
    std::size_t dim = 2 + rng() % 10, n = 1 + rng() % 16;
    auto m = arch == btrm::Arch::linear ? btrm::RewardModel::linear(dim) : btrm::RewardModel::mlp(dim, 1 + rng() % 8, rng());
    std::normal_distribution<double> g(0, 0.5);
    for (auto& p : m.params) p = g(rng);
    std::vector<std::pair<EmbeddingVector, EmbeddingVector>> data;
    for (std::size_t i = 0; i < n; ++i) data.emplace_back(testutil::random_vec(rng, dim), testutil::random_vec(rng, dim));
    std::vector<btrm::PairRef> refs;
    for (auto& [a, b] : data) refs.push_back({&a, &b});
    auto analytic = btrm::pairwise_loss(m, refs).gradient;
    worst = std::max(worst, oracle::max_relative_error(analytic, oracle::fd_gradient(m, refs, 1e-5)));
  }
  return {worst < 1e-4, std::to_string(instances) + " instances, max relative error " + fmt(worst * 1e6, 3) + "e-6"};
}

CheckResult bt_sanity() {
  eval::SyntheticWorldSpec s;
  s.rng_seed = 64;
  s.dim = 64;
  s.n_unverified = 2000;
  s.n_heldout = 1000;
  s.n_sanity = 10;
  s.min_margin = 0.1;
  auto w = eval::generate_world(s);
  auto silver = curate::pair_refs(w.corpus, w.unverified_ids);
  auto gold = eval::refs(w.heldout);
  auto r = btrm::train(silver, gold, strong());
  return {r.best_gold_accuracy >= 0.99, "best gold accuracy " + fmt(r.best_gold_accuracy) + " (step " +
                                            std::to_string(r.best_step) + ")"};
}

// One full pipeline: seed, three Stage-1 iterations, Stage 2, recycling.
struct PipelineRun {
  eval::World world;
  PoolLedger ledger;
  std::vector<std::string> recycled;
  std::vector<std::string> gold;
};

std::unique_ptr<PipelineRun> run_pipeline(const eval::SyntheticWorldSpec& spec) {
  auto run = std::make_unique<PipelineRun>();
  run->world = eval::generate_world(spec);
  auto& w = run->world;
  auto& l = run->ledger;
  for (const auto& id : w.unverified_ids) l.admit(id, 0);

  curate::CurationConfig cfg;
  cfg.rng_seed = spec.rng_seed;
  cfg.seed_size = 500;
  cfg.seed_human_ratio = 0.3;
  cfg.human_ratio = 0.3;
  cfg.train = strong();
  cfg.gold_train = strong();

  std::vector<std::unique_ptr<judge::StubJudge>> owned;
  std::vector<judge::JudgeProvider*> judges;
  for (int i = 0; i < 3; ++i) {
    judge::StubJudge::Params p;
    p.model_id = "stub-" + std::to_string(i);
    p.accuracy = 0.95;
    p.seed = derive_seed(spec.rng_seed, p.model_id);
    owned.push_back(std::make_unique<judge::StubJudge>(p, w.oracle()));
    judges.push_back(owned.back().get());
  }
  curate::StubHumanVerifier humans(w.oracle());
  curate::initialize_seed(w.corpus, l, cfg, humans, judges);
  curate::Stage1State st;
  for (int i = 0; i < cfg.iterations; ++i) curate::stage1_iteration(st, w.corpus, l, cfg, humans, judges);

  std::vector<std::string> verified;
  for (const auto& id : l.snapshot(Pool::gold))
    if (l.has_human_verdict(id)) verified.push_back(id);
  auto gm = curate::train_gold_model(w.corpus, l, verified, cfg.gold_train, cfg.min_gold);
  curate::run_stage2(w.corpus, l, *st.best_model, gm, judges, cfg, cfg.iterations + 1);

  ingest::Deduplicator seen;
  for (const auto& [id, p] : w.corpus.pairs()) seen.insert(p);
  auto rec = curate::recycle_flipped(w.corpus, l.snapshot(Pool::discarded), seen);
  curate::add_recycled(w.corpus, rec);
  for (const auto& p : rec) run->recycled.push_back(p.id);
  run->gold = l.snapshot(Pool::gold);
  return run;
}

double heldout_accuracy(const PipelineRun& r, const std::vector<std::string>& train_ids) {
  auto res = btrm::train(curate::pair_refs(r.world.corpus, train_ids), curate::pair_refs(r.world.corpus, r.gold),
                         strong());
  return btrm::pairwise_accuracy(res.best, eval::refs(r.world.heldout));
}

CheckResult curation_beats_raw() {
  eval::SyntheticWorldSpec s;
  s.rng_seed = 1;
  s.dim = 64;
  s.n_unverified = 4000;
  s.n_heldout = 2000;
  s.n_sanity = 10;
  s.label_noise_rate = 0.3;
  s.min_margin = 0.1;
  // The raw baseline sees every unverified pair with its stored label.
  auto raw_world = eval::generate_world(s);
  auto r = run_pipeline(s);
  auto raw_train = btrm::train(curate::pair_refs(raw_world.corpus, raw_world.unverified_ids),
                               curate::pair_refs(r->world.corpus, r->gold), strong());
  double raw = btrm::pairwise_accuracy(raw_train.best, eval::refs(raw_world.heldout));
  double curated = heldout_accuracy(*r, curate::training_ids(r->ledger, r->recycled, false));
  double gain = (curated - raw) * 100;
  return {gain >= 5.0, "raw " + fmt(raw) + ", curated " + fmt(curated) + ", +" + fmt(gain, 2) + " points"};
}

CheckResult recycling_helps() {
  // Spurious-cue annotator: every pair where a spurious direction disagrees
  // with the utility is stored inverted.
  eval::SyntheticWorldSpec s;
  s.rng_seed = 1;
  s.dim = 64;
  s.n_unverified = 8000;
  s.n_heldout = 2000;
  s.n_sanity = 10;
  s.label_noise_rate = 0.5;
  s.noise_mode = eval::NoiseMode::biased;
  s.min_margin = 0.1;
  auto r = run_pipeline(s);
  double without = heldout_accuracy(*r, curate::training_ids(r->ledger, r->recycled, false));
  double with = heldout_accuracy(*r, curate::training_ids(r->ledger, r->recycled, true));
  double gain = (with - without) * 100;
  return {gain >= 1.0, "without " + fmt(without) + ", with " + fmt(with) + " (" + std::to_string(r->recycled.size()) +
                           " recycled), +" + fmt(gain, 2) + " points"};
}

CheckResult stage2_partition() {
  using judge::ModelVerdict;
  bool examples = curate::consistency_keep(0.7, 0.6, ModelVerdict::swap) &&
                  !curate::consistency_keep(0.4, 0.9, ModelVerdict::chosen_stands) &&
                  !curate::consistency_keep(0.7, 0.3, ModelVerdict::swap);

  eval::SyntheticWorldSpec s;
  s.rng_seed = 77;
  s.dim = 16;
  s.n_unverified = 10000;
  s.n_heldout = 10;
  s.n_sanity = 10;
  s.label_noise_rate = 0.3;
  auto w = eval::generate_world(s);
  PoolLedger l;
  for (const auto& id : w.unverified_ids) l.admit(id, 0);

  std::mt19937_64 rng(5);
  auto random_model = [&] {
    auto m = btrm::RewardModel::linear(16);
    m.params = testutil::random_vec(rng, 16).values;
    return m;
  };
  auto best = random_model();
  curate::GoldModel gold{random_model(), {}, 0.0};

  auto pool = l.snapshot(Pool::unverified);
  auto conf = curate::confidence_filter(best, w.corpus, pool);
  std::set<std::string> a(conf.retained_asis.begin(), conf.retained_asis.end());
  std::set<std::string> b(conf.reannotation.begin(), conf.reannotation.end());
  std::size_t overlap = 0;
  for (const auto& id : a) overlap += b.count(id);
  bool conf_partition = overlap == 0 && a.size() + b.size() == pool.size();

  std::vector<std::unique_ptr<judge::StubJudge>> owned;
  std::vector<judge::JudgeProvider*> judges;
  for (int i = 0; i < 3; ++i) {
    owned.push_back(std::make_unique<judge::StubJudge>(
        judge::StubJudge::Params{"j" + std::to_string(i), 0.95, 0, 0, std::uint64_t(i), false}, w.oracle()));
    judges.push_back(owned.back().get());
  }
  curate::CurationConfig cfg;
  cfg.rng_seed = 3;
  auto rep = curate::run_stage2(w.corpus, l, best, gold, judges, cfg, 1);

  std::map<std::string, int> landed;
  for (const auto& e : l.entries())
    if (e.pool != Pool::unverified) ++landed[e.pair_id];
  bool exactly_once = landed.size() + rep.deferred.size() == pool.size();
  for (const auto& [id, n] : landed) exactly_once = exactly_once && n == 1;
  bool counts = rep.to_retained + rep.to_silver + rep.to_discarded + rep.deferred.size() == pool.size();

  return {examples && conf_partition && exactly_once && counts,
          std::to_string(pool.size()) + " pairs: " + std::to_string(a.size()) + " confident / " +
              std::to_string(b.size()) + " re-annotated; retained " + std::to_string(rep.to_retained) + ", silver " +
              std::to_string(rep.to_silver) + ", discarded " + std::to_string(rep.to_discarded) +
              (examples ? "; truth table ok" : "; truth table FAILED")};
}

CheckResult self_consistency() {
  auto truth = [](const std::string&, const std::string& c) -> std::optional<bool> { return c == "good"; };
  judge::StubJudge j({"q07", 0.7, 0, 0, 17, false}, truth);
  const int trials = 100000;
  int correct = 0;
  for (int i = 0; i < trials; ++i) {
    judge::JudgeTask t;
    t.pair_id = "p" + std::to_string(i);
    t.rng_seed = 11;
    t.permutation = judge::draw_permutation(11, t.pair_id);
    bool ident = t.permutation == judge::Permutation::identity;
    t.candidate1 = ident ? "good" : "bad";
    t.candidate2 = ident ? "bad" : "good";
    correct += judge::intra_model_aggregate(j.sample(t, 5), t.permutation) == judge::ModelVerdict::chosen_stands;
  }
  double got = double(correct) / trials, expected = oracle::binomial_majority(0.7, 5);
  return {std::abs(got - expected) <= 0.02 && std::abs(expected - 0.83692) < 1e-5,
          "observed " + fmt(got) + " vs exact " + fmt(expected, 5)};
}

CheckResult ingest_oracle() {
  oracle::PromptFactory f(99);
  std::vector<std::vector<std::string>> bench;
  std::vector<std::string> bench_text;
  for (int i = 0; i < 300; ++i) {
    bench.push_back(f.words(14 + i % 30));
    bench_text.push_back(oracle::PromptFactory::text(bench.back()));
  }
  for (int i = 0; i < 20; ++i) bench_text.push_back(oracle::PromptFactory::text(f.words(3 + i % 9)));
  auto idx = ingest::build_contamination_index(bench_text);
  oracle::ExactNgramSet exact(bench_text);

  std::vector<PreferencePair> pairs;
  std::size_t mismatches = 0, removed13 = 0, kept12 = 0, planted13 = 0, planted12 = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string t;
    int kind = i % 5;
    const auto& src = bench[i % bench.size()];
    if (kind == 0) t = f.with_overlap(src, 13), ++planted13;
    else if (kind == 1) t = f.with_overlap(src, 12), ++planted12;
    else if (kind == 2) t = f.with_overlap(src, std::min<std::size_t>(src.size(), 14 + i % 5)), ++planted13;
    else t = oracle::PromptFactory::text(f.words(5 + i % 40));
    bool hashed = ingest::find_contamination(idx, t).has_value();
    if (hashed != exact.contaminated(t)) ++mismatches;
    if (kind == 0 || kind == 2) removed13 += hashed;
    if (kind == 1) kept12 += !hashed;
    pairs.push_back(testutil::make_pair("p" + std::to_string(i), t, "c" + std::to_string(i % 7), "r"));
  }
  // Duplicate a slice so dedup has work to do.
  for (int i = 0; i < 500; ++i) pairs.push_back(pairs[i * 3]);
  auto once = ingest::dedup(pairs);
  auto twice = ingest::dedup(once.unique);
  bool idempotent = twice.duplicates == 0 && twice.unique == once.unique && once.duplicates >= 500;
  auto d1 = ingest::decontaminate(once.unique, idx);
  auto d2 = ingest::decontaminate(d1.clean, idx);
  idempotent = idempotent && d2.removed.empty();

  return {mismatches == 0 && removed13 == planted13 && kept12 == planted12 && idempotent,
          "10000 prompts, " + std::to_string(mismatches) + " oracle mismatches, " + std::to_string(removed13) + "/" +
              std::to_string(planted13) + " 13-gram overlaps removed, " + std::to_string(kept12) + "/" +
              std::to_string(planted12) + " 12-gram overlaps kept, dedup idempotent " + (idempotent ? "yes" : "no")};
}

CheckResult eval_harness() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> table(12, std::vector<double>(9));
  for (auto& row : table)
    for (auto& x : row) x = u(rng);
  auto m = eval::pearson_matrix(table);
  double asym = 0, diag = 0;
  for (std::size_t i = 0; i < 9; ++i) {
    diag = std::max(diag, std::abs(*m.at(i, i) - 1.0));
    for (std::size_t j = 0; j < 9; ++j) asym = std::max(asym, std::abs(*m.at(i, j) - *m.at(j, i)));
  }
  double three = *eval::pearson_matrix({{1, 1}, {2, 2}, {3, 4}}).at(0, 1);
  bool pearson_ok = asym <= 1e-12 && diag <= 1e-12 && std::abs(three - 0.98198) < 1e-5;

  // Oracle BoN on world responses; correct means positive utility.
  eval::SyntheticWorldSpec s;
  s.rng_seed = 8;
  s.dim = 16;
  s.n_unverified = 1;
  s.n_heldout = 1;
  s.n_sanity = 1;
  auto w = eval::generate_world(s);
  auto truth = eval::oracle_model(w);
  eval::EvalSet set{"bon", {{"all", {}, {}}}};
  for (int i = 0; i < 5000; ++i) {
    eval::BonGroup g{"g" + std::to_string(i), {}};
    for (int c = 0; c < 16; ++c) {
      auto e = testutil::random_vec(rng, 16);
      g.candidates.push_back({e, btrm::score(truth, e) > 1.0});
    }
    set.categories[0].groups.push_back(std::move(g));
  }
  bool oracle_ok = true;
  std::size_t checked = 0;
  for (std::size_t n : {1u, 2u, 4u, 8u, 16u})
    for (const auto& g : set.categories[0].groups) {
      bool any = false;
      for (std::size_t c = 0; c < n; ++c) any = any || g.candidates[c].correct;
      if (!any) continue;
      ++checked;
      oracle_ok = oracle_ok && eval::best_of_n(eval::model_scorer(truth), g, n);
    }

  // Random scorer against the per-group fraction of correct candidates.
  double worst_gap = 0;
  for (std::size_t n : {2u, 4u, 8u}) {
    double expected = 0;
    for (const auto& g : set.categories[0].groups) {
      std::size_t ok = 0;
      for (std::size_t c = 0; c < n; ++c) ok += g.candidates[c].correct;
      expected += double(ok) / n;
    }
    expected /= set.categories[0].groups.size();
    std::mt19937_64 srng(n);
    eval::Scorer random = [&](const EmbeddingVector&) { return u(srng); };
    worst_gap = std::max(worst_gap, std::abs(eval::bon_curve(random, set, {n})[0].hit_rate - expected));
  }
  return {pearson_ok && oracle_ok && worst_gap <= 0.03,
          "pearson asym " + fmt(asym, 17) + ", r(3pt) " + fmt(three, 5) + "; oracle BoN hits on " +
              std::to_string(checked) + " groups " + (oracle_ok ? "all" : "NOT all") + "; random BoN gap " +
              fmt(worst_gap)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

int sh(const std::string& args) {
  std::string cmd = std::string(PREFCURATE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

CheckResult determinism() {
  testutil::TempDir dir("determinism");
  std::array<std::filesystem::path, 2> runs{dir.path / "a", dir.path / "b"};
  for (const auto& r : runs) {
    if (sh("synth --run " + r.string() + " --seed 7") != 0) return {false, "synth failed"};
    if (sh("stage1 --run " + r.string() + " --iterations 3 --stub-judges --seed 7") != 0)
      return {false, "stage1 failed"};
  }
  std::vector<std::filesystem::path> files{"ledgers/ledger.jsonl", "ledgers/verdicts.jsonl", "ledgers/votes.jsonl",
                                           "state.json"};
  for (const auto& e : std::filesystem::directory_iterator(runs[0] / "checkpoints"))
    files.push_back(std::filesystem::path("checkpoints") / e.path().filename());
  std::size_t differing = 0, ckpts = 0;
  for (const auto& f : files) {
    if (f.parent_path() == "checkpoints") ++ckpts;
    auto x = slurp(runs[0] / f), y = slurp(runs[1] / f);
    if (x.empty() || x != y) ++differing;
  }
  return {differing == 0 && ckpts >= 4, std::to_string(files.size()) + " files compared (" + std::to_string(ckpts) +
                                            " checkpoints), " + std::to_string(differing) + " differ"};
}

CheckResult service_exactly_once() {
  Corpus corpus;
  PoolLedger ledger;
  std::vector<std::string> ids;
  for (int i = 0; i < 500; ++i) {
    auto id = "p" + std::to_string(10000 + i);
    corpus.add(testutil::make_pair(id, "prompt " + id));
    auto a = default_attributes(id);
    a.objectivity = i % 3 ? Objectivity::subjective : Objectivity::objective;
    corpus.set_attributes(a);
    ledger.admit(id, 0);
    ids.push_back(id);
  }
  serve::AnnotationService::Options o;
  o.rng_seed = 5;
  serve::AnnotationService svc(corpus, ledger, o);
  svc.enqueue(ids);
  testutil::LiveServer live(svc);

  std::atomic<int> created{0}, conflicts{0}, other{0};
  std::mutex other_mu;
  std::map<int, int> other_status;
  std::vector<std::thread> clients;
  for (int c = 0; c < 50; ++c) {
    clients.emplace_back([&, c] {
      auto cli = live.client();
      std::string who = "annotator-" + std::to_string(c);
      for (;;) {
        auto next = cli.Get("/api/v1/tasks/next?annotator=" + who);
        if (!next) {
          ++other;
          std::lock_guard g(other_mu);
          ++other_status[-2];
          return;
        }
        if (next->status == 204) return;
        std::string tid = json::parse(next->body)["task_id"];
        auto body = json{{"annotator", who}, {"outcome", c % 2 ? "left" : "confirm"}}.dump();
        // Double submit: two racing requests for the same verdict.
        std::array<int, 2> st{};
        std::thread second([&] {
          auto c2 = live.client();
          auto r = c2.Post("/api/v1/tasks/" + tid + "/verdict", body, "application/json");
          st[1] = r ? r->status : -100 - static_cast<int>(r.error());
        });
        auto r = cli.Post("/api/v1/tasks/" + tid + "/verdict", body, "application/json");
        st[0] = r ? r->status : -100 - static_cast<int>(r.error());
        second.join();
        for (int s : st) {
          if (s == 201) ++created;
          else if (s == 409) ++conflicts;
          else {
            ++other;
            std::lock_guard g(other_mu);
            ++other_status[s];
          }
        }
      }
    });
  }
  for (auto& t : clients) t.join();

  std::map<std::string, int> gold_entries;
  for (const auto& e : ledger.entries())
    if (e.pool == Pool::gold) ++gold_entries[e.pair_id];
  int dup_gold = 0;
  for (const auto& [id, n] : gold_entries) dup_gold += n > 1;
  auto stats = svc.stats();
  bool ok = created == 500 && conflicts == 500 && other == 0 && dup_gold == 0 && gold_entries.size() == 500 &&
            svc.audit().size() == 500 && ledger.verdicts().size() == 500;
  return {ok, std::to_string(created.load()) + " verdicts, " + std::to_string(conflicts.load()) +
                  " duplicate submits rejected, " + std::to_string(other.load()) + " other responses" + [&] {
                    std::string d;
                    for (auto [k, v] : other_status) d += " [" + std::to_string(k) + "]x" + std::to_string(v);
                    return d;
                  }() + ", " +
                  std::to_string(gold_entries.size()) + " gold pairs, " + std::to_string(dup_gold) +
                  " duplicate gold entries"};
}

}  // namespace

int main() {
  std::vector<Criterion> criteria{
      {"dynamic-k exactness", 1, dynamic_k_exact},
      {"BT gradient check", 10, gradient_check},
      {"BT sanity on a separable world", 30, bt_sanity},
      {"curation beats no curation", 300, curation_beats_raw},
      {"flip recycling helps", 300, recycling_helps},
      {"stage-2 partition and consistency truth table", 10, stage2_partition},
      {"self-consistency amplification", 30, self_consistency},
      {"ingestion oracle equivalence", 30, ingest_oracle},
      {"eval harness", 30, eval_harness},
      {"stage-1 determinism", 300, determinism},
      {"service exactly-once", 60, service_exactly_once},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    auto t0 = std::chrono::steady_clock::now();
    CheckResult o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool in_time = secs < c.budget_s;
    bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  " << c.name << "  [" << fmt(secs, 2) << "s / " << c.budget_s
              << "s]  " << o.detail << (in_time ? "" : "  (over time budget)") << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
  return failed ? 1 : 0;
}
