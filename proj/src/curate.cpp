#include "prefcurate/curate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "prefcurate/embed.hpp"
#include "prefcurate/hash.hpp"

namespace prefcurate::curate {

namespace fs = std::filesystem;

void CurationConfig::validate() const {
  auto ratio_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!ratio_ok(seed_human_ratio)) throw std::invalid_argument("seed_human_ratio must be in [0,1]");
  if (!ratio_ok(human_ratio)) throw std::invalid_argument("human_ratio must be in [0,1]");
  if (k_max < 1) throw std::invalid_argument("k_max must be >= 1");
  if (samples_per_model < 1) throw std::invalid_argument("samples_per_model must be >= 1");
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (max_in_flight < 1) throw std::invalid_argument("max_in_flight must be >= 1");
  if (min_gold < 1) throw std::invalid_argument("min_gold must be >= 1");
  train.validate();
  gold_train.validate();
}

json to_json(const CurationConfig& c) {
  return json{{"rng_seed", c.rng_seed},
              {"seed_size", c.seed_size},
              {"seed_human_ratio", c.seed_human_ratio},
              {"human_ratio", c.human_ratio},
              {"k_max", c.k_max},
              {"samples_per_model", c.samples_per_model},
              {"iterations", c.iterations},
              {"max_in_flight", c.max_in_flight},
              {"max_retries", c.max_retries},
              {"min_gold", c.min_gold},
              {"use_recycled", c.use_recycled},
              {"stage2_with_judges", c.stage2_with_judges},
              {"train", btrm::to_json(c.train)},
              {"gold_train", btrm::to_json(c.gold_train)}};
}

CurationConfig curation_config_from_json(const json& j, CurationConfig c) {
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.seed_size = j.value("seed_size", c.seed_size);
  c.seed_human_ratio = j.value("seed_human_ratio", c.seed_human_ratio);
  c.human_ratio = j.value("human_ratio", c.human_ratio);
  c.k_max = j.value("k_max", c.k_max);
  c.samples_per_model = j.value("samples_per_model", c.samples_per_model);
  c.iterations = j.value("iterations", c.iterations);
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.min_gold = j.value("min_gold", c.min_gold);
  c.use_recycled = j.value("use_recycled", c.use_recycled);
  c.stage2_with_judges = j.value("stage2_with_judges", c.stage2_with_judges);
  if (j.contains("train")) c.train = btrm::train_config_from_json(j["train"], c.train);
  if (j.contains("gold_train")) c.gold_train = btrm::train_config_from_json(j["gold_train"], c.gold_train);
  c.validate();
  return c;
}

std::vector<btrm::PairRef> pair_refs(const Corpus& corpus, const std::vector<std::string>& ids) {
  std::vector<btrm::PairRef> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto* e = corpus.embeddings(id);
    if (!e) throw std::runtime_error("pair " + id + " has no embeddings");
    out.push_back(btrm::PairRef{&e->chosen, &e->rejected});
  }
  return out;
}

std::optional<Verdict> StubHumanVerifier::verify(const Corpus& corpus, const std::string& pair_id) {
  Verdict v;
  v.pair_id = pair_id;
  v.kind = VerdictKind::human;
  v.model_id = annotator_;
  v.timestamp = ++clock_;
  auto truth = oracle_ ? oracle_(pair_id, corpus.pair(pair_id).chosen) : std::nullopt;
  if (!truth)
    v.outcome = Outcome::discard;
  else
    v.outcome = *truth ? Outcome::confirm : Outcome::swap;
  return v;
}

namespace {

std::size_t share(double ratio, std::size_t n) {
  return std::min(n, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))));
}

std::size_t context_dim(const Corpus& corpus, const std::vector<std::string>& ids) {
  for (const auto& id : ids)
    if (const auto* e = corpus.embeddings(id)) return e->context.dim();
  return 0;
}

struct HumanOutcome {
  std::size_t to_gold = 0;
  std::size_t to_discarded = 0;
  std::vector<std::string> routed;
};

HumanOutcome route_to_humans(const std::vector<std::string>& ids, Corpus& corpus, PoolLedger& ledger,
                             HumanVerifier& humans, int iteration) {
  HumanOutcome out;
  for (const auto& id : ids) {
    auto v = humans.verify(corpus, id);
    if (!v) {
      out.routed.push_back(id);
      continue;
    }
    apply_human_verdict(corpus, ledger, *v, iteration);
    if (v->outcome == Outcome::discard)
      ++out.to_discarded;
    else
      ++out.to_gold;
  }
  return out;
}

judge::LabelConfig label_config(const CurationConfig& c, std::string_view tag, int iteration) {
  judge::LabelConfig lc;
  lc.rng_seed = derive_seed(c.rng_seed, tag);
  lc.samples_per_model = c.samples_per_model;
  lc.max_in_flight = c.max_in_flight;
  lc.max_retries = c.max_retries;
  lc.iteration = iteration;
  return lc;
}

}  // namespace

SeedReport initialize_seed(Corpus& corpus, PoolLedger& ledger, const CurationConfig& config, HumanVerifier& humans,
                           std::span<judge::JudgeProvider* const> judges) {
  auto pool = ledger.snapshot(Pool::unverified);
  std::mt19937_64 rng(derive_seed(config.rng_seed, "seed"));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(pool.size(), config.seed_size));
  std::sort(pool.begin(), pool.end());

  SeedReport r;
  std::size_t n_human = share(config.seed_human_ratio, pool.size());
  // Deterministic split that does not depend on id order alone.
  std::vector<std::string> order = pool;
  std::shuffle(order.begin(), order.end(), rng);
  r.human_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_human));
  r.judge_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_human), order.end());
  std::sort(r.human_ids.begin(), r.human_ids.end());
  std::sort(r.judge_ids.begin(), r.judge_ids.end());

  auto h = route_to_humans(r.human_ids, corpus, ledger, humans, 0);
  r.to_gold = h.to_gold;
  r.to_discarded = h.to_discarded;
  r.routed = h.routed.size();

  if (!judges.empty() && !r.judge_ids.empty()) {
    auto lr = judge::label_batch(r.judge_ids, judges, corpus, nullptr, ledger, label_config(config, "seed/judge", 0));
    r.to_silver = lr.to_silver;
    r.to_discarded += lr.to_discarded;
    r.deferred = lr.deferred.size();
  }
  return r;
}

json to_json(const Stage1State& s) {
  json sanity = json::array();
  for (const auto& [it, v] : s.sanity_scores) sanity.push_back(json{{"iteration", it}, {"score", v}});
  return json{{"iteration", s.iteration},
              {"best_gold_accuracy", s.best_gold_accuracy},
              {"gold_accuracy", s.gold_accuracy},
              {"sanity_scores", sanity}};
}

IterationReport stage1_iteration(Stage1State& state, Corpus& corpus, PoolLedger& ledger, const CurationConfig& config,
                                 HumanVerifier& humans, std::span<judge::JudgeProvider* const> judges,
                                 const std::vector<eval::PairwiseSample>* sanity) {
  const int iteration = state.iteration + 1;
  IterationReport r;
  r.iteration = iteration;

  auto silver = ledger.snapshot(Pool::silver);
  auto gold = ledger.snapshot(Pool::gold);
  if (silver.empty() || gold.empty()) throw std::runtime_error("stage1 needs non-empty silver and gold pools");

  // Step 1
  auto tc = config.train;
  tc.rng_seed = derive_seed(config.rng_seed ^ config.train.rng_seed, "stage1/train/" + std::to_string(iteration));
  auto silver_refs = pair_refs(corpus, silver);
  auto gold_refs = pair_refs(corpus, gold);
  r.train = btrm::train(silver_refs, gold_refs, tc);
  r.train.best.trained_on = "stage1/iter" + std::to_string(iteration);
  state.best_model = r.train.best;
  state.best_gold_accuracy = r.train.best_gold_accuracy;
  state.gold_accuracy.push_back(r.train.best_gold_accuracy);

  // Step 2
  auto unverified = ledger.snapshot(Pool::unverified);
  const std::size_t dim = context_dim(corpus, gold);
  auto index = retrieval::build_context_index(corpus, unverified, dim);
  r.selection = retrieval::select_for_annotation(r.train.best, gold, corpus, index, config.k_max);

  // Step 3
  std::size_t n_human = share(config.human_ratio, r.selection.queue.size());
  for (std::size_t i = 0; i < r.selection.queue.size(); ++i)
    (i < n_human ? r.human_slice : r.judge_slice).push_back(r.selection.queue[i].pair_id);

  auto h = route_to_humans(r.human_slice, corpus, ledger, humans, iteration);
  r.to_gold = h.to_gold;
  r.to_discarded = h.to_discarded;
  r.routed = std::move(h.routed);

  if (!r.judge_slice.empty()) {
    if (judges.empty()) throw std::runtime_error("stage1 judge slice is non-empty but no judges are configured");
    auto gold_index = retrieval::build_context_index(corpus, ledger.snapshot(Pool::gold), dim);
    auto lr = judge::label_batch(r.judge_slice, judges, corpus, &gold_index, ledger,
                                 label_config(config, "stage1/judge/" + std::to_string(iteration), iteration));
    r.to_silver = lr.to_silver;
    r.to_discarded += lr.to_discarded;
    r.deferred = lr.deferred;
    for (auto& l : lr.labels)
      for (auto& rec : l.records) r.votes.push_back(std::move(rec));
  }
  r.no_new_data = r.selection.queue.empty();

  if (sanity && !sanity->empty()) {
    auto refs = eval::refs(*sanity);
    r.sanity = btrm::pairwise_accuracy(r.train.best, refs);
    state.sanity_scores.emplace_back(iteration, *r.sanity);
  }
  state.iteration = iteration;
  return r;
}

ConfidenceSplit confidence_filter(const btrm::RewardModel& best, const Corpus& corpus,
                                  const std::vector<std::string>& pool) {
  ConfidenceSplit out;
  for (const auto& id : pool) {
    const auto* e = corpus.embeddings(id);
    if (!e) throw std::runtime_error("confidence_filter: pair " + id + " has no embeddings");
    (btrm::predict_pair(best, e->chosen, e->rejected).p > 0.5 ? out.retained_asis : out.reannotation).push_back(id);
  }
  return out;
}

GoldModel train_gold_model(const Corpus& corpus, const PoolLedger& ledger, const std::vector<std::string>& gold_ids,
                           const btrm::TrainConfig& config, std::size_t min_gold) {
  for (const auto& id : gold_ids) {
    if (ledger.pool_of(id) != Pool::gold) throw LedgerError("gold model input " + id + " is not a gold member");
    if (!ledger.has_human_verdict(id)) throw LedgerError("gold model input " + id + " has no human verdict");
  }
  if (gold_ids.size() < min_gold)
    throw std::runtime_error("insufficient gold: " + std::to_string(gold_ids.size()) + " < " + std::to_string(min_gold));
  auto refs = pair_refs(corpus, gold_ids);
  auto result = btrm::train(refs, refs, config);
  GoldModel g;
  g.model = std::move(result.best);
  g.model.trained_on = "gold";
  g.trained_on = gold_ids;
  g.gold_accuracy = result.best_gold_accuracy;
  return g;
}

bool consistency_keep(double gold_p, double best_p, std::optional<judge::ModelVerdict> judge_verdict) {
  if (!(gold_p > 0.5)) return false;
  return best_p > 0.5 || judge_verdict == judge::ModelVerdict::chosen_stands;
}

ConsistencySplit consistency_retain(const btrm::RewardModel& gold_model, const btrm::RewardModel& best,
                                    const std::map<std::string, judge::ModelVerdict>& judge_verdicts,
                                    const Corpus& corpus, const std::vector<std::string>& pool) {
  ConsistencySplit out;
  for (const auto& id : pool) {
    const auto* e = corpus.embeddings(id);
    if (!e) throw std::runtime_error("consistency_retain: pair " + id + " has no embeddings");
    double gp = btrm::predict_pair(gold_model, e->chosen, e->rejected).p;
    double bp = btrm::predict_pair(best, e->chosen, e->rejected).p;
    std::optional<judge::ModelVerdict> jv;
    if (auto it = judge_verdicts.find(id); it != judge_verdicts.end()) jv = it->second;
    (consistency_keep(gp, bp, jv) ? out.retained : out.discarded).push_back(id);
  }
  return out;
}

Stage2Report run_stage2(Corpus& corpus, PoolLedger& ledger, const btrm::RewardModel& best, const GoldModel& gold,
                        std::span<judge::JudgeProvider* const> judges, const CurationConfig& config, int iteration) {
  Stage2Report r;
  auto pool = ledger.snapshot(Pool::unverified);
  r.confidence = confidence_filter(best, corpus, pool);

  std::map<std::string, std::string> judged_by;
  if (config.stage2_with_judges && !judges.empty() && !r.confidence.reannotation.empty()) {
    r.judges_used = true;
    auto gold_ids = ledger.snapshot(Pool::gold);
    auto gold_index = retrieval::build_context_index(corpus, gold_ids, context_dim(corpus, pool));
    auto lr = judge::collect_verdicts(r.confidence.reannotation, judges, corpus, &gold_index,
                                      label_config(config, "stage2/judge", iteration));
    r.deferred = lr.deferred;
    for (auto& l : lr.labels) {
      r.judge_verdicts[l.pair_id] = l.final_verdict;
      std::string models;
      for (auto& rec : l.records) {
        models += (models.empty() ? "" : ",") + rec.model_id;
        r.votes.push_back(std::move(rec));
      }
      judged_by[l.pair_id] = models;
    }
  }

  std::set<std::string> deferred(r.deferred.begin(), r.deferred.end());
  std::set<std::string> confident(r.confidence.retained_asis.begin(), r.confidence.retained_asis.end());
  std::vector<std::string> eligible;
  for (const auto& id : pool)
    if (!deferred.count(id)) eligible.push_back(id);

  auto split = consistency_retain(gold.model, best, r.judge_verdicts, corpus, eligible);
  for (const auto& id : split.retained) {
    if (confident.count(id)) {
      ledger.transition(id, Pool::unverified, Pool::retained, reason::confidence_pass, iteration);
      ++r.to_retained;
    } else {
      // Re-annotated by the judges (chosen stands) and confirmed by the gold model.
      Verdict v;
      v.pair_id = id;
      v.kind = VerdictKind::judge;
      v.model_id = judged_by[id];
      v.outcome = Outcome::confirm;
      ledger.record_verdict(v);
      ledger.transition(id, Pool::unverified, Pool::silver, reason::consistency_pass, iteration);
      ++r.to_silver;
    }
  }
  for (const auto& id : split.discarded) {
    ledger.transition(id, Pool::unverified, Pool::discarded, reason::consistency_fail, iteration);
    ++r.to_discarded;
  }
  return r;
}

std::vector<PreferencePair> recycle_flipped(const Corpus& corpus, const std::vector<std::string>& source_ids,
                                            ingest::Deduplicator& seen) {
  std::vector<PreferencePair> out;
  for (const auto& id : source_ids) {
    PreferencePair p = corpus.pair(id);
    std::swap(p.chosen, p.rejected);
    p.flipped_from = id;
    if (!seen.insert(p)) continue;
    p.id = "r" + ingest::derive_pair_id(p);
    out.push_back(std::move(p));
  }
  return out;
}

void add_recycled(Corpus& corpus, const std::vector<PreferencePair>& recycled) {
  for (const auto& p : recycled) {
    corpus.add(p);
    if (const auto* a = corpus.attributes(p.flipped_from)) {
      auto attrs = *a;
      attrs.pair_id = p.id;
      corpus.set_attributes(std::move(attrs));
    }
    if (const auto* e = corpus.embeddings(p.flipped_from))
      corpus.set_embeddings(p.id, PairEmbeddings{e->context, e->rejected, e->chosen});
  }
}

std::vector<std::string> training_ids(const PoolLedger& ledger, const std::vector<std::string>& recycled_ids,
                                      bool use_recycled) {
  auto ids = ledger.snapshot(Pool::silver);
  auto retained = ledger.snapshot(Pool::retained);
  ids.insert(ids.end(), retained.begin(), retained.end());
  if (use_recycled) ids.insert(ids.end(), recycled_ids.begin(), recycled_ids.end());
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Run directory

RunDir::RunDir(fs::path root) : root_(std::move(root)) {}

void RunDir::create_layout() const {
  for (const char* d : {"pairs", "attrs", "ledgers", "checkpoints", "manifests", "queues"}) fs::create_directories(root_ / d);
}

void RunDir::write_store(const Corpus& corpus, const std::string& provider_tag) const {
  create_layout();
  std::vector<json> pairs, attrs;
  std::map<std::string, PairEmbeddings> embeddings;
  for (const auto& [id, p] : corpus.pairs()) {
    if (!p.flipped_from.empty()) continue;
    pairs.push_back(p);
    if (const auto* a = corpus.attributes(id)) attrs.push_back(*a);
    if (const auto* e = corpus.embeddings(id)) embeddings.emplace(id, *e);
  }
  write_jsonl(pairs_file(), pairs);
  write_jsonl(attrs_file(), attrs);
  if (!embeddings.empty()) embed::save_pair_embeddings(embeddings_file(), provider_tag, embeddings);
}

void RunDir::attach_sinks(PoolLedger& ledger) const {
  auto lf = ledger_file();
  auto vf = verdicts_file();
  ledger.set_sinks([lf](const LedgerEntry& e) { append_jsonl(lf, e); },
                   [vf](const Verdict& v) { append_jsonl(vf, v); });
}

void RunDir::load(Corpus& corpus, PoolLedger& ledger, std::vector<std::string>* recycled_ids) const {
  if (!fs::exists(pairs_file())) throw std::runtime_error("no pair store in " + root_.string());
  for (const auto& j : read_jsonl(pairs_file())) corpus.add(j.get<PreferencePair>());
  if (fs::exists(attrs_file()))
    for (const auto& j : read_jsonl(attrs_file())) corpus.set_attributes(j.get<AttributeSet>());
  if (fs::exists(embeddings_file()))
    for (auto& [id, e] : embed::load_pair_embeddings(embeddings_file()))
      if (corpus.contains(id)) corpus.set_embeddings(id, std::move(e));

  std::vector<Verdict> verdicts;
  std::vector<LedgerEntry> entries;
  if (fs::exists(verdicts_file()))
    for (const auto& j : read_jsonl(verdicts_file())) verdicts.push_back(j.get<Verdict>());
  if (fs::exists(ledger_file()))
    for (const auto& j : read_jsonl(ledger_file())) entries.push_back(j.get<LedgerEntry>());
  PoolLedger::replay(ledger, verdicts, entries);
  for (const auto& e : entries)
    if (reason_flips_orientation(e.reason)) corpus.flip(e.pair_id);

  if (fs::exists(recycled_file())) {
    std::vector<PreferencePair> recycled;
    for (const auto& j : read_jsonl(recycled_file())) recycled.push_back(j.get<PreferencePair>());
    add_recycled(corpus, recycled);
    if (recycled_ids)
      for (const auto& p : recycled) recycled_ids->push_back(p.id);
  }
  attach_sinks(ledger);
}

void RunDir::append_votes(const std::vector<judge::VoteRecord>& votes) const {
  if (votes.empty()) return;
  std::ofstream os(votes_file(), std::ios::app | std::ios::binary);
  if (!os) throw std::runtime_error("cannot append to " + votes_file().string());
  for (const auto& v : votes) os << json(v).dump() << '\n';
}

void RunDir::write_manifest(const RunManifest& m) const {
  fs::create_directories(manifests_dir());
  std::string name = std::string(m.stage == Stage::stage1 ? "stage1" : "stage2") + "-iter" + std::to_string(m.iteration);
  write_text(manifests_dir() / (name + ".json"), json(m).dump(2) + "\n");
}

std::optional<std::map<std::string, std::string>> RunDir::load_truth() const {
  if (!fs::exists(truth_file())) return std::nullopt;
  std::map<std::string, std::string> truth;
  for (const auto& j : read_jsonl(truth_file())) truth[j.at("pair_id").get<std::string>()] = j.at("better").get<std::string>();
  return truth;
}

judge::TruthOracle oracle_from_truth(std::map<std::string, std::string> truth) {
  auto t = std::make_shared<std::map<std::string, std::string>>(std::move(truth));
  return [t](const std::string& pair_id, const std::string& candidate) -> std::optional<bool> {
    auto it = t->find(pair_id);
    if (it == t->end()) return std::nullopt;
    return candidate == it->second;
  };
}

void save_samples(const fs::path& path, const std::vector<eval::PairwiseSample>& samples) {
  std::map<std::string, PairEmbeddings> m;
  char buf[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "s%07zu", i);
    m.emplace(buf, PairEmbeddings{samples[i].chosen, samples[i].chosen, samples[i].rejected});
  }
  embed::save_pair_embeddings(path, "samples", m);
}

std::vector<eval::PairwiseSample> load_samples(const fs::path& path) {
  std::vector<eval::PairwiseSample> out;
  for (auto& [id, e] : embed::load_pair_embeddings(path))
    out.push_back(eval::PairwiseSample{std::move(e.chosen), std::move(e.rejected), 1.0});
  return out;
}

}  // namespace prefcurate::curate
