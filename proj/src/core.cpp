#include "prefcurate/core.hpp"

#include <array>
#include <cmath>

#include "prefcurate/hash.hpp"

namespace prefcurate {

double EmbeddingVector::norm() const {
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::string_view, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<E>(i);
  throw std::invalid_argument(std::string("unknown ") + what + ": '" + std::string(s) + "'");
}

constexpr std::array<std::string_view, 2> kRoles{"user", "assistant"};
constexpr std::array<std::string_view, 2> kObjectivity{"objective", "subjective"};
constexpr std::array<std::string_view, 3> kControversiality{"low", "medium", "high"};
constexpr std::array<std::string_view, 3> kVerdictKinds{"human", "judge", "preverify"};
constexpr std::array<std::string_view, 3> kOutcomes{"confirm", "swap", "discard"};
constexpr std::array<std::string_view, 5> kPools{"unverified", "gold", "silver", "discarded", "retained"};

}  // namespace

std::string_view to_string(Role r) { return kRoles[static_cast<int>(r)]; }
std::string_view to_string(Objectivity o) { return kObjectivity[static_cast<int>(o)]; }
std::string_view to_string(Controversiality c) { return kControversiality[static_cast<int>(c)]; }
std::string_view to_string(VerdictKind k) { return kVerdictKinds[static_cast<int>(k)]; }
std::string_view to_string(Outcome o) { return kOutcomes[static_cast<int>(o)]; }
std::string_view to_string(Pool p) { return kPools[static_cast<int>(p)]; }
Role role_from_string(std::string_view s) { return parse_enum<Role>(s, kRoles, "role"); }
Objectivity objectivity_from_string(std::string_view s) {
  return parse_enum<Objectivity>(s, kObjectivity, "objectivity");
}
Controversiality controversiality_from_string(std::string_view s) {
  return parse_enum<Controversiality>(s, kControversiality, "controversiality");
}
VerdictKind verdict_kind_from_string(std::string_view s) {
  return parse_enum<VerdictKind>(s, kVerdictKinds, "verdict source");
}
Outcome outcome_from_string(std::string_view s) { return parse_enum<Outcome>(s, kOutcomes, "outcome"); }
Pool pool_from_string(std::string_view s) { return parse_enum<Pool>(s, kPools, "pool"); }

void to_json(json& j, const Turn& t) { j = json{{"role", to_string(t.role)}, {"content", t.content}}; }

void from_json(const json& j, Turn& t) {
  t.role = role_from_string(j.at("role").get<std::string>());
  t.content = j.at("content").get<std::string>();
}

void to_json(json& j, const PreferencePair& p) {
  j = json{{"id", p.id},           {"conversation", p.conversation}, {"chosen", p.chosen},
           {"rejected", p.rejected}, {"source", p.source},             {"created_at", p.created_at}};
  if (!p.flipped_from.empty()) j["flipped_from"] = p.flipped_from;
}

void from_json(const json& j, PreferencePair& p) {
  p.id = j.at("id").get<std::string>();
  p.conversation = j.at("conversation").get<std::vector<Turn>>();
  p.chosen = j.at("chosen").get<std::string>();
  p.rejected = j.at("rejected").get<std::string>();
  p.source = j.value("source", "");
  p.created_at = j.value("created_at", std::int64_t{0});
  p.flipped_from = j.value("flipped_from", "");
}

void to_json(json& j, const AttributeSet& a) {
  j = json{{"pair_id", a.pair_id},
           {"task_category", a.task_category},
           {"objectivity", to_string(a.objectivity)},
           {"controversiality", to_string(a.controversiality)},
           {"desired_attributes", a.desired_attributes},
           {"annotation_guideline", a.annotation_guideline}};
}

void from_json(const json& j, AttributeSet& a) {
  a.pair_id = j.value("pair_id", "");
  a.task_category = j.at("task_category").get<std::string>();
  a.objectivity = objectivity_from_string(j.at("objectivity").get<std::string>());
  a.controversiality = controversiality_from_string(j.at("controversiality").get<std::string>());
  a.desired_attributes = j.value("desired_attributes", std::vector<std::string>{});
  a.annotation_guideline = j.at("annotation_guideline").get<std::string>();
  if (a.annotation_guideline.empty()) throw std::invalid_argument("annotation_guideline must be non-empty");
}

void to_json(json& j, const Verdict& v) {
  j = json{{"pair_id", v.pair_id},
           {"source", to_string(v.kind)},
           {"model_id", v.model_id},
           {"outcome", to_string(v.outcome)},
           {"timestamp", v.timestamp}};
  if (v.confidence) j["confidence"] = *v.confidence;
  if (v.rationale) j["rationale"] = *v.rationale;
}

void from_json(const json& j, Verdict& v) {
  v.pair_id = j.at("pair_id").get<std::string>();
  v.kind = verdict_kind_from_string(j.at("source").get<std::string>());
  v.model_id = j.value("model_id", "");
  v.outcome = outcome_from_string(j.at("outcome").get<std::string>());
  v.timestamp = j.value("timestamp", std::int64_t{0});
  if (j.contains("confidence")) v.confidence = j["confidence"].get<double>();
  if (j.contains("rationale")) v.rationale = j["rationale"].get<std::string>();
}

AttributeSet default_attributes(const std::string& pair_id) {
  AttributeSet a;
  a.pair_id = pair_id;
  a.task_category = "general";
  a.objectivity = Objectivity::subjective;
  a.controversiality = Controversiality::medium;
  a.desired_attributes = {"helpful", "accurate"};
  a.annotation_guideline = "Prefer the response that answers the final user turn more helpfully and accurately.";
  return a;
}

bool reason_flips_orientation(std::string_view r) { return r.ends_with("-swap"); }

void to_json(json& j, const LedgerEntry& e) {
  j = json{{"pair_id", e.pair_id}, {"pool", to_string(e.pool)}, {"iteration", e.iteration},
           {"reason", e.reason},   {"ts", e.ts}};
}

void from_json(const json& j, LedgerEntry& e) {
  e.pair_id = j.at("pair_id").get<std::string>();
  e.pool = pool_from_string(j.at("pool").get<std::string>());
  e.iteration = j.at("iteration").get<int>();
  e.reason = j.at("reason").get<std::string>();
  e.ts = j.value("ts", std::int64_t{0});
}

// ---------------------------------------------------------------------------
// PoolLedger

PoolLedger::PoolLedger() : clock_([this] { return static_cast<std::int64_t>(entries_.size()); }) {}

PoolLedger::PoolLedger(Clock clock) : clock_(std::move(clock)) {}

void PoolLedger::set_sinks(Sink entry_sink, VerdictSink verdict_sink) {
  std::unique_lock lock(mu_);
  sink_ = std::move(entry_sink);
  verdict_sink_ = std::move(verdict_sink);
}

void PoolLedger::append_locked(LedgerEntry e) {
  if (!replaying_) e.ts = clock_();
  apply_locked(e);
  entries_.push_back(e);
  last_entry_[e.pair_id] = entries_.size() - 1;
  admitted_at_.try_emplace(e.pair_id, entries_.size() - 1);
  if (sink_ && !replaying_) sink_(e);
}

void PoolLedger::apply_locked(const LedgerEntry& e) {
  auto it = membership_.find(e.pair_id);
  if (it != membership_.end()) members_[it->second].erase(e.pair_id);
  membership_[e.pair_id] = e.pool;
  members_[e.pool].insert(e.pair_id);
}

TransitionResult PoolLedger::admit(const std::string& pair_id, int iteration, std::string_view why) {
  std::unique_lock lock(mu_);
  if (auto it = admitted_at_.find(pair_id); it != admitted_at_.end()) {
    const auto& first = entries_[it->second];
    if (first.reason == why && first.iteration == iteration) return TransitionResult::replayed;
    throw LedgerError("pair already admitted: " + pair_id);
  }
  append_locked(LedgerEntry{pair_id, Pool::unverified, iteration, std::string(why), 0});
  return TransitionResult::applied;
}

void PoolLedger::record_verdict(const Verdict& v) {
  std::unique_lock lock(mu_);
  if (v.kind == VerdictKind::human) {
    if (human_verdicts_.count(v.pair_id)) throw LedgerError("second human verdict for " + v.pair_id);
    human_verdicts_.emplace(v.pair_id, v);
  } else if (v.kind == VerdictKind::judge) {
    judged_.insert(v.pair_id);
  }
  verdicts_.push_back(v);
  if (verdict_sink_ && !replaying_) verdict_sink_(v);
}

TransitionResult PoolLedger::transition(const std::string& pair_id, Pool from, Pool to, std::string_view why,
                                        int iteration) {
  std::unique_lock lock(mu_);
  auto mit = membership_.find(pair_id);
  if (mit == membership_.end()) throw LedgerError("unknown pair: " + pair_id);
  if (mit->second == to) {
    const auto& last = entries_[last_entry_.at(pair_id)];
    if (last.reason == why && last.iteration == iteration) return TransitionResult::replayed;
  }
  if (mit->second != from)
    throw LedgerError("pair " + pair_id + " is in " + std::string(to_string(mit->second)) + ", not " +
                      std::string(to_string(from)));
  if (to == Pool::unverified) throw LedgerError("pairs cannot return to the unverified pool");
  if (to == Pool::gold && !human_verdicts_.count(pair_id) && why != reason::gold_consistency)
    throw LedgerError("gold insertion without a human verdict: " + pair_id);
  if (to == Pool::silver && !judged_.count(pair_id))
    throw LedgerError("silver insertion without a judge verdict: " + pair_id);
  append_locked(LedgerEntry{pair_id, to, iteration, std::string(why), 0});
  return TransitionResult::applied;
}

std::vector<std::string> PoolLedger::snapshot(Pool pool) const {
  std::shared_lock lock(mu_);
  auto it = members_.find(pool);
  if (it == members_.end()) return {};
  return {it->second.begin(), it->second.end()};
}

std::optional<Pool> PoolLedger::pool_of(const std::string& pair_id) const {
  std::shared_lock lock(mu_);
  auto it = membership_.find(pair_id);
  if (it == membership_.end()) return std::nullopt;
  return it->second;
}

std::size_t PoolLedger::size(Pool pool) const {
  std::shared_lock lock(mu_);
  auto it = members_.find(pool);
  return it == members_.end() ? 0 : it->second.size();
}

std::map<Pool, std::size_t> PoolLedger::sizes() const {
  std::shared_lock lock(mu_);
  std::map<Pool, std::size_t> out;
  for (auto p : {Pool::unverified, Pool::gold, Pool::silver, Pool::discarded, Pool::retained}) {
    auto it = members_.find(p);
    out[p] = it == members_.end() ? 0 : it->second.size();
  }
  return out;
}

bool PoolLedger::has_human_verdict(const std::string& pair_id) const {
  std::shared_lock lock(mu_);
  return human_verdicts_.count(pair_id) > 0;
}

bool PoolLedger::has_judge_verdict(const std::string& pair_id) const {
  std::shared_lock lock(mu_);
  return judged_.count(pair_id) > 0;
}

std::optional<Verdict> PoolLedger::human_verdict(const std::string& pair_id) const {
  std::shared_lock lock(mu_);
  auto it = human_verdicts_.find(pair_id);
  if (it == human_verdicts_.end()) return std::nullopt;
  return it->second;
}

std::vector<LedgerEntry> PoolLedger::entries() const {
  std::shared_lock lock(mu_);
  return entries_;
}

std::vector<Verdict> PoolLedger::verdicts() const {
  std::shared_lock lock(mu_);
  return verdicts_;
}

void PoolLedger::replay(PoolLedger& into, const std::vector<Verdict>& verdicts,
                        const std::vector<LedgerEntry>& entries) {
  {
    std::unique_lock lock(into.mu_);
    into.replaying_ = true;
  }
  try {
    for (const auto& v : verdicts) into.record_verdict(v);
    for (const auto& e : entries) {
      std::unique_lock lock(into.mu_);
      auto mit = into.membership_.find(e.pair_id);
      if (e.pool == Pool::unverified) {
        if (mit != into.membership_.end()) throw LedgerError("replay: pair admitted twice: " + e.pair_id);
      } else {
        if (mit == into.membership_.end()) throw LedgerError("replay: unknown pair " + e.pair_id);
        if (e.pool == Pool::gold && !into.human_verdicts_.count(e.pair_id) && e.reason != reason::gold_consistency)
          throw LedgerError("replay: gold entry without human verdict: " + e.pair_id);
      }
      into.append_locked(e);
    }
  } catch (...) {
    std::unique_lock lock(into.mu_);
    into.replaying_ = false;
    throw;
  }
  std::unique_lock lock(into.mu_);
  into.replaying_ = false;
}

// ---------------------------------------------------------------------------
// Corpus

void Corpus::add(PreferencePair pair) {
  if (pairs_.count(pair.id)) throw std::invalid_argument("duplicate pair id: " + pair.id);
  auto id = pair.id;
  pairs_.emplace(std::move(id), std::move(pair));
}

void Corpus::set_attributes(AttributeSet attrs) {
  if (!pairs_.count(attrs.pair_id)) throw std::invalid_argument("attributes for unknown pair: " + attrs.pair_id);
  if (attrs.annotation_guideline.empty()) throw std::invalid_argument("empty annotation guideline: " + attrs.pair_id);
  auto id = attrs.pair_id;
  attrs_.insert_or_assign(std::move(id), std::move(attrs));
}

void Corpus::set_embeddings(const std::string& pair_id, PairEmbeddings e) {
  if (!pairs_.count(pair_id)) throw std::invalid_argument("embeddings for unknown pair: " + pair_id);
  embeddings_.insert_or_assign(pair_id, std::move(e));
}

const PreferencePair& Corpus::pair(const std::string& id) const {
  auto it = pairs_.find(id);
  if (it == pairs_.end()) throw std::out_of_range("unknown pair: " + id);
  return it->second;
}

const AttributeSet* Corpus::attributes(const std::string& id) const {
  auto it = attrs_.find(id);
  return it == attrs_.end() ? nullptr : &it->second;
}

const PairEmbeddings* Corpus::embeddings(const std::string& id) const {
  auto it = embeddings_.find(id);
  return it == embeddings_.end() ? nullptr : &it->second;
}

void Corpus::flip(const std::string& id) {
  auto it = pairs_.find(id);
  if (it == pairs_.end()) throw std::out_of_range("unknown pair: " + id);
  std::swap(it->second.chosen, it->second.rejected);
  if (auto e = embeddings_.find(id); e != embeddings_.end()) std::swap(e->second.chosen, e->second.rejected);
}

void apply_human_verdict(Corpus& corpus, PoolLedger& ledger, const Verdict& verdict, int iteration, Pool from) {
  if (verdict.kind != VerdictKind::human) throw std::invalid_argument("apply_human_verdict: not a human verdict");
  if (ledger.pool_of(verdict.pair_id) != from)
    throw LedgerError("pair " + verdict.pair_id + " is not in " + std::string(to_string(from)));
  ledger.record_verdict(verdict);
  switch (verdict.outcome) {
    case Outcome::confirm:
      ledger.transition(verdict.pair_id, from, Pool::gold, reason::human_confirm, iteration);
      break;
    case Outcome::swap:
      corpus.flip(verdict.pair_id);
      ledger.transition(verdict.pair_id, from, Pool::gold, reason::human_swap, iteration);
      break;
    case Outcome::discard:
      ledger.transition(verdict.pair_id, from, Pool::discarded, reason::human_discard, iteration);
      break;
  }
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

json counts_to_json(const std::map<Pool, std::size_t>& counts) {
  json j = json::object();
  for (const auto& [p, n] : counts) j[std::string(to_string(p))] = n;
  return j;
}

std::map<Pool, std::size_t> counts_from_json(const json& j) {
  std::map<Pool, std::size_t> out;
  for (const auto& [k, v] : j.items()) out[pool_from_string(k)] = v.get<std::size_t>();
  return out;
}

std::map<Pool, std::size_t> replay_counts(const std::vector<LedgerEntry>& entries) {
  std::map<std::string, Pool> membership;
  for (const auto& e : entries) membership[e.pair_id] = e.pool;
  std::map<Pool, std::size_t> out;
  for (auto p : {Pool::unverified, Pool::gold, Pool::silver, Pool::discarded, Pool::retained}) out[p] = 0;
  for (const auto& [id, p] : membership) ++out[p];
  return out;
}

}  // namespace

void to_json(json& j, const RunManifest& m) {
  j = json{{"run_id", m.run_id},
           {"stage", m.stage == Stage::stage1 ? "stage1" : "stage2"},
           {"iteration", m.iteration},
           {"rng_seed", m.rng_seed},
           {"config_digest", m.config_digest},
           {"counts_before", counts_to_json(m.counts_before)},
           {"counts_after", counts_to_json(m.counts_after)},
           {"extra", m.extra}};
}

void from_json(const json& j, RunManifest& m) {
  m.run_id = j.at("run_id").get<std::string>();
  m.stage = j.at("stage").get<std::string>() == "stage2" ? Stage::stage2 : Stage::stage1;
  m.iteration = j.at("iteration").get<int>();
  m.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  m.config_digest = j.at("config_digest").get<std::string>();
  m.counts_before = counts_from_json(j.at("counts_before"));
  m.counts_after = counts_from_json(j.at("counts_after"));
  m.extra = j.value("extra", json::object());
}

std::string config_digest(const json& config) { return hex64(fnv1a64(config.dump())); }

bool manifest_reconciles(const RunManifest& m, const std::vector<LedgerEntry>& entries_before,
                         const std::vector<LedgerEntry>& entries_after) {
  return replay_counts(entries_before) == m.counts_before && replay_counts(entries_after) == m.counts_after;
}

}  // namespace prefcurate
