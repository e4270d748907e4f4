#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "prefcurate/io.hpp"

namespace prefcurate {

enum class Role { user, assistant };

struct Turn {
  Role role = Role::user;
  std::string content;

  bool operator==(const Turn&) const = default;
};

/// One (conversation, chosen, rejected) instance. The conversation ends with a
/// user turn; chosen/rejected are the two candidate final assistant responses.
struct PreferencePair {
  std::string id;
  std::vector<Turn> conversation;
  std::string chosen;
  std::string rejected;
  std::string source;
  std::int64_t created_at = 0;
  std::string flipped_from;  // non-empty for recycled pairs

  bool operator==(const PreferencePair&) const = default;
};

enum class Objectivity { objective, subjective };
enum class Controversiality { low, medium, high };

struct AttributeSet {
  std::string pair_id;
  std::string task_category;
  Objectivity objectivity = Objectivity::subjective;
  Controversiality controversiality = Controversiality::medium;
  std::vector<std::string> desired_attributes;
  std::string annotation_guideline;

  bool operator==(const AttributeSet&) const = default;
};

enum class VerdictKind { human, judge, preverify };
enum class Outcome { confirm, swap, discard };

struct Verdict {
  std::string pair_id;
  VerdictKind kind = VerdictKind::judge;
  std::string model_id;  // judge model or annotator id
  Outcome outcome = Outcome::confirm;
  std::optional<double> confidence;
  std::optional<std::string> rationale;
  std::int64_t timestamp = 0;
};

enum class Pool { unverified, gold, silver, discarded, retained };

struct EmbeddingVector {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  double norm() const;
  bool operator==(const EmbeddingVector&) const = default;
};

/// Context embedding of (x, a) plus response embeddings in the pair's current
/// orientation.
struct PairEmbeddings {
  EmbeddingVector context;
  EmbeddingVector chosen;
  EmbeddingVector rejected;
};

std::string_view to_string(Role r);
std::string_view to_string(Objectivity o);
std::string_view to_string(Controversiality c);
std::string_view to_string(VerdictKind k);
std::string_view to_string(Outcome o);
std::string_view to_string(Pool p);
Role role_from_string(std::string_view s);
Objectivity objectivity_from_string(std::string_view s);
Controversiality controversiality_from_string(std::string_view s);
VerdictKind verdict_kind_from_string(std::string_view s);
Outcome outcome_from_string(std::string_view s);
Pool pool_from_string(std::string_view s);

void to_json(json& j, const Turn& t);
void from_json(const json& j, Turn& t);
void to_json(json& j, const PreferencePair& p);
void from_json(const json& j, PreferencePair& p);
void to_json(json& j, const AttributeSet& a);
void from_json(const json& j, AttributeSet& a);
void to_json(json& j, const Verdict& v);
void from_json(const json& j, Verdict& v);

/// Attributes substituted when a record arrives without any.
AttributeSet default_attributes(const std::string& pair_id);

/// Ledger reason codes. Reasons ending in "-swap" flip the stored orientation.
namespace reason {
inline constexpr std::string_view ingest = "ingest";
inline constexpr std::string_view human_confirm = "human-confirm";
inline constexpr std::string_view human_swap = "human-swap";
inline constexpr std::string_view human_discard = "human-discard";
inline constexpr std::string_view judge_confirm = "judge-confirm";
inline constexpr std::string_view judge_swap = "judge-swap";
inline constexpr std::string_view judge_abstain = "judge-abstain";
inline constexpr std::string_view confidence_pass = "confidence-pass";
inline constexpr std::string_view consistency_pass = "consistency-pass";
inline constexpr std::string_view consistency_fail = "consistency-fail";
inline constexpr std::string_view gold_consistency = "stage2-gold-consistency";
}  // namespace reason

bool reason_flips_orientation(std::string_view reason);

struct LedgerEntry {
  std::string pair_id;
  Pool pool = Pool::unverified;  // destination pool
  int iteration = 0;
  std::string reason;
  std::int64_t ts = 0;

  bool operator==(const LedgerEntry&) const = default;
};

void to_json(json& j, const LedgerEntry& e);
void from_json(const json& j, LedgerEntry& e);

class LedgerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TransitionResult { applied, replayed };

/// Append-only membership log over all pools. Current membership is a view
/// derived from the entries; every pair is in exactly one pool at a time.
/// Writers are serialized; snapshots may be taken concurrently.
class PoolLedger {
 public:
  using Clock = std::function<std::int64_t()>;
  using Sink = std::function<void(const LedgerEntry&)>;
  using VerdictSink = std::function<void(const Verdict&)>;

  /// Default clock is logical: the entry sequence number.
  PoolLedger();
  explicit PoolLedger(Clock clock);

  PoolLedger(const PoolLedger&) = delete;
  PoolLedger& operator=(const PoolLedger&) = delete;

  void set_sinks(Sink entry_sink, VerdictSink verdict_sink);

  /// Enter a new pair into the unverified pool. Idempotent for an identical
  /// replay; errors if the id is already known otherwise.
  TransitionResult admit(const std::string& pair_id, int iteration, std::string_view why = reason::ingest);

  /// Throws if a second human verdict arrives for the same pair.
  void record_verdict(const Verdict& v);

  TransitionResult transition(const std::string& pair_id, Pool from, Pool to, std::string_view why, int iteration);

  std::vector<std::string> snapshot(Pool pool) const;
  std::optional<Pool> pool_of(const std::string& pair_id) const;
  std::size_t size(Pool pool) const;
  std::map<Pool, std::size_t> sizes() const;
  bool has_human_verdict(const std::string& pair_id) const;
  bool has_judge_verdict(const std::string& pair_id) const;
  std::optional<Verdict> human_verdict(const std::string& pair_id) const;
  std::vector<LedgerEntry> entries() const;
  std::vector<Verdict> verdicts() const;

  /// Rebuild a ledger from persisted logs; rules are re-checked on the way.
  static void replay(PoolLedger& into, const std::vector<Verdict>& verdicts, const std::vector<LedgerEntry>& entries);

 private:
  void append_locked(LedgerEntry e);
  void apply_locked(const LedgerEntry& e);

  mutable std::shared_mutex mu_;
  Clock clock_;
  Sink sink_;
  VerdictSink verdict_sink_;
  std::vector<LedgerEntry> entries_;
  std::vector<Verdict> verdicts_;
  std::map<std::string, Pool> membership_;
  std::map<std::string, std::size_t> last_entry_;
  std::map<std::string, std::size_t> admitted_at_;
  std::map<std::string, Verdict> human_verdicts_;
  std::set<std::string> judged_;
  std::map<Pool, std::set<std::string>> members_;
  bool replaying_ = false;
};

/// In-memory pair store with attributes and embeddings.
class Corpus {
 public:
  void add(PreferencePair pair);
  void set_attributes(AttributeSet attrs);
  void set_embeddings(const std::string& pair_id, PairEmbeddings e);

  bool contains(const std::string& id) const { return pairs_.count(id) > 0; }
  const PreferencePair& pair(const std::string& id) const;
  const AttributeSet* attributes(const std::string& id) const;
  const PairEmbeddings* embeddings(const std::string& id) const;
  /// Exchange chosen and rejected (text and embeddings).
  void flip(const std::string& id);

  const std::map<std::string, PreferencePair>& pairs() const { return pairs_; }
  const std::map<std::string, AttributeSet>& all_attributes() const { return attrs_; }
  const std::map<std::string, PairEmbeddings>& all_embeddings() const { return embeddings_; }
  std::size_t size() const { return pairs_.size(); }

 private:
  std::map<std::string, PreferencePair> pairs_;
  std::map<std::string, AttributeSet> attrs_;
  std::map<std::string, PairEmbeddings> embeddings_;
};

/// Records a human verdict and routes the pair: confirm -> gold, swap ->
/// gold with the stored orientation flipped, discard -> discarded.
void apply_human_verdict(Corpus& corpus, PoolLedger& ledger, const Verdict& verdict, int iteration,
                         Pool from = Pool::unverified);

enum class Stage { stage1, stage2 };

struct RunManifest {
  std::string run_id;
  Stage stage = Stage::stage1;
  int iteration = 0;
  std::uint64_t rng_seed = 0;
  std::string config_digest;
  std::map<Pool, std::size_t> counts_before;
  std::map<Pool, std::size_t> counts_after;
  json extra = json::object();
};

void to_json(json& j, const RunManifest& m);
void from_json(const json& j, RunManifest& m);

/// Deterministic digest of a configuration document (keys are sorted by the
/// JSON serializer, so insertion order does not matter).
std::string config_digest(const json& config);

/// Checks that ledger-derived deltas reconcile with the manifest counts.
bool manifest_reconciles(const RunManifest& m, const std::vector<LedgerEntry>& entries_before,
                         const std::vector<LedgerEntry>& entries_after);

}  // namespace prefcurate
