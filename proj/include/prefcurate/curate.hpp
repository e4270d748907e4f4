#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prefcurate/btrm.hpp"
#include "prefcurate/core.hpp"
#include "prefcurate/eval.hpp"
#include "prefcurate/ingest.hpp"
#include "prefcurate/judge.hpp"
#include "prefcurate/retrieval.hpp"

namespace prefcurate::curate {

struct CurationConfig {
  std::uint64_t rng_seed = 0;
  std::size_t seed_size = 200;
  double seed_human_ratio = 0.1;
  double human_ratio = 0.1;  // share of each Stage-1 queue routed to humans
  int k_max = retrieval::kDefaultKMax;
  int samples_per_model = 5;
  int iterations = 3;
  std::size_t max_in_flight = 4;
  int max_retries = 2;
  std::size_t min_gold = 10;
  bool use_recycled = true;
  bool stage2_with_judges = true;
  btrm::TrainConfig train;
  btrm::TrainConfig gold_train;

  void validate() const;
};

json to_json(const CurationConfig& c);
CurationConfig curation_config_from_json(const json& j, CurationConfig base = {});

/// Chosen/rejected refs for the given pairs; throws if one lacks embeddings.
std::vector<btrm::PairRef> pair_refs(const Corpus& corpus, const std::vector<std::string>& ids);

// ---------------------------------------------------------------------------
// Human routing

class HumanVerifier {
 public:
  virtual ~HumanVerifier() = default;
  /// A verdict now, or nullopt when the pair was handed off (e.g. to the
  /// annotation service) and will be decided later.
  virtual std::optional<Verdict> verify(const Corpus& corpus, const std::string& pair_id) = 0;
};

/// Answers from a truth oracle: confirm when the stored chosen is the better
/// response, swap when it is the worse, discard when the truth is unknown.
class StubHumanVerifier final : public HumanVerifier {
 public:
  StubHumanVerifier(judge::TruthOracle oracle, std::string annotator = "stub-human")
      : oracle_(std::move(oracle)), annotator_(std::move(annotator)) {}
  std::optional<Verdict> verify(const Corpus& corpus, const std::string& pair_id) override;

 private:
  judge::TruthOracle oracle_;
  std::string annotator_;
  std::int64_t clock_ = 0;
};

/// Collects ids for the annotation service instead of deciding.
class QueueRouter final : public HumanVerifier {
 public:
  std::optional<Verdict> verify(const Corpus&, const std::string& pair_id) override {
    routed.push_back(pair_id);
    return std::nullopt;
  }
  std::vector<std::string> routed;
};

// ---------------------------------------------------------------------------
// Stage 1

struct SeedReport {
  std::vector<std::string> human_ids;
  std::vector<std::string> judge_ids;
  std::size_t to_gold = 0;
  std::size_t to_silver = 0;
  std::size_t to_discarded = 0;
  std::size_t routed = 0;
  std::size_t deferred = 0;
};

/// Samples seed_size unverified pairs; seed_human_ratio of them go to the
/// human verifier, the rest to the judge ensemble without exemplars.
SeedReport initialize_seed(Corpus& corpus, PoolLedger& ledger, const CurationConfig& config, HumanVerifier& humans,
                           std::span<judge::JudgeProvider* const> judges);

struct Stage1State {
  int iteration = 0;  // completed iterations
  std::optional<btrm::RewardModel> best_model;
  double best_gold_accuracy = 0.0;
  std::vector<std::pair<int, double>> sanity_scores;  // reference only, never gating
  std::vector<double> gold_accuracy;                  // per iteration
};

json to_json(const Stage1State& s);

struct IterationReport {
  int iteration = 0;
  btrm::TrainResult train;
  retrieval::Selection selection;
  std::vector<std::string> human_slice;
  std::vector<std::string> judge_slice;
  std::vector<std::string> routed;  // human slice handed off without a verdict
  std::size_t to_gold = 0;
  std::size_t to_silver = 0;
  std::size_t to_discarded = 0;
  std::vector<std::string> deferred;
  std::vector<judge::VoteRecord> votes;
  bool no_new_data = false;
  std::optional<double> sanity;
};

/// Train on silver with checkpoint selection on gold, retrieve unverified
/// pairs near the model's mistakes, then route the queue to humans and judges.
IterationReport stage1_iteration(Stage1State& state, Corpus& corpus, PoolLedger& ledger, const CurationConfig& config,
                                 HumanVerifier& humans, std::span<judge::JudgeProvider* const> judges,
                                 const std::vector<eval::PairwiseSample>* sanity = nullptr);

// ---------------------------------------------------------------------------
// Stage 2

struct ConfidenceSplit {
  std::vector<std::string> retained_asis;  // p > 0.5
  std::vector<std::string> reannotation;   // p <= 0.5
};

ConfidenceSplit confidence_filter(const btrm::RewardModel& best, const Corpus& corpus,
                                  const std::vector<std::string>& pool);

struct GoldModel {
  btrm::RewardModel model;
  std::vector<std::string> trained_on;  // human-verified gold ids
  double gold_accuracy = 0.0;
};

/// Trains only on pairs that carry a human verdict and sit in gold. Any id
/// failing that, or fewer than min_gold ids, is an error.
GoldModel train_gold_model(const Corpus& corpus, const PoolLedger& ledger, const std::vector<std::string>& gold_ids,
                           const btrm::TrainConfig& config, std::size_t min_gold);

/// gold p > 0.5 AND (best p > 0.5 OR judge says chosen_stands).
bool consistency_keep(double gold_p, double best_p, std::optional<judge::ModelVerdict> judge_verdict);

struct ConsistencySplit {
  std::vector<std::string> retained;
  std::vector<std::string> discarded;
};

ConsistencySplit consistency_retain(const btrm::RewardModel& gold_model, const btrm::RewardModel& best,
                                    const std::map<std::string, judge::ModelVerdict>& judge_verdicts,
                                    const Corpus& corpus, const std::vector<std::string>& pool);

struct Stage2Report {
  ConfidenceSplit confidence;
  std::map<std::string, judge::ModelVerdict> judge_verdicts;
  std::vector<judge::VoteRecord> votes;
  std::vector<std::string> deferred;
  std::size_t to_retained = 0;
  std::size_t to_silver = 0;
  std::size_t to_discarded = 0;
  bool judges_used = false;
};

/// Confidence filter, optional judge re-annotation of the low-confidence
/// share, then gold-consistency retention over the whole unverified pool.
Stage2Report run_stage2(Corpus& corpus, PoolLedger& ledger, const btrm::RewardModel& best, const GoldModel& gold,
                        std::span<judge::JudgeProvider* const> judges, const CurationConfig& config, int iteration);

// ---------------------------------------------------------------------------
// Recycling

/// One flipped copy per source pair with a fresh id and flipped_from set.
/// Copies whose dedup key is already known to `seen` are dropped; survivors
/// are recorded in it.
std::vector<PreferencePair> recycle_flipped(const Corpus& corpus, const std::vector<std::string>& source_ids,
                                            ingest::Deduplicator& seen);

/// Adds recycled pairs to the corpus with flipped embeddings of their sources.
void add_recycled(Corpus& corpus, const std::vector<PreferencePair>& recycled);

/// silver + retained (+ recycled when enabled).
std::vector<std::string> training_ids(const PoolLedger& ledger, const std::vector<std::string>& recycled_ids,
                                      bool use_recycled);

// ---------------------------------------------------------------------------
// Run directory

/// One experiment on disk:
///   pairs/pairs.jsonl pairs/recycled.jsonl pairs/embeddings.bin
///   attrs/attrs.jsonl
///   ledgers/ledger.jsonl ledgers/verdicts.jsonl ledgers/votes.jsonl
///   checkpoints/ manifests/ queues/
/// Pair files keep the ingested orientation; swaps are replayed from the ledger.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path pairs_file() const { return root_ / "pairs" / "pairs.jsonl"; }
  std::filesystem::path recycled_file() const { return root_ / "pairs" / "recycled.jsonl"; }
  std::filesystem::path embeddings_file() const { return root_ / "pairs" / "embeddings.bin"; }
  std::filesystem::path attrs_file() const { return root_ / "attrs" / "attrs.jsonl"; }
  std::filesystem::path ledger_file() const { return root_ / "ledgers" / "ledger.jsonl"; }
  std::filesystem::path verdicts_file() const { return root_ / "ledgers" / "verdicts.jsonl"; }
  std::filesystem::path votes_file() const { return root_ / "ledgers" / "votes.jsonl"; }
  std::filesystem::path checkpoints_dir() const { return root_ / "checkpoints"; }
  std::filesystem::path manifests_dir() const { return root_ / "manifests"; }
  std::filesystem::path queues_dir() const { return root_ / "queues"; }
  std::filesystem::path state_file() const { return root_ / "state.json"; }
  std::filesystem::path config_file() const { return root_ / "config.json"; }
  std::filesystem::path truth_file() const { return root_ / "truth.jsonl"; }
  std::filesystem::path sanity_file() const { return root_ / "sanity.bin"; }
  std::filesystem::path heldout_file() const { return root_ / "heldout.bin"; }

  void create_layout() const;

  /// Writes a fresh pair store, attributes and embeddings (overwrites).
  void write_store(const Corpus& corpus, const std::string& provider_tag) const;

  /// Loads pairs, attrs, embeddings and recycled shard, replays the ledger
  /// (flipping swapped pairs), then attaches file sinks so later transitions
  /// are appended.
  void load(Corpus& corpus, PoolLedger& ledger, std::vector<std::string>* recycled_ids = nullptr) const;

  void attach_sinks(PoolLedger& ledger) const;
  void append_votes(const std::vector<judge::VoteRecord>& votes) const;
  void write_manifest(const RunManifest& m) const;

  /// pair_id -> truly better response text, when the run was synthesized.
  std::optional<std::map<std::string, std::string>> load_truth() const;

 private:
  std::filesystem::path root_;
};

judge::TruthOracle oracle_from_truth(std::map<std::string, std::string> truth);

/// Samples with context = chosen, saved under the pair-embedding cache keys.
void save_samples(const std::filesystem::path& path, const std::vector<eval::PairwiseSample>& samples);
std::vector<eval::PairwiseSample> load_samples(const std::filesystem::path& path);

}  // namespace prefcurate::curate
