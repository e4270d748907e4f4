#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefcurate/core.hpp"
#include "prefcurate/embed.hpp"

namespace prefcurate::judge {

inline constexpr std::size_t kMaxExemplars = 8;

enum class Permutation { identity, swapped };
enum class Vote { candidate1, candidate2, unsure };
enum class ModelVerdict { chosen_stands, swap, abstain };

std::string_view to_string(Permutation p);
std::string_view to_string(Vote v);
std::string_view to_string(ModelVerdict v);
Permutation permutation_from_string(std::string_view s);
Vote vote_from_string(std::string_view s);
ModelVerdict model_verdict_from_string(std::string_view s);

/// Presentation order for a pair, drawn from a generator seeded by
/// (rng_seed, pair_id).
Permutation draw_permutation(std::uint64_t rng_seed, const std::string& pair_id);

/// Which stored response a positional vote refers to:
/// chosen_stands for the stored chosen, swap for the stored rejected.
ModelVerdict resolve_vote(Vote v, Permutation perm);
/// Inverse of resolve_vote for decisive verdicts.
Vote present_verdict(ModelVerdict v, Permutation perm);

struct Exemplar {
  std::string pair_id;
  double cosine = 0.0;

  bool operator==(const Exemplar&) const = default;
};

struct JudgeTask {
  std::string pair_id;
  std::string guideline;
  std::vector<Exemplar> exemplars;
  Permutation permutation = Permutation::identity;
  std::uint64_t rng_seed = 0;
  std::string candidate1;
  std::string candidate2;
  std::string prompt;

  bool operator==(const JudgeTask&) const = default;
};

/// Builds the labeling prompt: guideline, up to eight gold exemplars with
/// their attributes and human labels (highest cosine first), then the target
/// pair under a seeded random order. Throws if the pair has no attributes.
JudgeTask assemble_task(const Corpus& corpus, const std::string& pair_id, std::vector<Exemplar> exemplars,
                        std::uint64_t rng_seed);

/// Majority over decisive samples, mapped back through the permutation;
/// no decisive samples or a tie gives abstain.
ModelVerdict intra_model_aggregate(std::span<const Vote> samples, Permutation perm);

/// Majority over non-abstaining verdicts; tie or all-abstain gives abstain.
ModelVerdict cross_model_merge(std::span<const ModelVerdict> verdicts);

/// Answer extraction: the final non-empty line must be exactly
/// "Candidate 1", "Candidate 2" or "Unsure"; anything else counts as unsure.
Vote parse_vote(std::string_view reply);

class JudgeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class JudgeProvider {
 public:
  virtual ~JudgeProvider() = default;
  virtual std::string model_id() const = 0;
  /// n_samples positional votes for the task. May throw JudgeError.
  /// Implementations must be safe to call from several threads.
  virtual std::vector<Vote> sample(const JudgeTask& task, int n_samples) = 0;
};

/// Returns true when `candidate` is the truly better response of the pair,
/// false when it is the worse one, nullopt when unknown.
using TruthOracle = std::function<std::optional<bool>(const std::string& pair_id, const std::string& candidate)>;

/// Deterministic offline judge. Each sample: with probability position_bias it
/// votes Candidate 1 regardless of content; otherwise with probability
/// unsure_rate it is unsure; otherwise it picks the truly better response
/// with probability accuracy.
class StubJudge final : public JudgeProvider {
 public:
  struct Params {
    std::string model_id = "stub";
    double accuracy = 1.0;
    double position_bias = 0.0;
    double unsure_rate = 0.0;
    std::uint64_t seed = 0;
    bool fail = false;  // every call throws JudgeError
  };

  StubJudge(Params params, TruthOracle oracle) : params_(std::move(params)), oracle_(std::move(oracle)) {}
  std::string model_id() const override { return params_.model_id; }
  std::vector<Vote> sample(const JudgeTask& task, int n_samples) override;

 private:
  Params params_;
  TruthOracle oracle_;
};

/// Wire client: POST {model, prompt, n_samples, temperature} -> {votes: [text]}.
class HttpJudge final : public JudgeProvider {
 public:
  struct Options {
    std::string url;  // http://host:port/path
    std::string model;
    std::string api_key;
    double temperature = 0.7;
    std::chrono::milliseconds timeout{60000};
  };

  explicit HttpJudge(Options opts);
  /// PREFCURATE_JUDGE_URL, PREFCURATE_JUDGE_MODELS (comma separated), PREFCURATE_JUDGE_KEY.
  static std::vector<Options> options_from_env();

  std::string model_id() const override { return opts_.model; }
  std::vector<Vote> sample(const JudgeTask& task, int n_samples) override;

 private:
  Options opts_;
  std::string base_;
  std::string path_;
};

struct VoteRecord {
  std::string pair_id;
  std::string model_id;
  Permutation permutation = Permutation::identity;
  std::vector<Vote> samples;
  ModelVerdict model_verdict = ModelVerdict::abstain;
};

void to_json(json& j, const VoteRecord& r);

struct LabelConfig {
  std::uint64_t rng_seed = 0;
  int samples_per_model = 5;
  std::size_t max_in_flight = 4;
  int max_retries = 2;
  int iteration = 0;
};

struct PairLabel {
  std::string pair_id;
  JudgeTask task;
  std::vector<VoteRecord> records;
  ModelVerdict final_verdict = ModelVerdict::abstain;
};

struct LabelResult {
  std::vector<PairLabel> labels;     // queue order, excludes deferred pairs
  std::vector<std::string> deferred;  // provider failures after retries
  std::size_t to_silver = 0;
  std::size_t to_discarded = 0;
};

/// Runs the judge ensemble over the queue without touching any pool. Gold
/// exemplars are the nearest gold contexts (top 8) from gold_index.
LabelResult collect_verdicts(const std::vector<std::string>& queue, std::span<JudgeProvider* const> providers,
                             const Corpus& corpus, const embed::SimilarityIndex* gold_index,
                             const LabelConfig& config);

/// Records judge verdicts and moves pairs from `from` into silver
/// (chosen_stands, or swap with the stored orientation flipped) or discarded
/// (abstain).
void apply_verdicts(LabelResult& result, Corpus& corpus, PoolLedger& ledger, int iteration,
                    Pool from = Pool::unverified);

LabelResult label_batch(const std::vector<std::string>& queue, std::span<JudgeProvider* const> providers,
                        Corpus& corpus, const embed::SimilarityIndex* gold_index, PoolLedger& ledger,
                        const LabelConfig& config);

}  // namespace prefcurate::judge
