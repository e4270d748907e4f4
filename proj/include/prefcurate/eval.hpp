#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "prefcurate/btrm.hpp"
#include "prefcurate/core.hpp"
#include "prefcurate/embed.hpp"
#include "prefcurate/judge.hpp"

namespace prefcurate::eval {

struct PairwiseSample {
  EmbeddingVector chosen;
  EmbeddingVector rejected;
  double weight = 1.0;
};

struct BonCandidate {
  EmbeddingVector embedding;
  bool correct = false;
};

struct BonGroup {
  std::string id;
  std::vector<BonCandidate> candidates;
};

struct Category {
  std::string name;
  std::vector<PairwiseSample> pairs;
  std::vector<BonGroup> groups;
};

struct EvalSet {
  std::string name;
  std::vector<Category> categories;

  /// Throws on duplicate category names or BoN groups with < 2 candidates.
  void validate() const;
};

using Scorer = std::function<double(const EmbeddingVector&)>;

Scorer model_scorer(const btrm::RewardModel& model);

struct CategoryReport {
  std::map<std::string, double> per_category;
  double overall = 0.0;  // unweighted mean over categories
};

/// Weighted pairwise accuracy per category (ties count as incorrect).
/// Only categories with pairwise samples take part; a category with neither
/// pairs nor groups is an error.
CategoryReport category_accuracy(const btrm::RewardModel& model, const EvalSet& set);

/// Scores the first n candidates, picks the argmax (lowest index on ties) and
/// reports whether that candidate is correct.
bool best_of_n(const Scorer& scorer, const BonGroup& group, std::size_t n);

struct CurvePoint {
  std::size_t n = 0;
  double hit_rate = 0.0;
};

std::vector<CurvePoint> bon_curve(const Scorer& scorer, const EvalSet& set, const std::vector<std::size_t>& n_grid);

/// Symmetric correlation matrix over benchmark columns; entries touching a
/// zero-variance column are undefined (nullopt), including its diagonal.
struct PearsonMatrix {
  std::size_t size = 0;
  std::vector<std::optional<double>> values;
  std::vector<std::size_t> zero_variance_columns;

  std::optional<double> at(std::size_t i, std::size_t j) const { return values[i * size + j]; }
};

/// score_table[model][benchmark].
PearsonMatrix pearson_matrix(const std::vector<std::vector<double>>& score_table);

// ---------------------------------------------------------------------------
// Synthetic worlds

enum class NoiseMode {
  uniform,  // each unverified label flipped independently with probability noise_rate
  biased,   // flips drawn from pairs where a spurious direction disagrees with the utility
};

struct SyntheticWorldSpec {
  std::uint64_t rng_seed = 0;
  std::size_t dim = 64;
  std::size_t n_categories = 8;
  std::size_t n_unverified = 2000;
  std::size_t n_heldout = 1000;
  std::size_t n_sanity = 200;
  double label_noise_rate = 0.0;
  NoiseMode noise_mode = NoiseMode::uniform;
  double context_spread = 0.35;
  /// Pairs with |u.(a - b)| below this many standard deviations of that
  /// quantity are redrawn, so no pair is a near coin-flip. 0 keeps all.
  double min_margin = 0.0;
};

json to_json(const SyntheticWorldSpec& s);

/// A planted world: a hidden linear utility over response embeddings decides
/// the true preference of every pair.
struct World {
  SyntheticWorldSpec spec;
  Corpus corpus;  // unverified pairs, stored with (possibly noisy) labels
  std::vector<std::string> unverified_ids;
  EmbeddingVector utility;
  std::map<std::string, std::string> better_response;  // pair_id -> truly better text
  std::set<std::string> flipped;                       // ids whose stored label disagrees with truth
  std::vector<PairwiseSample> heldout;                 // true orientation
  std::vector<PairwiseSample> sanity;                  // true orientation

  /// True iff the pair's currently stored chosen is the truly better response.
  bool stored_label_correct(const Corpus& c, const std::string& pair_id) const;
  judge::TruthOracle oracle() const;
};

World generate_world(const SyntheticWorldSpec& spec);

/// The linear model whose weights are the hidden utility.
btrm::RewardModel oracle_model(const World& world);

std::vector<btrm::PairRef> refs(const std::vector<PairwiseSample>& samples);

// ---------------------------------------------------------------------------
// Files

/// Pairwise records {category, weight?, conversation, chosen, rejected} and
/// BoN records {category, prompt_group_id, conversation, candidates: [{text, correct}]}
/// may be mixed in one file. Responses are embedded with canonical_response.
EvalSet load_eval_set(const std::filesystem::path& path, embed::EmbeddingProvider& provider);

json report_to_json(const CategoryReport& report, const std::vector<CurvePoint>& curve);
std::string report_summary(const CategoryReport& report, const std::vector<CurvePoint>& curve);

}  // namespace prefcurate::eval
