#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <variant>
#include <vector>

#include "prefcurate/core.hpp"

namespace prefcurate::ingest {

inline constexpr std::size_t kNgramSize = 13;
inline constexpr std::string_view kTokenizerVersion = "ws-lower-strip-punct/v1";

struct Rejection {
  std::string code;  // machine-readable: malformed, null-content, identical-responses, ...
  std::string detail;
};

using CheckResult = std::variant<PreferencePair, Rejection>;

/// Validates a raw record {conversation, chosen, rejected, source[, id,
/// created_at, attributes]} and normalizes it into a PreferencePair. The pair
/// id, when not supplied, is derived from the dedup key.
CheckResult structural_check(const json& raw);

/// Serialized (conversation history, chosen, rejected) key.
std::string dedup_key(const PreferencePair& pair);
std::string derive_pair_id(const PreferencePair& pair);

/// Stateful first-occurrence filter; the seen-set persists across calls so a
/// later shard can be checked against everything seen before.
class Deduplicator {
 public:
  /// True if the pair's key is new (and records it).
  bool insert(const PreferencePair& pair);
  bool contains(const PreferencePair& pair) const;
  std::size_t size() const { return seen_.size(); }

 private:
  std::unordered_set<std::string> seen_;
};

struct DedupResult {
  std::vector<PreferencePair> unique;
  std::size_t duplicates = 0;
};

DedupResult dedup(std::vector<PreferencePair> pairs);

/// Lowercase, split on whitespace (ASCII and common Unicode spaces), strip
/// leading/trailing ASCII punctuation from each token, drop empty tokens.
std::vector<std::string> tokenize(std::string_view text);

std::uint64_t window_hash(std::span<const std::string> tokens);

struct ContaminationIndex {
  std::size_t ngram_size = kNgramSize;
  std::string tokenizer_version{kTokenizerVersion};
  std::unordered_set<std::uint64_t> grams;
  /// Lengths of prompts shorter than ngram_size that contributed a whole-prompt key.
  std::set<std::size_t> short_lengths;

  std::size_t size() const { return grams.size(); }
};

ContaminationIndex build_contamination_index(const std::vector<std::string>& benchmark_prompts);

/// Text of the first matching window in `text`, if any.
std::optional<std::string> find_contamination(const ContaminationIndex& index, std::string_view text);

struct RemovedPair {
  PreferencePair pair;
  std::string matched_window;
};

struct DecontaminationResult {
  std::vector<PreferencePair> clean;
  std::vector<RemovedPair> removed;
};

/// Removes pairs whose first user turn shares an indexed window.
DecontaminationResult decontaminate(std::vector<PreferencePair> pairs, const ContaminationIndex& index,
                                    std::string_view tokenizer_version = kTokenizerVersion);

/// First user turn content, or empty when there is none.
std::string_view first_user_turn(const PreferencePair& pair);

}  // namespace prefcurate::ingest
