#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "prefcurate/btrm.hpp"
#include "prefcurate/core.hpp"
#include "prefcurate/embed.hpp"

namespace prefcurate::retrieval {

inline constexpr int kDefaultKMax = 8;

/// Retrieval budget for one instance given the model's preference
/// probability p: k_max when p <= 0.5, otherwise ceil(k_max * (1 - p)).
int dynamic_k(double p, int k_max = kDefaultKMax);

struct RetrievalBudget {
  std::string pair_id;
  double p = 0.5;
  int k = 0;
  int k_max = kDefaultKMax;
};

struct QueueEntry {
  std::string pair_id;
  std::string source_pair_id;
  double source_p = 0.5;
  double cosine = 0.0;

  bool operator==(const QueueEntry&) const = default;
};

struct Selection {
  std::vector<QueueEntry> queue;
  std::vector<RetrievalBudget> budgets;
  std::size_t skipped = 0;  // eval pairs without attributes or embeddings
};

/// For every eval pair: p from the model, k = dynamic_k(p), then the k nearest
/// unverified pairs to its (x, a) embedding. The union is deduplicated and
/// ordered by (source p asc, cosine desc, pair_id asc).
Selection select_for_annotation(const btrm::RewardModel& model, const std::vector<std::string>& eval_ids,
                               const Corpus& corpus, const embed::SimilarityIndex& unverified_index,
                               int k_max = kDefaultKMax);

/// Index over the context embeddings of the given pairs.
embed::SimilarityIndex build_context_index(const Corpus& corpus, const std::vector<std::string>& ids,
                                           std::size_t dim);

void write_queue(const std::filesystem::path& path, const std::vector<QueueEntry>& queue);
std::vector<QueueEntry> read_queue(const std::filesystem::path& path);

}  // namespace prefcurate::retrieval
