#include "prefcurate/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace prefcurate::retrieval {

int dynamic_k(double p, int k_max) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::domain_error("dynamic_k: p outside [0,1]");
  if (k_max < 1) throw std::invalid_argument("dynamic_k: k_max must be >= 1");
  if (p <= 0.5) return k_max;
  // The epsilon absorbs representation error when k_max * (1 - p) is meant to
  // be an integer (e.g. 10 * (1 - 0.7) = 3.0000000000000004).
  double x = static_cast<double>(k_max) * (1.0 - p);
  int k = static_cast<int>(std::ceil(x - 1e-9));
  return std::clamp(k, 0, k_max);
}

embed::SimilarityIndex build_context_index(const Corpus& corpus, const std::vector<std::string>& ids,
                                           std::size_t dim) {
  embed::SimilarityIndex index(dim);
  for (const auto& id : ids) {
    const auto* e = corpus.embeddings(id);
    if (!e) throw std::invalid_argument("no embeddings for pair " + id);
    index.add(id, e->context);
  }
  return index;
}

Selection select_for_annotation(const btrm::RewardModel& model, const std::vector<std::string>& eval_ids,
                               const Corpus& corpus, const embed::SimilarityIndex& unverified_index, int k_max) {
  Selection out;
  auto before = [](const QueueEntry& a, const QueueEntry& b) {
    if (a.source_p != b.source_p) return a.source_p < b.source_p;
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    if (a.pair_id != b.pair_id) return a.pair_id < b.pair_id;
    return a.source_pair_id < b.source_pair_id;
  };
  std::map<std::string, QueueEntry> best;
  for (const auto& id : eval_ids) {
    const auto* e = corpus.embeddings(id);
    if (!e || !corpus.attributes(id)) {
      ++out.skipped;
      continue;
    }
    double p = btrm::predict_pair(model, e->chosen, e->rejected).p;
    int k = dynamic_k(p, k_max);
    out.budgets.push_back(RetrievalBudget{id, p, k, k_max});
    for (auto& n : unverified_index.top_k(e->context, static_cast<std::size_t>(k))) {
      QueueEntry q{n.pair_id, id, p, n.cosine};
      auto it = best.find(q.pair_id);
      if (it == best.end())
        best.emplace(q.pair_id, std::move(q));
      else if (before(q, it->second))
        it->second = std::move(q);
    }
  }
  out.queue.reserve(best.size());
  for (auto& [_, q] : best) out.queue.push_back(std::move(q));
  std::sort(out.queue.begin(), out.queue.end(), before);
  return out;
}

void write_queue(const std::filesystem::path& path, const std::vector<QueueEntry>& queue) {
  std::vector<json> rows;
  for (const auto& q : queue)
    rows.push_back(json{{"pair_id", q.pair_id}, {"source_pair_id", q.source_pair_id}, {"source_p", q.source_p},
                        {"cosine", q.cosine}});
  write_jsonl(path, rows);
}

std::vector<QueueEntry> read_queue(const std::filesystem::path& path) {
  std::vector<QueueEntry> out;
  for (const auto& j : read_jsonl(path))
    out.push_back(QueueEntry{j.at("pair_id").get<std::string>(), j.at("source_pair_id").get<std::string>(),
                             j.at("source_p").get<double>(), j.at("cosine").get<double>()});
  return out;
}

}  // namespace prefcurate::retrieval
