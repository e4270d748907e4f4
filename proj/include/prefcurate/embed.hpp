#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "prefcurate/core.hpp"

namespace prefcurate::embed {

/// Role-tagged turns joined by newlines, then the five attribute fields in
/// fixed order. Both providers see exactly this string.
std::string canonical_context(const PreferencePair& pair, const AttributeSet& attrs);

/// Conversation plus one candidate response, with an empty attribute block.
std::string canonical_response(const PreferencePair& pair, std::string_view response);

/// L2-normalizes; throws on non-finite values. A zero vector maps to e_0.
EmbeddingVector normalized(std::vector<double> values);

double dot(const EmbeddingVector& a, const EmbeddingVector& b);
double cosine(const EmbeddingVector& a, const EmbeddingVector& b);

class EmbeddingError : public std::runtime_error {
 public:
  EmbeddingError(const std::string& what, bool retryable) : std::runtime_error(what), retryable_(retryable) {}
  bool retryable() const { return retryable_; }

 private:
  bool retryable_;
};

class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string tag() const = 0;
  virtual std::size_t dim() const = 0;
  /// One normalized vector per input, in input order.
  virtual std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& inputs) = 0;

  EmbeddingVector embed_one(const std::string& input);
};

/// Signed feature hashing of byte 3- to 5-grams into a fixed dimension.
/// A pure function of its input string.
class HashingProvider final : public EmbeddingProvider {
 public:
  explicit HashingProvider(std::size_t dim = 256) : dim_(dim) {}
  std::string tag() const override { return "hashing-3to5/" + std::to_string(dim_); }
  std::size_t dim() const override { return dim_; }
  std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& inputs) override;

  EmbeddingVector embed_text(std::string_view text) const;

 private:
  std::size_t dim_;
};

/// Client for a remote embedding endpoint:
///   POST {model, inputs: [text]} -> {vectors: [[real]]}
class RemoteProvider final : public EmbeddingProvider {
 public:
  struct Options {
    std::string url;  // http://host:port/path
    std::string model;
    std::string api_key;
    std::size_t dim = 0;
    std::size_t batch_size = 64;
    int max_retries = 2;
    std::chrono::milliseconds timeout{30000};
  };

  explicit RemoteProvider(Options opts);
  /// PREFCURATE_EMBED_URL, PREFCURATE_EMBED_MODEL, PREFCURATE_EMBED_KEY, PREFCURATE_EMBED_DIM.
  static Options options_from_env();

  std::string tag() const override { return "remote/" + opts_.model; }
  std::size_t dim() const override { return opts_.dim; }
  std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& inputs) override;

 private:
  std::vector<EmbeddingVector> call(const std::vector<std::string>& inputs);

  Options opts_;
  std::string base_;
  std::string path_;
};

EmbeddingVector embed_context(const PreferencePair& pair, const AttributeSet& attrs, EmbeddingProvider& provider);

/// Context plus both response embeddings for one pair.
PairEmbeddings embed_pair(const PreferencePair& pair, const AttributeSet& attrs, EmbeddingProvider& provider);

/// Batched variant over many pairs (same results as embed_pair per pair).
std::map<std::string, PairEmbeddings> embed_pairs(const Corpus& corpus, const std::vector<std::string>& ids,
                                                  EmbeddingProvider& provider);

struct Neighbor {
  std::string pair_id;
  double cosine = 0.0;

  bool operator==(const Neighbor&) const = default;
};

/// Exact cosine index. Immutable once built; top_k is safe to call concurrently.
class SimilarityIndex {
 public:
  explicit SimilarityIndex(std::size_t dim) : dim_(dim) {}

  void add(const std::string& pair_id, const EmbeddingVector& v);
  /// Descending cosine; ties by ascending pair_id; length min(k, size()).
  std::vector<Neighbor> top_k(const EmbeddingVector& query, std::size_t k) const;

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  std::vector<std::string> ids_;
  std::vector<double> data_;  // row-major, rows normalized
  std::map<std::string, std::size_t> row_of_;
};

/// Binary embedding cache: little-endian, header records dim and provider tag.
void save_cache(const std::filesystem::path& path, const std::string& provider_tag, std::size_t dim,
                const std::map<std::string, EmbeddingVector>& vectors);

struct Cache {
  std::string provider_tag;
  std::size_t dim = 0;
  std::map<std::string, EmbeddingVector> vectors;
};

Cache load_cache(const std::filesystem::path& path);

/// Pair embeddings flattened to cache keys "<id>#ctx", "<id>#chosen", "<id>#rejected".
void save_pair_embeddings(const std::filesystem::path& path, const std::string& provider_tag,
                          const std::map<std::string, PairEmbeddings>& embeddings);
std::map<std::string, PairEmbeddings> load_pair_embeddings(const std::filesystem::path& path,
                                                           std::string* provider_tag = nullptr);

}  // namespace prefcurate::embed
