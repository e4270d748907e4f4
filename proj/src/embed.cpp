#include "prefcurate/embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "httplib.h"
#include "prefcurate/hash.hpp"

namespace prefcurate::embed {

namespace {

constexpr char kCacheMagic[8] = {'P', 'C', 'E', 'M', 'B', '0', '0', '1'};

void append_turns(std::string& s, const PreferencePair& pair) {
  for (const auto& t : pair.conversation) {
    s += to_string(t.role);
    s += ": ";
    s += t.content;
    s += '\n';
  }
}

void append_attributes(std::string& s, const AttributeSet* a) {
  s += "task_category: ";
  if (a) s += a->task_category;
  s += "\nobjectivity: ";
  if (a) s += to_string(a->objectivity);
  s += "\ncontroversiality: ";
  if (a) s += to_string(a->controversiality);
  s += "\ndesired_attributes: ";
  if (a) {
    for (std::size_t i = 0; i < a->desired_attributes.size(); ++i) {
      if (i) s += "; ";
      s += a->desired_attributes[i];
    }
  }
  s += "\nannotation_guideline: ";
  if (a) s += a->annotation_guideline;
}

}  // namespace

std::string canonical_context(const PreferencePair& pair, const AttributeSet& attrs) {
  std::string s;
  append_turns(s, pair);
  append_attributes(s, &attrs);
  return s;
}

std::string canonical_response(const PreferencePair& pair, std::string_view response) {
  std::string s;
  append_turns(s, pair);
  s += "assistant: ";
  s += response;
  s += '\n';
  append_attributes(s, nullptr);
  return s;
}

EmbeddingVector normalized(std::vector<double> values) {
  double ss = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw EmbeddingError("non-finite embedding value", false);
    ss += v * v;
  }
  if (ss == 0.0) {
    if (!values.empty()) values[0] = 1.0;
    return EmbeddingVector{std::move(values)};
  }
  double inv = 1.0 / std::sqrt(ss);
  for (double& v : values) v *= inv;
  return EmbeddingVector{std::move(values)};
}

double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
  if (a.dim() != b.dim())
    throw std::invalid_argument("dimension mismatch: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += a.values[i] * b.values[i];
  return s;
}

double cosine(const EmbeddingVector& a, const EmbeddingVector& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

EmbeddingVector EmbeddingProvider::embed_one(const std::string& input) {
  auto out = embed_batch({input});
  return std::move(out.at(0));
}

EmbeddingVector HashingProvider::embed_text(std::string_view text) const {
  std::vector<double> v(dim_, 0.0);
  for (std::size_t n = 3; n <= 5; ++n) {
    for (std::size_t i = 0; i + n <= text.size(); ++i) {
      auto h = fnv1a64(text.substr(i, n));
      double sign = (splitmix64(h) & 1u) ? 1.0 : -1.0;
      v[h % dim_] += sign;
    }
  }
  return normalized(std::move(v));
}

std::vector<EmbeddingVector> HashingProvider::embed_batch(const std::vector<std::string>& inputs) {
  std::vector<EmbeddingVector> out;
  out.reserve(inputs.size());
  for (const auto& s : inputs) out.push_back(embed_text(s));
  return out;
}

// ---------------------------------------------------------------------------

RemoteProvider::RemoteProvider(Options opts) : opts_(std::move(opts)) {
  if (opts_.url.empty()) throw std::invalid_argument("remote embedding provider needs a URL");
  auto scheme = opts_.url.find("://");
  auto path_start = opts_.url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) {
    base_ = opts_.url;
    path_ = "/";
  } else {
    base_ = opts_.url.substr(0, path_start);
    path_ = opts_.url.substr(path_start);
  }
}

RemoteProvider::Options RemoteProvider::options_from_env() {
  Options o;
  auto get = [](const char* k) -> std::string {
    const char* v = std::getenv(k);
    return v ? v : "";
  };
  o.url = get("PREFCURATE_EMBED_URL");
  o.model = get("PREFCURATE_EMBED_MODEL");
  o.api_key = get("PREFCURATE_EMBED_KEY");
  if (auto d = get("PREFCURATE_EMBED_DIM"); !d.empty()) o.dim = std::stoul(d);
  return o;
}

std::vector<EmbeddingVector> RemoteProvider::call(const std::vector<std::string>& inputs) {
  httplib::Client cli(base_);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout).count();
  cli.set_connection_timeout(secs, 0);
  cli.set_read_timeout(secs, 0);
  httplib::Headers headers;
  if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);
  json body{{"model", opts_.model}, {"inputs", inputs}};
  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw EmbeddingError("embedding request failed: " + httplib::to_string(res.error()), true);
  if (res->status >= 500 || res->status == 429)
    throw EmbeddingError("embedding service status " + std::to_string(res->status), true);
  if (res->status != 200) throw EmbeddingError("embedding service status " + std::to_string(res->status), false);
  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw EmbeddingError(std::string("malformed embedding reply: ") + e.what(), false);
  }
  if (!reply.contains("vectors") || !reply["vectors"].is_array() || reply["vectors"].size() != inputs.size())
    throw EmbeddingError("embedding reply has wrong vector count", false);
  std::vector<EmbeddingVector> out;
  for (const auto& row : reply["vectors"]) {
    auto v = normalized(row.get<std::vector<double>>());
    if (opts_.dim == 0) opts_.dim = v.dim();
    if (v.dim() != opts_.dim)
      throw EmbeddingError("embedding dim " + std::to_string(v.dim()) + " != expected " + std::to_string(opts_.dim),
                           false);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<EmbeddingVector> RemoteProvider::embed_batch(const std::vector<std::string>& inputs) {
  std::vector<EmbeddingVector> out;
  out.reserve(inputs.size());
  for (std::size_t start = 0; start < inputs.size(); start += opts_.batch_size) {
    auto end = std::min(inputs.size(), start + opts_.batch_size);
    std::vector<std::string> chunk(inputs.begin() + start, inputs.begin() + end);
    for (int attempt = 0;; ++attempt) {
      try {
        auto part = call(chunk);
        for (auto& v : part) out.push_back(std::move(v));
        break;
      } catch (const EmbeddingError& e) {
        if (!e.retryable() || attempt >= opts_.max_retries) throw;
        std::this_thread::sleep_for(std::chrono::milliseconds(50 << attempt));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

EmbeddingVector embed_context(const PreferencePair& pair, const AttributeSet& attrs, EmbeddingProvider& provider) {
  return provider.embed_one(canonical_context(pair, attrs));
}

PairEmbeddings embed_pair(const PreferencePair& pair, const AttributeSet& attrs, EmbeddingProvider& provider) {
  auto v = provider.embed_batch(
      {canonical_context(pair, attrs), canonical_response(pair, pair.chosen), canonical_response(pair, pair.rejected)});
  return PairEmbeddings{std::move(v[0]), std::move(v[1]), std::move(v[2])};
}

std::map<std::string, PairEmbeddings> embed_pairs(const Corpus& corpus, const std::vector<std::string>& ids,
                                                  EmbeddingProvider& provider) {
  std::vector<std::string> inputs;
  inputs.reserve(ids.size() * 3);
  for (const auto& id : ids) {
    const auto& p = corpus.pair(id);
    const auto* a = corpus.attributes(id);
    auto attrs = a ? *a : default_attributes(id);
    inputs.push_back(canonical_context(p, attrs));
    inputs.push_back(canonical_response(p, p.chosen));
    inputs.push_back(canonical_response(p, p.rejected));
  }
  auto vecs = provider.embed_batch(inputs);
  std::map<std::string, PairEmbeddings> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    out.emplace(ids[i], PairEmbeddings{std::move(vecs[3 * i]), std::move(vecs[3 * i + 1]), std::move(vecs[3 * i + 2])});
  return out;
}

// ---------------------------------------------------------------------------

void SimilarityIndex::add(const std::string& pair_id, const EmbeddingVector& v) {
  if (v.dim() != dim_)
    throw std::invalid_argument("dimension mismatch: index " + std::to_string(dim_) + ", vector " +
                                std::to_string(v.dim()));
  if (row_of_.count(pair_id)) throw std::invalid_argument("duplicate index entry: " + pair_id);
  double n = v.norm();
  row_of_[pair_id] = ids_.size();
  ids_.push_back(pair_id);
  for (double x : v.values) data_.push_back(n > 0.0 ? x / n : 0.0);
}

std::vector<Neighbor> SimilarityIndex::top_k(const EmbeddingVector& query, std::size_t k) const {
  if (query.dim() != dim_)
    throw std::invalid_argument("dimension mismatch: index " + std::to_string(dim_) + ", query " +
                                std::to_string(query.dim()));
  k = std::min(k, ids_.size());
  if (k == 0) return {};
  double qn = query.norm();
  std::vector<Neighbor> all;
  all.reserve(ids_.size());
  for (std::size_t r = 0; r < ids_.size(); ++r) {
    const double* row = data_.data() + r * dim_;
    double s = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) s += row[i] * query.values[i];
    all.push_back(Neighbor{ids_[r], qn > 0.0 ? s / qn : 0.0});
  }
  auto better = [](const Neighbor& a, const Neighbor& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.pair_id < b.pair_id;
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), better);
  all.resize(k);
  return all;
}

// ---------------------------------------------------------------------------

void save_cache(const std::filesystem::path& path, const std::string& provider_tag, std::size_t dim,
                const std::map<std::string, EmbeddingVector>& vectors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kCacheMagic, sizeof(kCacheMagic));
  put_u32(out, static_cast<std::uint32_t>(dim));
  put_u32(out, static_cast<std::uint32_t>(provider_tag.size()));
  out.write(provider_tag.data(), static_cast<std::streamsize>(provider_tag.size()));
  put_u64(out, vectors.size());
  for (const auto& [key, v] : vectors) {
    if (v.dim() != dim) throw std::invalid_argument("cache entry " + key + " has wrong dim");
    put_u32(out, static_cast<std::uint32_t>(key.size()));
    out.write(key.data(), static_cast<std::streamsize>(key.size()));
    for (double x : v.values) put_f64(out, x);
  }
}

Cache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCacheMagic))
    throw std::runtime_error("not an embedding cache: " + path.string());
  Cache c;
  c.dim = get_u32(in);
  c.provider_tag.resize(get_u32(in));
  in.read(c.provider_tag.data(), static_cast<std::streamsize>(c.provider_tag.size()));
  auto n = get_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string key(get_u32(in), '\0');
    in.read(key.data(), static_cast<std::streamsize>(key.size()));
    EmbeddingVector v;
    v.values.resize(c.dim);
    for (auto& x : v.values) x = get_f64(in);
    c.vectors.emplace(std::move(key), std::move(v));
  }
  if (!in) throw std::runtime_error("truncated embedding cache: " + path.string());
  return c;
}

void save_pair_embeddings(const std::filesystem::path& path, const std::string& provider_tag,
                          const std::map<std::string, PairEmbeddings>& embeddings) {
  std::map<std::string, EmbeddingVector> flat;
  std::size_t dim = 0;
  for (const auto& [id, e] : embeddings) {
    dim = e.context.dim();
    flat[id + "#ctx"] = e.context;
    flat[id + "#chosen"] = e.chosen;
    flat[id + "#rejected"] = e.rejected;
  }
  save_cache(path, provider_tag, dim, flat);
}

std::map<std::string, PairEmbeddings> load_pair_embeddings(const std::filesystem::path& path,
                                                           std::string* provider_tag) {
  auto c = load_cache(path);
  if (provider_tag) *provider_tag = c.provider_tag;
  std::map<std::string, PairEmbeddings> out;
  for (auto& [key, v] : c.vectors) {
    auto hash = key.rfind('#');
    if (hash == std::string::npos) continue;
    auto id = key.substr(0, hash);
    auto part = key.substr(hash + 1);
    auto& e = out[id];
    if (part == "ctx")
      e.context = std::move(v);
    else if (part == "chosen")
      e.chosen = std::move(v);
    else if (part == "rejected")
      e.rejected = std::move(v);
  }
  return out;
}

}  // namespace prefcurate::embed
