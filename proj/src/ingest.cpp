#include "prefcurate/ingest.hpp"

#include <algorithm>
#include <cctype>

#include "prefcurate/hash.hpp"

namespace prefcurate::ingest {

namespace {

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

// Content must be a non-empty (after trim) string. JSON null, a missing field,
// or the literal "None" some exporters emit all count as null content.
bool null_content(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end() || it->is_null()) return true;
  if (!it->is_string()) return true;
  const auto& s = it->get_ref<const std::string&>();
  return blank(s) || s == "None";
}

// Length in bytes of a whitespace code point at s[i], or 0.
std::size_t space_at(std::string_view s, std::size_t i) {
  auto c = static_cast<unsigned char>(s[i]);
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return 1;
  auto at = [&](std::size_t k) { return i + k < s.size() ? static_cast<unsigned char>(s[i + k]) : 0u; };
  if (c == 0xC2 && (at(1) == 0x85 || at(1) == 0xA0)) return 2;  // NEL, NBSP
  if (c == 0xE1 && at(1) == 0x9A && at(2) == 0x80) return 3;     // U+1680
  if (c == 0xE2 && at(1) == 0x80 && ((at(2) >= 0x80 && at(2) <= 0x8A) || at(2) == 0xA8 || at(2) == 0xA9 || at(2) == 0xAF))
    return 3;  // U+2000..200A, U+2028, U+2029, U+202F
  if (c == 0xE2 && at(1) == 0x81 && at(2) == 0x9F) return 3;  // U+205F
  if (c == 0xE3 && at(1) == 0x80 && at(2) == 0x80) return 3;  // U+3000
  return 0;
}

void push_token(std::vector<std::string>& out, std::string tok) {
  std::size_t b = 0, e = tok.size();
  while (b < e && std::ispunct(static_cast<unsigned char>(tok[b]))) ++b;
  while (e > b && std::ispunct(static_cast<unsigned char>(tok[e - 1]))) --e;
  if (e > b) out.emplace_back(tok.substr(b, e - b));
}

std::string join(std::span<const std::string> tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

}  // namespace

CheckResult structural_check(const json& raw) {
  if (!raw.is_object()) return Rejection{"malformed", "record is not an object"};
  if (!raw.contains("conversation") || !raw["conversation"].is_array())
    return Rejection{"malformed", "missing conversation"};
  if (!raw.contains("chosen") || !raw.contains("rejected")) return Rejection{"malformed", "missing chosen/rejected"};

  PreferencePair p;
  for (const auto& t : raw["conversation"]) {
    if (!t.is_object() || !t.contains("role") || !t["role"].is_string())
      return Rejection{"malformed", "turn without role"};
    if (null_content(t, "content")) return Rejection{"null-content", "turn content is null or empty"};
    try {
      p.conversation.push_back(Turn{role_from_string(t["role"].get<std::string>()), t["content"].get<std::string>()});
    } catch (const std::invalid_argument& e) {
      return Rejection{"malformed", e.what()};
    }
  }
  if (p.conversation.empty()) return Rejection{"empty-conversation", "conversation has no turns"};
  if (p.conversation.back().role != Role::user)
    return Rejection{"final-turn-not-user", "conversation must end with a user turn"};
  if (null_content(raw, "chosen")) return Rejection{"null-content", "chosen is null or empty"};
  if (null_content(raw, "rejected")) return Rejection{"null-content", "rejected is null or empty"};
  p.chosen = raw["chosen"].get<std::string>();
  p.rejected = raw["rejected"].get<std::string>();
  if (p.chosen == p.rejected) return Rejection{"identical-responses", "chosen equals rejected"};
  p.source = raw.value("source", "");
  p.created_at = raw.value("created_at", std::int64_t{0});
  if (raw.contains("id") && raw["id"].is_string() && !raw["id"].get<std::string>().empty())
    p.id = raw["id"].get<std::string>();
  else
    p.id = derive_pair_id(p);
  return p;
}

std::string dedup_key(const PreferencePair& pair) {
  json j = json::array();
  for (const auto& t : pair.conversation) j.push_back(json::array({to_string(t.role), t.content}));
  return json::array({j, pair.chosen, pair.rejected}).dump();
}

std::string derive_pair_id(const PreferencePair& pair) { return "p" + hex64(fnv1a64(dedup_key(pair))); }

bool Deduplicator::insert(const PreferencePair& pair) { return seen_.insert(dedup_key(pair)).second; }

bool Deduplicator::contains(const PreferencePair& pair) const { return seen_.count(dedup_key(pair)) > 0; }

DedupResult dedup(std::vector<PreferencePair> pairs) {
  Deduplicator d;
  DedupResult out;
  for (auto& p : pairs) {
    if (d.insert(p))
      out.unique.push_back(std::move(p));
    else
      ++out.duplicates;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size();) {
    if (auto n = space_at(text, i)) {
      push_token(out, std::move(cur));
      cur.clear();
      i += n;
      continue;
    }
    auto c = static_cast<unsigned char>(text[i]);
    cur += static_cast<char>(c < 0x80 ? std::tolower(c) : c);
    ++i;
  }
  push_token(out, std::move(cur));
  return out;
}

std::uint64_t window_hash(std::span<const std::string> tokens) { return fnv1a64(join(tokens)); }

ContaminationIndex build_contamination_index(const std::vector<std::string>& benchmark_prompts) {
  if (benchmark_prompts.empty()) throw std::invalid_argument("benchmark corpus is empty");
  ContaminationIndex idx;
  for (const auto& prompt : benchmark_prompts) {
    auto toks = tokenize(prompt);
    if (toks.empty()) continue;
    if (toks.size() < idx.ngram_size) {
      idx.grams.insert(window_hash(toks));
      idx.short_lengths.insert(toks.size());
      continue;
    }
    for (std::size_t i = 0; i + idx.ngram_size <= toks.size(); ++i)
      idx.grams.insert(window_hash(std::span(toks).subspan(i, idx.ngram_size)));
  }
  return idx;
}

std::optional<std::string> find_contamination(const ContaminationIndex& index, std::string_view text) {
  auto toks = tokenize(text);
  std::span<const std::string> all(toks);
  auto scan = [&](std::size_t n) -> std::optional<std::string> {
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
      auto w = all.subspan(i, n);
      if (index.grams.count(window_hash(w))) return join(w);
    }
    return std::nullopt;
  };
  if (auto hit = scan(index.ngram_size)) return hit;
  for (auto n : index.short_lengths)
    if (auto hit = scan(n)) return hit;
  return std::nullopt;
}

std::string_view first_user_turn(const PreferencePair& pair) {
  for (const auto& t : pair.conversation)
    if (t.role == Role::user) return t.content;
  return {};
}

DecontaminationResult decontaminate(std::vector<PreferencePair> pairs, const ContaminationIndex& index,
                                    std::string_view tokenizer_version) {
  if (tokenizer_version != index.tokenizer_version)
    throw std::invalid_argument("tokenizer version mismatch: index built with " + index.tokenizer_version);
  DecontaminationResult out;
  for (auto& p : pairs) {
    if (auto hit = find_contamination(index, first_user_turn(p)))
      out.removed.push_back(RemovedPair{std::move(p), *hit});
    else
      out.clean.push_back(std::move(p));
  }
  return out;
}

}  // namespace prefcurate::ingest
