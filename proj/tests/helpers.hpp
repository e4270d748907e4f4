#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "prefcurate/core.hpp"

namespace testutil {

inline prefcurate::PreferencePair make_pair(const std::string& id, const std::string& prompt = "hello",
                                            const std::string& chosen = "good", const std::string& rejected = "bad") {
  prefcurate::PreferencePair p;
  p.id = id;
  p.conversation = {prefcurate::Turn{prefcurate::Role::user, prompt}};
  p.chosen = chosen;
  p.rejected = rejected;
  p.source = "test";
  return p;
}

inline prefcurate::Verdict human(const std::string& id, prefcurate::Outcome o = prefcurate::Outcome::confirm) {
  prefcurate::Verdict v;
  v.pair_id = id;
  v.kind = prefcurate::VerdictKind::human;
  v.model_id = "annotator";
  v.outcome = o;
  return v;
}

inline prefcurate::Verdict judged(const std::string& id, prefcurate::Outcome o = prefcurate::Outcome::confirm) {
  auto v = human(id, o);
  v.kind = prefcurate::VerdictKind::judge;
  v.model_id = "judge";
  return v;
}

inline prefcurate::EmbeddingVector random_vec(std::mt19937_64& rng, std::size_t dim, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  prefcurate::EmbeddingVector v;
  v.values.resize(dim);
  for (auto& x : v.values) x = g(rng);
  return v;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("prefcurate-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testutil
