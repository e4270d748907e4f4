#include "prefcurate/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>
#include <stdexcept>

#include "prefcurate/hash.hpp"

namespace prefcurate::eval {

void EvalSet::validate() const {
  std::set<std::string> names;
  for (const auto& c : categories) {
    if (!names.insert(c.name).second) throw std::invalid_argument("duplicate category: " + c.name);
    for (const auto& g : c.groups)
      if (g.candidates.size() < 2) throw std::invalid_argument("BoN group " + g.id + " has fewer than 2 candidates");
  }
}

Scorer model_scorer(const btrm::RewardModel& model) {
  return [model](const EmbeddingVector& e) { return btrm::score(model, e); };
}

CategoryReport category_accuracy(const btrm::RewardModel& model, const EvalSet& set) {
  set.validate();
  CategoryReport out;
  double sum = 0.0;
  for (const auto& c : set.categories) {
    if (c.pairs.empty() && c.groups.empty()) throw std::invalid_argument("empty category: " + c.name);
    if (c.pairs.empty()) continue;
    double num = 0.0, den = 0.0;
    for (const auto& s : c.pairs) {
      if (s.weight < 0.0) throw std::invalid_argument("negative sample weight in " + c.name);
      den += s.weight;
      if (btrm::predict_pair(model, s.chosen, s.rejected).p > 0.5) num += s.weight;
    }
    if (den <= 0.0) throw std::invalid_argument("category " + c.name + " has zero total weight");
    out.per_category[c.name] = num / den;
    sum += num / den;
  }
  if (!out.per_category.empty()) out.overall = sum / static_cast<double>(out.per_category.size());
  return out;
}

bool best_of_n(const Scorer& scorer, const BonGroup& group, std::size_t n) {
  if (n < 1 || n > group.candidates.size())
    throw std::invalid_argument("best_of_n: n=" + std::to_string(n) + " outside [1, " +
                                std::to_string(group.candidates.size()) + "]");
  std::size_t best = 0;
  double best_score = scorer(group.candidates[0].embedding);
  for (std::size_t i = 1; i < n; ++i) {
    double s = scorer(group.candidates[i].embedding);
    if (s > best_score) {
      best_score = s;
      best = i;
    }
  }
  return group.candidates[best].correct;
}

std::vector<CurvePoint> bon_curve(const Scorer& scorer, const EvalSet& set, const std::vector<std::size_t>& n_grid) {
  set.validate();
  if (!std::is_sorted(n_grid.begin(), n_grid.end())) throw std::invalid_argument("bon_curve: n_grid must ascend");
  std::vector<const BonGroup*> groups;
  for (const auto& c : set.categories)
    for (const auto& g : c.groups) groups.push_back(&g);
  if (groups.empty()) throw std::invalid_argument("bon_curve: eval set has no BoN groups");
  std::vector<CurvePoint> out;
  for (auto n : n_grid) {
    std::size_t hits = 0;
    for (const auto* g : groups)
      if (best_of_n(scorer, *g, n)) ++hits;
    out.push_back(CurvePoint{n, static_cast<double>(hits) / static_cast<double>(groups.size())});
  }
  return out;
}

PearsonMatrix pearson_matrix(const std::vector<std::vector<double>>& table) {
  if (table.size() < 2) throw std::invalid_argument("pearson_matrix needs at least two models");
  const std::size_t cols = table.front().size();
  for (const auto& row : table)
    if (row.size() != cols) throw std::invalid_argument("pearson_matrix: ragged score table");
  const double n = static_cast<double>(table.size());

  std::vector<std::vector<double>> centered(cols, std::vector<double>(table.size()));
  std::vector<double> ss(cols, 0.0);
  PearsonMatrix m;
  m.size = cols;
  m.values.assign(cols * cols, std::nullopt);
  for (std::size_t c = 0; c < cols; ++c) {
    double mean = 0.0;
    for (const auto& row : table) mean += row[c];
    mean /= n;
    for (std::size_t r = 0; r < table.size(); ++r) {
      centered[c][r] = table[r][c] - mean;
      ss[c] += centered[c][r] * centered[c][r];
    }
    if (ss[c] == 0.0) m.zero_variance_columns.push_back(c);
  }
  for (std::size_t i = 0; i < cols; ++i) {
    if (ss[i] == 0.0) continue;
    m.values[i * cols + i] = 1.0;
    for (std::size_t j = i + 1; j < cols; ++j) {
      if (ss[j] == 0.0) continue;
      double cov = 0.0;
      for (std::size_t r = 0; r < table.size(); ++r) cov += centered[i][r] * centered[j][r];
      double r = std::clamp(cov / std::sqrt(ss[i] * ss[j]), -1.0, 1.0);
      m.values[i * cols + j] = r;
      m.values[j * cols + i] = r;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------

json to_json(const SyntheticWorldSpec& s) {
  return json{{"rng_seed", s.rng_seed},
              {"dim", s.dim},
              {"n_categories", s.n_categories},
              {"n_unverified", s.n_unverified},
              {"n_heldout", s.n_heldout},
              {"n_sanity", s.n_sanity},
              {"label_noise_rate", s.label_noise_rate},
              {"noise_mode", s.noise_mode == NoiseMode::uniform ? "uniform" : "biased"},
              {"context_spread", s.context_spread},
              {"min_margin", s.min_margin}};
}

bool World::stored_label_correct(const Corpus& c, const std::string& pair_id) const {
  return c.pair(pair_id).chosen == better_response.at(pair_id);
}

judge::TruthOracle World::oracle() const {
  // Copies the truth table so the oracle outlives the world.
  auto truth = std::make_shared<std::map<std::string, std::string>>(better_response);
  return [truth](const std::string& pair_id, const std::string& candidate) -> std::optional<bool> {
    auto it = truth->find(pair_id);
    if (it == truth->end()) return std::nullopt;
    return candidate == it->second;
  };
}

namespace {

const char* const kWords[] = {"alpha", "bravo", "delta", "echo",  "gamma", "kilo",  "lima",  "nova",
                              "omega", "pixel", "quark", "sigma", "tango", "ultra", "vivid", "zeta"};

std::string filler(std::mt19937_64& rng, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += kWords[rng() % std::size(kWords)];
  }
  return s;
}

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t dim, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(dim);
  for (auto& x : v) x = g(rng);
  return v;
}

double dotv(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct RawPair {
  EmbeddingVector a, b;  // a is truly better
};

RawPair draw_pair(std::mt19937_64& rng, const std::vector<double>& u, std::size_t dim, double min_margin) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  // u is a unit vector, so u.(x - y) has standard deviation sqrt(2) * scale.
  const double threshold = min_margin * std::sqrt(2.0) * scale;
  for (;;) {
    auto x = gaussian(rng, dim, scale);
    auto y = gaussian(rng, dim, scale);
    double dx = dotv(u, x), dy = dotv(u, y);
    if (dx == dy || std::abs(dx - dy) < threshold) continue;
    if (dx > dy) return RawPair{EmbeddingVector{std::move(x)}, EmbeddingVector{std::move(y)}};
    return RawPair{EmbeddingVector{std::move(y)}, EmbeddingVector{std::move(x)}};
  }
}

}  // namespace

World generate_world(const SyntheticWorldSpec& spec) {
  if (spec.dim < 2) throw std::invalid_argument("world dim must be >= 2");
  if (spec.n_categories < 1) throw std::invalid_argument("world needs at least one category");
  if (spec.min_margin < 0.0) throw std::invalid_argument("min_margin must be >= 0");
  if (spec.label_noise_rate < 0.0 || spec.label_noise_rate >= 1.0)
    throw std::invalid_argument("label_noise_rate must be in [0,1)");

  World w;
  w.spec = spec;
  std::mt19937_64 rng(derive_seed(spec.rng_seed, "world"));
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  w.utility = embed::normalized(gaussian(rng, spec.dim, 1.0));
  const auto& u = w.utility.values;
  auto g = gaussian(rng, spec.dim, 1.0);
  double gu = dotv(g, u);
  for (std::size_t i = 0; i < spec.dim; ++i) g[i] -= gu * u[i];
  const auto spurious = embed::normalized(std::move(g)).values;

  std::vector<std::vector<double>> centers;
  for (std::size_t k = 0; k < spec.n_categories; ++k) centers.push_back(embed::normalized(gaussian(rng, spec.dim, 1.0)).values);

  std::vector<RawPair> raw;
  std::vector<std::size_t> cats;
  std::vector<EmbeddingVector> contexts;
  for (std::size_t i = 0; i < spec.n_unverified; ++i) {
    std::size_t k = rng() % spec.n_categories;
    auto noise = embed::normalized(gaussian(rng, spec.dim, 1.0)).values;
    std::vector<double> ctx(spec.dim);
    for (std::size_t d = 0; d < spec.dim; ++d) ctx[d] = centers[k][d] + spec.context_spread * noise[d];
    contexts.push_back(embed::normalized(std::move(ctx)));
    cats.push_back(k);
    raw.push_back(draw_pair(rng, u, spec.dim, spec.min_margin));
  }

  std::vector<bool> flip(spec.n_unverified, false);
  if (spec.noise_mode == NoiseMode::uniform) {
    for (std::size_t i = 0; i < spec.n_unverified; ++i) flip[i] = unif(rng) < spec.label_noise_rate;
  } else {
    std::vector<bool> disagree(spec.n_unverified);
    std::size_t n_dis = 0;
    for (std::size_t i = 0; i < spec.n_unverified; ++i) {
      double sv = 0.0;
      for (std::size_t d = 0; d < spec.dim; ++d) sv += spurious[d] * (raw[i].a.values[d] - raw[i].b.values[d]);
      disagree[i] = sv < 0.0;
      n_dis += disagree[i];
    }
    double rate = n_dis ? std::min(1.0, spec.label_noise_rate * spec.n_unverified / static_cast<double>(n_dis)) : 0.0;
    for (std::size_t i = 0; i < spec.n_unverified; ++i) flip[i] = disagree[i] && unif(rng) < rate;
  }

  const Controversiality levels[] = {Controversiality::low, Controversiality::medium, Controversiality::high};
  for (std::size_t i = 0; i < spec.n_unverified; ++i) {
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "u%06zu", i);
    std::string id = idbuf;
    std::string cat = "cat-" + std::to_string(cats[i]);
    std::string better = "response " + id + "-a: " + filler(rng, 6);
    std::string worse = "response " + id + "-b: " + filler(rng, 6);

    PreferencePair p;
    p.id = id;
    p.conversation = {Turn{Role::user, "[" + cat + "] request " + id + ": " + filler(rng, 8)}};
    p.chosen = flip[i] ? worse : better;
    p.rejected = flip[i] ? better : worse;
    p.source = "synthetic";
    w.corpus.add(p);

    AttributeSet a;
    a.pair_id = id;
    a.task_category = cat;
    a.objectivity = cats[i] % 2 == 0 ? Objectivity::objective : Objectivity::subjective;
    a.controversiality = levels[rng() % 3];
    a.desired_attributes = {"correct", "concise"};
    a.annotation_guideline = "Prefer the response with higher intrinsic quality for " + cat + ".";
    w.corpus.set_attributes(a);

    PairEmbeddings e{contexts[i], flip[i] ? raw[i].b : raw[i].a, flip[i] ? raw[i].a : raw[i].b};
    w.corpus.set_embeddings(id, std::move(e));
    w.better_response[id] = better;
    if (flip[i]) w.flipped.insert(id);
    w.unverified_ids.push_back(id);
  }

  for (std::size_t i = 0; i < spec.n_heldout; ++i) {
    auto rp = draw_pair(rng, u, spec.dim, spec.min_margin);
    w.heldout.push_back(PairwiseSample{std::move(rp.a), std::move(rp.b), 1.0});
  }
  for (std::size_t i = 0; i < spec.n_sanity; ++i) {
    auto rp = draw_pair(rng, u, spec.dim, spec.min_margin);
    w.sanity.push_back(PairwiseSample{std::move(rp.a), std::move(rp.b), 1.0});
  }
  return w;
}

btrm::RewardModel oracle_model(const World& world) {
  auto m = btrm::RewardModel::linear(world.spec.dim);
  m.params = world.utility.values;
  m.trained_on = "oracle";
  return m;
}

std::vector<btrm::PairRef> refs(const std::vector<PairwiseSample>& samples) {
  std::vector<btrm::PairRef> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(btrm::PairRef{&s.chosen, &s.rejected});
  return out;
}

// ---------------------------------------------------------------------------

EvalSet load_eval_set(const std::filesystem::path& path, embed::EmbeddingProvider& provider) {
  EvalSet set;
  set.name = path.stem().string();
  std::map<std::string, std::size_t> cat_index;
  std::map<std::pair<std::string, std::string>, std::size_t> group_index;
  auto category = [&](const std::string& name) -> Category& {
    auto it = cat_index.find(name);
    if (it == cat_index.end()) {
      it = cat_index.emplace(name, set.categories.size()).first;
      set.categories.push_back(Category{name, {}, {}});
    }
    return set.categories[it->second];
  };
  for (const auto& rec : read_jsonl(path)) {
    PreferencePair ctx;
    ctx.conversation = rec.at("conversation").get<std::vector<Turn>>();
    auto& cat = category(rec.value("category", "default"));
    if (rec.contains("candidates")) {
      auto gid = rec.at("prompt_group_id").get<std::string>();
      auto key = std::make_pair(cat.name, gid);
      auto it = group_index.find(key);
      if (it == group_index.end()) {
        it = group_index.emplace(key, cat.groups.size()).first;
        cat.groups.push_back(BonGroup{gid, {}});
      }
      std::vector<std::string> texts;
      std::vector<bool> correct;
      for (const auto& c : rec["candidates"]) {
        texts.push_back(embed::canonical_response(ctx, c.at("text").get<std::string>()));
        correct.push_back(c.at("correct").get<bool>());
      }
      auto vecs = provider.embed_batch(texts);
      auto& group = cat.groups[it->second];
      for (std::size_t i = 0; i < vecs.size(); ++i) group.candidates.push_back(BonCandidate{std::move(vecs[i]), correct[i]});
    } else {
      auto vecs = provider.embed_batch({embed::canonical_response(ctx, rec.at("chosen").get<std::string>()),
                                        embed::canonical_response(ctx, rec.at("rejected").get<std::string>())});
      cat.pairs.push_back(PairwiseSample{std::move(vecs[0]), std::move(vecs[1]), rec.value("weight", 1.0)});
    }
  }
  set.validate();
  return set;
}

json report_to_json(const CategoryReport& report, const std::vector<CurvePoint>& curve) {
  json j{{"per_category", report.per_category}, {"overall", report.overall}};
  json c = json::array();
  for (const auto& p : curve) c.push_back(json{{"n", p.n}, {"hit_rate", p.hit_rate}});
  j["bon_curve"] = c;
  return j;
}

std::string report_summary(const CategoryReport& report, const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& [name, acc] : report.per_category) os << name << "\t" << acc << '\n';
  if (!report.per_category.empty()) os << "overall\t" << report.overall << '\n';
  for (const auto& p : curve) os << "bon@" << p.n << "\t" << p.hit_rate << '\n';
  return os.str();
}

}  // namespace prefcurate::eval
