#include "prefcurate/judge.hpp"

#include <algorithm>
#include <array>
#include <mutex>
#include <atomic>
#include <cstdlib>
#include <random>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "prefcurate/hash.hpp"

namespace prefcurate::judge {

namespace {

constexpr std::array<std::string_view, 2> kPermutations{"identity", "swapped"};
constexpr std::array<std::string_view, 3> kVotes{"candidate1", "candidate2", "unsure"};
constexpr std::array<std::string_view, 3> kVerdicts{"chosen_stands", "swap", "abstain"};

template <typename E, std::size_t N>
E parse(std::string_view s, const std::array<std::string_view, N>& names) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<E>(i);
  throw std::invalid_argument("unknown value: " + std::string(s));
}

std::string_view trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void render_conversation(std::ostringstream& os, const PreferencePair& p) {
  for (const auto& t : p.conversation) os << prefcurate::to_string(t.role) << ": " << t.content << '\n';
}

void render_attributes(std::ostringstream& os, const AttributeSet& a) {
  os << "Task category: " << a.task_category << '\n'
     << "Objectivity: " << prefcurate::to_string(a.objectivity) << '\n'
     << "Controversiality: " << prefcurate::to_string(a.controversiality) << '\n'
     << "Desired attributes: ";
  for (std::size_t i = 0; i < a.desired_attributes.size(); ++i) os << (i ? "; " : "") << a.desired_attributes[i];
  os << '\n';
}

void split_url(const std::string& url, std::string& base, std::string& path) {
  auto scheme = url.find("://");
  auto slash = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (slash == std::string::npos) {
    base = url;
    path = "/";
  } else {
    base = url.substr(0, slash);
    path = url.substr(slash);
  }
}

}  // namespace

std::string_view to_string(Permutation p) { return kPermutations[static_cast<int>(p)]; }
std::string_view to_string(Vote v) { return kVotes[static_cast<int>(v)]; }
std::string_view to_string(ModelVerdict v) { return kVerdicts[static_cast<int>(v)]; }
Permutation permutation_from_string(std::string_view s) { return parse<Permutation>(s, kPermutations); }
Vote vote_from_string(std::string_view s) { return parse<Vote>(s, kVotes); }
ModelVerdict model_verdict_from_string(std::string_view s) { return parse<ModelVerdict>(s, kVerdicts); }

Permutation draw_permutation(std::uint64_t rng_seed, const std::string& pair_id) {
  std::mt19937_64 rng(derive_seed(rng_seed, "perm/" + pair_id));
  return (rng() >> 63) ? Permutation::swapped : Permutation::identity;
}

ModelVerdict resolve_vote(Vote v, Permutation perm) {
  if (v == Vote::unsure) return ModelVerdict::abstain;
  bool first = v == Vote::candidate1;
  if (perm == Permutation::swapped) first = !first;
  return first ? ModelVerdict::chosen_stands : ModelVerdict::swap;
}

Vote present_verdict(ModelVerdict v, Permutation perm) {
  if (v == ModelVerdict::abstain) return Vote::unsure;
  bool first = v == ModelVerdict::chosen_stands;
  if (perm == Permutation::swapped) first = !first;
  return first ? Vote::candidate1 : Vote::candidate2;
}

JudgeTask assemble_task(const Corpus& corpus, const std::string& pair_id, std::vector<Exemplar> exemplars,
                        std::uint64_t rng_seed) {
  const auto* attrs = corpus.attributes(pair_id);
  if (!attrs) throw std::invalid_argument("assemble_task: no attributes for " + pair_id);
  const auto& pair = corpus.pair(pair_id);

  std::sort(exemplars.begin(), exemplars.end(), [](const Exemplar& a, const Exemplar& b) {
    if (a.cosine != b.cosine) return a.cosine > b.cosine;
    return a.pair_id < b.pair_id;
  });
  if (exemplars.size() > kMaxExemplars) exemplars.resize(kMaxExemplars);

  JudgeTask task;
  task.pair_id = pair_id;
  task.guideline = attrs->annotation_guideline;
  task.exemplars = std::move(exemplars);
  task.rng_seed = rng_seed;
  task.permutation = draw_permutation(rng_seed, pair_id);
  const bool swapped = task.permutation == Permutation::swapped;
  task.candidate1 = swapped ? pair.rejected : pair.chosen;
  task.candidate2 = swapped ? pair.chosen : pair.rejected;

  std::ostringstream os;
  os << "# Annotation guideline\n" << task.guideline << "\n\n";
  if (!task.exemplars.empty()) {
    os << "# Labeled examples\n";
    int n = 0;
    for (const auto& ex : task.exemplars) {
      const auto& ep = corpus.pair(ex.pair_id);
      os << "## Example " << ++n << '\n';
      if (const auto* ea = corpus.attributes(ex.pair_id)) render_attributes(os, *ea);
      os << "Conversation:\n";
      render_conversation(os, ep);
      // Gold pairs are stored in their human-resolved orientation.
      os << "Candidate 1: " << ep.chosen << '\n'
         << "Candidate 2: " << ep.rejected << '\n'
         << "Human label: Candidate 1\n\n";
    }
  }
  os << "# Target\n";
  render_attributes(os, *attrs);
  os << "Conversation:\n";
  render_conversation(os, pair);
  os << "Candidate 1: " << task.candidate1 << '\n'
     << "Candidate 2: " << task.candidate2 << "\n\n"
     << "Decide which candidate better satisfies the guideline. End your reply with a final line that is exactly "
        "\"Candidate 1\", \"Candidate 2\", or \"Unsure\".\n";
  task.prompt = os.str();
  return task;
}

ModelVerdict intra_model_aggregate(std::span<const Vote> samples, Permutation perm) {
  int c1 = 0, c2 = 0;
  for (auto v : samples) {
    if (v == Vote::candidate1) ++c1;
    if (v == Vote::candidate2) ++c2;
  }
  if (c1 == c2) return ModelVerdict::abstain;
  return resolve_vote(c1 > c2 ? Vote::candidate1 : Vote::candidate2, perm);
}

ModelVerdict cross_model_merge(std::span<const ModelVerdict> verdicts) {
  int stands = 0, swaps = 0;
  for (auto v : verdicts) {
    if (v == ModelVerdict::chosen_stands) ++stands;
    if (v == ModelVerdict::swap) ++swaps;
  }
  if (stands == swaps) return ModelVerdict::abstain;
  return stands > swaps ? ModelVerdict::chosen_stands : ModelVerdict::swap;
}

Vote parse_vote(std::string_view reply) {
  auto body = trim(reply);
  auto nl = body.find_last_of('\n');
  auto last = trim(nl == std::string_view::npos ? body : body.substr(nl + 1));
  if (last == "Candidate 1") return Vote::candidate1;
  if (last == "Candidate 2") return Vote::candidate2;
  return Vote::unsure;
}

// ---------------------------------------------------------------------------

std::vector<Vote> StubJudge::sample(const JudgeTask& task, int n_samples) {
  if (params_.fail) throw JudgeError("stub judge " + params_.model_id + " is configured to fail");
  std::mt19937_64 rng(derive_seed(params_.seed ^ splitmix64(task.rng_seed), params_.model_id + "/" + task.pair_id));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::optional<bool> first_better = oracle_ ? oracle_(task.pair_id, task.candidate1) : std::nullopt;
  std::vector<Vote> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    if (u(rng) < params_.position_bias) {
      out.push_back(Vote::candidate1);
      continue;
    }
    if (!first_better || u(rng) < params_.unsure_rate) {
      out.push_back(Vote::unsure);
      continue;
    }
    bool pick_first = u(rng) < params_.accuracy ? *first_better : !*first_better;
    out.push_back(pick_first ? Vote::candidate1 : Vote::candidate2);
  }
  return out;
}

HttpJudge::HttpJudge(Options opts) : opts_(std::move(opts)) {
  if (opts_.url.empty()) throw std::invalid_argument("HTTP judge needs a URL");
  split_url(opts_.url, base_, path_);
}

std::vector<HttpJudge::Options> HttpJudge::options_from_env() {
  auto get = [](const char* k) -> std::string {
    const char* v = std::getenv(k);
    return v ? v : "";
  };
  std::vector<Options> out;
  auto url = get("PREFCURATE_JUDGE_URL");
  auto models = get("PREFCURATE_JUDGE_MODELS");
  if (url.empty() || models.empty()) return out;
  std::stringstream ss(models);
  std::string m;
  while (std::getline(ss, m, ','))
    if (!m.empty()) out.push_back(Options{url, m, get("PREFCURATE_JUDGE_KEY")});
  return out;
}

std::vector<Vote> HttpJudge::sample(const JudgeTask& task, int n_samples) {
  httplib::Client cli(base_);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout).count();
  cli.set_connection_timeout(secs, 0);
  cli.set_read_timeout(secs, 0);
  httplib::Headers headers;
  if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);
  json body{{"model", opts_.model}, {"prompt", task.prompt}, {"n_samples", n_samples}, {"temperature", opts_.temperature}};
  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw JudgeError("judge request failed: " + httplib::to_string(res.error()));
  if (res->status != 200) throw JudgeError("judge status " + std::to_string(res->status));
  json reply;
  try {
    reply = json::parse(res->body);
  } catch (const json::parse_error& e) {
    throw JudgeError(std::string("malformed judge reply: ") + e.what());
  }
  if (!reply.contains("votes") || !reply["votes"].is_array()) throw JudgeError("judge reply without votes");
  std::vector<Vote> out;
  for (const auto& v : reply["votes"]) out.push_back(v.is_string() ? parse_vote(v.get<std::string>()) : Vote::unsure);
  return out;
}

void to_json(json& j, const VoteRecord& r) {
  json samples = json::array();
  for (auto v : r.samples) samples.push_back(to_string(v));
  j = json{{"pair_id", r.pair_id},
           {"model_id", r.model_id},
           {"permutation", to_string(r.permutation)},
           {"samples", samples},
           {"model_verdict", to_string(r.model_verdict)}};
}

// ---------------------------------------------------------------------------

LabelResult collect_verdicts(const std::vector<std::string>& queue, std::span<JudgeProvider* const> providers,
                             const Corpus& corpus, const embed::SimilarityIndex* gold_index,
                             const LabelConfig& config) {
  if (providers.empty()) throw std::invalid_argument("label_batch needs at least one judge provider");
  if (config.samples_per_model < 1) throw std::invalid_argument("samples_per_model must be >= 1");

  std::vector<std::optional<PairLabel>> slots(queue.size());
  std::vector<std::string> errors(queue.size());

  auto work = [&](std::size_t i) {
    const auto& id = queue[i];
    std::vector<Exemplar> exemplars;
    if (gold_index && gold_index->size() > 0) {
      if (const auto* e = corpus.embeddings(id)) {
        for (auto& n : gold_index->top_k(e->context, kMaxExemplars))
          if (n.pair_id != id) exemplars.push_back(Exemplar{n.pair_id, n.cosine});
      }
    }
    PairLabel label;
    label.pair_id = id;
    label.task = assemble_task(corpus, id, std::move(exemplars), config.rng_seed);
    std::vector<ModelVerdict> per_model;
    for (auto* provider : providers) {
      std::vector<Vote> votes;
      for (int attempt = 0;; ++attempt) {
        try {
          votes = provider->sample(label.task, config.samples_per_model);
          break;
        } catch (const JudgeError& e) {
          if (attempt >= config.max_retries) {
            errors[i] = e.what();
            return;
          }
        }
      }
      VoteRecord rec{id, provider->model_id(), label.task.permutation, std::move(votes), ModelVerdict::abstain};
      rec.model_verdict = intra_model_aggregate(rec.samples, rec.permutation);
      per_model.push_back(rec.model_verdict);
      label.records.push_back(std::move(rec));
    }
    label.final_verdict = cross_model_merge(per_model);
    slots[i] = std::move(label);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(config.max_in_flight, queue.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < queue.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::mutex failure_mu;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < queue.size(); i = next++) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(failure_mu);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  LabelResult out;
  for (std::size_t i = 0; i < queue.size(); ++i) {
    if (slots[i])
      out.labels.push_back(std::move(*slots[i]));
    else
      out.deferred.push_back(queue[i]);
  }
  return out;
}

void apply_verdicts(LabelResult& result, Corpus& corpus, PoolLedger& ledger, int iteration, Pool from) {
  for (const auto& label : result.labels) {
    Verdict v;
    v.pair_id = label.pair_id;
    v.kind = VerdictKind::judge;
    for (std::size_t i = 0; i < label.records.size(); ++i) v.model_id += (i ? "," : "") + label.records[i].model_id;
    switch (label.final_verdict) {
      case ModelVerdict::chosen_stands:
        v.outcome = Outcome::confirm;
        ledger.record_verdict(v);
        ledger.transition(label.pair_id, from, Pool::silver, reason::judge_confirm, iteration);
        ++result.to_silver;
        break;
      case ModelVerdict::swap:
        v.outcome = Outcome::swap;
        ledger.record_verdict(v);
        corpus.flip(label.pair_id);
        ledger.transition(label.pair_id, from, Pool::silver, reason::judge_swap, iteration);
        ++result.to_silver;
        break;
      case ModelVerdict::abstain:
        v.outcome = Outcome::discard;
        ledger.record_verdict(v);
        ledger.transition(label.pair_id, from, Pool::discarded, reason::judge_abstain, iteration);
        ++result.to_discarded;
        break;
    }
  }
}

LabelResult label_batch(const std::vector<std::string>& queue, std::span<JudgeProvider* const> providers,
                        Corpus& corpus, const embed::SimilarityIndex* gold_index, PoolLedger& ledger,
                        const LabelConfig& config) {
  auto result = collect_verdicts(queue, providers, corpus, gold_index, config);
  apply_verdicts(result, corpus, ledger, config.iteration);
  return result;
}

}  // namespace prefcurate::judge
