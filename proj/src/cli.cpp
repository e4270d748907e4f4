#include "prefcurate/cli.hpp"

#include <httplib.h>

#include <CLI11.hpp>
#include <array>
#include <charconv>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "prefcurate/btrm.hpp"
#include "prefcurate/embed.hpp"
#include "prefcurate/hash.hpp"
#include "prefcurate/ingest.hpp"
#include "prefcurate/judge.hpp"
#include "prefcurate/retrieval.hpp"
#include "prefcurate/serve.hpp"

namespace prefcurate::cli {

namespace fs = std::filesystem;

namespace {

bool to_bool(const std::string& k, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UserError("bad boolean for " + k + ": '" + v + "'");
}

template <typename T>
T to_num(const std::string& k, const std::string& v) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_floating_point_v<T>)
      out = static_cast<T>(std::stod(v, &used));
    else if constexpr (std::is_signed_v<T>)
      out = static_cast<T>(std::stoll(v, &used));
    else {
      if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<T>(std::stoull(v, &used));
    }
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw UserError("bad number for " + k + ": '" + v + "'");
  }
}

// Shortest text that parses back to the same double.
std::string num_str(double d) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), d);
  return std::string(buf.data(), end);
}

template <typename T>
std::string num_str(T v)
  requires std::is_integral_v<T>
{
  return std::to_string(v);
}

#define PC_NUM_KEY(NAME, GROUP, HELP, FIELD, DIGEST)                                                      \
  ConfigKey {                                                                                              \
    NAME, GROUP, HELP, DIGEST,                                                                             \
        [](RunConfig& c, const std::string& v) { c.FIELD = to_num<decltype(c.FIELD)>(NAME, v); },          \
        [](const RunConfig& c) { return num_str(c.FIELD); }                                                \
  }

#define PC_BOOL_KEY(NAME, GROUP, HELP, FIELD)                                                             \
  ConfigKey {                                                                                              \
    NAME, GROUP, HELP, true, [](RunConfig& c, const std::string& v) { c.FIELD = to_bool(NAME, v); },      \
        [](const RunConfig& c) { return std::string(c.FIELD ? "true" : "false"); }                         \
  }

void add_train_keys(std::vector<ConfigKey>& keys, const std::string& prefix, btrm::TrainConfig curate::CurationConfig::*tc) {
  auto num = [&](const std::string& name, const std::string& help, auto field) {
    std::string key = prefix + "." + name;
    keys.push_back(ConfigKey{
        key, prefix, help, true,
        [tc, field, key](RunConfig& c, const std::string& v) {
          auto& t = c.curation.*tc;
          t.*field = to_num<std::remove_reference_t<decltype(t.*field)>>(key, v);
        },
        [tc, field](const RunConfig& c) { return num_str((c.curation.*tc).*field); }});
  };
  num("learning_rate", "SGD learning rate", &btrm::TrainConfig::learning_rate);
  num("batch_size", "mini-batch size", &btrm::TrainConfig::batch_size);
  num("epochs", "passes over the training pairs", &btrm::TrainConfig::epochs);
  num("warmup_fraction", "share of steps spent in linear warmup", &btrm::TrainConfig::warmup_fraction);
  num("momentum", "SGD momentum (0 = plain SGD)", &btrm::TrainConfig::momentum);
  num("eval_interval", "steps between gold evaluations", &btrm::TrainConfig::eval_interval);
  num("hidden_dim", "hidden units of the mlp head", &btrm::TrainConfig::hidden_dim);
  keys.push_back(ConfigKey{
      prefix + ".schedule", prefix, "linear_decay or constant", true,
      [tc, prefix](RunConfig& c, const std::string& v) {
        if (v == "linear_decay")
          (c.curation.*tc).schedule = btrm::Schedule::linear_decay;
        else if (v == "constant")
          (c.curation.*tc).schedule = btrm::Schedule::constant;
        else
          throw UserError("bad " + prefix + ".schedule: '" + v + "'");
      },
      [tc](const RunConfig& c) {
        return std::string((c.curation.*tc).schedule == btrm::Schedule::linear_decay ? "linear_decay" : "constant");
      }});
  keys.push_back(ConfigKey{prefix + ".arch", prefix, "linear or mlp", true,
                           [tc, prefix](RunConfig& c, const std::string& v) {
                             if (v == "linear")
                               (c.curation.*tc).arch = btrm::Arch::linear;
                             else if (v == "mlp")
                               (c.curation.*tc).arch = btrm::Arch::mlp;
                             else
                               throw UserError("bad " + prefix + ".arch: '" + v + "'");
                           },
                           [tc](const RunConfig& c) {
                             return std::string((c.curation.*tc).arch == btrm::Arch::linear ? "linear" : "mlp");
                           }});
}

std::vector<ConfigKey> make_keys() {
  std::vector<ConfigKey> k;
  k.push_back(ConfigKey{"seed", "core", "master RNG seed", true,
                        [](RunConfig& c, const std::string& v) {
                          c.curation.rng_seed = to_num<std::uint64_t>("seed", v);
                          c.synth.rng_seed = c.curation.rng_seed;
                        },
                        [](const RunConfig& c) { return num_str(c.curation.rng_seed); }});

  k.push_back(PC_NUM_KEY("seed_size", "curation", "pairs sampled for the seed set", curation.seed_size, true));
  k.push_back(PC_NUM_KEY("seed_human_ratio", "curation", "share of the seed routed to humans", curation.seed_human_ratio, true));
  k.push_back(PC_NUM_KEY("human_ratio", "curation", "share of each Stage-1 queue routed to humans", curation.human_ratio, true));
  k.push_back(PC_NUM_KEY("k_max", "curation", "retrieval upper bound per instance", curation.k_max, true));
  k.push_back(PC_NUM_KEY("samples_per_model", "curation", "judge samples per model", curation.samples_per_model, true));
  k.push_back(PC_NUM_KEY("min_gold", "curation", "minimum human-verified pairs for the gold model", curation.min_gold, true));
  k.push_back(PC_BOOL_KEY("use_recycled", "curation", "train with the recycled shard", curation.use_recycled));
  k.push_back(PC_BOOL_KEY("stage2_with_judges", "curation", "re-annotate low-confidence pairs in Stage 2", curation.stage2_with_judges));
  k.push_back(PC_NUM_KEY("iterations", "curation", "total Stage-1 iterations", curation.iterations, false));
  k.push_back(PC_NUM_KEY("max_in_flight", "curation", "concurrent judge calls", curation.max_in_flight, false));
  k.push_back(PC_NUM_KEY("max_retries", "curation", "judge retries before a pair is deferred", curation.max_retries, false));

  add_train_keys(k, "train", &curate::CurationConfig::train);
  add_train_keys(k, "gold_train", &curate::CurationConfig::gold_train);

  k.push_back(ConfigKey{"embed.provider", "embed", "hashing or remote", true,
                        [](RunConfig& c, const std::string& v) {
                          if (v != "hashing" && v != "remote") throw UserError("bad embed.provider: '" + v + "'");
                          c.embed_provider = v;
                        },
                        [](const RunConfig& c) { return c.embed_provider; }});
  k.push_back(PC_NUM_KEY("embed.dim", "embed", "hashing embedder dimension", embed_dim, true));

  k.push_back(PC_NUM_KEY("judges.stub_count", "judge", "stub judges in the ensemble", stub_judges, true));
  k.push_back(PC_NUM_KEY("judges.stub_accuracy", "judge", "per-sample accuracy of stub judges", stub_accuracy, true));
  k.push_back(PC_NUM_KEY("judges.stub_position_bias", "judge", "stub probability of voting Candidate 1 blindly", stub_position_bias, true));
  k.push_back(PC_NUM_KEY("judges.stub_unsure_rate", "judge", "stub probability of answering Unsure", stub_unsure_rate, true));

  k.push_back(ConfigKey{"serve.bind", "serve", "bind address", false,
                        [](RunConfig& c, const std::string& v) { c.bind = v; },
                        [](const RunConfig& c) { return c.bind; }});
  k.push_back(PC_NUM_KEY("serve.port", "serve", "listen port", port, false));
  k.push_back(PC_NUM_KEY("serve.lease_ttl_minutes", "serve", "annotation lease lifetime", lease_ttl_minutes, false));

  k.push_back(PC_NUM_KEY("synth.dim", "synth", "embedding dimension", synth.dim, true));
  k.push_back(PC_NUM_KEY("synth.n_categories", "synth", "task categories", synth.n_categories, true));
  k.push_back(PC_NUM_KEY("synth.n_unverified", "synth", "unverified pairs", synth.n_unverified, true));
  k.push_back(PC_NUM_KEY("synth.n_heldout", "synth", "held-out truth pairs", synth.n_heldout, true));
  k.push_back(PC_NUM_KEY("synth.n_sanity", "synth", "sanity-check pairs", synth.n_sanity, true));
  k.push_back(PC_NUM_KEY("synth.noise_rate", "synth", "share of flipped unverified labels", synth.label_noise_rate, true));
  k.push_back(PC_NUM_KEY("synth.context_spread", "synth", "context noise around category centers", synth.context_spread, true));
  k.push_back(PC_NUM_KEY("synth.min_margin", "synth", "redraw pairs closer than this many std devs of utility gap", synth.min_margin, true));
  k.push_back(ConfigKey{"synth.noise_mode", "synth", "uniform or biased", true,
                        [](RunConfig& c, const std::string& v) {
                          if (v == "uniform")
                            c.synth.noise_mode = eval::NoiseMode::uniform;
                          else if (v == "biased")
                            c.synth.noise_mode = eval::NoiseMode::biased;
                          else
                            throw UserError("bad synth.noise_mode: '" + v + "'");
                        },
                        [](const RunConfig& c) {
                          return std::string(c.synth.noise_mode == eval::NoiseMode::uniform ? "uniform" : "biased");
                        }});
  return k;
}

#undef PC_NUM_KEY
#undef PC_BOOL_KEY

const ConfigKey& key_named(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return k;
  throw UserError("unknown config key '" + name + "'");
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = make_keys();
  return keys;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw UserError("config line " + std::to_string(lineno) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    key_named(key);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

void apply(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) key_named(k).set(cfg, v);
}

std::map<std::string, std::string> to_kv(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  for (const auto& k : config_keys()) kv[k.name] = k.get(cfg);
  return kv;
}

std::string run_digest(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& k : config_keys())
    if (k.in_digest) j[k.name] = k.get(cfg);
  return config_digest(j);
}

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / "LOCK") {
  fs::create_directories(run_dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f)
    throw UserError("run directory " + run_dir.string() + " is locked by another process (remove " + path_.string() +
                    " if that process is gone)");
  std::fclose(f);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------

namespace {

struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> groups;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flag_options;
};

struct Globals {
  std::string config_path;
  bool dry_run = false;
};

void add_config_flags(Command& cmd, const RunConfig& defaults) {
  for (const auto& k : config_keys()) {
    if (std::find(cmd.groups.begin(), cmd.groups.end(), k.group) == cmd.groups.end()) continue;
    auto* opt = cmd.app->add_option("--" + k.name, cmd.flag_values[k.name], k.help);
    opt->default_str(k.get(defaults));
    cmd.flag_options[k.name] = opt;
  }
}

/// defaults < run's stored config < --config file < flags.
RunConfig resolve(const Command& cmd, const Globals& g, const fs::path* run_dir, std::optional<std::string>* stored_digest) {
  RunConfig cfg;
  if (run_dir) {
    curate::RunDir rd(*run_dir);
    if (fs::exists(rd.config_file())) {
      auto stored = json::parse(read_text(rd.config_file()));
      cli::apply(cfg, stored.at("config").get<std::map<std::string, std::string>>());
      if (stored_digest) *stored_digest = stored.at("digest").get<std::string>();
    }
  }
  if (!g.config_path.empty()) {
    if (!fs::exists(g.config_path)) throw UserError("config file not found: " + g.config_path);
    cli::apply(cfg, parse_config_text(read_text(g.config_path)));
  }
  for (const auto& [name, opt] : cmd.flag_options)
    if (opt->count() > 0) key_named(name).set(cfg, cmd.flag_values.at(name));
  try {
    cfg.curation.validate();
  } catch (const std::invalid_argument& e) {
    throw UserError(std::string("invalid configuration: ") + e.what());
  }
  return cfg;
}

/// Refuses to continue a run under a different result-affecting config;
/// records the config on first use.
void check_or_record_config(const fs::path& run_dir, const RunConfig& cfg, const std::optional<std::string>& stored) {
  auto digest = run_digest(cfg);
  if (stored && *stored != digest)
    throw UserError("config digest mismatch: run " + run_dir.string() + " was created with " + *stored +
                    ", this invocation resolves to " + digest);
  if (!stored) {
    fs::create_directories(run_dir);
    write_text(curate::RunDir(run_dir).config_file(), json{{"digest", digest}, {"config", to_kv(cfg)}}.dump(2) + "\n");
  }
}

std::string run_id(const RunConfig& cfg) { return "run-" + run_digest(cfg); }

void print_plan(const std::string& command, const fs::path& run_dir, const RunConfig& cfg, const json& actions) {
  json plan{{"command", command}, {"run", run_dir.string()}, {"digest", run_digest(cfg)}, {"config", to_kv(cfg)},
            {"actions", actions}};
  std::cout << plan.dump(2) << '\n';
}

std::unique_ptr<embed::EmbeddingProvider> make_provider(const RunConfig& cfg) {
  if (cfg.embed_provider == "remote") {
    auto opts = embed::RemoteProvider::options_from_env();
    if (opts.url.empty()) throw UserError("embed.provider = remote but PREFCURATE_EMBED_URL is not set");
    return std::make_unique<embed::RemoteProvider>(opts);
  }
  return std::make_unique<embed::HashingProvider>(cfg.embed_dim);
}

struct JudgeSet {
  std::vector<std::unique_ptr<judge::JudgeProvider>> owned;
  std::vector<judge::JudgeProvider*> ptrs;
};

JudgeSet make_judges(const RunConfig& cfg, bool stub, const curate::RunDir& rd) {
  JudgeSet js;
  if (stub) {
    auto truth = rd.load_truth();
    judge::TruthOracle oracle = truth ? curate::oracle_from_truth(*truth) : judge::TruthOracle{};
    for (int i = 0; i < cfg.stub_judges; ++i) {
      judge::StubJudge::Params p;
      p.model_id = "stub-" + std::to_string(i);
      p.accuracy = cfg.stub_accuracy;
      p.position_bias = cfg.stub_position_bias;
      p.unsure_rate = cfg.stub_unsure_rate;
      p.seed = derive_seed(cfg.curation.rng_seed, p.model_id);
      js.owned.push_back(std::make_unique<judge::StubJudge>(p, oracle));
    }
  } else {
    for (auto& o : judge::HttpJudge::options_from_env()) js.owned.push_back(std::make_unique<judge::HttpJudge>(o));
  }
  for (auto& j : js.owned) js.ptrs.push_back(j.get());
  return js;
}

// Synthetic runs answer human verification from their truth file unless told
// to route; ingested runs always route to the annotation queue.
std::unique_ptr<curate::HumanVerifier> make_humans(bool stub, bool route, const curate::RunDir& rd) {
  if (stub && route) throw UserError("--stub-humans and --route-humans are exclusive");
  auto truth = route ? std::nullopt : rd.load_truth();
  if (stub && !truth) throw UserError("--stub-humans needs a truth file (run `synth` first)");
  if (truth) return std::make_unique<curate::StubHumanVerifier>(curate::oracle_from_truth(*truth));
  return std::make_unique<curate::QueueRouter>();
}

void append_routed(const curate::RunDir& rd, const std::vector<std::string>& ids, int iteration) {
  for (const auto& id : ids) append_jsonl(rd.queues_dir() / "human.jsonl", json{{"pair_id", id}, {"iteration", iteration}});
}

void require_run(const fs::path& run_dir) {
  if (!fs::exists(curate::RunDir(run_dir).pairs_file()))
    throw UserError("no run at " + run_dir.string() + " (run `synth` or `ingest` first)");
}

curate::Stage1State load_state(const curate::RunDir& rd) {
  curate::Stage1State s;
  if (!fs::exists(rd.state_file())) return s;
  auto j = json::parse(read_text(rd.state_file()));
  s.iteration = j.at("iteration").get<int>();
  s.best_gold_accuracy = j.at("best_gold_accuracy").get<double>();
  s.gold_accuracy = j.at("gold_accuracy").get<std::vector<double>>();
  for (const auto& e : j.at("sanity_scores")) s.sanity_scores.emplace_back(e.at("iteration").get<int>(), e.at("score").get<double>());
  auto best = rd.checkpoints_dir() / "best.ckpt";
  if (fs::exists(best)) s.best_model = btrm::load_checkpoint(best).model;
  return s;
}

void save_state(const curate::RunDir& rd, const curate::Stage1State& s) {
  write_text(rd.state_file(), curate::to_json(s).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const Command& cmd, const Globals& g, const fs::path& run_dir) {
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  if (g.dry_run) {
    print_plan("synth", run_dir, cfg,
               json::array({"generate synthetic world " + eval::to_json(cfg.synth).dump(), "write pair store, truth, sanity and held-out sets",
                            "admit all pairs to the unverified pool"}));
    return 0;
  }
  if (fs::exists(rd.pairs_file())) throw UserError("run " + run_dir.string() + " already has a pair store");
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  auto world = eval::generate_world(cfg.synth);
  rd.write_store(world.corpus, "synthetic/" + std::to_string(cfg.synth.dim));
  std::vector<json> truth;
  for (const auto& [id, better] : world.better_response) truth.push_back(json{{"pair_id", id}, {"better", better}});
  write_jsonl(rd.truth_file(), truth);
  curate::save_samples(rd.sanity_file(), world.sanity);
  curate::save_samples(rd.heldout_file(), world.heldout);

  PoolLedger ledger;
  rd.attach_sinks(ledger);
  for (const auto& id : world.unverified_ids) ledger.admit(id, 0);
  std::cout << "synthesized " << world.unverified_ids.size() << " pairs (" << world.flipped.size()
            << " mislabeled) into " << run_dir.string() << '\n';
  return 0;
}

std::vector<std::string> benchmark_prompts(const fs::path& path) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  } else {
    throw UserError("benchmark path not found: " + path.string());
  }
  std::vector<std::string> prompts;
  for (const auto& f : files)
    for (const auto& j : read_jsonl(f)) {
      if (j.contains("prompt") && j["prompt"].is_string()) {
        prompts.push_back(j["prompt"].get<std::string>());
      } else if (j.contains("conversation")) {
        for (const auto& t : j["conversation"])
          if (t.value("role", "") == "user" && t.contains("content") && t["content"].is_string()) {
            prompts.push_back(t["content"].get<std::string>());
            break;
          }
      }
    }
  if (prompts.empty()) throw UserError("no benchmark prompts found under " + path.string());
  return prompts;
}

int cmd_ingest(const Command& cmd, const Globals& g, const fs::path& in, const std::string& benchmarks,
               const fs::path& run_dir) {
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  if (!fs::exists(in)) throw UserError("input not found: " + in.string());
  if (g.dry_run) {
    json actions = json::array({"structural check and dedup of " + in.string()});
    if (!benchmarks.empty()) actions.push_back("13-gram decontamination against " + benchmarks);
    actions.push_back("write pair store, attributes, rejection report and manifest under " + run_dir.string());
    print_plan("ingest", run_dir, cfg, actions);
    return 0;
  }
  if (fs::exists(rd.pairs_file())) throw UserError("run " + run_dir.string() + " already has a pair store");
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  rd.create_layout();

  std::vector<json> rejections;
  std::vector<PreferencePair> pairs;
  std::map<std::string, AttributeSet> attrs;
  std::ifstream src(in);
  if (!src) throw UserError("cannot open " + in.string());
  std::size_t line = 0;
  for (std::string text; std::getline(src, text);) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json raw = json::parse(text, nullptr, false);
    if (raw.is_discarded()) {
      rejections.push_back(json{{"line", line}, {"reason", "malformed"}, {"detail", "not valid JSON"}});
      continue;
    }
    auto r = ingest::structural_check(raw);
    if (auto* rej = std::get_if<ingest::Rejection>(&r)) {
      rejections.push_back(json{{"line", line}, {"reason", rej->code}, {"detail", rej->detail}});
      continue;
    }
    auto& p = std::get<PreferencePair>(r);
    if (raw.contains("attributes") && raw["attributes"].is_object()) {
      auto a = raw["attributes"];
      a["pair_id"] = p.id;
      attrs[p.id] = a.get<AttributeSet>();
    }
    pairs.push_back(std::move(p));
  }
  auto d = ingest::dedup(std::move(pairs));
  if (d.duplicates) rejections.push_back(json{{"reason", "duplicate"}, {"count", d.duplicates}});
  std::vector<PreferencePair> clean = std::move(d.unique);
  if (!benchmarks.empty()) {
    auto index = ingest::build_contamination_index(benchmark_prompts(benchmarks));
    auto dc = ingest::decontaminate(std::move(clean), index);
    for (const auto& r : dc.removed)
      rejections.push_back(json{{"pair_id", r.pair.id}, {"reason", "contaminated"}, {"matched_window", r.matched_window}});
    clean = std::move(dc.clean);
  }

  Corpus corpus;
  std::set<std::string> ids;
  for (auto& p : clean) {
    if (!ids.insert(p.id).second) throw UserError("duplicate pair id " + p.id + " in input");
    auto a = attrs.count(p.id) ? attrs[p.id] : default_attributes(p.id);
    corpus.add(std::move(p));
    corpus.set_attributes(std::move(a));
  }
  rd.write_store(corpus, "");
  write_jsonl(rd.root() / "rejections.jsonl", rejections);

  PoolLedger ledger;
  rd.attach_sinks(ledger);
  auto before = ledger.sizes();
  for (const auto& id : ids) ledger.admit(id, 0);
  RunManifest m;
  m.run_id = run_id(cfg);
  m.config_digest = run_digest(cfg);
  m.rng_seed = cfg.curation.rng_seed;
  m.counts_before = before;
  m.counts_after = ledger.sizes();
  m.extra = json{{"command", "ingest"}, {"input", in.string()}, {"admitted", ids.size()}, {"rejected", rejections.size()}};
  rd.write_manifest(m);
  std::cout << "ingested " << ids.size() << " pairs; " << rejections.size() << " rejection records\n";
  return 0;
}

int cmd_decontaminate(const fs::path& in, const std::string& benchmarks, const fs::path& out, const Globals& g) {
  if (!fs::exists(in)) throw UserError("input not found: " + in.string());
  if (g.dry_run) {
    std::cout << json{{"command", "decontaminate"}, {"input", in.string()}, {"benchmarks", benchmarks}, {"output", out.string()}}.dump(2)
              << '\n';
    return 0;
  }
  auto index = ingest::build_contamination_index(benchmark_prompts(benchmarks));
  std::vector<PreferencePair> pairs;
  for (const auto& j : read_jsonl(in)) pairs.push_back(j.get<PreferencePair>());
  auto r = ingest::decontaminate(std::move(pairs), index);
  std::vector<json> clean(r.clean.begin(), r.clean.end());
  std::vector<json> removed;
  for (const auto& x : r.removed) removed.push_back(json{{"pair_id", x.pair.id}, {"reason", "contaminated"}, {"matched_window", x.matched_window}});
  write_jsonl(out, clean);
  auto report = out;
  report.replace_extension(".removed.jsonl");
  write_jsonl(report, removed);
  std::cout << "kept " << clean.size() << ", removed " << removed.size() << '\n';
  return 0;
}

int cmd_embed(const Command& cmd, const Globals& g, const fs::path& run_dir) {
  require_run(run_dir);
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  if (g.dry_run) {
    print_plan("embed", run_dir, cfg, json::array({"embed pairs without cached vectors using " + cfg.embed_provider}));
    return 0;
  }
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  auto provider = make_provider(cfg);
  // Embeddings follow the stored (ingested) orientation, so read the raw store.
  Corpus corpus;
  for (const auto& j : read_jsonl(rd.pairs_file())) corpus.add(j.get<PreferencePair>());
  if (fs::exists(rd.attrs_file()))
    for (const auto& j : read_jsonl(rd.attrs_file())) corpus.set_attributes(j.get<AttributeSet>());
  std::map<std::string, PairEmbeddings> cache;
  if (fs::exists(rd.embeddings_file())) {
    std::string tag;
    cache = embed::load_pair_embeddings(rd.embeddings_file(), &tag);
    if (!cache.empty() && tag != provider->tag())
      throw UserError("embedding cache was built by '" + tag + "', configured provider is '" + provider->tag() + "'");
  }
  std::vector<std::string> missing;
  for (const auto& [id, p] : corpus.pairs())
    if (!cache.count(id)) missing.push_back(id);
  for (const auto& id : missing)
    if (!corpus.attributes(id)) corpus.set_attributes(default_attributes(id));
  auto fresh = embed::embed_pairs(corpus, missing, *provider);
  cache.merge(fresh);
  embed::save_pair_embeddings(rd.embeddings_file(), provider->tag(), cache);
  std::cout << "embedded " << missing.size() << " pairs with " << provider->tag() << '\n';
  return 0;
}

void write_train_outputs(const curate::RunDir& rd, const std::string& stem, const btrm::TrainResult& r, int iteration) {
  btrm::save_checkpoint(rd.checkpoints_dir() / (stem + ".ckpt"), r.best, iteration, r.best_gold_accuracy);
  btrm::write_history(rd.checkpoints_dir() / (stem + ".history.jsonl"), r.history);
}

int cmd_train(const Command& cmd, const Globals& g, const fs::path& run_dir) {
  require_run(run_dir);
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  if (g.dry_run) {
    print_plan("train", run_dir, cfg,
               json::array({std::string("train on silver + retained") + (cfg.curation.use_recycled ? " + recycled" : ""),
                            "select the checkpoint with the best gold accuracy", "write checkpoints/final.ckpt"}));
    return 0;
  }
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  Corpus corpus;
  PoolLedger ledger;
  std::vector<std::string> recycled;
  rd.load(corpus, ledger, &recycled);
  auto ids = curate::training_ids(ledger, recycled, cfg.curation.use_recycled);
  auto gold = ledger.snapshot(Pool::gold);
  if (ids.empty() || gold.empty()) throw UserError("train needs non-empty training and gold pools");
  auto tc = cfg.curation.train;
  tc.rng_seed = derive_seed(cfg.curation.rng_seed, "final-train");
  auto r = btrm::train(curate::pair_refs(corpus, ids), curate::pair_refs(corpus, gold), tc);
  r.best.trained_on = "final";
  write_train_outputs(rd, "final", r, 0);
  std::cout << "trained on " << ids.size() << " pairs; best gold accuracy " << r.best_gold_accuracy << " at step "
            << r.best_step << '\n';
  return 0;
}

int cmd_stage1(const Command& cmd, const Globals& g, const fs::path& run_dir, bool stub_judges, bool stub_humans,
               bool route_humans) {
  require_run(run_dir);
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  auto state = load_state(rd);
  if (g.dry_run) {
    json actions = json::array();
    if (!fs::exists(rd.state_file())) actions.push_back("initialize seed: " + std::to_string(cfg.curation.seed_size) + " pairs");
    for (int it = state.iteration + 1; it <= cfg.curation.iterations; ++it)
      actions.push_back("iteration " + std::to_string(it) + ": train, retrieve, route to humans and judges");
    if (actions.empty()) actions.push_back("nothing to do: " + std::to_string(state.iteration) + " iterations complete");
    print_plan("stage1", run_dir, cfg, actions);
    return 0;
  }
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  Corpus corpus;
  PoolLedger ledger;
  rd.load(corpus, ledger);
  auto judges = make_judges(cfg, stub_judges, rd);
  auto humans = make_humans(stub_humans, route_humans, rd);
  auto* router = dynamic_cast<curate::QueueRouter*>(humans.get());
  std::vector<eval::PairwiseSample> sanity;
  if (fs::exists(rd.sanity_file())) sanity = curate::load_samples(rd.sanity_file());

  auto manifest = [&](int iteration, const std::map<Pool, std::size_t>& before, json extra) {
    RunManifest m;
    m.run_id = run_id(cfg);
    m.stage = Stage::stage1;
    m.iteration = iteration;
    m.rng_seed = cfg.curation.rng_seed;
    m.config_digest = run_digest(cfg);
    m.counts_before = before;
    m.counts_after = ledger.sizes();
    m.extra = std::move(extra);
    rd.write_manifest(m);
  };

  if (!fs::exists(rd.state_file())) {
    if (judges.ptrs.empty()) throw UserError("no judges: pass --stub-judges or set PREFCURATE_JUDGE_URL/MODELS");
    auto before = ledger.sizes();
    auto seed = curate::initialize_seed(corpus, ledger, cfg.curation, *humans, judges.ptrs);
    if (router) append_routed(rd, router->routed, 0);
    manifest(0, before,
             json{{"seed_human", seed.human_ids.size()}, {"seed_judge", seed.judge_ids.size()}, {"routed_to_service", seed.routed},
                  {"deferred", seed.deferred}});
    save_state(rd, state);
    std::cout << "seed: gold " << seed.to_gold << ", silver " << seed.to_silver << ", discarded " << seed.to_discarded
              << ", routed " << seed.routed << '\n';
  }

  while (state.iteration < cfg.curation.iterations) {
    if (ledger.size(Pool::gold) == 0)
      throw UserError("gold pool is empty: annotate the routed pairs with `serve` first");
    if (judges.ptrs.empty()) throw UserError("no judges: pass --stub-judges or set PREFCURATE_JUDGE_URL/MODELS");
    if (router) router->routed.clear();
    auto before = ledger.sizes();
    auto r = curate::stage1_iteration(state, corpus, ledger, cfg.curation, *humans, judges.ptrs, sanity.empty() ? nullptr : &sanity);
    const auto tag = "stage1-iter" + std::to_string(r.iteration);
    write_train_outputs(rd, tag, r.train, r.iteration);
    btrm::save_checkpoint(rd.checkpoints_dir() / "best.ckpt", r.train.best, r.iteration, r.train.best_gold_accuracy);
    retrieval::write_queue(rd.queues_dir() / ("annotation-iter" + std::to_string(r.iteration) + ".jsonl"), r.selection.queue);
    append_routed(rd, r.routed, r.iteration);
    rd.append_votes(r.votes);
    json extra{{"best_gold_accuracy", r.train.best_gold_accuracy},
               {"best_step", r.train.best_step},
               {"queue", r.selection.queue.size()},
               {"skipped_eval_pairs", r.selection.skipped},
               {"human_slice", r.human_slice.size()},
               {"judge_slice", r.judge_slice.size()},
               {"routed_to_service", r.routed.size()},
               {"deferred", r.deferred.size()},
               {"no_new_data", r.no_new_data}};
    if (r.sanity) extra["sanity"] = *r.sanity;
    manifest(r.iteration, before, extra);
    save_state(rd, state);
    std::cout << "iteration " << r.iteration << ": gold acc " << r.train.best_gold_accuracy << ", queue "
              << r.selection.queue.size() << ", +gold " << r.to_gold << ", +silver " << r.to_silver << ", +discarded "
              << r.to_discarded << (r.no_new_data ? " (no new data)" : "") << '\n';
  }
  return 0;
}

int cmd_stage2(const Command& cmd, const Globals& g, const fs::path& run_dir, bool stub_judges, bool with_judges,
               bool no_judges) {
  require_run(run_dir);
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  if (with_judges) cfg.curation.stage2_with_judges = true;
  if (no_judges) cfg.curation.stage2_with_judges = false;
  curate::RunDir rd(run_dir);
  if (g.dry_run) {
    print_plan("stage2", run_dir, cfg,
               json::array({"confidence filter with checkpoints/best.ckpt", "train the gold model on human-verified pairs",
                            cfg.curation.stage2_with_judges ? "judge re-annotation of low-confidence pairs"
                                                            : "no judge re-annotation (best-model arm only)",
                            "gold-consistency retention over the unverified pool"}));
    return 0;
  }
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  auto best_path = rd.checkpoints_dir() / "best.ckpt";
  if (!fs::exists(best_path)) throw UserError("no Stage-1 model: run `stage1` first");
  auto best = btrm::load_checkpoint(best_path).model;
  Corpus corpus;
  PoolLedger ledger;
  rd.load(corpus, ledger);
  auto state = load_state(rd);

  std::vector<std::string> human_gold;
  for (const auto& id : ledger.snapshot(Pool::gold))
    if (ledger.has_human_verdict(id)) human_gold.push_back(id);
  auto gc = cfg.curation.gold_train;
  gc.rng_seed = derive_seed(cfg.curation.rng_seed, "gold-train");
  curate::GoldModel gold;
  try {
    gold = curate::train_gold_model(corpus, ledger, human_gold, gc, cfg.curation.min_gold);
  } catch (const std::runtime_error& e) {
    throw UserError(e.what());
  }
  btrm::save_checkpoint(rd.checkpoints_dir() / "gold.ckpt", gold.model, state.iteration + 1, gold.gold_accuracy);

  auto judges = make_judges(cfg, stub_judges, rd);
  if (cfg.curation.stage2_with_judges && judges.ptrs.empty())
    throw UserError("stage2 with judges needs --stub-judges or PREFCURATE_JUDGE_URL/MODELS (or pass --no-judges)");
  if (!cfg.curation.stage2_with_judges) std::cout << "stage2: judges disabled, consistency uses the best-model arm only\n";
  auto before = ledger.sizes();
  const int iteration = state.iteration + 1;
  auto r = curate::run_stage2(corpus, ledger, best, gold, judges.ptrs, cfg.curation, iteration);
  rd.append_votes(r.votes);
  RunManifest m;
  m.run_id = run_id(cfg);
  m.stage = Stage::stage2;
  m.iteration = iteration;
  m.rng_seed = cfg.curation.rng_seed;
  m.config_digest = run_digest(cfg);
  m.counts_before = before;
  m.counts_after = ledger.sizes();
  m.extra = json{{"confidence_pass", r.confidence.retained_asis.size()},
                 {"reannotation", r.confidence.reannotation.size()},
                 {"judges_used", r.judges_used},
                 {"deferred", r.deferred.size()},
                 {"gold_model_pairs", gold.trained_on.size()},
                 {"gold_model_excludes_silver", true},
                 {"to_retained", r.to_retained},
                 {"to_silver", r.to_silver},
                 {"to_discarded", r.to_discarded}};
  rd.write_manifest(m);
  std::cout << "stage2: retained " << r.to_retained << ", silver " << r.to_silver << ", discarded " << r.to_discarded
            << ", deferred " << r.deferred.size() << '\n';
  return 0;
}

int cmd_recycle(const Command& cmd, const Globals& g, const fs::path& run_dir) {
  require_run(run_dir);
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  if (g.dry_run) {
    print_plan("recycle", run_dir, cfg, json::array({"flip every discarded pair into pairs/recycled.jsonl (deduplicated)"}));
    return 0;
  }
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  Corpus corpus;
  PoolLedger ledger;
  rd.load(corpus, ledger);
  ingest::Deduplicator seen;
  for (const auto& [id, p] : corpus.pairs()) seen.insert(p);
  auto out = curate::recycle_flipped(corpus, ledger.snapshot(Pool::discarded), seen);
  std::ofstream(rd.recycled_file(), std::ios::app).close();  // present even when nothing flipped
  for (const auto& p : out) append_jsonl(rd.recycled_file(), p);
  std::cout << "recycled " << out.size() << " flipped pairs\n";
  return 0;
}

std::vector<std::size_t> parse_grid(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!trim(tok).empty()) out.push_back(to_num<std::size_t>("--n-grid", trim(tok)));
  return out;
}

int cmd_eval(const Command& cmd, const Globals& g, const fs::path& model_path, const fs::path& set_path,
             const std::string& emit_curves, const std::string& n_grid, const std::string& out_path) {
  auto cfg = resolve(cmd, g, nullptr, nullptr);
  if (!fs::exists(model_path)) throw UserError("checkpoint not found: " + model_path.string());
  if (!fs::exists(set_path)) throw UserError("eval set not found: " + set_path.string());
  if (g.dry_run) {
    std::cout << json{{"command", "eval"}, {"model", model_path.string()}, {"set", set_path.string()}}.dump(2) << '\n';
    return 0;
  }
  auto ck = btrm::load_checkpoint(model_path);
  eval::EvalSet set;
  if (set_path.extension() == ".bin") {
    set.name = set_path.stem().string();
    set.categories.push_back(eval::Category{"heldout", curate::load_samples(set_path), {}});
  } else {
    if (cfg.embed_provider == "hashing") cfg.embed_dim = ck.model.input_dim;
    auto provider = make_provider(cfg);
    set = eval::load_eval_set(set_path, *provider);
  }
  auto report = eval::category_accuracy(ck.model, set);
  std::vector<eval::CurvePoint> curve;
  bool has_groups = false;
  for (const auto& c : set.categories) has_groups |= !c.groups.empty();
  if (has_groups) {
    auto grid = parse_grid(n_grid);
    std::size_t min_size = SIZE_MAX;
    for (const auto& c : set.categories)
      for (const auto& gr : c.groups) min_size = std::min(min_size, gr.candidates.size());
    std::erase_if(grid, [&](std::size_t n) { return n > min_size; });
    if (grid.empty()) grid.push_back(1);
    curve = eval::bon_curve(eval::model_scorer(ck.model), set, grid);
  }
  std::cout << eval::report_summary(report, curve);
  auto j = eval::report_to_json(report, curve);
  if (!out_path.empty()) write_text(out_path, j.dump(2) + "\n");
  if (!emit_curves.empty()) {
    fs::create_directories(emit_curves);
    std::ostringstream os;
    os << "n\thit_rate\n";
    for (const auto& p : curve) os << p.n << '\t' << p.hit_rate << '\n';
    write_text(fs::path(emit_curves) / (set.name + ".bon.tsv"), os.str());
    write_text(fs::path(emit_curves) / (set.name + ".report.json"), j.dump(2) + "\n");
  }
  return 0;
}

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const Command& cmd, const Globals& g, const fs::path& run_dir, bool stub_preverify) {
  require_run(run_dir);
  std::optional<std::string> stored;
  auto cfg = resolve(cmd, g, &run_dir, &stored);
  curate::RunDir rd(run_dir);
  if (g.dry_run) {
    print_plan("serve", run_dir, cfg,
               json::array({"enqueue routed pairs from queues/human.jsonl",
                            "listen on " + cfg.bind + ":" + std::to_string(cfg.port)}));
    return 0;
  }
  RunLock lock(run_dir);
  check_or_record_config(run_dir, cfg, stored);
  Corpus corpus;
  PoolLedger ledger;
  rd.load(corpus, ledger);
  auto state = load_state(rd);

  serve::AnnotationService::Options opts;
  opts.lease_ttl = std::chrono::minutes(cfg.lease_ttl_minutes);
  opts.rng_seed = cfg.curation.rng_seed;
  opts.iteration = state.iteration;
  auto audit_path = rd.root() / "ledgers" / "audit.jsonl";
  opts.audit_sink = [audit_path](const serve::AuditRecord& a) { append_jsonl(audit_path, a); };
  serve::AnnotationService service(corpus, ledger, opts);

  std::vector<std::string> routed;
  auto queue_file = rd.queues_dir() / "human.jsonl";
  if (fs::exists(queue_file))
    for (const auto& j : read_jsonl(queue_file)) routed.push_back(j.at("pair_id").get<std::string>());
  std::sort(routed.begin(), routed.end());
  routed.erase(std::unique(routed.begin(), routed.end()), routed.end());
  std::erase_if(routed, [&](const std::string& id) { return ledger.pool_of(id) != Pool::unverified; });
  service.enqueue(routed);

  std::vector<std::string> objective;
  for (const auto& id : routed)
    if (const auto* a = corpus.attributes(id); a && a->objectivity == Objectivity::objective) objective.push_back(id);
  if (stub_preverify) {
    auto truth = rd.load_truth();
    serve::StubResponseVerifier v(truth ? curate::oracle_from_truth(*truth) : judge::TruthOracle{});
    service.preverify_batch(objective, v);
  } else if (auto opts_env = judge::HttpJudge::options_from_env(); !opts_env.empty()) {
    serve::HttpResponseVerifier v(opts_env.front());
    auto rep = service.preverify_batch(objective, v);
    if (!rep.failed.empty()) std::cerr << "pre-verification failed for " << rep.failed.size() << " pairs\n";
  }

  httplib::Server server;
  serve::register_routes(server, service, serve::token_from_env());
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "serving " << routed.size() << " tasks on " << cfg.bind << ":" << cfg.port << std::endl;
  bool ok = server.listen(cfg.bind, cfg.port);
  g_server = nullptr;
  if (!ok && !server.is_running()) {
    std::cerr << "listen stopped" << '\n';
  }
  return 0;
}

int cmd_report(const fs::path& run_dir) {
  require_run(run_dir);
  curate::RunDir rd(run_dir);
  Corpus corpus;
  PoolLedger ledger;
  std::vector<std::string> recycled;
  rd.load(corpus, ledger, &recycled);
  json pools = json::object();
  for (const auto& [p, n] : ledger.sizes()) pools[std::string(to_string(p))] = n;
  json j{{"run", run_dir.string()}, {"pools", pools}, {"recycled", recycled.size()}, {"ledger_entries", ledger.entries().size()}};
  if (fs::exists(rd.config_file())) j["digest"] = json::parse(read_text(rd.config_file())).at("digest");
  if (fs::exists(rd.state_file())) j["stage1"] = json::parse(read_text(rd.state_file()));
  json manifests = json::array();
  if (fs::exists(rd.manifests_dir())) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(rd.manifests_dir())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) manifests.push_back(json::parse(read_text(f)));
  }
  j["manifests"] = manifests;
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"prefcurate: preference-data curation engine"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_help_all_flag("--help-all", "Expand help for every subcommand");
  Globals g;
  app.add_option("--config", g.config_path, "flat key = value config file; flags override it")->default_str("");
  app.add_flag("--dry-run", g.dry_run, "print the plan without touching the run directory")->default_str("false");

  const RunConfig defaults;
  std::map<std::string, Command> cmds;
  auto sub = [&](const std::string& name, const std::string& desc, std::vector<std::string> groups) -> Command& {
    auto& c = cmds[name];
    c.app = app.add_subcommand(name, desc);
    c.groups = std::move(groups);
    add_config_flags(c, defaults);
    return c;
  };

  std::string run_dir, in_path, out_path, benchmarks, model_path, set_path, emit_curves, n_grid = "1,2,4,8,16", report_out;
  bool stub_judges = false, stub_humans = false, route_humans = false, with_judges = false, no_judges = false, stub_preverify = false;

  auto& c_synth = sub("synth", "generate a planted synthetic world as a new run",
                      {"core", "synth", "curation", "train", "judge", "embed"});
  c_synth.app->add_option("--run", run_dir, "run directory to create")->required();

  auto& c_ingest = sub("ingest", "structural check, dedup and decontamination of raw records into a new run",
                       {"core", "curation", "train", "judge", "embed"});
  c_ingest.app->add_option("--in", in_path, "raw line-delimited records")->required();
  c_ingest.app->add_option("--benchmarks", benchmarks, "benchmark prompt file or directory of .jsonl")->default_str("");
  c_ingest.app->add_option("--out", run_dir, "run directory to create")->required();

  auto& c_decon = sub("decontaminate", "13-gram decontamination of a pair file", {});
  c_decon.app->add_option("--in", in_path, "pair records")->required();
  c_decon.app->add_option("--benchmarks", benchmarks, "benchmark prompt file or directory")->required();
  c_decon.app->add_option("--out", out_path, "clean pair records")->required();

  auto& c_embed = sub("embed", "embed contexts and responses of a run", {"embed"});
  c_embed.app->add_option("--run", run_dir, "run directory")->required();

  auto& c_train = sub("train", "train a reward model on the curated pools", {"core", "curation", "train"});
  c_train.app->add_option("--run", run_dir, "run directory")->required();

  auto& c_s1 = sub("stage1", "seed initialization and iterative train/retrieve/label", {"core", "curation", "train", "judge"});
  c_s1.app->add_option("--run", run_dir, "run directory")->required();
  c_s1.app->add_flag("--stub-judges", stub_judges, "use offline stub judges (truth-keyed when the run has one)")->default_str("false");
  c_s1.app->add_flag("--stub-humans", stub_humans, "answer human verification from the run's truth file (default for synth runs)")->default_str("false");
  c_s1.app->add_flag("--route-humans", route_humans, "send the human slice to the annotation queue even when a truth file exists")->default_str("false");

  auto& c_s2 = sub("stage2", "confidence filter, gold model and consistency retention",
                   {"core", "curation", "gold_train", "judge"});
  c_s2.app->add_option("--run", run_dir, "run directory")->required();
  c_s2.app->add_flag("--stub-judges", stub_judges, "use offline stub judges")->default_str("false");
  auto* wj = c_s2.app->add_flag("--with-judges", with_judges, "re-annotate low-confidence pairs with judges")->default_str("false");
  auto* nj = c_s2.app->add_flag("--no-judges", no_judges, "skip judge re-annotation")->default_str("false");
  wj->excludes(nj);

  auto& c_rec = sub("recycle", "flip discarded pairs into the recycled shard", {"core"});
  c_rec.app->add_option("--run", run_dir, "run directory")->required();

  auto& c_eval = sub("eval", "pairwise and best-of-N evaluation of a checkpoint", {"embed"});
  c_eval.app->add_option("--model", model_path, "checkpoint file")->required();
  c_eval.app->add_option("--set", set_path, "eval set (.jsonl records or .bin samples)")->required();
  c_eval.app->add_option("--emit-curves", emit_curves, "directory for (n, hit-rate) tables")->default_str("");
  c_eval.app->add_option("--n-grid", n_grid, "comma-separated best-of-N sizes")->capture_default_str();
  c_eval.app->add_option("--out", report_out, "machine-readable report path")->default_str("");

  auto& c_serve = sub("serve", "annotation service over HTTP", {"serve"});
  c_serve.app->add_option("--run", run_dir, "run directory")->required();
  c_serve.app->add_flag("--stub-preverify", stub_preverify, "pre-verify objective pairs from the truth file")->default_str("false");

  auto& c_report = sub("report", "print pool sizes, state and manifests", {});
  c_report.app->add_option("--run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_synth.app->parsed()) return cmd_synth(c_synth, g, run_dir);
    if (c_ingest.app->parsed()) return cmd_ingest(c_ingest, g, in_path, benchmarks, run_dir);
    if (c_decon.app->parsed()) return cmd_decontaminate(in_path, benchmarks, out_path, g);
    if (c_embed.app->parsed()) return cmd_embed(c_embed, g, run_dir);
    if (c_train.app->parsed()) return cmd_train(c_train, g, run_dir);
    if (c_s1.app->parsed()) return cmd_stage1(c_s1, g, run_dir, stub_judges, stub_humans, route_humans);
    if (c_s2.app->parsed()) return cmd_stage2(c_s2, g, run_dir, stub_judges, with_judges, no_judges);
    if (c_rec.app->parsed()) return cmd_recycle(c_rec, g, run_dir);
    if (c_eval.app->parsed()) return cmd_eval(c_eval, g, model_path, set_path, emit_curves, n_grid, report_out);
    if (c_serve.app->parsed()) return cmd_serve(c_serve, g, run_dir, stub_preverify);
    if (c_report.app->parsed()) return cmd_report(run_dir);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace prefcurate::cli
