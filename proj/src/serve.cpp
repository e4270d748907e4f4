#include "prefcurate/serve.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "prefcurate/hash.hpp"

namespace prefcurate::serve {

std::string_view to_string(HintJudgment h) {
  switch (h) {
    case HintJudgment::correct:
      return "correct";
    case HintJudgment::incorrect:
      return "incorrect";
    case HintJudgment::na:
      break;
  }
  return "n/a";
}

HintJudgment StubResponseVerifier::judge(const PreferencePair& pair, const AttributeSet&, const std::string& response) {
  if (fail_) throw std::runtime_error("stub pre-verifier is configured to fail");
  auto t = oracle_ ? oracle_(pair.id, response) : std::nullopt;
  if (!t) return HintJudgment::na;
  return *t ? HintJudgment::correct : HintJudgment::incorrect;
}

HttpResponseVerifier::HttpResponseVerifier(judge::HttpJudge::Options opts) : opts_(std::move(opts)) {
  if (opts_.url.empty()) throw std::invalid_argument("pre-verifier needs a URL");
}

HintJudgment HttpResponseVerifier::judge(const PreferencePair& pair, const AttributeSet& attrs,
                                         const std::string& response) {
  auto scheme = opts_.url.find("://");
  auto slash = opts_.url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  std::string base = slash == std::string::npos ? opts_.url : opts_.url.substr(0, slash);
  std::string path = slash == std::string::npos ? "/" : opts_.url.substr(slash);

  std::ostringstream prompt;
  prompt << "Guideline: " << attrs.annotation_guideline << "\n\n";
  for (const auto& t : pair.conversation) prompt << prefcurate::to_string(t.role) << ": " << t.content << '\n';
  prompt << "\nResponse:\n" << response << "\n\nIs this response correct? Answer on the final line with exactly "
         << "\"Correct\" or \"Incorrect\".\n";

  httplib::Client cli(base);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout).count();
  cli.set_connection_timeout(secs, 0);
  cli.set_read_timeout(secs, 0);
  httplib::Headers headers;
  if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);
  json body{{"model", opts_.model}, {"prompt", prompt.str()}, {"n_samples", 1}, {"temperature", 0.0}};
  auto res = cli.Post(path, headers, body.dump(), "application/json");
  if (!res || res->status != 200) throw std::runtime_error("pre-verification request failed");
  auto reply = json::parse(res->body);
  const auto& votes = reply.at("votes");
  if (votes.empty() || !votes[0].is_string()) return HintJudgment::na;
  std::string text = votes[0].get<std::string>();
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' ')) text.pop_back();
  auto nl = text.find_last_of('\n');
  std::string last = nl == std::string::npos ? text : text.substr(nl + 1);
  if (last == "Correct") return HintJudgment::correct;
  if (last == "Incorrect") return HintJudgment::incorrect;
  return HintJudgment::na;
}

Priority priority_of(const AttributeSet& a) {
  return {a.objectivity == Objectivity::objective ? 0 : 1, static_cast<int>(a.controversiality), a.pair_id};
}

void to_json(json& j, const AuditRecord& a) {
  j = json{{"task_id", a.task_id},
           {"pair_id", a.pair_id},
           {"annotator", a.annotator},
           {"display", judge::to_string(a.display)},
           {"submitted", a.submitted},
           {"outcome", prefcurate::to_string(a.outcome)},
           {"at", a.at}};
}

// ---------------------------------------------------------------------------

AnnotationService::AnnotationService(Corpus& corpus, PoolLedger& ledger, Options options)
    : corpus_(corpus), ledger_(ledger), options_(std::move(options)) {
  if (!options_.clock) {
    options_.clock = [] {
      return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now().time_since_epoch())
          .count();
    };
  }
}

bool AnnotationService::lease_active(const AnnotationTask& t, std::int64_t now) const {
  return t.lease && t.lease->expires_at > now;
}

std::size_t AnnotationService::enqueue(const std::vector<std::string>& pair_ids) {
  std::lock_guard lock(mu_);
  // Validate first so a bad id leaves the queue untouched.
  for (const auto& id : pair_ids) {
    if (!corpus_.contains(id)) throw ServiceError(404, "unknown pair " + id);
    if (!corpus_.attributes(id)) throw ServiceError(400, "pair " + id + " has no attributes");
  }
  const auto seed = derive_seed(options_.rng_seed, "display");
  std::size_t added = 0;
  for (const auto& id : pair_ids) {
    if (task_of_pair_.count(id) || ledger_.pool_of(id) != Pool::unverified) continue;
    AnnotationTask t;
    t.task_id = "t-" + id;
    t.pair_id = id;
    t.display = judge::draw_permutation(seed, id);
    t.priority = priority_of(*corpus_.attributes(id));
    open_.emplace(t.priority, t.task_id);
    task_of_pair_[id] = t.task_id;
    tasks_.emplace(t.task_id, std::move(t));
    ++added;
  }
  return added;
}

PreverifyReport AnnotationService::preverify_batch(const std::vector<std::string>& pair_ids, ResponseVerifier& verifier) {
  PreverifyReport report;
  for (const auto& id : pair_ids) {
    PreferencePair pair;
    AttributeSet attrs;
    {
      std::lock_guard lock(mu_);
      const auto* a = corpus_.contains(id) ? corpus_.attributes(id) : nullptr;
      if (!a || a->objectivity != Objectivity::objective) {
        report.rejected.push_back(id);
        continue;
      }
      pair = corpus_.pair(id);
      attrs = *a;
    }
    // Provider calls run outside the lock so serving never waits on them.
    try {
      PreverifyHint h;
      h.pair_id = id;
      h.model_id = verifier.model_id();
      h.chosen = verifier.judge(pair, attrs, pair.chosen);
      h.rejected = verifier.judge(pair, attrs, pair.rejected);
      {
        std::lock_guard lock(mu_);
        hints_[id] = h;
      }
      report.hints.push_back(std::move(h));
    } catch (const std::exception&) {
      report.failed.push_back(id);
    }
  }
  return report;
}

std::optional<AnnotationTask> AnnotationService::lease_next(const std::string& annotator) {
  if (annotator.empty()) throw ServiceError(400, "annotator id required");
  std::lock_guard lock(mu_);
  const auto now = options_.clock();
  for (const auto& [prio, tid] : open_) {
    const auto& t = tasks_.at(tid);
    if (lease_active(t, now) && t.lease->annotator == annotator) return t;
  }
  for (const auto& [prio, tid] : open_) {
    auto& t = tasks_.at(tid);
    if (lease_active(t, now)) continue;
    t.lease = Lease{annotator, now + options_.lease_ttl.count(), 0};
    return t;
  }
  return std::nullopt;
}

AnnotationTask AnnotationService::renew(const std::string& task_id, const std::string& annotator) {
  std::lock_guard lock(mu_);
  auto it = tasks_.find(task_id);
  if (it == tasks_.end()) throw ServiceError(404, "unknown task " + task_id);
  auto& t = it->second;
  if (t.closed) throw ServiceError(409, "task " + task_id + " already has a verdict");
  const auto now = options_.clock();
  if (!lease_active(t, now) || t.lease->annotator != annotator) throw ServiceError(410, "no active lease on " + task_id);
  if (t.lease->renewals >= options_.max_renewals) throw ServiceError(409, "lease on " + task_id + " already renewed");
  t.lease->expires_at = now + options_.lease_ttl.count();
  ++t.lease->renewals;
  return t;
}

Verdict AnnotationService::submit_verdict(const std::string& task_id, const std::string& annotator,
                                          const std::string& outcome, std::optional<std::string> rationale) {
  std::lock_guard lock(mu_);
  auto it = tasks_.find(task_id);
  if (it == tasks_.end()) throw ServiceError(404, "unknown task " + task_id);
  auto& t = it->second;
  if (t.closed) throw ServiceError(409, "task " + task_id + " already has a verdict");
  const auto now = options_.clock();
  if (!lease_active(t, now) || t.lease->annotator != annotator)
    throw ServiceError(410, "lease on " + task_id + " expired or held by another annotator");

  Outcome resolved;
  if (outcome == "left" || outcome == "right") {
    auto v = judge::resolve_vote(outcome == "left" ? judge::Vote::candidate1 : judge::Vote::candidate2, t.display);
    resolved = v == judge::ModelVerdict::chosen_stands ? Outcome::confirm : Outcome::swap;
  } else if (outcome == "confirm" || outcome == "swap" || outcome == "discard") {
    resolved = outcome_from_string(outcome);
  } else {
    throw ServiceError(400, "unknown outcome '" + outcome + "'");
  }

  Verdict v;
  v.pair_id = t.pair_id;
  v.kind = VerdictKind::human;
  v.model_id = annotator;
  v.outcome = resolved;
  v.rationale = std::move(rationale);
  v.timestamp = now;
  try {
    apply_human_verdict(corpus_, ledger_, v, options_.iteration);
  } catch (const LedgerError& e) {
    throw ServiceError(409, e.what());
  }

  t.closed = true;
  t.lease.reset();
  open_.erase(t.priority);
  ++per_annotator_[annotator];
  AuditRecord rec{t.task_id, t.pair_id, annotator, t.display, outcome, resolved, now};
  audit_.push_back(rec);
  if (options_.audit_sink) options_.audit_sink(rec);
  return v;
}

json AnnotationService::task_json_locked(const AnnotationTask& t) const {
  const auto& p = corpus_.pair(t.pair_id);
  const auto* a = corpus_.attributes(t.pair_id);
  std::optional<PreverifyHint> hint;
  if (auto h = hints_.find(t.pair_id); h != hints_.end()) hint = h->second;

  // Candidates are listed in display order; the stored orientation stays server-side.
  const bool swapped = t.display == judge::Permutation::swapped;
  auto candidate = [&](const char* position, bool stored_chosen) {
    json c{{"position", position}, {"text", stored_chosen ? p.chosen : p.rejected}};
    if (hint) c["hint"] = to_string(stored_chosen ? hint->chosen : hint->rejected);
    return c;
  };
  json j{{"task_id", t.task_id},
         {"pair_id", t.pair_id},
         {"conversation", p.conversation},
         {"candidates", json::array({candidate("left", !swapped), candidate("right", swapped)})},
         {"attributes", a ? json(*a) : json(nullptr)},
         {"priority", json::array({std::get<0>(t.priority), std::get<1>(t.priority)})}};
  if (t.lease) j["lease"] = json{{"annotator", t.lease->annotator}, {"expires_at", t.lease->expires_at}};
  return j;
}

json AnnotationService::task_json(const AnnotationTask& task) const {
  std::lock_guard lock(mu_);
  return task_json_locked(task);
}

json AnnotationService::pair_json(const std::string& pair_id) const {
  std::lock_guard lock(mu_);
  if (!corpus_.contains(pair_id)) throw ServiceError(404, "unknown pair " + pair_id);
  json j{{"pair", corpus_.pair(pair_id)}};
  const auto* a = corpus_.attributes(pair_id);
  j["attributes"] = a ? json(*a) : json(nullptr);
  if (auto h = hints_.find(pair_id); h != hints_.end())
    j["hints"] = json{{"model_id", h->second.model_id},
                      {"chosen", to_string(h->second.chosen)},
                      {"rejected", to_string(h->second.rejected)}};
  auto pool = ledger_.pool_of(pair_id);
  j["pool"] = pool ? json(std::string(prefcurate::to_string(*pool))) : json(nullptr);
  return j;
}

json AnnotationService::stats() const {
  std::lock_guard lock(mu_);
  const auto now = options_.clock();
  std::size_t leased = 0;
  for (const auto& [prio, tid] : open_)
    if (lease_active(tasks_.at(tid), now)) ++leased;
  json pools = json::object();
  for (const auto& [p, n] : ledger_.sizes()) pools[std::string(prefcurate::to_string(p))] = n;
  return json{{"pools", pools},
              {"queue_depth", open_.size()},
              {"leased", leased},
              {"verdicts", audit_.size()},
              {"per_annotator", per_annotator_}};
}

std::vector<AnnotationTask> AnnotationService::queue_order() const {
  std::lock_guard lock(mu_);
  std::vector<AnnotationTask> out;
  for (const auto& [prio, tid] : open_) out.push_back(tasks_.at(tid));
  return out;
}

std::optional<AnnotationTask> AnnotationService::task(const std::string& task_id) const {
  std::lock_guard lock(mu_);
  auto it = tasks_.find(task_id);
  if (it == tasks_.end()) return std::nullopt;
  return it->second;
}

std::vector<AuditRecord> AnnotationService::audit() const {
  std::lock_guard lock(mu_);
  return audit_;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, json{{"error", message}});
}

template <typename F>
httplib::Server::Handler guarded(const std::string& token, F&& f) {
  return [token, f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
    if (!token.empty() && req.get_header_value("Authorization") != "Bearer " + token) {
      send_error(res, 401, "unauthorized");
      return;
    }
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_error(res, e.status(), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("bad request body: ") + e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

}  // namespace

void register_routes(httplib::Server& server, AnnotationService& service, std::string token) {
  server.Get("/api/v1/tasks/next", guarded(token, [&service](const httplib::Request& req, httplib::Response& res) {
               auto annotator = req.get_param_value("annotator");
               auto t = service.lease_next(annotator);
               if (!t) {
                 res.status = 204;
                 return;
               }
               send_json(res, 200, service.task_json(*t));
             }));

  server.Post(R"(/api/v1/tasks/([^/]+)/verdict)",
              guarded(token, [&service](const httplib::Request& req, httplib::Response& res) {
                auto body = json::parse(req.body);
                std::optional<std::string> rationale;
                if (body.contains("rationale") && body["rationale"].is_string())
                  rationale = body["rationale"].get<std::string>();
                auto v = service.submit_verdict(req.matches[1].str(), body.at("annotator").get<std::string>(),
                                                body.at("outcome").get<std::string>(), std::move(rationale));
                send_json(res, 201, json{{"pair_id", v.pair_id}, {"outcome", prefcurate::to_string(v.outcome)}});
              }));

  server.Post(R"(/api/v1/tasks/([^/]+)/renew)",
              guarded(token, [&service](const httplib::Request& req, httplib::Response& res) {
                auto body = json::parse(req.body);
                auto t = service.renew(req.matches[1].str(), body.at("annotator").get<std::string>());
                send_json(res, 200, service.task_json(t));
              }));

  server.Get(R"(/api/v1/pairs/([^/]+))", guarded(token, [&service](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.pair_json(req.matches[1].str()));
             }));

  server.Get("/api/v1/stats", guarded(token, [&service](const httplib::Request&, httplib::Response& res) {
               send_json(res, 200, service.stats());
             }));
}

std::string token_from_env() {
  const char* t = std::getenv("PREFCURATE_SERVE_TOKEN");
  return t ? t : "";
}

}  // namespace prefcurate::serve
