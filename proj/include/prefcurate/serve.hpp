#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "prefcurate/core.hpp"
#include "prefcurate/judge.hpp"

namespace httplib {
class Server;
}

namespace prefcurate::serve {

enum class HintJudgment { correct, incorrect, na };
std::string_view to_string(HintJudgment h);

/// Pre-verification of an objective pair; one judgment per stored response.
struct PreverifyHint {
  std::string pair_id;
  std::string model_id;
  HintJudgment chosen = HintJudgment::na;
  HintJudgment rejected = HintJudgment::na;
};

/// Judges a single response in isolation (one response per query).
class ResponseVerifier {
 public:
  virtual ~ResponseVerifier() = default;
  virtual std::string model_id() const = 0;
  /// May throw; a failure leaves the pair without hints.
  virtual HintJudgment judge(const PreferencePair& pair, const AttributeSet& attrs, const std::string& response) = 0;
};

class StubResponseVerifier final : public ResponseVerifier {
 public:
  explicit StubResponseVerifier(judge::TruthOracle oracle, bool fail = false)
      : oracle_(std::move(oracle)), fail_(fail) {}
  std::string model_id() const override { return "stub-preverify"; }
  HintJudgment judge(const PreferencePair& pair, const AttributeSet& attrs, const std::string& response) override;

 private:
  judge::TruthOracle oracle_;
  bool fail_;
};

/// Same wire call as the judge client; the final line of the reply must be
/// exactly "Correct" or "Incorrect", anything else is n/a.
class HttpResponseVerifier final : public ResponseVerifier {
 public:
  explicit HttpResponseVerifier(judge::HttpJudge::Options opts);
  std::string model_id() const override { return opts_.model; }
  HintJudgment judge(const PreferencePair& pair, const AttributeSet& attrs, const std::string& response) override;

 private:
  judge::HttpJudge::Options opts_;
};

/// objective first, then low < medium < high, then pair_id.
using Priority = std::tuple<int, int, std::string>;
Priority priority_of(const AttributeSet& attrs);

struct Lease {
  std::string annotator;
  std::int64_t expires_at = 0;  // ms on the service clock
  int renewals = 0;
};

struct AnnotationTask {
  std::string task_id;
  std::string pair_id;
  judge::Permutation display = judge::Permutation::identity;
  Priority priority;
  std::optional<Lease> lease;
  bool closed = false;
};

struct AuditRecord {
  std::string task_id;
  std::string pair_id;
  std::string annotator;
  judge::Permutation display = judge::Permutation::identity;
  std::string submitted;  // as sent: left/right/confirm/swap/discard
  Outcome outcome = Outcome::confirm;
  std::int64_t at = 0;
};

void to_json(json& j, const AuditRecord& a);

/// Service errors carry the HTTP status they map to.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct PreverifyReport {
  std::vector<PreverifyHint> hints;
  std::vector<std::string> rejected;  // not objective, or unknown
  std::vector<std::string> failed;    // provider errors; served without hints
};

/// Leases human-verification tasks in priority order and turns verdicts into
/// gold/discarded transitions. Lease and verdict decisions go through one
/// mutex, so they are linearizable.
class AnnotationService {
 public:
  using Clock = std::function<std::int64_t()>;  // milliseconds

  struct Options {
    std::chrono::milliseconds lease_ttl{std::chrono::minutes(30)};
    int max_renewals = 1;
    std::uint64_t rng_seed = 0;  // display permutations
    int iteration = 0;           // ledger iteration tag for verdicts
    Clock clock;                 // defaults to steady_clock
    std::function<void(const AuditRecord&)> audit_sink;
  };

  AnnotationService(Corpus& corpus, PoolLedger& ledger, Options options);

  /// Adds tasks for unverified pairs; errors on missing attributes. Pairs
  /// already queued are skipped. Returns the number of new tasks.
  std::size_t enqueue(const std::vector<std::string>& pair_ids);

  PreverifyReport preverify_batch(const std::vector<std::string>& pair_ids, ResponseVerifier& verifier);

  /// The caller's active lease if it has one, else the best free task.
  std::optional<AnnotationTask> lease_next(const std::string& annotator);
  /// Extends an active lease once.
  AnnotationTask renew(const std::string& task_id, const std::string& annotator);

  /// outcome: left/right (displayed positions) or confirm/swap (stored
  /// orientation), or discard. Returns the resolved verdict.
  Verdict submit_verdict(const std::string& task_id, const std::string& annotator, const std::string& outcome,
                         std::optional<std::string> rationale = std::nullopt);

  json task_json(const AnnotationTask& task) const;
  json pair_json(const std::string& pair_id) const;
  json stats() const;

  std::vector<AnnotationTask> queue_order() const;  // open tasks by priority
  std::optional<AnnotationTask> task(const std::string& task_id) const;
  std::vector<AuditRecord> audit() const;
  std::int64_t now() const { return options_.clock(); }

 private:
  bool lease_active(const AnnotationTask& t, std::int64_t now) const;
  json task_json_locked(const AnnotationTask& task) const;

  Corpus& corpus_;
  PoolLedger& ledger_;
  Options options_;
  mutable std::mutex mu_;
  std::map<std::string, AnnotationTask> tasks_;  // by task_id
  std::map<Priority, std::string> open_;         // priority -> task_id
  std::map<std::string, std::string> task_of_pair_;
  std::map<std::string, PreverifyHint> hints_;
  std::map<std::string, std::size_t> per_annotator_;
  std::vector<AuditRecord> audit_;
};

/// Registers the /api/v1 routes. A non-empty token requires
/// "Authorization: Bearer <token>" on every request.
void register_routes(httplib::Server& server, AnnotationService& service, std::string token);

/// PREFCURATE_SERVE_TOKEN, empty when unset.
std::string token_from_env();

}  // namespace prefcurate::serve
