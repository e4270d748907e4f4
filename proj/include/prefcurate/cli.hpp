#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefcurate/curate.hpp"
#include "prefcurate/eval.hpp"

namespace prefcurate::cli {

/// Everything a run can be configured with. Serializable as a flat
/// key = value document; flags override the file.
struct RunConfig {
  curate::CurationConfig curation;
  std::string embed_provider = "hashing";  // hashing | remote
  std::size_t embed_dim = 256;
  int stub_judges = 3;
  double stub_accuracy = 0.95;
  double stub_position_bias = 0.0;
  double stub_unsure_rate = 0.0;
  std::string bind = "127.0.0.1";
  int port = 8080;
  int lease_ttl_minutes = 30;
  eval::SyntheticWorldSpec synth;
};

struct ConfigKey {
  std::string name;   // also the long flag: --<name>
  std::string group;  // which subcommands expose it
  std::string help;
  bool in_digest = true;  // operational knobs (iteration count, parallelism, bind) are excluded
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<ConfigKey>& config_keys();

/// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
std::map<std::string, std::string> parse_config_text(const std::string& text);
void apply(RunConfig& cfg, const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> to_kv(const RunConfig& cfg);
/// Digest over the result-affecting keys.
std::string run_digest(const RunConfig& cfg);

/// Bad input from the user (exit code 1).
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exclusive lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Entry point; returns 0 on success, 1 on user error, 2 on internal error.
int run(int argc, char** argv);

}  // namespace prefcurate::cli
