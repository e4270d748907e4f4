#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "prefcurate/core.hpp"

namespace prefcurate::btrm {

enum class Arch { linear, mlp };

/// Pointwise scorer over response embeddings.
///   linear:  r(e) = w . e
///   mlp:     r(e) = sum_h v_h tanh(W_h . e + b_h), params laid out [W | b | v]
struct RewardModel {
  Arch arch = Arch::linear;
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::vector<double> params;
  std::string trained_on;

  static RewardModel linear(std::size_t input_dim);
  static RewardModel mlp(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed);
  static std::size_t param_count(Arch arch, std::size_t input_dim, std::size_t hidden_dim);

  bool operator==(const RewardModel&) const = default;
};

/// Chosen/rejected embeddings of one training or evaluation pair. Non-owning.
struct PairRef {
  const EmbeddingVector* chosen = nullptr;
  const EmbeddingVector* rejected = nullptr;
};

struct PairPrediction {
  std::string pair_id;
  double p = 0.5;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double sigmoid(double x);
/// log(1 + exp(-x)) without overflow: the BT loss of a margin x.
double softplus_neg(double x);

double score(const RewardModel& model, const EmbeddingVector& e);
PairPrediction predict_pair(const RewardModel& model, const EmbeddingVector& chosen, const EmbeddingVector& rejected,
                            std::string pair_id = {});

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// Mean of -log sigma(r_w - r_l) over the batch and its exact gradient.
LossAndGradient pairwise_loss(const RewardModel& model, std::span<const PairRef> batch);

/// Fraction of pairs with p > 0.5 (p == 0.5 counts as incorrect).
double pairwise_accuracy(const RewardModel& model, std::span<const PairRef> pairs);

enum class Schedule { linear_decay, constant };

struct TrainConfig {
  double learning_rate = 3e-3;
  std::size_t batch_size = 256;
  Schedule schedule = Schedule::linear_decay;
  int epochs = 5;
  std::uint64_t rng_seed = 0;
  double warmup_fraction = 0.0;
  double momentum = 0.0;  // 0 = plain SGD
  int eval_interval = 50;
  Arch arch = Arch::linear;
  std::size_t hidden_dim = 32;

  void validate() const;
};

json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j, TrainConfig base = {});

/// Learning rate at a 0-based optimizer step out of total_steps.
double learning_rate_at(const TrainConfig& c, std::size_t step, std::size_t total_steps);

struct HistoryRecord {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<double> gold_acc;
};

struct TrainResult {
  RewardModel best;
  double best_gold_accuracy = 0.0;
  int best_step = 0;
  RewardModel final_model;
  double final_gold_accuracy = 0.0;
  std::vector<HistoryRecord> history;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
};

/// Mini-batch gradient descent on silver; checkpoints are scored on gold
/// every eval_interval steps and at the last step, and the best one (earliest
/// among ties) is returned. Deterministic given rng_seed.
TrainResult train(std::span<const PairRef> silver, std::span<const PairRef> gold, const TrainConfig& config,
                  std::optional<RewardModel> init = std::nullopt);

void save_checkpoint(const std::filesystem::path& path, const RewardModel& model, int iteration,
                     double gold_accuracy);

struct Checkpoint {
  RewardModel model;
  int iteration = 0;
  double gold_accuracy = 0.0;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

void write_history(const std::filesystem::path& path, const std::vector<HistoryRecord>& history);

}  // namespace prefcurate::btrm
