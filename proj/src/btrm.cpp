#include "prefcurate/btrm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace prefcurate::btrm {

namespace {

void check_dims(const RewardModel& m, const EmbeddingVector& e) {
  if (e.dim() != m.input_dim)
    throw std::invalid_argument("dimension mismatch: model " + std::to_string(m.input_dim) + ", embedding " +
                                std::to_string(e.dim()));
}

void check_finite(const RewardModel& m) {
  for (double p : m.params)
    if (!std::isfinite(p)) throw std::domain_error("reward model has non-finite parameters");
}

// Adds scale * d r(e) / d theta into grad.
void accumulate_score_gradient(const RewardModel& m, const EmbeddingVector& e, double scale, std::vector<double>& grad) {
  const std::size_t D = m.input_dim;
  if (m.arch == Arch::linear) {
    for (std::size_t i = 0; i < D; ++i) grad[i] += scale * e.values[i];
    return;
  }
  const std::size_t H = m.hidden_dim;
  const double* W = m.params.data();
  const double* b = W + H * D;
  const double* v = b + H;
  double* gW = grad.data();
  double* gb = gW + H * D;
  double* gv = gb + H;
  for (std::size_t h = 0; h < H; ++h) {
    double z = b[h];
    for (std::size_t i = 0; i < D; ++i) z += W[h * D + i] * e.values[i];
    double t = std::tanh(z);
    gv[h] += scale * t;
    double back = scale * v[h] * (1.0 - t * t);
    gb[h] += back;
    for (std::size_t i = 0; i < D; ++i) gW[h * D + i] += back * e.values[i];
  }
}

const char* arch_name(Arch a) { return a == Arch::linear ? "linear" : "mlp"; }

Arch arch_from(const std::string& s) {
  if (s == "linear") return Arch::linear;
  if (s == "mlp") return Arch::mlp;
  throw std::invalid_argument("unknown arch: " + s);
}

}  // namespace

RewardModel RewardModel::linear(std::size_t input_dim) {
  RewardModel m;
  m.arch = Arch::linear;
  m.input_dim = input_dim;
  m.params.assign(input_dim, 0.0);
  return m;
}

RewardModel RewardModel::mlp(std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed) {
  if (hidden_dim == 0) throw std::invalid_argument("mlp needs hidden_dim >= 1");
  RewardModel m;
  m.arch = Arch::mlp;
  m.input_dim = input_dim;
  m.hidden_dim = hidden_dim;
  m.params.assign(param_count(Arch::mlp, input_dim, hidden_dim), 0.0);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> w(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
  std::normal_distribution<double> out(0.0, 1.0 / std::sqrt(static_cast<double>(hidden_dim)));
  const std::size_t HD = hidden_dim * input_dim;
  for (std::size_t i = 0; i < HD; ++i) m.params[i] = w(rng);
  for (std::size_t h = 0; h < hidden_dim; ++h) m.params[HD + hidden_dim + h] = out(rng);
  return m;
}

std::size_t RewardModel::param_count(Arch arch, std::size_t input_dim, std::size_t hidden_dim) {
  return arch == Arch::linear ? input_dim : hidden_dim * input_dim + 2 * hidden_dim;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_neg(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(-x, 0.0); }

double score(const RewardModel& model, const EmbeddingVector& e) {
  check_dims(model, e);
  check_finite(model);
  const std::size_t D = model.input_dim;
  if (model.arch == Arch::linear) {
    double s = 0.0;
    for (std::size_t i = 0; i < D; ++i) s += model.params[i] * e.values[i];
    return s;
  }
  const std::size_t H = model.hidden_dim;
  const double* W = model.params.data();
  const double* b = W + H * D;
  const double* v = b + H;
  double r = 0.0;
  for (std::size_t h = 0; h < H; ++h) {
    double z = b[h];
    for (std::size_t i = 0; i < D; ++i) z += W[h * D + i] * e.values[i];
    r += v[h] * std::tanh(z);
  }
  return r;
}

PairPrediction predict_pair(const RewardModel& model, const EmbeddingVector& chosen, const EmbeddingVector& rejected,
                            std::string pair_id) {
  return PairPrediction{std::move(pair_id), sigmoid(score(model, chosen) - score(model, rejected))};
}

LossAndGradient pairwise_loss(const RewardModel& model, std::span<const PairRef> batch) {
  if (batch.empty()) throw std::invalid_argument("pairwise_loss on an empty batch");
  LossAndGradient out;
  out.gradient.assign(model.params.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& pr : batch) {
    double margin = score(model, *pr.chosen) - score(model, *pr.rejected);
    out.loss += softplus_neg(margin) * inv_n;
    // d/dmargin of -log sigma(margin) = -(1 - sigma(margin)) = -sigma(-margin)
    double g = -sigmoid(-margin) * inv_n;
    accumulate_score_gradient(model, *pr.chosen, g, out.gradient);
    accumulate_score_gradient(model, *pr.rejected, -g, out.gradient);
  }
  if (!std::isfinite(out.loss)) throw TrainingDiverged("non-finite loss in pairwise_loss");
  return out;
}

double pairwise_accuracy(const RewardModel& model, std::span<const PairRef> pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& pr : pairs)
    if (predict_pair(model, *pr.chosen, *pr.rejected).p > 0.5) ++correct;
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw std::invalid_argument("warmup_fraction must be in [0,1)");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0,1)");
  if (eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
  if (arch == Arch::mlp && hidden_dim < 1) throw std::invalid_argument("mlp needs hidden_dim >= 1");
}

json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"schedule", c.schedule == Schedule::linear_decay ? "linear_decay" : "constant"},
              {"epochs", c.epochs},
              {"rng_seed", c.rng_seed},
              {"warmup_fraction", c.warmup_fraction},
              {"momentum", c.momentum},
              {"eval_interval", c.eval_interval},
              {"arch", arch_name(c.arch)},
              {"hidden_dim", c.hidden_dim}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("schedule")) {
    auto s = j["schedule"].get<std::string>();
    if (s == "linear_decay")
      c.schedule = Schedule::linear_decay;
    else if (s == "constant")
      c.schedule = Schedule::constant;
    else
      throw std::invalid_argument("unknown schedule: " + s);
  }
  c.epochs = j.value("epochs", c.epochs);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.momentum = j.value("momentum", c.momentum);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  if (j.contains("arch")) c.arch = arch_from(j["arch"].get<std::string>());
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.validate();
  return c;
}

double learning_rate_at(const TrainConfig& c, std::size_t step, std::size_t total_steps) {
  if (c.schedule == Schedule::constant || total_steps == 0) return c.learning_rate;
  const double total = static_cast<double>(total_steps);
  const double warmup = std::floor(c.warmup_fraction * total);
  const double s = static_cast<double>(step);
  if (s < warmup) return c.learning_rate * (s + 1.0) / warmup;
  // Linear decay from the peak to zero at the end of training.
  return c.learning_rate * (total - s) / (total - warmup);
}

TrainResult train(std::span<const PairRef> silver, std::span<const PairRef> gold, const TrainConfig& config,
                  std::optional<RewardModel> init) {
  config.validate();
  if (silver.empty()) throw std::invalid_argument("train: silver set is empty");
  if (gold.empty()) throw std::invalid_argument("train: gold set is empty");
  const std::size_t dim = silver.front().chosen->dim();

  RewardModel model;
  if (init) {
    model = std::move(*init);
  } else if (config.arch == Arch::linear) {
    model = RewardModel::linear(dim);
  } else {
    model = RewardModel::mlp(dim, config.hidden_dim, config.rng_seed ^ 0x6d6c70ULL);
  }

  std::vector<std::size_t> order(silver.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.rng_seed);
  const std::size_t steps_per_epoch = (silver.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);

  TrainResult result;
  result.best_gold_accuracy = -1.0;
  std::vector<double> velocity(model.params.size(), 0.0);
  std::vector<PairRef> batch;
  std::size_t step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      batch.clear();
      auto end = std::min(order.size(), (b + 1) * config.batch_size);
      for (std::size_t i = b * config.batch_size; i < end; ++i) batch.push_back(silver[order[i]]);

      LossAndGradient lg;
      try {
        lg = pairwise_loss(model, batch);
      } catch (const TrainingDiverged&) {
        std::ostringstream msg;
        msg << "training diverged at step " << step << " (epoch " << epoch << ", lr "
            << learning_rate_at(config, step, total_steps) << ")";
        throw TrainingDiverged(msg.str());
      }
      const double lr = learning_rate_at(config, step, total_steps);
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        velocity[i] = config.momentum * velocity[i] + lg.gradient[i];
        model.params[i] -= lr * velocity[i];
      }
      for (double p : model.params)
        if (!std::isfinite(p))
          throw TrainingDiverged("non-finite parameters after step " + std::to_string(step) + " (lr " +
                                 std::to_string(lr) + ")");
      epoch_loss += lg.loss;

      HistoryRecord rec{static_cast<int>(step + 1), lg.loss, lr, std::nullopt};
      const bool last = step + 1 == total_steps;
      if ((step + 1) % static_cast<std::size_t>(config.eval_interval) == 0 || last) {
        double acc = pairwise_accuracy(model, gold);
        rec.gold_acc = acc;
        if (acc > result.best_gold_accuracy) {
          result.best_gold_accuracy = acc;
          result.best = model;
          result.best_step = rec.step;
        }
        if (last) result.final_gold_accuracy = acc;
      }
      result.history.push_back(rec);
    }
    result.epoch_losses.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
  }
  result.final_model = model;
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const RewardModel& model, int iteration,
                     double gold_accuracy) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json header{{"format", "prefcurate-rm/1"},
              {"arch", arch_name(model.arch)},
              {"input_dim", model.input_dim},
              {"hidden_dim", model.hidden_dim},
              {"iteration", iteration},
              {"gold_accuracy", gold_accuracy},
              {"trained_on", model.trained_on},
              {"n_params", model.params.size()}};
  out << header.dump() << '\n';
  for (double p : model.params) put_f64(out, p);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  json header = json::parse(line);
  if (header.value("format", "") != "prefcurate-rm/1") throw std::runtime_error("not a reward-model checkpoint");
  Checkpoint c;
  c.model.arch = arch_from(header.at("arch").get<std::string>());
  c.model.input_dim = header.at("input_dim").get<std::size_t>();
  c.model.hidden_dim = header.value("hidden_dim", std::size_t{0});
  c.model.trained_on = header.value("trained_on", "");
  c.iteration = header.at("iteration").get<int>();
  c.gold_accuracy = header.at("gold_accuracy").get<double>();
  auto n = header.at("n_params").get<std::size_t>();
  if (n != RewardModel::param_count(c.model.arch, c.model.input_dim, c.model.hidden_dim))
    throw std::runtime_error("checkpoint parameter count does not match its architecture");
  c.model.params.resize(n);
  for (auto& p : c.model.params) p = get_f64(in);
  return c;
}

void write_history(const std::filesystem::path& path, const std::vector<HistoryRecord>& history) {
  std::vector<json> rows;
  rows.reserve(history.size());
  for (const auto& h : history) {
    json r{{"step", h.step}, {"loss", h.loss}, {"lr", h.lr}};
    if (h.gold_acc) r["gold_acc"] = *h.gold_acc;
    rows.push_back(std::move(r));
  }
  write_jsonl(path, rows);
}

}  // namespace prefcurate::btrm
