#pragma once

// Per-shard extreme multiclass model: categorical embeddings and a
// rectified-linear MLP feeding one logit per vocabulary cell. Trained with a
// sampled softmax, evaluated with the full softmax.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellret/error.hpp"
#include "cellret/features.hpp"
#include "cellret/nn.hpp"

namespace cellret {

struct ModelConfig {
  std::vector<int> hidden = {64, 128, 64, 32};
  int embedding_dim = 16;
  double learning_rate = 0.002;
  int epochs = 16;
  int batch_size = 512;
  int num_negatives = 512;
  int patience = 2;
  uint64_t seed = 7;
  std::string optimizer = "adam";

  // Published architecture and schedule.
  static ModelConfig paper() {
    ModelConfig c;
    c.hidden = {1024, 2056, 1024, 256};
    c.learning_rate = 0.002;
    c.epochs = 16;
    c.batch_size = 45'000;
    c.num_negatives = 25'000;
    return c;
  }

  void validate() const {
    if (hidden.empty()) throw Error(ErrorKind::kConfig, "model needs hidden layers");
    for (int h : hidden) {
      if (h <= 0) throw Error(ErrorKind::kConfig, "hidden layer width must be positive");
    }
    if (embedding_dim <= 0 || batch_size <= 0 || num_negatives < 0 || epochs < 0 ||
        patience < 1 || !(learning_rate > 0.0)) {
      throw Error(ErrorKind::kConfig, "invalid model config");
    }
    nn::parse_optimizer(optimizer);
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"hidden", c.hidden},         {"embedding_dim", c.embedding_dim},
          {"learning_rate", c.learning_rate}, {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"num_negatives", c.num_negatives},
          {"patience", c.patience},     {"seed", c.seed},
          {"optimizer", c.optimizer}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j,
                                          ModelConfig c = ModelConfig{}) {
  try {
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<int>>();
    if (j.contains("embedding_dim")) c.embedding_dim = j.at("embedding_dim").get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("num_negatives")) c.num_negatives = j.at("num_negatives").get<int>();
    if (j.contains("patience")) c.patience = j.at("patience").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename S>
struct ShardModelT {
  ModelConfig config;
  int num_classes = 0;
  nn::Tower<S> tower;
  nn::Mat<S> out_w;  // final hidden width x K
  nn::Mat<S> out_b;  // K x 1

  std::vector<nn::Mat<S>*> tensors() {
    std::vector<nn::Mat<S>*> out;
    tower.append_tensors(out);
    out.push_back(&out_w);
    out.push_back(&out_b);
    return out;
  }

  std::vector<const nn::Mat<S>*> tensors() const {
    auto mut = const_cast<ShardModelT*>(this)->tensors();
    return {mut.begin(), mut.end()};
  }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out;
    tower.append_names(out);
    out.emplace_back("output.w");
    out.emplace_back("output.b");
    return out;
  }

  ShardModelT zeros_like() const {
    ShardModelT z;
    z.config = config;
    z.num_classes = num_classes;
    z.tower = tower.zeros_like();
    z.out_w = nn::Mat<S>::Zero(out_w.rows(), out_w.cols());
    z.out_b = nn::Mat<S>::Zero(out_b.rows(), out_b.cols());
    return z;
  }

  template <typename T>
  ShardModelT<T> cast() const {
    ShardModelT<T> m;
    m.config = config;
    m.num_classes = num_classes;
    m.tower.schema = tower.schema;
    for (const auto& t : tower.emb) m.tower.emb.push_back(t.template cast<T>());
    for (const auto& t : tower.w) m.tower.w.push_back(t.template cast<T>());
    for (const auto& t : tower.b) m.tower.b.push_back(t.template cast<T>());
    m.out_w = out_w.template cast<T>();
    m.out_b = out_b.template cast<T>();
    return m;
  }
};

using ShardModel = ShardModelT<float>;

template <typename S = float>
ShardModelT<S> init_shard_model(const ModelConfig& config, int num_classes,
                                const nn::InputSchema& schema) {
  config.validate();
  if (num_classes < 1) throw Error(ErrorKind::kConfig, "vocabulary is empty");
  if (schema.emb_dim != config.embedding_dim) {
    throw Error(ErrorKind::kConfig, "schema embedding width differs from config");
  }
  Rng rng(config.seed);
  ShardModelT<S> m;
  m.config = config;
  m.num_classes = num_classes;
  m.tower = nn::Tower<S>::init(schema, config.hidden, rng);
  const int h = m.tower.output_dim();
  m.out_w.resize(h, num_classes);
  nn::glorot_uniform(m.out_w, h, num_classes, rng);
  m.out_b = nn::Mat<S>::Zero(num_classes, 1);
  return m;
}

struct Prediction {
  std::vector<double> probabilities;
};

// Column-wise log-softmax of logits, computed in double.
inline Eigen::MatrixXd log_softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    const double lse = m + std::log((logits.col(c).array() - m).exp().sum());
    out.col(c) = logits.col(c).array() - lse;
  }
  return out;
}

template <typename S>
Eigen::MatrixXd logits_batch(const ShardModelT<S>& model, const nn::Batch<S>& batch) {
  typename nn::Tower<S>::Cache cache;
  const nn::Mat<S>& h = model.tower.forward(batch, cache);
  nn::Mat<S> logits = model.out_w.transpose() * h;
  logits.colwise() += model.out_b.col(0);
  Eigen::MatrixXd out = logits.template cast<double>();
  if (!out.allFinite()) {
    throw Error(ErrorKind::kNumeric, "non-finite logits (max |h| = " +
                                         std::to_string(double(h.cwiseAbs().maxCoeff())) +
                                         ")");
  }
  return out;
}

// K x B log-probabilities.
template <typename S>
Eigen::MatrixXd log_probs_batch(const ShardModelT<S>& model, const nn::Batch<S>& batch) {
  return log_softmax_columns(logits_batch(model, batch));
}

template <typename S>
Prediction forward(const ShardModelT<S>& model, const FeatureVector& fv) {
  const auto batch = nn::make_single<S>(fv);
  const Eigen::MatrixXd lp = log_probs_batch(model, batch);
  Prediction p;
  p.probabilities.resize(static_cast<std::size_t>(lp.rows()));
  for (Eigen::Index k = 0; k < lp.rows(); ++k) p.probabilities[k] = std::exp(lp(k, 0));
  return p;
}

// Uniform sample without replacement from [0, K) minus `exclude`.
inline std::vector<int> sample_negatives(int num_classes, std::span<const int> exclude,
                                         int count, Rng& rng) {
  std::vector<char> banned(static_cast<std::size_t>(num_classes), 0);
  for (int p : exclude) banned[p] = 1;
  std::vector<int> pool;
  pool.reserve(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    if (!banned[k]) pool.push_back(k);
  }
  if (count < 0 || count > static_cast<int>(pool.size())) {
    throw Error(ErrorKind::kConfig,
                "cannot sample " + std::to_string(count) + " negatives from " +
                    std::to_string(pool.size()) + " non-positive classes");
  }
  for (int i = 0; i < count; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

inline std::vector<int> distinct_labels(std::span<const int32_t> labels, int num_classes) {
  std::vector<int> out;
  for (int32_t l : labels) {
    if (l < 0 || l >= num_classes) {
      throw Error(ErrorKind::kData, "training label out of vocabulary");
    }
    out.push_back(l);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Mean over the batch of the cross entropy over the shared candidate set:
// every positive class in the batch plus the sampled negatives. Another
// row's positive therefore acts as a negative for this row. When grad is
// given, accumulates d(mean loss)/d(params) into it.
template <typename S>
double sampled_softmax_loss(const ShardModelT<S>& model, const nn::Batch<S>& batch,
                            std::span<const int> negatives,
                            std::type_identity_t<ShardModelT<S>>* grad) {
  const auto positives = distinct_labels(batch.labels, model.num_classes);
  for (int k : negatives) {
    if (k < 0 || k >= model.num_classes ||
        std::binary_search(positives.begin(), positives.end(), k)) {
      throw Error(ErrorKind::kInvalidArgument, "negative class overlaps the batch positives");
    }
  }
  std::vector<int> candidates(positives.begin(), positives.end());
  candidates.insert(candidates.end(), negatives.begin(), negatives.end());
  const int n_cand = static_cast<int>(candidates.size());
  const int bsz = batch.size;

  // Position of each row's label within the candidate list.
  std::vector<int> target(bsz);
  for (int i = 0; i < bsz; ++i) {
    target[i] = static_cast<int>(
        std::lower_bound(positives.begin(), positives.end(), batch.labels[i]) -
        positives.begin());
  }

  typename nn::Tower<S>::Cache cache;
  const nn::Mat<S>& h = model.tower.forward(batch, cache);
  nn::Mat<S> w_c(model.out_w.rows(), n_cand);
  nn::Mat<S> b_c(n_cand, 1);
  for (int k = 0; k < n_cand; ++k) {
    w_c.col(k) = model.out_w.col(candidates[k]);
    b_c(k, 0) = model.out_b(candidates[k], 0);
  }
  nn::Mat<S> logits = w_c.transpose() * h;
  logits.colwise() += b_c.col(0);
  const Eigen::MatrixXd lp = log_softmax_columns(logits.template cast<double>());

  double total = 0.0;
  for (int i = 0; i < bsz; ++i) total -= lp(target[i], i);
  if (!std::isfinite(total)) throw Error(ErrorKind::kNumeric, "non-finite sampled loss");
  if (!grad) return total / bsz;

  nn::Mat<S> d_logits = (lp.array().exp() / bsz).matrix().template cast<S>();
  for (int i = 0; i < bsz; ++i) d_logits(target[i], i) -= static_cast<S>(1.0 / bsz);
  nn::Mat<S> gw_c = h * d_logits.transpose();
  nn::Mat<S> gb_c = d_logits.rowwise().sum();
  for (int k = 0; k < n_cand; ++k) {
    grad->out_w.col(candidates[k]) += gw_c.col(k);
    grad->out_b(candidates[k], 0) += gb_c(k, 0);
  }
  nn::Mat<S> d_h = w_c * d_logits;
  model.tower.backward(batch, cache, std::move(d_h), grad->tower);
  return total / bsz;
}

// Mean full-softmax cross entropy over the batch, with optional gradient.
template <typename S>
double full_softmax_loss(const ShardModelT<S>& model, const nn::Batch<S>& batch,
                         std::type_identity_t<ShardModelT<S>>* grad) {
  typename nn::Tower<S>::Cache cache;
  const nn::Mat<S>& h = model.tower.forward(batch, cache);
  nn::Mat<S> logits = model.out_w.transpose() * h;
  logits.colwise() += model.out_b.col(0);
  const Eigen::MatrixXd lp = log_softmax_columns(logits.template cast<double>());
  double total = 0.0;
  for (int i = 0; i < batch.size; ++i) total -= lp(batch.labels[i], i);
  if (grad) {
    nn::Mat<S> d_logits = (lp.array().exp() / batch.size).matrix().template cast<S>();
    for (int i = 0; i < batch.size; ++i) {
      d_logits(batch.labels[i], i) -= static_cast<S>(1.0 / batch.size);
    }
    grad->out_w.noalias() += h * d_logits.transpose();
    grad->out_b += d_logits.rowwise().sum();
    nn::Mat<S> d_h = model.out_w * d_logits;
    model.tower.backward(batch, cache, std::move(d_h), grad->tower);
  }
  return total / batch.size;
}

// Samples negatives shared by the batch, excluding every positive in it, and
// takes one optimizer step. Returns the mean batch loss before the step.
template <typename S>
double train_step(ShardModelT<S>& model, const nn::Batch<S>& batch, int num_negatives,
                  Rng& rng, nn::Optimizer<S>& opt, ShardModelT<S>* scratch = nullptr) {
  const auto positives = distinct_labels(batch.labels, model.num_classes);
  const int available = model.num_classes - static_cast<int>(positives.size());
  if (num_negatives < 0 || num_negatives > available) {
    throw Error(ErrorKind::kConfig,
                "num_negatives " + std::to_string(num_negatives) + " exceeds the " +
                    std::to_string(available) + " non-positive classes");
  }
  const auto negatives = sample_negatives(model.num_classes, positives, num_negatives, rng);
  ShardModelT<S> local;
  ShardModelT<S>& grad = scratch ? *scratch : local;
  if (!scratch) grad = model.zeros_like();
  nn::set_zero(grad.tensors());
  const double loss = sampled_softmax_loss(model, batch, negatives, &grad);
  opt.step(model.tensors(), grad.tensors());
  return loss;
}

// Mean -log p(label) over rows with an in-vocabulary label.
template <typename S>
double eval_cross_entropy(const ShardModelT<S>& model, const nn::EncodedSet& set,
                          std::size_t chunk = 1024) {
  double total = 0.0;
  std::size_t counted = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    rows.clear();
    for (std::size_t r = start; r < std::min(set.size(), start + chunk); ++r) {
      if (set.labels[r] >= 0) rows.push_back(r);
    }
    if (rows.empty()) continue;
    const auto batch = nn::make_batch<S>(set, rows);
    const Eigen::MatrixXd lp = log_probs_batch(model, batch);
    for (int i = 0; i < batch.size; ++i) total -= lp(batch.labels[i], i);
    counted += rows.size();
  }
  if (counted == 0) throw Error(ErrorKind::kData, "no in-vocabulary events to evaluate");
  return total / static_cast<double>(counted);
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double best_val_loss = 0.0;
  int num_negatives = 0;
};

struct TrainingLog {
  std::vector<EpochLog> epochs;
  int best_epoch = 0;
  bool early_stopped = false;
};

inline nlohmann::json to_json(const TrainingLog& log) {
  nlohmann::json j;
  j["best_epoch"] = log.best_epoch;
  j["early_stopped"] = log.early_stopped;
  nlohmann::json rows = nlohmann::json::array();
  for (const EpochLog& e : log.epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"best_val_loss", e.best_val_loss},
                    {"num_negatives", e.num_negatives}});
  }
  j["epochs"] = rows;
  return j;
}

// Runs up to config.epochs, keeps the parameters of the epoch with the lowest
// validation cross entropy, and stops after `patience` epochs without
// improvement. Batches with too few non-positive classes use as many
// negatives as remain.
template <typename S>
TrainingLog fit(ShardModelT<S>& model, const nn::EncodedSet& train,
                const nn::EncodedSet& validation) {
  const ModelConfig& cfg = model.config;
  TrainingLog log;
  if (cfg.epochs == 0) return log;
  if (train.empty() || validation.empty()) {
    throw Error(ErrorKind::kData, "training and validation sets must be non-empty");
  }
  for (int32_t l : train.labels) {
    if (l < 0) throw Error(ErrorKind::kData, "training label out of vocabulary");
  }
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  nn::Optimizer<S> opt(nn::parse_optimizer(cfg.optimizer), cfg.learning_rate);
  ShardModelT<S> scratch = model.zeros_like();
  ShardModelT<S> best = model;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    nn::shuffle(order, rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    int used_negatives = cfg.num_negatives;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto batch = nn::make_batch<S>(
          train, std::span<const std::size_t>(order.data() + start, end - start));
      const int distinct =
          static_cast<int>(distinct_labels(batch.labels, model.num_classes).size());
      const int negatives = std::min(cfg.num_negatives, model.num_classes - distinct);
      used_negatives = std::min(used_negatives, negatives);
      loss_sum += train_step(model, batch, negatives, rng, opt, &scratch);
      ++batches;
    }
    const double val = eval_cross_entropy(model, validation);
    if (!std::isfinite(val) || !nn::all_finite(model.tensors())) {
      throw Error(ErrorKind::kNumeric, "training diverged at epoch " + std::to_string(epoch) +
                                           ": " + to_json(log).dump());
    }
    if (val < best_val) {
      best_val = val;
      best = model;
      log.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    log.epochs.push_back({epoch, loss_sum / static_cast<double>(batches), val, best_val,
                          used_negatives});
    if (since_best >= cfg.patience) {
      log.early_stopped = epoch < cfg.epochs;
      break;
    }
  }
  model = std::move(best);
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_shard_model(const std::filesystem::path& path, const ShardModel& m,
                             ShardId shard) {
  nn::CheckpointHeader h;
  h.kind = "xmc";
  h.config = to_json(m.config);
  h.schema = nn::to_json(m.tower.schema);
  h.extra = {{"num_classes", m.num_classes}, {"shard", std::string(to_string(shard))}};
  h.names = m.tensor_names();
  nn::write_checkpoint<float>(path, h, m.tensors());
}

inline ShardModel load_shard_model(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  const auto h = nn::read_checkpoint_header(in, path.string());
  if (h.kind != "xmc") throw Error(ErrorKind::kData, path.string() + ": not an xmc checkpoint");
  ShardModel m;
  try {
    const ModelConfig cfg = model_config_from_json(h.config);
    const nn::InputSchema schema = nn::schema_from_json(h.schema);
    m = init_shard_model<float>(cfg, h.extra.at("num_classes").get<int>(), schema);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, path.string() + ": " + e.what());
  }
  nn::read_checkpoint_payload<float>(in, h, m.tensor_names(), m.tensors(), path.string());
  return m;
}

}  // namespace cellret
