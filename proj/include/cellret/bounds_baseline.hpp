#pragma once

// Rectangle baseline: the same feature front-end feeding a small MLP that
// emits a box (center offset and half extents, in km) around the
// destination center.

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

#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/nn.hpp"
#include "cellret/s2geom.hpp"

namespace cellret {

struct BaselineConfig {
  std::vector<int> hidden = {64, 32};
  int embedding_dim = 16;
  double learning_rate = 0.002;
  int epochs = 16;
  int batch_size = 512;
  int patience = 2;
  uint64_t seed = 11;
  std::string optimizer = "adam";
  double alpha = 1.0;
  double beta = 0.01;
  double output_scale_km = 10.0;
  double min_extent_km = 0.5;

  void validate() const {
    if (hidden.empty()) throw Error(ErrorKind::kConfig, "baseline needs hidden layers");
    for (int h : hidden) {
      if (h <= 0) throw Error(ErrorKind::kConfig, "hidden layer width must be positive");
    }
    if (embedding_dim <= 0 || batch_size <= 0 || epochs < 0 || patience < 1 ||
        !(learning_rate > 0.0) || !(alpha >= 0.0) || !(beta >= 0.0) ||
        !(output_scale_km > 0.0) || !(min_extent_km >= 0.0)) {
      throw Error(ErrorKind::kConfig, "invalid baseline config");
    }
    nn::parse_optimizer(optimizer);
  }

  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

inline nlohmann::json to_json(const BaselineConfig& c) {
  return {{"hidden", c.hidden},
          {"embedding_dim", c.embedding_dim},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"patience", c.patience},
          {"seed", c.seed},
          {"optimizer", c.optimizer},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"output_scale_km", c.output_scale_km},
          {"min_extent_km", c.min_extent_km}};
}

inline BaselineConfig baseline_config_from_json(const nlohmann::json& j,
                                                BaselineConfig c = BaselineConfig{}) {
  try {
    if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<int>>();
    if (j.contains("embedding_dim")) c.embedding_dim = j.at("embedding_dim").get<int>();
    if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
    if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
    if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
    if (j.contains("patience")) c.patience = j.at("patience").get<int>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<std::string>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("beta")) c.beta = j.at("beta").get<double>();
    if (j.contains("output_scale_km")) c.output_scale_km = j.at("output_scale_km").get<double>();
    if (j.contains("min_extent_km")) c.min_extent_km = j.at("min_extent_km").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("baseline config: ") + e.what());
  }
  c.validate();
  return c;
}

// Booked location relative to the destination center, in km.
inline std::array<double, 2> offset_from_center(const LatLng& center, const LatLng& p) {
  double dlng = p.lng - center.lng;
  if (dlng > 180.0) dlng -= 360.0;
  if (dlng < -180.0) dlng += 360.0;
  const double c = std::max(std::cos(center.lat * kDegToRad), 1e-3);
  return {(p.lat - center.lat) * gen_detail::kKmPerDegLat, dlng * gen_detail::kKmPerDegLat * c};
}

template <typename S>
struct BoundsModelT {
  BaselineConfig config;
  nn::Tower<S> tower;
  nn::Mat<S> head_w;  // 4 x final hidden width
  nn::Mat<S> head_b;  // 4 x 1

  std::vector<nn::Mat<S>*> tensors() {
    std::vector<nn::Mat<S>*> out;
    tower.append_tensors(out);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
  }

  std::vector<const nn::Mat<S>*> tensors() const {
    auto mut = const_cast<BoundsModelT*>(this)->tensors();
    return {mut.begin(), mut.end()};
  }

  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out;
    tower.append_names(out);
    out.emplace_back("head.w");
    out.emplace_back("head.b");
    return out;
  }

  BoundsModelT zeros_like() const {
    BoundsModelT z;
    z.config = config;
    z.tower = tower.zeros_like();
    z.head_w = nn::Mat<S>::Zero(head_w.rows(), head_w.cols());
    z.head_b = nn::Mat<S>::Zero(head_b.rows(), head_b.cols());
    return z;
  }
};

using BoundsModel = BoundsModelT<float>;

template <typename S = float>
BoundsModelT<S> init_bounds_model(const BaselineConfig& config, const nn::InputSchema& schema) {
  config.validate();
  if (schema.emb_dim != config.embedding_dim) {
    throw Error(ErrorKind::kConfig, "schema embedding width differs from config");
  }
  Rng rng(config.seed);
  BoundsModelT<S> m;
  m.config = config;
  m.tower = nn::Tower<S>::init(schema, config.hidden, rng);
  m.head_w.resize(4, m.tower.output_dim());
  nn::glorot_uniform(m.head_w, m.tower.output_dim(), 4, rng);
  m.head_b = nn::Mat<S>::Zero(4, 1);
  return m;
}

// Box in km relative to the destination center.
struct BoundsOutput {
  double center_north_km = 0.0;
  double center_east_km = 0.0;
  double half_lat_km = 0.0;
  double half_lng_km = 0.0;
};

inline double softplus(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline BoundsOutput decode_head(const BaselineConfig& c, double o0, double o1, double o2,
                                double o3) {
  const double s = c.output_scale_km;
  return {s * o0, s * o1, c.min_extent_km + s * softplus(o2),
          c.min_extent_km + s * softplus(o3)};
}

struct LossParts {
  double inclusion = 0.0;
  double size = 0.0;
  double total = 0.0;  // alpha * inclusion + beta * size
};

inline LossParts piecewise_loss(const BaselineConfig& c, const BoundsOutput& b, double north_km,
                                double east_km) {
  LossParts p;
  p.inclusion = std::max(0.0, std::abs(north_km - b.center_north_km) - b.half_lat_km) +
                std::max(0.0, std::abs(east_km - b.center_east_km) - b.half_lng_km);
  p.size = b.half_lat_km + b.half_lng_km;
  p.total = c.alpha * p.inclusion + c.beta * p.size;
  return p;
}

template <typename S>
Eigen::MatrixXd head_outputs(const BoundsModelT<S>& m, const nn::Batch<S>& batch,
                             typename nn::Tower<S>::Cache& cache) {
  const nn::Mat<S>& h = m.tower.forward(batch, cache);
  nn::Mat<S> o = m.head_w * h;
  o.colwise() += m.head_b.col(0);
  return o.template cast<double>();
}

// Mean loss parts over the batch; accumulates gradients of the mean total
// into grad when given. Requires batch.targets.
template <typename S>
LossParts bounds_loss(const BoundsModelT<S>& m, const nn::Batch<S>& batch,
                      std::type_identity_t<BoundsModelT<S>>* grad) {
  if (batch.targets.size() != static_cast<std::size_t>(batch.size) * 2) {
    throw Error(ErrorKind::kData, "baseline batch has no targets");
  }
  const BaselineConfig& c = m.config;
  typename nn::Tower<S>::Cache cache;
  const Eigen::MatrixXd o = head_outputs(m, batch, cache);
  LossParts mean;
  nn::Mat<S> d_o(4, batch.size);
  const double inv = 1.0 / batch.size;
  const double s = c.output_scale_km;
  for (int i = 0; i < batch.size; ++i) {
    const BoundsOutput b = decode_head(c, o(0, i), o(1, i), o(2, i), o(3, i));
    const double tn = batch.targets[2 * i];
    const double te = batch.targets[2 * i + 1];
    const LossParts p = piecewise_loss(c, b, tn, te);
    mean.inclusion += p.inclusion * inv;
    mean.size += p.size * inv;
    mean.total += p.total * inv;
    if (!grad) continue;
    const double rn = tn - b.center_north_km;
    const double re = te - b.center_east_km;
    double g_cn = 0.0, g_ce = 0.0, g_h = c.beta, g_w = c.beta;
    if (std::abs(rn) > b.half_lat_km) {
      g_cn = -c.alpha * (rn > 0 ? 1.0 : -1.0);
      g_h -= c.alpha;
    }
    if (std::abs(re) > b.half_lng_km) {
      g_ce = -c.alpha * (re > 0 ? 1.0 : -1.0);
      g_w -= c.alpha;
    }
    d_o(0, i) = static_cast<S>(g_cn * s * inv);
    d_o(1, i) = static_cast<S>(g_ce * s * inv);
    d_o(2, i) = static_cast<S>(g_h * s * sigmoid(o(2, i)) * inv);
    d_o(3, i) = static_cast<S>(g_w * s * sigmoid(o(3, i)) * inv);
  }
  if (!std::isfinite(mean.total)) throw Error(ErrorKind::kNumeric, "non-finite baseline loss");
  if (grad) {
    const nn::Mat<S>& h = cache.a.back();
    grad->head_w.noalias() += d_o * h.transpose();
    grad->head_b += d_o.rowwise().sum();
    nn::Mat<S> d_h = m.head_w.transpose() * d_o;
    m.tower.backward(batch, cache, std::move(d_h), grad->tower);
  }
  return mean;
}

template <typename S>
LossParts eval_bounds_loss(const BoundsModelT<S>& m, const nn::EncodedSet& set,
                           std::size_t chunk = 2048) {
  if (set.empty()) throw Error(ErrorKind::kData, "no events to evaluate");
  LossParts total;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < set.size(); start += chunk) {
    rows.clear();
    for (std::size_t r = start; r < std::min(set.size(), start + chunk); ++r) rows.push_back(r);
    const auto batch = nn::make_batch<S>(set, rows);
    const LossParts p = bounds_loss<S>(m, batch, nullptr);
    const double w = static_cast<double>(rows.size());
    total.inclusion += p.inclusion * w;
    total.size += p.size * w;
    total.total += p.total * w;
  }
  const double n = static_cast<double>(set.size());
  return {total.inclusion / n, total.size / n, total.total / n};
}

struct BaselineEpochLog {
  int epoch = 0;
  LossParts train;
  LossParts val;
  double best_val_loss = 0.0;
};

struct BaselineTrainingLog {
  std::vector<BaselineEpochLog> epochs;
  int best_epoch = 0;
  bool early_stopped = false;
};

inline nlohmann::json to_json(const LossParts& p) {
  return {{"inclusion", p.inclusion}, {"size", p.size}, {"total", p.total}};
}

inline nlohmann::json to_json(const BaselineTrainingLog& log) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : log.epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"train", to_json(e.train)},
                    {"val", to_json(e.val)},
                    {"best_val_loss", e.best_val_loss}});
  }
  return {{"best_epoch", log.best_epoch}, {"early_stopped", log.early_stopped},
          {"epochs", rows}};
}

// One optimizer step on a batch; returns the pre-step loss parts.
template <typename S>
LossParts baseline_step(BoundsModelT<S>& m, const nn::Batch<S>& batch, nn::Optimizer<S>& opt,
                        BoundsModelT<S>& scratch) {
  nn::set_zero(scratch.tensors());
  const LossParts p = bounds_loss(m, batch, &scratch);
  opt.step(m.tensors(), scratch.tensors());
  return p;
}

template <typename S = float>
BoundsModelT<S> train_baseline(const nn::EncodedSet& train, const nn::EncodedSet& validation,
                               const nn::InputSchema& schema, const BaselineConfig& config,
                               BaselineTrainingLog* log_out = nullptr) {
  BoundsModelT<S> m = init_bounds_model<S>(config, schema);
  BaselineTrainingLog log;
  if (config.epochs > 0 && (train.empty() || validation.empty())) {
    throw Error(ErrorKind::kData, "training and validation sets must be non-empty");
  }
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  nn::Optimizer<S> opt(nn::parse_optimizer(config.optimizer), config.learning_rate);
  BoundsModelT<S> scratch = m.zeros_like();
  BoundsModelT<S> best = m;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    nn::shuffle(order, rng);
    LossParts sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const auto batch = nn::make_batch<S>(
          train, std::span<const std::size_t>(order.data() + start, end - start));
      const LossParts p = baseline_step(m, batch, opt, scratch);
      sum.inclusion += p.inclusion;
      sum.size += p.size;
      sum.total += p.total;
      ++batches;
    }
    const LossParts val = eval_bounds_loss(m, validation);
    if (!std::isfinite(val.total) || !nn::all_finite(m.tensors())) {
      throw Error(ErrorKind::kNumeric, "baseline diverged at epoch " + std::to_string(epoch) +
                                           ": " + to_json(log).dump());
    }
    if (val.total < best_val) {
      best_val = val.total;
      best = m;
      log.best_epoch = epoch;
      since_best = 0;
    } else {
      ++since_best;
    }
    const double nb = static_cast<double>(batches);
    log.epochs.push_back(
        {epoch, {sum.inclusion / nb, sum.size / nb, sum.total / nb}, val, best_val});
    if (since_best >= config.patience) {
      log.early_stopped = epoch < config.epochs;
      break;
    }
  }
  if (log_out) *log_out = log;
  return best;
}

template <typename S>
BoundsOutput predict_offsets(const BoundsModelT<S>& m, const FeatureVector& fv) {
  const auto batch = nn::make_single<S>(fv);
  typename nn::Tower<S>::Cache cache;
  const Eigen::MatrixXd o = head_outputs(m, batch, cache);
  if (!o.allFinite()) throw Error(ErrorKind::kNumeric, "non-finite baseline output");
  return decode_head(m.config, o(0, 0), o(1, 0), o(2, 0), o(3, 0));
}

inline double wrap_lng(double lng) {
  double x = std::fmod(lng + 180.0, 360.0);
  if (x < 0) x += 360.0;
  return x - 180.0;
}

// Converts a km box around `center` to a valid rectangle. Extents below
// min_extent_km are raised to it.
inline GeoRect bounds_from_output(const LatLng& center, BoundsOutput b, double min_extent_km) {
  b.half_lat_km = std::max(b.half_lat_km, min_extent_km);
  b.half_lng_km = std::max(b.half_lng_km, min_extent_km);
  const double clat = center.lat + b.center_north_km / gen_detail::kKmPerDegLat;
  const double c = std::max(std::cos(std::clamp(clat, -90.0, 90.0) * kDegToRad), 1e-3);
  const double clng = center.lng + b.center_east_km / (gen_detail::kKmPerDegLat * c);
  const double dlat = b.half_lat_km / gen_detail::kKmPerDegLat;
  const double dlng = b.half_lng_km / (gen_detail::kKmPerDegLat * c);
  GeoRect r;
  r.lat_lo = std::clamp(clat - dlat, -90.0, 90.0);
  r.lat_hi = std::clamp(clat + dlat, -90.0, 90.0);
  if (r.lat_lo > r.lat_hi) std::swap(r.lat_lo, r.lat_hi);
  if (!(2.0 * dlng < 360.0)) {
    r.lng_lo = -180.0;
    r.lng_hi = 180.0;
  } else {
    r.lng_lo = wrap_lng(clng - dlng);
    r.lng_hi = wrap_lng(clng + dlng);
  }
  return r;
}

template <typename S>
GeoRect predict_bounds(const BoundsModelT<S>& m, const FeatureVector& fv,
                       const LatLng& destination_center) {
  return bounds_from_output(destination_center, predict_offsets(m, fv), m.config.min_extent_km);
}

inline std::vector<CellId> bounds_to_cellset(const GeoRect& rect,
                                             std::size_t max_cells = kDefaultCoverCap) {
  return cover_rect(rect, kLabelLevel, max_cells);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_bounds_model(const std::filesystem::path& path, const BoundsModel& m) {
  nn::CheckpointHeader h;
  h.kind = "bounds";
  h.config = to_json(m.config);
  h.schema = nn::to_json(m.tower.schema);
  h.extra = nlohmann::json::object();
  h.names = m.tensor_names();
  nn::write_checkpoint<float>(path, h, m.tensors());
}

inline BoundsModel load_bounds_model(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  const auto h = nn::read_checkpoint_header(in, path.string());
  if (h.kind != "bounds") {
    throw Error(ErrorKind::kData, path.string() + ": not a bounds checkpoint");
  }
  BoundsModel m;
  try {
    m = init_bounds_model<float>(baseline_config_from_json(h.config),
                                 nn::schema_from_json(h.schema));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kData, path.string() + ": " + e.what());
  }
  nn::read_checkpoint_payload<float>(in, h, m.tensor_names(), m.tensors(), path.string());
  return m;
}

}  // namespace cellret
