#pragma once

// Shared neural building blocks: an embedding + rectified-linear MLP tower,
// encoded datasets and mini-batches, optimizers, and checkpoint files.
//
// Everything is templated on the scalar type. Training runs in float;
// gradient verification instantiates the same code with double.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellret/datagen.hpp"
#include "cellret/error.hpp"
#include "cellret/features.hpp"

namespace cellret::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

struct InputSchema {
  std::vector<int> cat_sizes;  // including the unknown bucket
  int n_continuous = 0;
  int emb_dim = 16;

  int n_cat() const { return static_cast<int>(cat_sizes.size()); }
  int input_dim() const { return n_cat() * emb_dim + n_continuous; }

  void validate() const {
    if (emb_dim <= 0 || n_continuous < 0) {
      throw Error(ErrorKind::kConfig, "invalid input schema");
    }
    for (int s : cat_sizes) {
      if (s < 1) throw Error(ErrorKind::kConfig, "empty categorical vocabulary");
    }
    if (input_dim() == 0) throw Error(ErrorKind::kConfig, "model has no inputs");
  }

  friend bool operator==(const InputSchema&, const InputSchema&) = default;
};

inline nlohmann::json to_json(const InputSchema& s) {
  return {{"cat_sizes", s.cat_sizes}, {"n_continuous", s.n_continuous},
          {"emb_dim", s.emb_dim}};
}

inline InputSchema schema_from_json(const nlohmann::json& j) {
  InputSchema s;
  s.cat_sizes = j.at("cat_sizes").get<std::vector<int>>();
  s.n_continuous = j.at("n_continuous").get<int>();
  s.emb_dim = j.at("emb_dim").get<int>();
  return s;
}

inline InputSchema schema_for(const FeaturePipeline& p, int emb_dim) {
  return {p.categorical_sizes(), kNumContinuous, emb_dim};
}

// Encoded events held as flat row-major arrays.
struct EncodedSet {
  int n_cat = 0;
  int n_cont = 0;
  std::vector<int32_t> cat;
  std::vector<double> cont;
  std::vector<int32_t> labels;     // class index, -1 when out of vocabulary
  std::vector<double> targets;     // optional, 2 per row (north_km, east_km)
  std::vector<std::size_t> source;  // row -> index in the originating event list

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  void push(const FeatureVector& fv, int32_t label, std::size_t src) {
    if (labels.empty() && cat.empty()) {
      n_cat = static_cast<int>(fv.categorical.size());
      n_cont = static_cast<int>(fv.continuous.size());
    }
    if (static_cast<int>(fv.categorical.size()) != n_cat ||
        static_cast<int>(fv.continuous.size()) != n_cont) {
      throw Error(ErrorKind::kData, "feature vector shape mismatch");
    }
    cat.insert(cat.end(), fv.categorical.begin(), fv.categorical.end());
    cont.insert(cont.end(), fv.continuous.begin(), fv.continuous.end());
    labels.push_back(label);
    source.push_back(src);
  }

  FeatureVector row(std::size_t r) const {
    FeatureVector fv;
    fv.categorical.assign(cat.begin() + r * n_cat, cat.begin() + (r + 1) * n_cat);
    fv.continuous.assign(cont.begin() + r * n_cont, cont.begin() + (r + 1) * n_cont);
    return fv;
  }
};

template <typename S>
struct Batch {
  int size = 0;
  int n_cat = 0;
  Mat<S> cont;                 // n_cont x size
  std::vector<int32_t> cat;    // size x n_cat
  std::vector<int32_t> labels;
  std::vector<double> targets;  // size x 2, when present
};

template <typename S>
Batch<S> make_batch(const EncodedSet& set, std::span<const std::size_t> rows) {
  Batch<S> b;
  b.size = static_cast<int>(rows.size());
  b.n_cat = set.n_cat;
  b.cont.resize(set.n_cont, b.size);
  b.cat.resize(rows.size() * set.n_cat);
  b.labels.resize(rows.size());
  const bool has_targets = !set.targets.empty();
  if (has_targets) b.targets.resize(rows.size() * 2);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    for (int k = 0; k < set.n_cont; ++k) {
      b.cont(k, static_cast<Eigen::Index>(i)) = static_cast<S>(set.cont[r * set.n_cont + k]);
    }
    std::copy_n(set.cat.begin() + r * set.n_cat, set.n_cat, b.cat.begin() + i * set.n_cat);
    b.labels[i] = set.labels[r];
    if (has_targets) {
      b.targets[2 * i] = set.targets[2 * r];
      b.targets[2 * i + 1] = set.targets[2 * r + 1];
    }
  }
  return b;
}

template <typename S>
Batch<S> make_single(const FeatureVector& fv) {
  EncodedSet set;
  set.push(fv, -1, 0);
  const std::size_t row = 0;
  return make_batch<S>(set, std::span<const std::size_t>(&row, 1));
}

template <typename S>
void glorot_uniform(Mat<S>& m, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      m(r, c) = static_cast<S>(rng.uniform(-limit, limit));
    }
  }
}

// Embeddings + rectified-linear MLP.
template <typename S>
struct Tower {
  InputSchema schema;
  std::vector<Mat<S>> emb;  // emb_dim x vocab_size
  std::vector<Mat<S>> w;    // out x in
  std::vector<Mat<S>> b;    // out x 1

  struct Cache {
    Mat<S> x;
    std::vector<Mat<S>> z;
    std::vector<Mat<S>> a;
  };

  static Tower init(const InputSchema& schema, const std::vector<int>& hidden, Rng& rng) {
    schema.validate();
    if (hidden.empty()) throw Error(ErrorKind::kConfig, "no hidden layers");
    Tower t;
    t.schema = schema;
    for (int size : schema.cat_sizes) {
      Mat<S> e(schema.emb_dim, size);
      glorot_uniform(e, size, schema.emb_dim, rng);
      t.emb.push_back(std::move(e));
    }
    int in = schema.input_dim();
    for (int out : hidden) {
      if (out <= 0) throw Error(ErrorKind::kConfig, "hidden layer width must be positive");
      Mat<S> m(out, in);
      glorot_uniform(m, in, out, rng);
      t.w.push_back(std::move(m));
      t.b.push_back(Mat<S>::Zero(out, 1));
      in = out;
    }
    return t;
  }

  int output_dim() const { return static_cast<int>(w.back().rows()); }

  Tower zeros_like() const {
    Tower t;
    t.schema = schema;
    for (const auto& m : emb) t.emb.push_back(Mat<S>::Zero(m.rows(), m.cols()));
    for (const auto& m : w) t.w.push_back(Mat<S>::Zero(m.rows(), m.cols()));
    for (const auto& m : b) t.b.push_back(Mat<S>::Zero(m.rows(), m.cols()));
    return t;
  }

  void append_tensors(std::vector<Mat<S>*>& out) {
    for (auto& m : emb) out.push_back(&m);
    for (std::size_t l = 0; l < w.size(); ++l) {
      out.push_back(&w[l]);
      out.push_back(&b[l]);
    }
  }

  void append_names(std::vector<std::string>& out) const {
    for (std::size_t f = 0; f < emb.size(); ++f) out.push_back("emb." + std::to_string(f));
    for (std::size_t l = 0; l < w.size(); ++l) {
      out.push_back("hidden." + std::to_string(l) + ".w");
      out.push_back("hidden." + std::to_string(l) + ".b");
    }
  }

  Mat<S> assemble_input(const Batch<S>& batch) const {
    const int e = schema.emb_dim;
    Mat<S> x(schema.input_dim(), batch.size);
    for (int i = 0; i < batch.size; ++i) {
      for (int f = 0; f < schema.n_cat(); ++f) {
        const int32_t idx = batch.cat[static_cast<std::size_t>(i) * batch.n_cat + f];
        if (idx < 0 || idx >= emb[f].cols()) {
          throw Error(ErrorKind::kData, "categorical index out of range");
        }
        x.block(f * e, i, e, 1) = emb[f].col(idx);
      }
      if (schema.n_continuous > 0) {
        x.block(schema.n_cat() * e, i, schema.n_continuous, 1) = batch.cont.col(i);
      }
    }
    return x;
  }

  // Returns the last hidden activation (also kept in the cache).
  const Mat<S>& forward(const Batch<S>& batch, Cache& cache) const {
    cache.x = assemble_input(batch);
    cache.z.resize(w.size());
    cache.a.resize(w.size());
    const Mat<S>* in = &cache.x;
    for (std::size_t l = 0; l < w.size(); ++l) {
      cache.z[l].noalias() = w[l] * (*in);
      cache.z[l].colwise() += b[l].col(0);
      cache.a[l] = cache.z[l].cwiseMax(S(0));
      in = &cache.a[l];
    }
    return cache.a.back();
  }

  // Accumulates parameter gradients given dLoss/d(last activation).
  void backward(const Batch<S>& batch, const Cache& cache, Mat<S> d_act, Tower& grad) const {
    for (int l = static_cast<int>(w.size()) - 1; l >= 0; --l) {
      Mat<S> dz = d_act.cwiseProduct(
          (cache.z[l].array() > S(0)).template cast<S>().matrix());
      const Mat<S>& in = l == 0 ? cache.x : cache.a[l - 1];
      grad.w[l].noalias() += dz * in.transpose();
      grad.b[l] += dz.rowwise().sum();
      d_act.noalias() = w[l].transpose() * dz;
    }
    const int e = schema.emb_dim;
    for (int i = 0; i < batch.size; ++i) {
      for (int f = 0; f < schema.n_cat(); ++f) {
        const int32_t idx = batch.cat[static_cast<std::size_t>(i) * batch.n_cat + f];
        grad.emb[f].col(idx) += d_act.block(f * e, i, e, 1);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Optimizers over a flat list of tensors.

enum class OptimizerKind { kSgd, kAdam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw Error(ErrorKind::kConfig, "unknown optimizer '" + s + "'");
}

template <typename S>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(const std::vector<Mat<S>*>& params, const std::vector<Mat<S>*>& grads) {
    if (kind_ == OptimizerKind::kSgd) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        *params[k] -= static_cast<S>(lr_) * (*grads[k]);
      }
      return;
    }
    if (m_.empty()) {
      for (const Mat<S>* p : params) {
        m_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
        v_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    const S step = static_cast<S>(lr_ * std::sqrt(c2) / c1);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Mat<S>& g = *grads[k];
      m_[k] = static_cast<S>(kBeta1) * m_[k] + static_cast<S>(1.0 - kBeta1) * g;
      v_[k] = static_cast<S>(kBeta2) * v_[k] +
              static_cast<S>(1.0 - kBeta2) * g.cwiseProduct(g);
      params[k]->array() -=
          step * m_[k].array() / (v_[k].array().sqrt() + static_cast<S>(kEps));
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  OptimizerKind kind_;
  double lr_;
  long t_ = 0;
  std::vector<Mat<S>> m_, v_;
};

template <typename S>
void set_zero(const std::vector<Mat<S>*>& tensors) {
  for (Mat<S>* t : tensors) t->setZero();
}

template <typename S>
bool all_finite(const std::vector<Mat<S>*>& tensors) {
  for (const Mat<S>* t : tensors) {
    if (!t->allFinite()) return false;
  }
  return true;
}

inline void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: a text header followed by little-endian float32 payloads.
//
//   CELLRET-CHECKPOINT <version>
//   kind <xmc|bounds>
//   config <json>
//   schema <json>
//   extra <json>
//   tensors <n>
//   <name> <rows> <cols>      (n lines, payload order; column-major data)
//   END

inline constexpr int kCheckpointVersion = 1;

struct CheckpointHeader {
  std::string kind;
  nlohmann::json config;
  nlohmann::json schema;
  nlohmann::json extra;
  std::vector<std::string> names;
  std::vector<std::pair<int64_t, int64_t>> shapes;
};

template <typename S>
void write_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                      const std::vector<const Mat<S>*>& tensors) {
  auto out = io::open_out(path);
  out << "CELLRET-CHECKPOINT " << kCheckpointVersion << '\n';
  out << "kind " << header.kind << '\n';
  out << "config " << header.config.dump() << '\n';
  out << "schema " << header.schema.dump() << '\n';
  out << "extra " << header.extra.dump() << '\n';
  out << "tensors " << tensors.size() << '\n';
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    out << header.names[k] << ' ' << tensors[k]->rows() << ' ' << tensors[k]->cols() << '\n';
  }
  out << "END\n";
  std::vector<char> bytes;
  for (const Mat<S>* t : tensors) {
    bytes.resize(static_cast<std::size_t>(t->size()) * 4);
    for (Eigen::Index i = 0; i < t->size(); ++i) {
      const uint32_t u = std::bit_cast<uint32_t>(static_cast<float>(t->data()[i]));
      for (int k = 0; k < 4; ++k) bytes[4 * i + k] = static_cast<char>((u >> (8 * k)) & 0xffu);
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

inline CheckpointHeader read_checkpoint_header(std::istream& in, const std::string& where) {
  auto fail = [&](const std::string& why) -> CheckpointHeader {
    throw Error(ErrorKind::kData, where + ": " + why);
  };
  CheckpointHeader h;
  std::string line;
  if (!std::getline(in, line) ||
      line != "CELLRET-CHECKPOINT " + std::to_string(kCheckpointVersion)) {
    return fail("not a checkpoint or unsupported version");
  }
  auto field = [&](const std::string& key) {
    if (!std::getline(in, line) || line.rfind(key + " ", 0) != 0) {
      fail("missing '" + key + "'");
    }
    return line.substr(key.size() + 1);
  };
  try {
    h.kind = field("kind");
    h.config = nlohmann::json::parse(field("config"));
    h.schema = nlohmann::json::parse(field("schema"));
    h.extra = nlohmann::json::parse(field("extra"));
  } catch (const nlohmann::json::exception& e) {
    return fail(e.what());
  }
  const int64_t n = io::parse_int(field("tensors"));
  for (int64_t k = 0; k < n; ++k) {
    if (!std::getline(in, line)) return fail("truncated tensor list");
    std::istringstream ss(line);
    std::string name;
    int64_t rows = -1, cols = -1;
    if (!(ss >> name >> rows >> cols) || rows < 0 || cols < 0) return fail("bad tensor line");
    h.names.push_back(name);
    h.shapes.emplace_back(rows, cols);
  }
  if (!std::getline(in, line) || line != "END") return fail("missing END");
  return h;
}

// Reads payloads into tensors whose names and shapes must match the header.
template <typename S>
void read_checkpoint_payload(std::istream& in, const CheckpointHeader& h,
                             const std::vector<std::string>& names,
                             const std::vector<Mat<S>*>& tensors, const std::string& where) {
  if (names != h.names) throw Error(ErrorKind::kData, where + ": tensor list mismatch");
  std::vector<char> bytes;
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    Mat<S>& t = *tensors[k];
    if (t.rows() != h.shapes[k].first || t.cols() != h.shapes[k].second) {
      throw Error(ErrorKind::kData, where + ": shape mismatch for " + names[k]);
    }
    bytes.resize(static_cast<std::size_t>(t.size()) * 4);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw Error(ErrorKind::kData, where + ": truncated payload");
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      uint32_t u = 0;
      for (int b = 0; b < 4; ++b) {
        u |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
      }
      t.data()[i] = static_cast<S>(std::bit_cast<float>(u));
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorKind::kData, where + ": trailing bytes");
  }
}

}  // namespace cellret::nn
