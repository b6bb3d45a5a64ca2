#include "cellret/xmc_model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"

namespace cellret {
namespace {

using testing::TempDir;

const nn::InputSchema kSchema{{4, 3, 5}, 3, 4};

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden = {8, 6, 7, 5};
  c.embedding_dim = kSchema.emb_dim;
  c.batch_size = 16;
  c.num_negatives = 6;
  c.seed = 3;
  return c;
}

FeatureVector random_fv(Rng& rng, const nn::InputSchema& s = kSchema) {
  FeatureVector fv;
  for (int size : s.cat_sizes) fv.categorical.push_back(static_cast<int32_t>(rng.below(size)));
  for (int k = 0; k < s.n_continuous; ++k) fv.continuous.push_back(rng.normal());
  return fv;
}

nn::EncodedSet random_set(Rng& rng, int rows, int num_classes) {
  nn::EncodedSet set;
  for (int r = 0; r < rows; ++r) {
    set.push(random_fv(rng), static_cast<int32_t>(rng.below(num_classes)), r);
  }
  return set;
}

std::vector<std::size_t> all_rows(const nn::EncodedSet& set) {
  std::vector<std::size_t> rows(set.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

// Straight-loop reference of the network output for one row.
std::vector<double> reference_logits(const ShardModelT<double>& m, const FeatureVector& fv) {
  std::vector<double> x;
  for (std::size_t f = 0; f < fv.categorical.size(); ++f) {
    for (int d = 0; d < m.tower.schema.emb_dim; ++d) {
      x.push_back(m.tower.emb[f](d, fv.categorical[f]));
    }
  }
  for (double c : fv.continuous) x.push_back(c);
  for (std::size_t l = 0; l < m.tower.w.size(); ++l) {
    std::vector<double> y(m.tower.w[l].rows());
    for (std::size_t r = 0; r < y.size(); ++r) {
      double acc = m.tower.b[l](r, 0);
      for (std::size_t c = 0; c < x.size(); ++c) acc += m.tower.w[l](r, c) * x[c];
      y[r] = std::max(0.0, acc);
    }
    x = std::move(y);
  }
  std::vector<double> out(m.num_classes);
  for (int k = 0; k < m.num_classes; ++k) {
    double acc = m.out_b(k, 0);
    for (std::size_t c = 0; c < x.size(); ++c) acc += m.out_w(c, k) * x[c];
    out[k] = acc;
  }
  return out;
}

// Mean over rows of -log softmax restricted to the candidate classes.
double reference_candidate_loss(const ShardModelT<double>& m, const nn::EncodedSet& set,
                                const std::vector<int>& candidates) {
  double total = 0.0;
  for (std::size_t r = 0; r < set.size(); ++r) {
    const auto z = reference_logits(m, set.row(r));
    double denom = 0.0;
    for (int k : candidates) denom += std::exp(z[k]);
    total -= z[set.labels[r]] - std::log(denom);
  }
  return total / static_cast<double>(set.size());
}

double max_rel_error(ShardModelT<double>& model, const ShardModelT<double>& grad,
                     const std::function<double(const ShardModelT<double>&)>& loss) {
  double worst = 0.0;
  const double h = 1e-6;
  auto params = model.tensors();
  const auto g = grad.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Eigen::Index i = 0; i < params[t]->size(); ++i) {
      double& x = params[t]->data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss(model);
      x = saved - h;
      const double down = loss(model);
      x = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = g[t]->data()[i];
      const double scale = std::max({std::abs(a), std::abs(numeric), 1e-7});
      worst = std::max(worst, std::abs(a - numeric) / scale);
    }
  }
  return worst;
}

TEST(ModelConfig, ValidationAndJsonRoundTrip) {
  ModelConfig c = tiny_config();
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
  c.hidden = {8, 0};
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.optimizer = "rmsprop";
  EXPECT_THROW(c.validate(), Error);
  const ModelConfig p = ModelConfig::paper();
  EXPECT_EQ(p.hidden, (std::vector<int>{1024, 2056, 1024, 256}));
  EXPECT_EQ(p.learning_rate, 0.002);
  EXPECT_EQ(p.epochs, 16);
}

TEST(Init, DeterministicShapesAndGlorotRange) {
  const auto a = init_shard_model<float>(tiny_config(), 11, kSchema);
  const auto b = init_shard_model<float>(tiny_config(), 11, kSchema);
  const auto ta = a.tensors(), tb = b.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t k = 0; k < ta.size(); ++k) EXPECT_EQ(*ta[k], *tb[k]);
  EXPECT_EQ(a.out_w.cols(), 11);
  EXPECT_EQ(a.out_w.rows(), 5);
  EXPECT_EQ(a.out_b.rows(), 11);
  EXPECT_EQ(a.tower.w[0].cols(), kSchema.input_dim());
  for (std::size_t l = 0; l < a.tower.w.size(); ++l) {
    const auto& w = a.tower.w[l];
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    EXPECT_LE(w.cwiseAbs().maxCoeff(), limit);
    EXPECT_TRUE(a.tower.b[l].isZero());
  }
  EXPECT_TRUE(a.out_b.isZero());
}

TEST(Init, ConfigErrors) {
  ModelConfig c = tiny_config();
  c.hidden = {4, 0, 3};
  EXPECT_THROW(init_shard_model<float>(c, 5, kSchema), Error);
  EXPECT_THROW(init_shard_model<float>(tiny_config(), 0, kSchema), Error);
  c = tiny_config();
  c.embedding_dim = 9;
  EXPECT_THROW(init_shard_model<float>(c, 5, kSchema), Error);
}

TEST(Forward, MatchesReferenceLoops) {
  Rng rng(4);
  const auto m = init_shard_model<double>(tiny_config(), 13, kSchema);
  for (int n = 0; n < 50; ++n) {
    const auto fv = random_fv(rng);
    const auto z = reference_logits(m, fv);
    double mx = *std::max_element(z.begin(), z.end()), denom = 0.0;
    for (double v : z) denom += std::exp(v - mx);
    const auto p = forward(m, fv).probabilities;
    for (int k = 0; k < 13; ++k) EXPECT_NEAR(p[k], std::exp(z[k] - mx) / denom, 1e-12);
  }
}

TEST(Forward, ProbabilitiesFormASimplex) {
  Rng rng(5);
  const auto m = init_shard_model<float>(tiny_config(), 37, kSchema);
  for (int n = 0; n < 1000; ++n) {
    const auto p = forward(m, random_fv(rng)).probabilities;
    double sum = 0.0;
    for (double x : p) {
      ASSERT_GE(x, 0.0);
      ASSERT_LE(x, 1.0);
      sum += x;
    }
    ASSERT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Forward, ShiftInvariance) {
  Rng rng(6);
  auto m = init_shard_model<double>(tiny_config(), 9, kSchema);
  const auto fv = random_fv(rng);
  const auto before = forward(m, fv).probabilities;
  m.out_b.array() += 123.25;
  const auto after = forward(m, fv).probabilities;
  for (int k = 0; k < 9; ++k) EXPECT_NEAR(before[k], after[k], 1e-9);
}

TEST(Forward, ZeroOutputLayerIsUniform) {
  Rng rng(7);
  auto m = init_shard_model<float>(tiny_config(), 25, kSchema);
  m.out_w.setZero();
  m.out_b.setZero();
  for (double p : forward(m, random_fv(rng)).probabilities) EXPECT_NEAR(p, 1.0 / 25, 1e-9);
}

TEST(Forward, OutOfRangeCategoryIsDataError) {
  const auto m = init_shard_model<float>(tiny_config(), 5, kSchema);
  FeatureVector fv{{0.0, 0.0, 0.0}, {0, 7, 0}};
  EXPECT_THROW(forward(m, fv), Error);
}

TEST(SampleNegatives, UniformWithoutReplacementExcludingPositives) {
  Rng rng(8);
  const std::vector<int> exclude = {2, 5};
  std::vector<int> counts(10, 0);
  for (int t = 0; t < 20'000; ++t) {
    const auto neg = sample_negatives(10, exclude, 4, rng);
    ASSERT_EQ(neg.size(), 4u);
    const std::set<int> uniq(neg.begin(), neg.end());
    ASSERT_EQ(uniq.size(), 4u);
    for (int k : neg) ++counts[k];
  }
  EXPECT_EQ(counts[2], 0);
  EXPECT_EQ(counts[5], 0);
  for (int k : {0, 1, 3, 4, 6, 7, 8, 9}) EXPECT_NEAR(counts[k] / 20'000.0, 0.5, 0.02) << k;
  EXPECT_THROW(sample_negatives(10, exclude, 9, rng), Error);
  EXPECT_EQ(sample_negatives(10, exclude, 8, rng).size(), 8u);
}

TEST(SampledSoftmax, MatchesReferenceOverSharedCandidates) {
  Rng rng(9);
  const int K = 20;
  const auto m = init_shard_model<double>(tiny_config(), K, kSchema);
  const auto set = random_set(rng, 7, K);
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  const auto pos = distinct_labels(batch.labels, K);
  const auto neg = sample_negatives(K, pos, 5, rng);
  std::vector<int> candidates(pos.begin(), pos.end());
  candidates.insert(candidates.end(), neg.begin(), neg.end());
  EXPECT_NEAR(sampled_softmax_loss<double>(m, batch, neg, nullptr),
              reference_candidate_loss(m, set, candidates), 1e-12);
}

TEST(SampledSoftmax, RejectsNegativeOverlappingAPositive) {
  Rng rng(10);
  const auto m = init_shard_model<double>(tiny_config(), 6, kSchema);
  const auto set = random_set(rng, 3, 6);
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  const std::vector<int> bad = {batch.labels[0]};
  try {
    sampled_softmax_loss<double>(m, batch, bad, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

TEST(SampledSoftmax, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  const int K = 20;
  auto m = init_shard_model<double>(tiny_config(), K, kSchema);
  // Random biases keep ReLU units away from their kink.
  for (auto& b : m.tower.b) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(0.05, 0.3);
  }
  const auto set = random_set(rng, 6, K);
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  const auto neg = sample_negatives(K, distinct_labels(batch.labels, K), 7, rng);
  auto grad = m.zeros_like();
  sampled_softmax_loss<double>(m, batch, neg, &grad);
  const double err = max_rel_error(m, grad, [&](const ShardModelT<double>& x) {
    return sampled_softmax_loss<double>(x, batch, neg, nullptr);
  });
  EXPECT_LT(err, 1e-4);
  // Every parameter group receives gradient.
  for (const auto* t : grad.tensors()) EXPECT_GT(t->cwiseAbs().maxCoeff(), 0.0);
}

TEST(FullSoftmax, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  const int K = 9;
  auto m = init_shard_model<double>(tiny_config(), K, kSchema);
  for (auto& b : m.tower.b) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = rng.uniform(0.05, 0.3);
  }
  const auto set = random_set(rng, 5, K);
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  auto grad = m.zeros_like();
  full_softmax_loss<double>(m, batch, &grad);
  const double err = max_rel_error(m, grad, [&](const ShardModelT<double>& x) {
    return full_softmax_loss<double>(x, batch, nullptr);
  });
  EXPECT_LT(err, 1e-4);
}

TEST(SampledSoftmax, AllNegativesEqualsFullSoftmax) {
  Rng rng(13);
  const int K = 15;
  const auto m = init_shard_model<double>(tiny_config(), K, kSchema);
  auto set = random_set(rng, 8, K);
  std::fill(set.labels.begin(), set.labels.end(), 6);
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  const auto neg = sample_negatives(K, std::vector<int>{6}, K - 1, rng);
  const double sampled = sampled_softmax_loss<double>(m, batch, neg, nullptr);
  const double full = full_softmax_loss<double>(m, batch, nullptr);
  EXPECT_NEAR(sampled, full, 1e-9);
  EXPECT_NEAR(full, eval_cross_entropy(m, set), 1e-9);
}

TEST(TrainStep, SgdStepOnRepeatedBatchDescends) {
  Rng rng(14);
  const int K = 12;
  ModelConfig c = tiny_config();
  c.optimizer = "sgd";
  c.learning_rate = 0.01;
  auto m = init_shard_model<double>(c, K, kSchema);
  const auto set = random_set(rng, 10, K);
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  nn::Optimizer<double> opt(nn::OptimizerKind::kSgd, c.learning_rate);
  const double before = full_softmax_loss<double>(m, batch, nullptr);
  train_step(m, batch, K - static_cast<int>(distinct_labels(batch.labels, K).size()), rng,
             opt);
  EXPECT_LT(full_softmax_loss<double>(m, batch, nullptr), before);
}

TEST(TrainStep, TooManyNegativesIsAnError) {
  Rng rng(15);
  const int K = 6;
  auto m = init_shard_model<double>(tiny_config(), K, kSchema);
  auto set = random_set(rng, 4, K);
  set.labels = {0, 1, 1, 2};
  const auto rows = all_rows(set);
  const auto batch = nn::make_batch<double>(set, rows);
  nn::Optimizer<double> opt(nn::OptimizerKind::kSgd, 0.01);
  EXPECT_THROW(train_step(m, batch, 4, rng, opt), Error);
  EXPECT_NO_THROW(train_step(m, batch, 3, rng, opt));
}

TEST(Optimizer, AdamFirstStepIsSignedLearningRate) {
  nn::Mat<double> p(1, 3), g(1, 3);
  p << 1.0, 2.0, 3.0;
  g << 0.5, -2.0, 1e-3;
  nn::Optimizer<double> opt(nn::OptimizerKind::kAdam, 0.1);
  opt.step({&p}, {&g});
  // Bias-corrected first step: lr * g / (|g| + eps / sqrt(1 - beta2)).
  const double eps_hat = 1e-8 / std::sqrt(1.0 - 0.999);
  EXPECT_NEAR(p(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + eps_hat), 1e-12);
  EXPECT_NEAR(p(0, 1), 2.0 + 0.1 * 2.0 / (2.0 + eps_hat), 1e-12);
  EXPECT_NEAR(p(0, 2), 3.0 - 0.1 * 1e-3 / (1e-3 + eps_hat), 1e-12);
}

TEST(EvalCrossEntropy, UniformModelGivesLogK) {
  Rng rng(16);
  for (int K : {2, 17, 1000}) {
    auto m = init_shard_model<float>(tiny_config(), K, kSchema);
    m.out_w.setZero();
    m.out_b.setZero();
    EXPECT_NEAR(eval_cross_entropy(m, random_set(rng, 40, K)), std::log(K), 1e-6);
  }
}

TEST(EvalCrossEntropy, ConfidentCorrectModelGivesZero) {
  Rng rng(17);
  auto m = init_shard_model<double>(tiny_config(), 8, kSchema);
  auto set = random_set(rng, 20, 8);
  std::fill(set.labels.begin(), set.labels.end(), 3);
  m.out_w.setZero();
  m.out_b.setZero();
  m.out_b(3, 0) = 200.0;
  EXPECT_NEAR(eval_cross_entropy(m, set), 0.0, 1e-12);
}

TEST(EvalCrossEntropy, MatchesRecomputationFromPredictions) {
  Rng rng(18);
  const auto m = init_shard_model<double>(tiny_config(), 30, kSchema);
  auto set = random_set(rng, 300, 30);
  set.labels[5] = -1;  // out of vocabulary rows are skipped
  double total = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < set.size(); ++r) {
    if (set.labels[r] < 0) continue;
    total -= std::log(forward(m, set.row(r)).probabilities[set.labels[r]]);
    ++n;
  }
  EXPECT_NEAR(eval_cross_entropy(m, set, 64), total / n, 1e-9);
}

TEST(EvalCrossEntropy, NoInVocabRowsIsAnError) {
  Rng rng(19);
  const auto m = init_shard_model<double>(tiny_config(), 4, kSchema);
  auto set = random_set(rng, 3, 4);
  std::fill(set.labels.begin(), set.labels.end(), -1);
  EXPECT_THROW(eval_cross_entropy(m, set), Error);
}

// Three classes determined by the sign pattern of the first continuous input.
nn::EncodedSet separable_set(Rng& rng, int rows) {
  nn::EncodedSet set;
  for (int r = 0; r < rows; ++r) {
    const int label = static_cast<int>(rng.below(3));
    FeatureVector fv = random_fv(rng);
    fv.continuous[0] = (label - 1) * 3.0 + 0.3 * rng.normal();
    set.push(fv, label, r);
  }
  return set;
}

TEST(Fit, ZeroEpochsReturnsInitialModel) {
  Rng rng(20);
  ModelConfig c = tiny_config();
  c.epochs = 0;
  auto m = init_shard_model<float>(c, 3, kSchema);
  const auto before = m;
  const auto log = fit(m, separable_set(rng, 50), separable_set(rng, 10));
  EXPECT_TRUE(log.epochs.empty());
  EXPECT_EQ(m.out_w, before.out_w);
  EXPECT_EQ(m.tower.w[0], before.tower.w[0]);
}

TEST(Fit, SeparableToyConverges) {
  Rng rng(21);
  ModelConfig c = tiny_config();
  c.epochs = 40;
  c.learning_rate = 0.01;
  c.num_negatives = 2;
  c.patience = 5;
  auto m = init_shard_model<float>(c, 3, kSchema);
  const auto train = separable_set(rng, 600);
  const auto val = separable_set(rng, 200);
  const auto log = fit(m, train, val);
  EXPECT_LT(eval_cross_entropy(m, val), 0.1);
  // Best validation loss never increases, and the restored model is the best.
  for (std::size_t k = 1; k < log.epochs.size(); ++k) {
    EXPECT_LE(log.epochs[k].best_val_loss, log.epochs[k - 1].best_val_loss);
  }
  EXPECT_NEAR(eval_cross_entropy(m, val), log.epochs[log.best_epoch - 1].val_loss, 1e-6);
}

TEST(Fit, DeterministicForFixedSeed) {
  Rng rng(22);
  const auto train = separable_set(rng, 300);
  const auto val = separable_set(rng, 60);
  ModelConfig c = tiny_config();
  c.epochs = 4;
  auto a = init_shard_model<float>(c, 3, kSchema);
  auto b = init_shard_model<float>(c, 3, kSchema);
  EXPECT_EQ(to_json(fit(a, train, val)).dump(), to_json(fit(b, train, val)).dump());
  const auto ta = a.tensors(), tb = b.tensors();
  for (std::size_t k = 0; k < ta.size(); ++k) EXPECT_EQ(*ta[k], *tb[k]);
}

TEST(Fit, EarlyStopsAfterPatienceAndRestoresBest) {
  Rng rng(23);
  // Random labels: validation loss stops improving quickly.
  const auto train = random_set(rng, 400, 5);
  const auto val = random_set(rng, 100, 5);
  ModelConfig c = tiny_config();
  c.epochs = 60;
  c.patience = 2;
  c.learning_rate = 0.02;
  c.num_negatives = 2;
  auto m = init_shard_model<float>(c, 5, kSchema);
  const auto log = fit(m, train, val);
  ASSERT_TRUE(log.early_stopped);
  EXPECT_EQ(static_cast<int>(log.epochs.size()), log.best_epoch + c.patience);
  EXPECT_NEAR(eval_cross_entropy(m, val), log.epochs[log.best_epoch - 1].val_loss, 1e-6);
}

TEST(Fit, DivergenceIsNumericError) {
  Rng rng(24);
  ModelConfig c = tiny_config();
  c.optimizer = "sgd";
  c.learning_rate = 1e30;
  c.epochs = 3;
  auto m = init_shard_model<float>(c, 3, kSchema);
  try {
    fit(m, separable_set(rng, 100), separable_set(rng, 20));
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumeric);
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  Rng rng(25);
  const auto m = init_shard_model<float>(tiny_config(), 21, kSchema);
  TempDir dir;
  save_shard_model(dir / "m.ckpt", m, ShardId::kAMER);
  const auto r = load_shard_model(dir / "m.ckpt");
  EXPECT_EQ(r.config, m.config);
  EXPECT_EQ(r.num_classes, 21);
  EXPECT_EQ(r.tower.schema, kSchema);
  const auto ta = m.tensors(), tb = r.tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t k = 0; k < ta.size(); ++k) EXPECT_EQ(*ta[k], *tb[k]);
  const auto fv = random_fv(rng);
  EXPECT_EQ(forward(m, fv).probabilities, forward(r, fv).probabilities);

  const std::string text = testing::slurp(dir / "m.ckpt");
  EXPECT_EQ(text.rfind("CELLRET-CHECKPOINT 1\nkind xmc\n", 0), 0u);
}

TEST(Checkpoint, PayloadIsLittleEndianFloat32InHeaderOrder) {
  auto m = init_shard_model<float>(tiny_config(), 2, kSchema);
  m.out_b(0, 0) = 1.0f;
  m.out_b(1, 0) = -2.5f;
  TempDir dir;
  save_shard_model(dir / "m.ckpt", m, ShardId::kEU);
  const std::string text = testing::slurp(dir / "m.ckpt");
  // output.b is the last tensor; its 8 bytes end the file.
  const std::string tail = text.substr(text.size() - 8);
  const unsigned char expect[8] = {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(static_cast<unsigned char>(tail[i]), expect[i]) << i;
}

TEST(Checkpoint, CorruptFilesAreDataErrors) {
  const auto m = init_shard_model<float>(tiny_config(), 4, kSchema);
  TempDir dir;
  save_shard_model(dir / "m.ckpt", m, ShardId::kEU);
  const std::string text = testing::slurp(dir / "m.ckpt");
  auto expect_data_error = [&](const std::string& bytes) {
    {
      std::ofstream out(dir / "bad.ckpt", std::ios::binary);
      out << bytes;
    }
    try {
      load_shard_model(dir / "bad.ckpt");
      ADD_FAILURE() << "expected a data error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kData);
    }
  };
  expect_data_error(text.substr(0, text.size() - 3));
  expect_data_error(text + "x");
  expect_data_error("garbage\n");
  std::string wrong_kind = text;
  wrong_kind.replace(wrong_kind.find("kind xmc"), 8, "kind bnd");
  expect_data_error(wrong_kind);
}

}  // namespace
}  // namespace cellret
