#include "zsih/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "support/fixtures.hpp"
#include "zsih/text.hpp"

namespace zsih {
namespace {

using M = Matrix<double>;

Dataset small_dataset(std::uint64_t seed = 3, std::uint32_t classes = 4) {
  SynthParams p;
  p.n_classes = classes;
  p.per_class = 6;
  p.L = 2;
  p.C = 6;
  p.d_s = 3;
  p.seed = seed;
  auto syn = synth_dataset(p);
  return {syn.sketches, syn.images, resolve_semantics(syn.semantics, syn.sketches.class_names)};
}

ZsihConfig small_config() {
  ZsihConfig c;
  c.M = 8;
  c.d_f = 3;
  c.gcn_hidden = 6;
  c.N_B = 6;
  c.T = 40;
  c.lr = 1e-2;
  return c;
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

TEST(Adjacency, IdenticalSemanticsGiveOne) {
  M s(2, 3);
  s << 0.3, -1, 2, 0.3, -1, 2;
  EXPECT_EQ(build_adjacency(s, 0.1)(0, 1), 1.0);
}

TEST(Adjacency, ExponentialOracle) {
  M s(2, 2);
  s << 0, 0, 0.25, std::sqrt(0.1 - 0.0625);  // squared distance 0.1
  EXPECT_NEAR(build_adjacency(s, 0.1)(0, 1), 0.36787944117144233, 1e-15);
}

TEST(Adjacency, TinyBandwidthGivesBinaryEdges) {
  M s(3, 2);
  s << 1, 0, 0, 1, 1, 0;
  auto a = build_adjacency(s, 1e-6);
  EXPECT_LT(a(0, 1), 1e-300);
  EXPECT_EQ(a(0, 2), 1.0);
}

TEST(Adjacency, RejectsNonPositiveBandwidth) {
  M s = M::Zero(2, 2);
  EXPECT_THROW(build_adjacency(s, 0.0), ConfigError);
  EXPECT_THROW(build_adjacency(s, -1.0), ConfigError);
  EXPECT_THROW(build_adjacency(s, std::numeric_limits<double>::quiet_NaN()), ConfigError);
}

TEST(Adjacency, SymmetricUnitDiagonalBoundedMonotone) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    M s = testing::random_matrix(rng, 12, 5, -0.5, 0.5);
    const double t = rng.uniform(0.1, 2.0);
    auto a = build_adjacency(s, t);
    for (Index j = 0; j < 12; ++j) {
      ASSERT_EQ(a(j, j), 1.0);
      for (Index k = 0; k < 12; ++k) {
        ASSERT_EQ(a(j, k), a(k, j));
        ASSERT_GT(a(j, k), 0.0);
        ASSERT_LE(a(j, k), 1.0);
      }
    }
    // Monotone in distance: sort the off-diagonal pairs by distance.
    std::vector<std::pair<double, double>> pairs;
    for (Index j = 0; j < 12; ++j)
      for (Index k = j + 1; k < 12; ++k) pairs.emplace_back((s.row(j) - s.row(k)).squaredNorm(), a(j, k));
    std::sort(pairs.begin(), pairs.end());
    for (std::size_t i = 1; i < pairs.size(); ++i) ASSERT_LE(pairs[i].second, pairs[i - 1].second);
  }
}

TEST(Sampler, SinglePairDataset) {
  Dataset d;
  d.sketches.L = d.images.L = 1;
  d.sketches.C = d.images.C = 2;
  d.images.modality = Modality::image;
  FeatureMap sk(1, 2), im(1, 2);
  sk << 1, 2;
  im << 3, 4;
  d.sketches.add(0, 7, sk);
  d.images.add(0, 7, im);
  d.semantics.dim = 1;
  d.semantics.vectors[7] = Eigen::RowVectorXd::Constant(1, 0.5);
  BatchSampler sampler(d);
  Rng rng(1);
  auto b = sampler.sample(5, rng);
  for (Index i = 0; i < 5; ++i) {
    EXPECT_EQ(b.labels[i], 7u);
    EXPECT_EQ(b.sketch_feats(i, 1), 2.0);
    EXPECT_EQ(b.image_feats(i, 0), 3.0);
    EXPECT_EQ(b.semantics(i, 0), 0.5);
  }
}

TEST(Sampler, LabelsMatchOnEveryDraw) {
  auto d = small_dataset();
  BatchSampler sampler(d);
  Rng rng(3);
  for (int batch = 0; batch < 200; ++batch) {
    auto b = sampler.sample(50, rng);
    for (Index i = 0; i < 50; ++i) {
      const Eigen::RowVectorXd sk_row = b.sketch_feats.row(i * 2);
      const Eigen::RowVectorXd im_row = b.image_feats.row(i * 2);
      bool sk_ok = false, im_ok = false;
      for (std::size_t k = 0; k < d.sketches.size() && !sk_ok; ++k) {
        sk_ok = d.sketches.labels[k] == b.labels[i] && d.sketches.map(k).row(0).cast<double>() == sk_row;
      }
      for (std::size_t k = 0; k < d.images.size() && !im_ok; ++k) {
        im_ok = d.images.labels[k] == b.labels[i] && d.images.map(k).row(0).cast<double>() == im_row;
      }
      ASSERT_TRUE(sk_ok && im_ok) << "batch " << batch << " item " << i;
    }
  }
}

TEST(Sampler, DeterministicUnderSeed) {
  auto d = small_dataset();
  BatchSampler sampler(d);
  Rng a(9), b(9);
  for (int i = 0; i < 5; ++i) {
    auto x = sampler.sample(8, a), y = sampler.sample(8, b);
    EXPECT_EQ(x.labels, y.labels);
    EXPECT_EQ(x.sketch_feats, y.sketch_feats);
    EXPECT_EQ(x.image_feats, y.image_feats);
  }
}

TEST(Sampler, MissingModalityOrSemantics) {
  auto d = small_dataset();
  auto no_images = d;
  no_images.images = select_classes(d.images, {0, 1, 2});
  EXPECT_THROW(BatchSampler{no_images}, DatasetError);
  auto no_sem = d;
  no_sem.semantics.vectors.erase(1);
  EXPECT_THROW(BatchSampler{no_sem}, DatasetError);
}

TEST(Forward, GcnWithIdentityEqualsFullyConnected) {
  auto d = small_dataset();
  auto cfg = resolve_dims(small_config(), d);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = ModelParams<double>::init(cfg, rng);
    auto fc = p;
    fc.use_gcn = false;
    auto batch = BatchSampler(d).sample(cfg.N_B, rng);
    M eps = testing::random_matrix(rng, cfg.N_B, cfg.M, 0, 1);
    M eye = M::Identity(cfg.N_B, cfg.N_B);
    auto g = forward_multimodal(batch, p, eye, eps);
    auto f = forward_multimodal(batch, fc, build_adjacency(batch.semantics, cfg.t), eps);
    EXPECT_LE((g.b.value() - f.b.value()).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(g.b_tilde.value(), f.b_tilde.value());
  }
}

TEST(Forward, FusionWidthsAndProbabilityRange) {
  auto d = small_dataset();
  auto cfg = resolve_dims(small_config(), d);
  Rng rng(5);
  auto batch = BatchSampler(d).sample(cfg.N_B, rng);
  const M a = build_adjacency(batch.semantics, cfg.t);
  for (auto mode : {FusionMode::kronecker, FusionMode::concat, FusionMode::mfb}) {
    cfg.fusion_mode = mode;
    auto p = ModelParams<double>::init(cfg, rng);
    auto probs = forward_probabilities(batch, p, a);
    EXPECT_EQ(probs.fused.cols(), cfg.d_f * cfg.d_f);
    if (mode == FusionMode::concat) {
      EXPECT_EQ(ad::concat_cols(probs.h_sk, probs.h_im).cols(), 2 * cfg.d_f);
      EXPECT_EQ(p.concat_w.rows(), 2 * cfg.d_f);
    }
    EXPECT_GT(probs.b.value().minCoeff(), 0.0);
    EXPECT_LT(probs.b.value().maxCoeff(), 1.0);
  }
}

TEST(Forward, DimensionMismatchIsReported) {
  auto d = small_dataset();
  auto cfg = resolve_dims(small_config(), d);
  cfg.C += 1;
  Rng rng(6);
  auto p = ModelParams<double>::init(cfg, rng);
  auto batch = BatchSampler(d).sample(cfg.N_B, rng);
  EXPECT_THROW(forward_probabilities(batch, p, build_adjacency(batch.semantics, cfg.t)), DimensionError);
  ZsihConfig wrong = small_config();
  wrong.d_s = 99;
  EXPECT_THROW(resolve_dims(wrong, d), ConfigError);
}

TEST(Train, ZeroIterationsReturnsInitialWeights) {
  auto d = small_dataset();
  auto cfg = small_config();
  cfg.T = 0;
  std::ostringstream metrics;
  auto ck = train(cfg, d, {.metrics = &metrics});
  EXPECT_EQ(serialize_checkpoint(ck), serialize_checkpoint(initial_checkpoint(cfg, d)));
  EXPECT_TRUE(metrics.str().empty());
}

TEST(Train, EightClassToyLossDecreases) {
  auto d = small_dataset(11, 8);
  auto cfg = small_config();
  cfg.T = 500;
  cfg.converge_tol = 0;
  auto ck = train(cfg, d);
  const auto& h = ck.loss_history;
  ASSERT_EQ(h.size(), 500u);
  EXPECT_LT(h.back(), h.front());
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) first += h[i], last += h[h.size() - 1 - i];
  EXPECT_LT(last, first);
}

TEST(Train, IdenticalSeedsGiveIdenticalCheckpoints) {
  auto d = small_dataset();
  auto cfg = small_config();
  std::ostringstream m1, m2;
  auto a = train(cfg, d, {.metrics = &m1});
  auto b = train(cfg, d, {.metrics = &m2});
  EXPECT_EQ(serialize_checkpoint(a), serialize_checkpoint(b));
  EXPECT_EQ(m1.str(), m2.str());
  cfg.seed = 2;
  EXPECT_NE(serialize_checkpoint(train(cfg, d)), serialize_checkpoint(a));
}

TEST(Train, MetricsOneLinePerIteration) {
  auto d = small_dataset();
  auto cfg = small_config();
  cfg.T = 25;
  std::ostringstream metrics;
  auto ck = train(cfg, d, {.metrics = &metrics});
  auto lines = lines_of(metrics.str());
  ASSERT_EQ(lines.size(), ck.iteration);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto f = text::split_ws(lines[i]);
    ASSERT_EQ(f.size(), 5u);
    EXPECT_EQ(text::parse_uint(f[0]), i + 1);
    const double total = text::parse_double(f[1]);
    EXPECT_EQ(total, ck.loss_history[i]);
    EXPECT_NEAR(total, text::parse_double(f[2]) + text::parse_double(f[3]) + text::parse_double(f[4]),
                1e-9 * (1 + std::abs(total)));
  }
}

TEST(Train, IdentityAdjacencyMatchesNoGcnTrajectory) {
  auto d = small_dataset();
  auto cfg = small_config();
  cfg.T = 60;
  auto with_gcn = train(cfg, d, {.identity_adjacency = true});
  cfg.use_gcn = false;
  auto without = train(cfg, d);
  EXPECT_EQ(with_gcn.loss_history, without.loss_history);
  auto a = with_gcn.params.named(), b = without.params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].var->value(), b[i].var->value()) << a[i].name;
}

TEST(Train, ResumeContinuesExactly) {
  auto d = small_dataset();
  auto cfg = small_config();
  cfg.T = 60;
  std::ostringstream straight_metrics;
  auto straight = train(cfg, d, {.metrics = &straight_metrics});

  cfg.T = 25;
  std::ostringstream part1, part2;
  auto half = train(cfg, d, {.metrics = &part1});
  auto reloaded = parse_checkpoint(serialize_checkpoint(half));
  cfg.T = 60;
  auto resumed = train(cfg, d, {.metrics = &part2, .resume = &reloaded});
  EXPECT_EQ(part1.str() + part2.str(), straight_metrics.str());
  EXPECT_EQ(serialize_checkpoint(resumed), serialize_checkpoint(straight));
  // The resume source is left untouched.
  EXPECT_EQ(reloaded.iteration, 25u);
  EXPECT_EQ(serialize_checkpoint(reloaded), serialize_checkpoint(half));
}

TEST(Train, NonFiniteLossAbortsWithLastGoodCheckpoint) {
  auto d = small_dataset();
  auto cfg = small_config();
  cfg.T = 5;
  auto start = train(cfg, d);
  start.params.decoder.b_logvar.value_mut()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  cfg.T = 10;
  try {
    train(cfg, d, {.resume = &start});
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_EQ(e.last_good().iteration, 5u);
    EXPECT_EQ(e.last_good().rng_state, start.rng_state);
  }
}

TEST(Train, RejectsUnseenClasses) {
  auto d = small_dataset();
  ZeroShotSplit split{{0, 1, 2}, {3}, 0};
  EXPECT_THROW(train(small_config(), d, {.split = &split}), DatasetError);
  ZeroShotSplit partial{{0, 1}, {5}, 0};
  EXPECT_THROW(train(small_config(), d, {.split = &partial}), DatasetError);
  ZeroShotSplit ok{{0, 1, 2, 3}, {5}, 0};
  EXPECT_NO_THROW(train(small_config(), d, {.split = &ok}));
}

TEST(Convergence, WindowRule) {
  std::vector<double> flat(400, 1.0);
  EXPECT_TRUE(converged(flat, 200, 1e-5));
  EXPECT_FALSE(converged(std::vector<double>(399, 1.0), 200, 1e-5));
  EXPECT_FALSE(converged(flat, 200, 0.0));
  std::vector<double> falling(400);
  for (std::size_t i = 0; i < 400; ++i) falling[i] = 100.0 - 0.01 * static_cast<double>(i);
  EXPECT_FALSE(converged(falling, 200, 1e-5));
  std::vector<double> negative(400, -500.0);
  for (std::size_t i = 200; i < 400; ++i) negative[i] = -500.001;  // relative gain 2e-6
  EXPECT_TRUE(converged(negative, 200, 1e-5));
}

TEST(Checkpoint, RoundTripIsByteExact) {
  auto d = small_dataset();
  for (auto mode : {FusionMode::kronecker, FusionMode::concat, FusionMode::mfb}) {
    auto cfg = small_config();
    cfg.fusion_mode = mode;
    cfg.T = 7;
    auto ck = train(cfg, d);
    const auto bytes = serialize_checkpoint(ck);
    auto back = parse_checkpoint(bytes);
    EXPECT_EQ(back.config, ck.config);
    EXPECT_EQ(back.iteration, 7u);
    EXPECT_EQ(serialize_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, FileRoundTrip) {
  auto d = small_dataset();
  auto ck = train(small_config(), d);
  const std::string path = ::testing::TempDir() + "model.ckpt";
  save_checkpoint(path, ck);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(path)), serialize_checkpoint(ck));
}

TEST(Checkpoint, CorruptionIsDetected) {
  auto d = small_dataset();
  const auto bytes = serialize_checkpoint(initial_checkpoint(small_config(), d));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad_magic), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(parse_checkpoint(bytes + "x"), FormatError);
  auto bad_name = bytes;
  const auto at = bad_name.find("att_sk.score_weights");
  ASSERT_NE(at, std::string::npos);
  bad_name[at] = 'b';
  try {
    parse_checkpoint(bad_name);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
  }
}

TEST(Encode, UsesOnlyTheModalityEncoder) {
  auto d = small_dataset();
  auto cfg = resolve_dims(small_config(), d);
  Rng rng(7);
  auto p = ModelParams<double>::init(cfg, rng);
  testing::randomize_params(p, rng);
  const M sk = encode_soft_codes(p, d.sketches);
  const M im = encode_soft_codes(p, d.images);
  EXPECT_EQ(sk.rows(), static_cast<Index>(d.sketches.size()));
  EXPECT_EQ(sk.cols(), cfg.M);
  EXPECT_GT(sk.minCoeff(), 0.0);
  EXPECT_LT(sk.maxCoeff(), 1.0);

  auto changed = p.clone();
  changed.enc_im.bias.value_mut().array() += 1.0;
  changed.gcn1.weight.value_mut().setZero();
  changed.decoder.w_mu.value_mut().setZero();
  EXPECT_EQ(encode_soft_codes(changed, d.sketches), sk);
  EXPECT_NE(encode_soft_codes(changed, d.images), im);

  // Agrees with the training-time single-modality branch.
  TripletBatch<double> batch;
  batch.locations = d.sketches.L;
  batch.sketch_feats = stack_maps(d.sketches, {0, 1, 2});
  batch.image_feats = stack_maps(d.images, {0, 1, 2});
  batch.semantics = M::Zero(3, cfg.d_s);
  auto probs = forward_probabilities(batch, p, M(M::Identity(3, 3)));
  EXPECT_LE((probs.g_out.value() - sk.topRows(3)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((probs.f_out.value() - im.topRows(3)).cwiseAbs().maxCoeff(), 1e-15);
}

}  // namespace
}  // namespace zsih
