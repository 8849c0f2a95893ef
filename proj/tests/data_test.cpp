#include "zsih/data.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "zsih/binary_io.hpp"
#include "zsih/random.hpp"
#include "zsih/text.hpp"

namespace zsih {
namespace {

FeatureStore random_store(Rng& rng, std::size_t n, std::uint32_t L, std::uint32_t C) {
  FeatureStore s;
  s.modality = rng.below(2) ? Modality::image : Modality::sketch;
  s.L = L;
  s.C = C;
  FeatureMap m(L, C);
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m.size(); ++j) {
      // Arbitrary finite bit patterns, including subnormals and -0.
      float v;
      do {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(rng.next()));
      } while (!std::isfinite(v));
      m.data()[j] = v;
    }
    s.add(rng.next(), static_cast<ClassId>(rng.below(1000)), m);
  }
  return s;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

TEST(Features, EmptyStoreIsValid) {
  FeatureStore s;
  s.L = 3;
  s.C = 5;
  auto back = parse_features(serialize_features(s));
  EXPECT_EQ(back.size(), 0u);
  EXPECT_EQ(back.L, 3u);
  EXPECT_EQ(back.C, 5u);
}

TEST(Features, HeaderLayout) {
  FeatureStore s;
  s.modality = Modality::image;
  s.L = 2;
  s.C = 3;
  FeatureMap m = FeatureMap::Constant(2, 3, 1.0f);
  s.add(7, 4, m);
  const auto bytes = serialize_features(s);
  ASSERT_EQ(bytes.size(), 4u + 2 + 1 + 4 + 4 + 8 + (8 + 4 + 6 * 4));
  EXPECT_EQ(bytes.substr(0, 4), "ZSFT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // image
  EXPECT_EQ(bytes[7], 2);  // L, little-endian
  EXPECT_EQ(bytes[11], 3);
  EXPECT_EQ(bytes[15], 1);  // N
  EXPECT_EQ(bytes[23], 7);  // id
  EXPECT_EQ(bytes[31], 4);  // class
  // 1.0f = 0x3f800000 little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[38]), 0x3f);
}

TEST(Features, RoundTripIsBitExact) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_store(rng, rng.below(30), 1 + rng.below(4), 1 + rng.below(9));
    const auto bytes = serialize_features(s);
    auto back = parse_features(bytes);
    EXPECT_EQ(back.ids, s.ids);
    EXPECT_EQ(back.labels, s.labels);
    ASSERT_EQ(back.values.size(), s.values.size());
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      ASSERT_EQ(std::bit_cast<std::uint32_t>(back.values[i]), std::bit_cast<std::uint32_t>(s.values[i]));
    }
    EXPECT_EQ(serialize_features(back), bytes);
  }
}

TEST(Features, FileRoundTrip) {
  Rng rng(2);
  auto s = random_store(rng, 5, 2, 3);
  const std::string path = ::testing::TempDir() + "features.zsft";
  save_features(path, s);
  EXPECT_EQ(serialize_features(load_features(path)), serialize_features(s));
  EXPECT_THROW(load_features(path + ".missing"), IoError);
}

TEST(Features, BadMagicReportsOffsetZero) {
  auto bytes = serialize_features(FeatureStore{});
  bytes[1] = 'X';
  EXPECT_NE(error_of([&] { parse_features(bytes); }).find("offset 0"), std::string::npos);
}

TEST(Features, UnsupportedVersion) {
  auto bytes = serialize_features(FeatureStore{});
  bytes[4] = 9;
  EXPECT_NE(error_of([&] { parse_features(bytes); }).find("version"), std::string::npos);
}

TEST(Features, CorruptedCountNamesTheMissingRecord) {
  Rng rng(3);
  auto s = random_store(rng, 6, 2, 2);
  auto bytes = serialize_features(s);
  bytes[15] = 9;  // N: 6 -> 9
  const auto msg = error_of([&] { parse_features(bytes); });
  EXPECT_NE(msg.find("record 6"), std::string::npos) << msg;
  const std::size_t record_start = 23 + 6 * (8 + 4 + 16);
  EXPECT_NE(msg.find("offset " + std::to_string(record_start)), std::string::npos) << msg;
}

TEST(Features, TruncatedRecord) {
  Rng rng(4);
  auto bytes = serialize_features(random_store(rng, 3, 1, 4));
  bytes.resize(bytes.size() - 2);
  const auto msg = error_of([&] { parse_features(bytes); });
  EXPECT_NE(msg.find("record 2"), std::string::npos) << msg;
}

TEST(Features, TrailingBytes) {
  Rng rng(5);
  auto bytes = serialize_features(random_store(rng, 2, 1, 1));
  bytes += "junk";
  EXPECT_NE(error_of([&] { parse_features(bytes); }).find("trailing"), std::string::npos);
}

TEST(Features, NonFiniteValueNamesRecord) {
  FeatureStore s;
  s.L = 1;
  s.C = 2;
  s.add(0, 0, FeatureMap::Zero(1, 2));
  FeatureMap bad(1, 2);
  bad << 1.0f, std::numeric_limits<float>::infinity();
  s.add(1, 0, bad);
  auto msg = error_of([&] { parse_features(serialize_features(s)); });
  EXPECT_NE(msg.find("record 1"), std::string::npos) << msg;
}

TEST(Features, AddChecksShape) {
  FeatureStore s;
  s.L = 2;
  s.C = 2;
  EXPECT_THROW(s.add(0, 0, FeatureMap::Zero(2, 3)), DimensionError);
}

TEST(ClassNames, RoundTripAndDefaults) {
  std::map<ClassId, std::string> names{{0, "cat"}, {3, "pickup_truck"}, {10, "airplane"}};
  const auto text = format_class_names(names);
  EXPECT_EQ(parse_class_names(text), names);
  EXPECT_EQ(format_class_names(parse_class_names(text)), text);
  FeatureStore s;
  s.class_names = names;
  EXPECT_EQ(s.class_name(3), "pickup_truck");
  EXPECT_EQ(s.class_name(4), "class_4");
  EXPECT_THROW(parse_class_names("7 cat\n"), FormatError);
}

TEST(WordVectorsText, ParsesAndSkipsCountHeader) {
  auto wv = parse_word_vectors("3 2\ncat 0.5 -1\ndog 1e-3 2\n\ntruck 3 4\n");
  ASSERT_EQ(wv.names.size(), 3u);
  EXPECT_EQ(wv.dim, 2u);
  EXPECT_EQ(wv.names[2], "truck");
  EXPECT_EQ(wv.vectors[1][0], 1e-3);
  EXPECT_EQ(wv.find("dog"), 1);
  EXPECT_EQ(wv.find("cow"), -1);
}

TEST(WordVectorsText, DuplicateLastWinsWithWarning) {
  std::vector<std::string> warnings;
  auto wv = parse_word_vectors("cat 1 2\ndog 3 4\ncat 5 6\n", "vec.txt", &warnings);
  ASSERT_EQ(wv.names.size(), 2u);
  EXPECT_EQ(wv.vectors[0], (std::vector<double>{5, 6}));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("vec.txt:3"), std::string::npos);
  EXPECT_NE(warnings[0].find("cat"), std::string::npos);
}

TEST(WordVectorsText, Errors) {
  EXPECT_THROW(parse_word_vectors("cat 1 2\ndog 3\n"), FormatError);
  EXPECT_THROW(parse_word_vectors("cat 1 x\n"), FormatError);
  EXPECT_THROW(parse_word_vectors("cat nan 1\n"), FormatError);
  EXPECT_THROW(parse_word_vectors("cat\n"), FormatError);
}

TEST(WordVectorsText, RoundTripIsByteExact) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    WordVectors wv;
    wv.dim = 1 + rng.below(12);
    const auto n = rng.below(15);
    for (std::uint64_t i = 0; i < n; ++i) {
      wv.names.push_back("w" + std::to_string(i) + "_" + std::to_string(rng.below(100)));
      std::vector<double> v(wv.dim);
      for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
      wv.vectors.push_back(v);
    }
    const auto text = format_word_vectors(wv);
    auto back = parse_word_vectors(text);
    EXPECT_EQ(back.vectors, wv.vectors);
    EXPECT_EQ(format_word_vectors(back), text);
  }
}

TEST(Semantics, ExactNamesResolveEveryClass) {
  auto wv = parse_word_vectors("cat 1 0\ndog 0 1\nfox 1 1\n");
  auto table = resolve_semantics(wv, {{0, "dog"}, {1, "cat"}});
  EXPECT_EQ(table.size(), 2u);
  EXPECT_EQ(table.dim, 2u);
  EXPECT_EQ(table.at(0)(1), 1.0);
  EXPECT_EQ(table.at(1)(0), 1.0);
  EXPECT_THROW(table.at(2), DatasetError);
}

TEST(Semantics, SynonymFileResolvesMiss) {
  const std::string dir = ::testing::TempDir();
  io::write_file(dir + "vec.txt", "truck 0.25 0.5\ncat 1 2\n");
  io::write_file(dir + "syn.tsv", "pickup_truck\ttruck\n");
  std::map<ClassId, std::string> classes{{0, "cat"}, {1, "pickup_truck"}};
  auto table = load_semantics(dir + "vec.txt", classes, dir + "syn.tsv");
  EXPECT_EQ(table.at(1)(0), 0.25);
  EXPECT_THROW(load_semantics(dir + "vec.txt", classes), DatasetError);
}

TEST(Semantics, MissingNamesAreListed) {
  auto wv = parse_word_vectors("cat 1\n");
  try {
    resolve_semantics(wv, {{0, "cat"}, {1, "zebra"}, {2, "okapi"}}, {{"okapi", "giraffe"}});
    FAIL();
  } catch (const DatasetError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("zebra"), std::string::npos);
    EXPECT_NE(msg.find("okapi"), std::string::npos);
    EXPECT_EQ(msg.find("cat"), std::string::npos);
  }
}

std::vector<ClassId> iota_ids(ClassId n) {
  std::vector<ClassId> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

TEST(Split, OneSeenClassAtUpperBoundary) {
  auto s = make_split(iota_ids(6), 5, 3);
  EXPECT_EQ(s.seen.size(), 1u);
  EXPECT_EQ(s.unseen.size(), 5u);
}

TEST(Split, SketchyRatio) {
  auto s = make_split(iota_ids(125), 25, 11);
  EXPECT_EQ(s.unseen.size(), 25u);
  EXPECT_EQ(s.seen.size(), 100u);
}

TEST(Split, OutOfRangeIsConfigError) {
  EXPECT_THROW(make_split(iota_ids(5), 0, 1), ConfigError);
  EXPECT_THROW(make_split(iota_ids(5), 5, 1), ConfigError);
  EXPECT_THROW(make_split({3, 3, 3}, 1, 1), ConfigError);
}

TEST(Split, DisjointAndCoveringForManySeeds) {
  const auto all = iota_ids(20);
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto s = make_split(all, 5, seed);
    std::set<ClassId> u(s.seen.begin(), s.seen.end());
    for (auto c : s.unseen) ASSERT_TRUE(u.insert(c).second) << "seed " << seed;
    ASSERT_EQ(u.size(), all.size());
  }
}

TEST(Split, DeterministicAndOrderIndependent) {
  auto ids = iota_ids(30);
  auto a = make_split(ids, 7, 42);
  std::reverse(ids.begin(), ids.end());
  EXPECT_EQ(make_split(ids, 7, 42), a);
  EXPECT_NE(make_split(ids, 7, 43).unseen, a.unseen);
}

TEST(Split, RoughlyUniform) {
  std::vector<int> count(10, 0);
  for (std::uint64_t seed = 0; seed < 4000; ++seed) {
    for (auto c : make_split(iota_ids(10), 3, seed).unseen) ++count[c];
  }
  // Expected 1200 per class, binomial sd ~29.
  for (int c : count) EXPECT_NEAR(c, 1200, 150);
}

TEST(Split, TextRoundTrip) {
  auto s = make_split(iota_ids(12), 4, 9);
  const auto text = format_split(s);
  EXPECT_EQ(parse_split(text), s);
  EXPECT_EQ(format_split(parse_split(text)), text);
  EXPECT_THROW(parse_split("seen = 1 2\nunseen = 2\n"), FormatError);
  EXPECT_THROW(parse_split("seen = 1 2\n"), FormatError);
  EXPECT_THROW(parse_split("seen = 1\nunseen = 2\ncolor = 3\n"), FormatError);
}

TEST(Synth, ZeroNoiseItemsAreIdenticalWithinClass) {
  SynthParams p;
  p.noise = 0;
  p.n_classes = 4;
  p.per_class = 5;
  auto d = synth_dataset(p);
  for (const auto* store : {&d.sketches, &d.images}) {
    for (std::size_t i = 1; i < store->size(); ++i) {
      if (store->labels[i] == store->labels[i - 1]) EXPECT_EQ(store->map(i), store->map(i - 1));
    }
  }
  EXPECT_NE(d.sketches.map(0), d.images.map(0));
}

TEST(Synth, IdenticalSemanticsGiveIdenticalLatents) {
  Rng rng(7);
  Eigen::MatrixXd s(3, 4), proj(8, 4);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < proj.size(); ++i) proj.data()[i] = rng.normal();
  s.row(2) = s.row(0);
  auto z = class_latents(s, proj);
  EXPECT_EQ(z.row(0), z.row(2));
  EXPECT_NE(z.row(0), z.row(1));
}

TEST(Synth, ShapesNamesAndUnitSemantics) {
  SynthParams p;
  auto d = synth_dataset(p);
  EXPECT_EQ(d.sketches.size(), p.n_classes * p.per_class);
  EXPECT_EQ(d.images.size(), p.n_classes * p.per_class);
  EXPECT_EQ(d.sketches.modality, Modality::sketch);
  EXPECT_EQ(d.images.modality, Modality::image);
  EXPECT_EQ(d.semantics.names.size(), p.n_classes);
  auto table = resolve_semantics(d.semantics, d.sketches.class_names);
  for (const auto& [id, v] : table.vectors) EXPECT_NEAR(v.norm(), 1.0, 1e-12);
  EXPECT_THROW(synth_dataset(SynthParams{.n_classes = 0}), ConfigError);
}

TEST(Synth, DeterministicUnderSeed) {
  SynthParams p;
  p.per_class = 3;
  auto a = synth_dataset(p), b = synth_dataset(p);
  EXPECT_EQ(serialize_features(a.sketches), serialize_features(b.sketches));
  EXPECT_EQ(format_word_vectors(a.semantics), format_word_vectors(b.semantics));
  p.seed = 2;
  EXPECT_NE(serialize_features(synth_dataset(p).sketches), serialize_features(a.sketches));
}

double centroid_accuracy(const FeatureStore& s) {
  std::map<ClassId, Eigen::RowVectorXd> sum;
  std::map<ClassId, int> count;
  const Eigen::Index width = s.L * s.C;
  auto flat = [&](std::size_t i) {
    return Eigen::RowVectorXd(Eigen::Map<const Eigen::RowVectorXf>(s.map(i).data(), width).cast<double>());
  };
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto& acc = sum[s.labels[i]];
    if (acc.size() == 0) acc = Eigen::RowVectorXd::Zero(width);
    acc += flat(i);
    ++count[s.labels[i]];
  }
  for (auto& [c, v] : sum) v /= count[c];
  int correct = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto x = flat(i);
    ClassId best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [c, v] : sum) {
      const double d = (x - v).squaredNorm();
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == s.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(s.size());
}

TEST(Synth, NearestCentroidSeparatesCleanClasses) {
  SynthParams p;
  p.noise = 0.1;
  p.n_classes = 10;
  auto d = synth_dataset(p);
  EXPECT_GE(centroid_accuracy(d.sketches), 0.95);
  EXPECT_GE(centroid_accuracy(d.images), 0.95);
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) r[order[i]] = static_cast<double>(i);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  return 1 - 6 * d2 / (n * (n * n - 1));
}

TEST(Synth, LatentDistancesTrackSemanticDistances) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SynthParams p;
    p.seed = seed;
    p.per_class = 1;
    auto d = synth_dataset(p);
    std::vector<double> sem, lat;
    for (Eigen::Index i = 0; i < d.latents.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < d.latents.rows(); ++j) {
        sem.push_back((d.semantic_matrix.row(i) - d.semantic_matrix.row(j)).norm());
        lat.push_back((d.latents.row(i) - d.latents.row(j)).norm());
      }
    }
    EXPECT_GT(spearman(sem, lat), 0.5) << "seed " << seed;
  }
}

}  // namespace
}  // namespace zsih
