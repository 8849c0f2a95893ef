#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "zsih/errors.hpp"

namespace zsih {

using ClassId = std::uint32_t;

enum class Modality : std::uint8_t { sketch = 0, image = 1 };

std::string to_string(Modality m);
Modality parse_modality(std::string_view s);

using FeatureMap = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One modality's feature maps (L x C each), kept as 32-bit reals in file order.
struct FeatureStore {
  Modality modality = Modality::sketch;
  std::uint32_t L = 1;
  std::uint32_t C = 0;
  std::vector<std::uint64_t> ids;
  std::vector<ClassId> labels;
  std::vector<float> values;  // N * L * C
  std::map<ClassId, std::string> class_names;

  std::size_t size() const { return ids.size(); }

  void add(std::uint64_t id, ClassId label, const FeatureMap& map);

  Eigen::Map<const FeatureMap> map(std::size_t i) const {
    return {values.data() + i * L * C, static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(C)};
  }

  /// Name of a class, "class_<id>" when none was loaded.
  std::string class_name(ClassId id) const;

  /// Sorted distinct labels.
  std::vector<ClassId> classes() const;
};

std::string serialize_features(const FeatureStore& store);
FeatureStore parse_features(std::string_view bytes, const std::string& source = "");
void save_features(const std::string& path, const FeatureStore& store);
FeatureStore load_features(const std::string& path);

/// Items whose class is listed, in their original order.
FeatureStore select_classes(const FeatureStore& store, const std::vector<ClassId>& classes);

/// Class-name sidecar, "id<TAB>name" per line.
std::map<ClassId, std::string> parse_class_names(std::string_view text, const std::string& source = "");
std::string format_class_names(const std::map<ClassId, std::string>& names);

// ---------------------------------------------------------------------------
// Semantic vectors

/// Contents of a word-vector text file: one "name v1 ... vd" line per entry.
struct WordVectors {
  std::size_t dim = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> vectors;

  /// Index of a name, or -1.
  long find(std::string_view name) const;
};

/// Duplicate names keep the last line; each duplicate appends a warning.
WordVectors parse_word_vectors(std::string_view text, const std::string& source = "",
                               std::vector<std::string>* warnings = nullptr);
std::string format_word_vectors(const WordVectors& wv);

/// "missing_name<TAB>substitute_name" per line.
std::map<std::string, std::string> parse_synonyms(std::string_view text, const std::string& source = "");

/// Class id to semantic row vector.
struct SemanticTable {
  std::size_t dim = 0;
  std::map<ClassId, Eigen::RowVectorXd> vectors;

  std::size_t size() const { return vectors.size(); }
  bool contains(ClassId id) const { return vectors.count(id) != 0; }
  const Eigen::RowVectorXd& at(ClassId id) const;
};

/// Resolves every class by exact name, then through the synonym map.
/// Unresolved classes raise DatasetError listing all missing names.
SemanticTable resolve_semantics(const WordVectors& wv, const std::map<ClassId, std::string>& class_names,
                                const std::map<std::string, std::string>& synonyms = {});

SemanticTable load_semantics(const std::string& path, const std::map<ClassId, std::string>& class_names,
                             const std::string& synonyms_path = "");

// ---------------------------------------------------------------------------
// Zero-shot split

struct ZeroShotSplit {
  std::vector<ClassId> seen;    // sorted
  std::vector<ClassId> unseen;  // sorted
  std::uint64_t seed = 0;

  bool is_seen(ClassId c) const;
  bool is_unseen(ClassId c) const;
  bool operator==(const ZeroShotSplit&) const = default;
};

/// Uniformly random n_unseen-subset as unseen; needs 0 < n_unseen < |classes|.
ZeroShotSplit make_split(std::vector<ClassId> classes, std::size_t n_unseen, std::uint64_t seed);

/// `key = value` text with keys seed, seen, unseen.
std::string format_split(const ZeroShotSplit& split);
ZeroShotSplit parse_split(std::string_view text, const std::string& source = "");

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthParams {
  std::uint32_t n_classes = 10;
  std::uint32_t per_class = 50;  // items per class per modality
  std::uint32_t L = 4;
  std::uint32_t C = 32;
  std::uint32_t d_s = 8;
  double noise = 0.2;
  std::uint64_t seed = 1;
};

struct SyntheticData {
  FeatureStore sketches;
  FeatureStore images;
  WordVectors semantics;
  Eigen::MatrixXd semantic_matrix;  // n_classes x d_s, unit rows
  Eigen::MatrixXd latents;          // n_classes x d_z
};

/// Class latents as a fixed linear map of the semantic rows.
Eigen::MatrixXd class_latents(const Eigen::MatrixXd& semantics, const Eigen::MatrixXd& projection);

SyntheticData synth_dataset(const SynthParams& params);

}  // namespace zsih
