#pragma once

// Training pipeline: batch sampling, in-batch semantic graph, the training
// loop, checkpoints and out-of-sample encoding.

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "zsih/config.hpp"
#include "zsih/data.hpp"
#include "zsih/model.hpp"
#include "zsih/objective.hpp"
#include "zsih/random.hpp"

namespace zsih {

/// A[j][k] = exp(-|s_j - s_k|^2 / t), symmetric with a unit diagonal.
template <typename Scalar>
Matrix<Scalar> build_adjacency(const Matrix<Scalar>& semantics, double t) {
  if (!(t > 0) || !std::isfinite(t)) throw ConfigError("adjacency bandwidth t must be positive");
  const Index n = semantics.rows();
  Matrix<Scalar> a(n, n);
  for (Index j = 0; j < n; ++j) {
    a(j, j) = Scalar(1);
    for (Index k = j + 1; k < n; ++k) {
      const Scalar d = (semantics.row(j) - semantics.row(k)).squaredNorm();
      a(j, k) = a(k, j) = std::exp(-d / static_cast<Scalar>(t));
    }
  }
  return a;
}

/// Both modalities plus the class semantics of one dataset.
struct Dataset {
  FeatureStore sketches;
  FeatureStore images;
  SemanticTable semantics;

  std::vector<ClassId> classes() const;
};

/// Raises DatasetError if any item of the dataset belongs to an unseen
/// class or to a class missing from the split.
void check_seen_only(const Dataset& data, const ZeroShotSplit& split);

/// Stacks the feature maps of the given items, L rows per item.
Matrix<double> stack_maps(const FeatureStore& store, const std::vector<std::size_t>& items);

/// Per-class item index for drawing category-coherent batches.
class BatchSampler {
 public:
  explicit BatchSampler(const Dataset& data);

  /// n draws of a class (with replacement), then one sketch and one image
  /// of that class.
  TripletBatch<double> sample(std::size_t n, Rng& rng) const;

  const std::vector<ClassId>& classes() const { return classes_; }

 private:
  const Dataset* data_;
  std::vector<ClassId> classes_;
  std::vector<std::vector<std::size_t>> sketch_items_, image_items_;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ZsihConfig config;
  ModelParams<double> params;
  AdamState<double> adam;
  std::uint64_t iteration = 0;
  std::vector<double> loss_history;  // per-step totals, drives the convergence stop
  std::string rng_state;

  /// Copy that shares no parameter storage with this one.
  Checkpoint clone() const {
    Checkpoint c = *this;
    c.params = params.clone();
    return c;
  }
};

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source = "");
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Training

/// Fills C and d_s from the data when unset and checks they agree with it.
ZsihConfig resolve_dims(ZsihConfig config, const Dataset& data);

/// Fresh parameters and optimizer state; the generator is seeded from
/// config.seed and first draws the weights.
Checkpoint initial_checkpoint(const ZsihConfig& config, const Dataset& data);

struct TrainOptions {
  std::ostream* metrics = nullptr;    // one tab-separated line per step
  const Checkpoint* resume = nullptr; // continue from here up to config.T
  const ZeroShotSplit* split = nullptr;
  bool identity_adjacency = false;    // use A = I in place of the semantic graph
};

/// Raised when a step produces a non-finite loss or gradient.
class TrainingAborted : public NonFiniteError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : NonFiniteError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

/// Runs the training loop until config.T iterations or the convergence stop.
Checkpoint train(ZsihConfig config, const Dataset& data, const TrainOptions& options = {});

/// True when the mean loss of the last window improved on the window before
/// it by less than tol (relative). Only evaluated on window boundaries.
bool converged(const std::vector<double>& history, std::size_t window, double tol);

// ---------------------------------------------------------------------------
// Encoding

/// Soft codes of every item through the single-modality encoder of its
/// modality (f for images, g for sketches). N x M, values in (0, 1).
Matrix<double> encode_soft_codes(const ModelParams<double>& params, const FeatureStore& store);

}  // namespace zsih
