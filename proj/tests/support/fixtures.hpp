#pragma once

#include <vector>

#include "support/random_util.hpp"
#include "zsih/model.hpp"

namespace zsih::testing {

/// Small enough that full finite-difference sweeps stay fast.
inline ZsihConfig tiny_config() {
  ZsihConfig c;
  c.M = 4;
  c.d_f = 3;
  c.gcn_hidden = 5;
  c.N_B = 4;
  c.C = 4;
  c.d_s = 3;
  c.mfb_factor = 2;
  return c;
}

inline TripletBatch<double> random_batch(Rng& rng, Index n, Index locations, Index channels,
                                         Index semantic_dim) {
  TripletBatch<double> b;
  b.locations = locations;
  b.sketch_feats = random_matrix(rng, n * locations, channels, -1.5, 1.5);
  b.image_feats = random_matrix(rng, n * locations, channels, -1.5, 1.5);
  b.semantics = random_matrix(rng, n, semantic_dim);
  for (Index i = 0; i < n; ++i) b.labels.push_back(static_cast<std::uint32_t>(i % 2));
  return b;
}

inline Matrix<double> random_adjacency(Rng& rng, Index n) {
  Matrix<double> a = random_matrix(rng, n, n, 0.05, 1.0);
  a = ((a + a.transpose()) / 2).eval();
  a.diagonal().setOnes();
  return a;
}

inline std::vector<Matrix<double>> random_eps(Rng& rng, std::size_t draws, Index n, Index m) {
  std::vector<Matrix<double>> out;
  for (std::size_t k = 0; k < draws; ++k) out.push_back(random_matrix(rng, n, m, 0, 1));
  return out;
}

/// Re-scales the weights so the forward pass sits in a well-conditioned
/// region (no saturated sigmoids) for gradient checks.
inline void randomize_params(ModelParams<double>& p, Rng& rng, double scale = 0.8) {
  for (auto& np : p.named()) {
    auto& v = np.var->value_mut();
    v = random_matrix(rng, v.rows(), v.cols(), -scale, scale);
  }
}

}  // namespace zsih::testing
