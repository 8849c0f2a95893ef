#pragma once

// Training objective and optimizer.
//
// Per item the loss is
//   log q(b~ | x, y) - log p(s | b~) + (1 / 2M) (|f(x) - b~|^2 + |g(y) - b~|^2)
// summed over the batch and averaged over the K Monte-Carlo draws of b~.
// Minimizing the first term raises code entropy, the second ties codes to
// the class semantics and the third pulls the single-modality encoders
// toward the codes learned by the multi-modal network.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "zsih/model.hpp"

namespace zsih {

/// Loss terms of one batch; all sums over items, averaged over draws.
struct LossBreakdown {
  double total = 0;
  double entropy_term = 0;   // sum log q
  double decode_term = 0;    // sum -log p
  double code_reg_term = 0;  // sum of the (1/2M) L2 terms
};

template <typename Scalar>
struct BatchLoss {
  Var<Scalar> loss;
  LossBreakdown breakdown;
};

namespace detail {

template <typename Scalar>
BatchLoss<Scalar> assemble_loss(const TripletBatch<Scalar>& batch, const ModelParams<Scalar>& params,
                                const Matrix<Scalar>& adjacency, std::size_t draws,
                                const std::function<Var<Scalar>(const Var<Scalar>&, std::size_t)>& sample) {
  if (batch.size() < 2) {
    throw BatchSizeError("batch of " + std::to_string(batch.size()) +
                         " items; the in-batch graph needs at least 2");
  }
  if (draws == 0) throw ContractError("batch_loss: need at least one noise draw");
  auto probs = forward_probabilities(batch, params, adjacency);
  const Scalar code_weight = Scalar(1) / (Scalar(2) * static_cast<Scalar>(probs.b.cols()));

  Var<Scalar> entropy, decode, code_reg;
  for (std::size_t k = 0; k < draws; ++k) {
    auto bits = sample(probs.b, k);
    auto lq = log_q(probs.b, bits);
    auto neg_lp = -log_p_gaussian(batch.semantics, bits, params.decoder);
    auto reg = ad::scale(ad::add(ad::sum(ad::square(ad::sub(probs.f_out, bits))),
                                 ad::sum(ad::square(ad::sub(probs.g_out, bits)))),
                         code_weight);
    entropy = k == 0 ? lq : ad::add(entropy, lq);
    decode = k == 0 ? neg_lp : ad::add(decode, neg_lp);
    code_reg = k == 0 ? reg : ad::add(code_reg, reg);
  }
  if (draws > 1) {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(draws);
    entropy = ad::scale(entropy, inv);
    decode = ad::scale(decode, inv);
    code_reg = ad::scale(code_reg, inv);
  }
  BatchLoss<Scalar> out;
  out.loss = ad::add(ad::add(entropy, decode), code_reg);
  out.breakdown.entropy_term = static_cast<double>(entropy.item());
  out.breakdown.decode_term = static_cast<double>(decode.item());
  out.breakdown.code_reg_term = static_cast<double>(code_reg.item());
  out.breakdown.total = static_cast<double>(out.loss.item());
  return out;
}

}  // namespace detail

/// Batch objective with b~ drawn from the given uniform noise, one N_B x M
/// matrix per Monte-Carlo draw.
template <typename Scalar>
BatchLoss<Scalar> batch_loss(const TripletBatch<Scalar>& batch, const ModelParams<Scalar>& params,
                             const Matrix<Scalar>& adjacency,
                             const std::vector<Matrix<Scalar>>& eps_draws) {
  return detail::assemble_loss<Scalar>(
      batch, params, adjacency, eps_draws.size(),
      [&eps_draws](const Var<Scalar>& b, std::size_t k) { return stochastic_neurons(b, eps_draws[k]); });
}

/// Same objective with previously recorded draws replayed through the
/// straight-through surrogate (see replay_neurons).
template <typename Scalar>
BatchLoss<Scalar> batch_loss_replay(const TripletBatch<Scalar>& batch,
                                    const ModelParams<Scalar>& params,
                                    const Matrix<Scalar>& adjacency,
                                    const std::vector<CodeReplay<Scalar>>& replays) {
  return detail::assemble_loss<Scalar>(
      batch, params, adjacency, replays.size(),
      [&replays](const Var<Scalar>& b, std::size_t k) { return replay_neurons(b, replays[k]); });
}

/// Records the draws batch_loss would make at the current parameters.
template <typename Scalar>
std::vector<CodeReplay<Scalar>> record_draws(const TripletBatch<Scalar>& batch,
                                             const ModelParams<Scalar>& params,
                                             const Matrix<Scalar>& adjacency,
                                             const std::vector<Matrix<Scalar>>& eps_draws) {
  auto probs = forward_probabilities(batch, params, adjacency);
  std::vector<CodeReplay<Scalar>> out;
  for (const auto& eps : eps_draws) {
    out.push_back({stochastic_neurons(probs.b, eps).value(), probs.b.value()});
  }
  return out;
}

/// Clears parameter gradients, runs the reverse pass and returns one
/// gradient matrix per parameter in ModelParams::named() order.
template <typename Scalar>
std::vector<Matrix<Scalar>> estimate_gradients(const Var<Scalar>& loss, ModelParams<Scalar>& params) {
  params.zero_grad();
  ad::backward(loss);
  std::vector<Matrix<Scalar>> grads;
  for (auto& p : params.named()) grads.push_back(p.var->grad());
  return grads;
}

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
  double grad_clip = 0.0;

  static AdamState init(ModelParams<Scalar>& params, const ZsihConfig& config) {
    AdamState s;
    s.lr = config.lr;
    s.beta1 = config.beta1;
    s.beta2 = config.beta2;
    s.eps_hat = config.eps_hat;
    s.grad_clip = config.grad_clip;
    for (auto& p : params.named()) {
      s.m.push_back(Matrix<Scalar>::Zero(p.var->rows(), p.var->cols()));
      s.v.push_back(Matrix<Scalar>::Zero(p.var->rows(), p.var->cols()));
    }
    return s;
  }
};

/// One bias-corrected Adam update. A non-finite gradient aborts with the
/// offending parameter named; parameters are left untouched in that case.
template <typename Scalar>
void adam_step(ModelParams<Scalar>& params, std::vector<Matrix<Scalar>> grads, AdamState<Scalar>& state) {
  auto named = params.named();
  if (grads.size() != named.size() || state.m.size() != named.size()) {
    throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients, " +
                         std::to_string(state.m.size()) + " moment slots, " +
                         std::to_string(named.size()) + " parameters");
  }
  double sq_norm = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (grads[i].rows() != named[i].var->rows() || grads[i].cols() != named[i].var->cols()) {
      throw DimensionError("adam_step: gradient shape mismatch for " + named[i].name);
    }
    if (!grads[i].allFinite()) {
      std::ostringstream os;
      os << "non-finite gradient in " << named[i].name << " (" << grads[i].rows() << "x"
         << grads[i].cols() << ", step " << state.step << ")";
      throw NonFiniteError(os.str());
    }
    sq_norm += static_cast<double>(grads[i].squaredNorm());
  }
  if (state.grad_clip > 0 && sq_norm > state.grad_clip * state.grad_clip) {
    const Scalar factor = static_cast<Scalar>(state.grad_clip / std::sqrt(sq_norm));
    for (auto& g : grads) g *= factor;
  }
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const Scalar correction1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step));
  const Scalar correction2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step));
  const Scalar lr = static_cast<Scalar>(state.lr), eps = static_cast<Scalar>(state.eps_hat);
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * grads[i];
    v = b2 * v + (Scalar(1) - b2) * grads[i].cwiseProduct(grads[i]);
    auto& theta = named[i].var->value_mut();
    theta.array() -= lr * (m.array() / correction1) / ((v.array() / correction2).sqrt() + eps);
  }
}

}  // namespace zsih
