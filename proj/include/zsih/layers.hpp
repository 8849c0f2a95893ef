#pragma once

// Building blocks of the hashing network: attention pooling, Kronecker
// fusion, graph convolution, sigmoid hash encoders, stochastic binary
// neurons, the Bernoulli code posterior and the Gaussian semantic decoder.
//
// Layers are free functions over parameter structs so a forward pass is a
// pure function of (parameters, inputs, noise).

#include <cmath>
#include <numbers>
#include <string>

#include "zsih/autodiff.hpp"
#include "zsih/errors.hpp"

namespace zsih {

using ad::Index;
using ad::Matrix;
using ad::Var;

enum class Activation { identity, relu, sigmoid };

template <typename Scalar>
Var<Scalar> activate(const Var<Scalar>& x, Activation act) {
  switch (act) {
    case Activation::relu: return ad::relu(x);
    case Activation::sigmoid: return ad::sigmoid(x);
    case Activation::identity: break;
  }
  return x;
}

/// Probabilities are clamped into [kProbClamp, 1 - kProbClamp] before taking logs.
inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// Attention-weighted pooling

template <typename Scalar>
struct AttentionPool {
  Var<Scalar> score_weights;  // C x 1
  Var<Scalar> score_bias;     // 1 x 1
  Var<Scalar> proj_weights;   // C x d_f
  Var<Scalar> proj_bias;      // 1 x d_f
};

template <typename Scalar>
struct AttentionOutput {
  Var<Scalar> weights;   // N x L, each row on the simplex
  Var<Scalar> features;  // N x d_f
};

/// Pools a batch of feature maps stacked as (N*L) x C rows: a softmax over
/// the L locations of each item weights the rows, then a ReLU projection
/// maps the pooled C-vector to d_f.
template <typename Scalar>
AttentionOutput<Scalar> attend(const Matrix<Scalar>& stacked_maps, Index locations,
                               const AttentionPool<Scalar>& p) {
  if (locations < 1 || stacked_maps.rows() == 0) {
    throw DimensionError("attention_pool: empty feature map");
  }
  if (stacked_maps.rows() % locations != 0) {
    throw DimensionError("attention_pool: " + std::to_string(stacked_maps.rows()) +
                         " rows do not split into maps of " + std::to_string(locations));
  }
  if (stacked_maps.cols() != p.score_weights.rows()) {
    throw DimensionError("attention_pool: feature channels " +
                         std::to_string(stacked_maps.cols()) + " but parameters expect " +
                         std::to_string(p.score_weights.rows()));
  }
  const Index items = stacked_maps.rows() / locations;
  auto x = Var<Scalar>::constant(stacked_maps);
  auto scores = ad::add(ad::matmul(x, p.score_weights), p.score_bias);
  auto weights = ad::softmax_rows(ad::reshape(scores, items, locations));
  auto pooled = ad::pool_segments(weights, x);
  auto out = ad::relu(ad::add(ad::matmul(pooled, p.proj_weights), p.proj_bias));
  return {weights, out};
}

template <typename Scalar>
Var<Scalar> attention_pool(const Matrix<Scalar>& stacked_maps, Index locations,
                           const AttentionPool<Scalar>& p) {
  return attend(stacked_maps, locations, p).features;
}

/// Single L x C feature map; returns a 1 x d_f row.
template <typename Scalar>
Var<Scalar> attention_pool(const Matrix<Scalar>& feat_map, const AttentionPool<Scalar>& p) {
  return attend(feat_map, feat_map.rows(), p).features;
}

// ---------------------------------------------------------------------------
// Kronecker fusion

template <typename Scalar>
struct KroneckerFusion {
  Var<Scalar> w_sk;  // d_f x d_f
  Var<Scalar> w_im;  // d_f x d_f
};

/// (h_sk W_sk) (x) (h_im W_im) row by row, before the ReLU.
template <typename Scalar>
Var<Scalar> fuse_linear(const Var<Scalar>& h_sk, const Var<Scalar>& h_im,
                        const KroneckerFusion<Scalar>& p) {
  if (h_sk.cols() != h_im.cols() || h_sk.rows() != h_im.rows()) {
    throw DimensionError("fuse: sketch features " + ad::detail::shape_str(h_sk) +
                         " vs image features " + ad::detail::shape_str(h_im));
  }
  return ad::kron_rows(ad::matmul(h_sk, p.w_sk), ad::matmul(h_im, p.w_im));
}

template <typename Scalar>
Var<Scalar> fuse(const Var<Scalar>& h_sk, const Var<Scalar>& h_im,
                 const KroneckerFusion<Scalar>& p) {
  return ad::relu(fuse_linear(h_sk, h_im, p));
}

// ---------------------------------------------------------------------------
// Graph convolution

template <typename Scalar>
struct GraphConvLayer {
  Var<Scalar> weight;  // d_in x d_out
  Activation activation = Activation::relu;
};

/// D^{-1/2} A D^{-1/2} with D = diag(A 1). A must be square, exactly
/// symmetric, nonnegative, with positive row sums.
template <typename Scalar>
Matrix<Scalar> normalized_adjacency(const Matrix<Scalar>& adjacency) {
  const Index n = adjacency.rows();
  if (adjacency.cols() != n) {
    throw AdjacencyError("adjacency must be square, got " +
                         ad::detail::shape_str(n, adjacency.cols()));
  }
  if (!adjacency.allFinite() || (adjacency.array() < Scalar(0)).any()) {
    throw AdjacencyError("adjacency entries must be finite and nonnegative");
  }
  for (Index j = 0; j < n; ++j) {
    for (Index k = j + 1; k < n; ++k) {
      if (adjacency(j, k) != adjacency(k, j)) {
        throw AdjacencyError("adjacency is not symmetric at (" + std::to_string(j) + ", " +
                             std::to_string(k) + ")");
      }
    }
  }
  Matrix<Scalar> inv_sqrt_degree = adjacency.rowwise().sum();
  for (Index j = 0; j < n; ++j) {
    if (!(inv_sqrt_degree(j, 0) > Scalar(0))) {
      throw AdjacencyError("adjacency row " + std::to_string(j) + " has zero sum");
    }
    inv_sqrt_degree(j, 0) = Scalar(1) / std::sqrt(inv_sqrt_degree(j, 0));
  }
  return inv_sqrt_degree.col(0).asDiagonal() * adjacency * inv_sqrt_degree.col(0).asDiagonal();
}

/// act(A_hat (H W)); the adjacency is a constant of the graph.
template <typename Scalar>
Var<Scalar> graph_conv(const Var<Scalar>& h, const Matrix<Scalar>& adjacency,
                       const GraphConvLayer<Scalar>& layer) {
  if (adjacency.rows() != h.rows()) {
    throw DimensionError("graph_conv: adjacency of " + std::to_string(adjacency.rows()) +
                         " nodes for " + std::to_string(h.rows()) + " rows");
  }
  auto a_hat = Var<Scalar>::constant(normalized_adjacency(adjacency));
  return activate(ad::matmul(a_hat, ad::matmul(h, layer.weight)), layer.activation);
}

/// The same layer without graph propagation: act(H W).
template <typename Scalar>
Var<Scalar> dense(const Var<Scalar>& h, const GraphConvLayer<Scalar>& layer) {
  return activate(ad::matmul(h, layer.weight), layer.activation);
}

// ---------------------------------------------------------------------------
// Hash encoders f (images) and g (sketches)

template <typename Scalar>
struct HashEncoder {
  Var<Scalar> weight;  // d_f x M
  Var<Scalar> bias;    // 1 x M
};

template <typename Scalar>
Var<Scalar> encode_soft(const Var<Scalar>& h, const HashEncoder<Scalar>& enc) {
  if (h.cols() != enc.weight.rows()) {
    throw DimensionError("encode_soft: input width " + std::to_string(h.cols()) +
                         " but encoder expects " + std::to_string(enc.weight.rows()));
  }
  return ad::sigmoid(ad::add(ad::matmul(h, enc.weight), enc.bias));
}

// ---------------------------------------------------------------------------
// Stochastic neurons

namespace detail {

template <typename Scalar>
void check_probabilities(const Matrix<Scalar>& b, const char* what) {
  for (Index i = 0; i < b.size(); ++i) {
    const Scalar v = b.data()[i];
    if (!(v >= Scalar(0) && v <= Scalar(1))) {
      throw DomainError(std::string(what) + ": value " + std::to_string(v) +
                        " outside [0, 1]");
    }
  }
}

/// 1 where the straight-through gradient passes, 0 where b sits in the clamp zone.
template <typename Scalar>
Matrix<Scalar> pass_mask(const Matrix<Scalar>& b) {
  const Scalar lo = Scalar(kProbClamp), hi = Scalar(1) - Scalar(kProbClamp);
  return b.unaryExpr([lo, hi](Scalar v) { return (v >= lo && v <= hi) ? Scalar(1) : Scalar(0); });
}

}  // namespace detail

/// Bits b~ = [b >= eps] with a straight-through backward rule (identity,
/// zeroed where b is within kProbClamp of 0 or 1).
template <typename Scalar>
Var<Scalar> stochastic_neurons(const Var<Scalar>& b, const Matrix<Scalar>& eps) {
  if (eps.rows() != b.rows() || eps.cols() != b.cols()) {
    throw DimensionError("stochastic_neurons: eps " + ad::detail::shape_str(eps.rows(), eps.cols()) +
                         " vs probabilities " + ad::detail::shape_str(b));
  }
  detail::check_probabilities(b.value(), "stochastic_neurons");
  detail::check_probabilities(eps, "stochastic_neurons eps");
  Matrix<Scalar> bits = (b.value().array() >= eps.array()).template cast<Scalar>();
  Matrix<Scalar> mask = detail::pass_mask(b.value());
  return ad::make_op<Scalar>(std::move(bits), {b}, [mask = std::move(mask)](ad::Node<Scalar>& n) {
    n.parents[0]->grad += n.grad.cwiseProduct(mask);
  });
}

/// A recorded draw of the stochastic neurons: the bits and the
/// probabilities they were sampled from.
template <typename Scalar>
struct CodeReplay {
  Matrix<Scalar> bits;
  Matrix<Scalar> anchor;
};

/// Replays a recorded draw as the continuous surrogate
/// bits + mask * (b - anchor). Its value equals the bits at b == anchor and
/// its derivative is exactly the straight-through rule, which makes the
/// stochastic path checkable by finite differences with the noise frozen.
template <typename Scalar>
Var<Scalar> replay_neurons(const Var<Scalar>& b, const CodeReplay<Scalar>& replay) {
  if (replay.bits.rows() != b.rows() || replay.bits.cols() != b.cols() ||
      replay.anchor.rows() != b.rows() || replay.anchor.cols() != b.cols()) {
    throw DimensionError("replay_neurons: recorded shape does not match probabilities");
  }
  Matrix<Scalar> mask = detail::pass_mask(replay.anchor);
  Matrix<Scalar> value = replay.bits + mask.cwiseProduct(b.value() - replay.anchor);
  return ad::make_op<Scalar>(std::move(value), {b}, [mask = std::move(mask)](ad::Node<Scalar>& n) {
    n.parents[0]->grad += n.grad.cwiseProduct(mask);
  });
}

// ---------------------------------------------------------------------------
// Code posterior and semantic decoder

/// log q(b~ | x, y) = sum b~ log b + (1 - b~) log(1 - b), summed over every
/// element. When b~ comes from stochastic_neurons its straight-through
/// gradient flows here too; that path carries the entropy signal, since the
/// direct path d/db has zero mean under b~ ~ Bernoulli(b).
template <typename Scalar>
Var<Scalar> log_q(const Var<Scalar>& b, const Var<Scalar>& b_tilde) {
  if (b_tilde.rows() != b.rows() || b_tilde.cols() != b.cols()) {
    throw DimensionError("log_q: bits " + ad::detail::shape_str(b_tilde) +
                         " vs probabilities " + ad::detail::shape_str(b));
  }
  const Scalar tau = Scalar(kProbClamp);
  auto clamped = ad::clamp(b, tau, Scalar(1) - tau);
  auto log_b = ad::log(clamped);
  auto log_not_b = ad::log(ad::shift(-clamped, Scalar(1)));
  auto off = ad::shift(-b_tilde, Scalar(1));
  return ad::add(ad::sum(ad::mul(b_tilde, log_b)), ad::sum(ad::mul(off, log_not_b)));
}

/// Same with constant bits.
template <typename Scalar>
Var<Scalar> log_q(const Var<Scalar>& b, const Matrix<Scalar>& bits) {
  return log_q(b, Var<Scalar>::constant(bits));
}

template <typename Scalar>
struct GaussianDecoder {
  Var<Scalar> w_mu;      // M x d_s
  Var<Scalar> b_mu;      // 1 x d_s
  Var<Scalar> w_logvar;  // M x d_s
  Var<Scalar> b_logvar;  // 1 x d_s
};

template <typename Scalar>
struct DecoderOutput {
  Var<Scalar> mu;
  Var<Scalar> logvar;
};

template <typename Scalar>
DecoderOutput<Scalar> decode(const Var<Scalar>& codes, const GaussianDecoder<Scalar>& dec) {
  if (codes.cols() != dec.w_mu.rows()) {
    throw DimensionError("decoder: code length " + std::to_string(codes.cols()) +
                         " but decoder expects " + std::to_string(dec.w_mu.rows()));
  }
  return {ad::add(ad::matmul(codes, dec.w_mu), dec.b_mu),
          ad::add(ad::matmul(codes, dec.w_logvar), dec.b_logvar)};
}

/// log N(s | mu, diag(exp(logvar))), summed over rows.
template <typename Scalar>
Var<Scalar> gaussian_log_density(const Matrix<Scalar>& s, const Var<Scalar>& mu,
                                 const Var<Scalar>& logvar) {
  if (s.rows() != mu.rows() || s.cols() != mu.cols()) {
    throw DimensionError("log_p_gaussian: semantics " + ad::detail::shape_str(s.rows(), s.cols()) +
                         " vs decoder output " + ad::detail::shape_str(mu));
  }
  const Scalar log_two_pi = std::log(Scalar(2) * std::numbers::pi_v<Scalar>);
  auto resid = ad::sub(Var<Scalar>::constant(s), mu);
  auto quad = ad::mul(ad::square(resid), ad::exp(-logvar));
  auto inner = ad::sum(ad::add(logvar, quad));
  return ad::shift(ad::scale(inner, Scalar(-0.5)),
                   Scalar(-0.5) * static_cast<Scalar>(s.size()) * log_two_pi);
}

template <typename Scalar>
Var<Scalar> log_p_gaussian(const Matrix<Scalar>& s, const Var<Scalar>& codes,
                           const GaussianDecoder<Scalar>& dec) {
  auto out = decode(codes, dec);
  return gaussian_log_density(s, out.mu, out.logvar);
}

}  // namespace zsih
