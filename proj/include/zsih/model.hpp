#pragma once

// Parameters of the three networks and the training-time forward pass.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "zsih/config.hpp"
#include "zsih/layers.hpp"
#include "zsih/random.hpp"

namespace zsih {

template <typename Scalar>
struct NamedParam {
  std::string name;
  Var<Scalar>* var;
};

/// Glorot-uniform weights, zero biases.
template <typename Scalar>
Var<Scalar> glorot(Index fan_in, Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix<Scalar> w(fan_in, fan_out);
  // Row-major fill order so the draw sequence does not depend on storage order.
  for (Index i = 0; i < fan_in; ++i) {
    for (Index j = 0; j < fan_out; ++j) w(i, j) = static_cast<Scalar>(rng.uniform(-limit, limit));
  }
  return Var<Scalar>::parameter(std::move(w));
}

template <typename Scalar>
Var<Scalar> zeros_param(Index rows, Index cols) {
  return Var<Scalar>::parameter(Matrix<Scalar>::Zero(rows, cols));
}

/// All trainable weights: per-modality attention, the fusion layer for the
/// configured fusion mode, two graph layers, the two hash encoders and the
/// semantic decoder.
template <typename Scalar>
struct ModelParams {
  FusionMode fusion_mode = FusionMode::kronecker;
  bool use_gcn = true;
  std::uint32_t mfb_factor = 4;

  AttentionPool<Scalar> att_sk, att_im;
  KroneckerFusion<Scalar> kron;
  Var<Scalar> concat_w, concat_b;  // concat: [h_sk h_im] -> d_f^2
  Var<Scalar> mfb_u, mfb_v;        // mfb: d_f -> d_f * k factors
  Var<Scalar> mfb_w, mfb_b;        // mfb: pooled d_f -> d_f^2
  GraphConvLayer<Scalar> gcn1, gcn2;
  HashEncoder<Scalar> enc_im;  // f
  HashEncoder<Scalar> enc_sk;  // g
  GaussianDecoder<Scalar> decoder;

  /// Fresh parameters. Requires config.C and config.d_s to be set.
  static ModelParams init(const ZsihConfig& config, Rng& rng) {
    if (config.C == 0 || config.d_s == 0) {
      throw ConfigError("model init: feature channels C and semantic width d_s must be set");
    }
    validate(config);
    const Index c = config.C, df = config.d_f, fused = df * df, m = config.M, ds = config.d_s;
    ModelParams p;
    p.fusion_mode = config.fusion_mode;
    p.use_gcn = config.use_gcn;
    p.mfb_factor = config.mfb_factor;
    for (auto* att : {&p.att_sk, &p.att_im}) {
      att->score_weights = glorot<Scalar>(c, 1, rng);
      att->score_bias = zeros_param<Scalar>(1, 1);
      att->proj_weights = glorot<Scalar>(c, df, rng);
      att->proj_bias = zeros_param<Scalar>(1, df);
    }
    switch (config.fusion_mode) {
      case FusionMode::kronecker:
        p.kron.w_sk = glorot<Scalar>(df, df, rng);
        p.kron.w_im = glorot<Scalar>(df, df, rng);
        break;
      case FusionMode::concat:
        p.concat_w = glorot<Scalar>(2 * df, fused, rng);
        p.concat_b = zeros_param<Scalar>(1, fused);
        break;
      case FusionMode::mfb:
        p.mfb_u = glorot<Scalar>(df, df * config.mfb_factor, rng);
        p.mfb_v = glorot<Scalar>(df, df * config.mfb_factor, rng);
        p.mfb_w = glorot<Scalar>(df, fused, rng);
        p.mfb_b = zeros_param<Scalar>(1, fused);
        break;
    }
    p.gcn1 = {glorot<Scalar>(fused, config.gcn_hidden, rng), Activation::relu};
    p.gcn2 = {glorot<Scalar>(config.gcn_hidden, m, rng), Activation::sigmoid};
    p.enc_im = {glorot<Scalar>(df, m, rng), zeros_param<Scalar>(1, m)};
    p.enc_sk = {glorot<Scalar>(df, m, rng), zeros_param<Scalar>(1, m)};
    p.decoder = {glorot<Scalar>(m, ds, rng), zeros_param<Scalar>(1, ds),
                 glorot<Scalar>(m, ds, rng), zeros_param<Scalar>(1, ds)};
    return p;
  }

  /// Parameters in a fixed order; the order defines checkpoint layout and
  /// optimizer state alignment.
  std::vector<NamedParam<Scalar>> named() {
    std::vector<NamedParam<Scalar>> out;
    auto add_attention = [&out](const std::string& prefix, AttentionPool<Scalar>& a) {
      out.push_back({prefix + ".score_weights", &a.score_weights});
      out.push_back({prefix + ".score_bias", &a.score_bias});
      out.push_back({prefix + ".proj_weights", &a.proj_weights});
      out.push_back({prefix + ".proj_bias", &a.proj_bias});
    };
    add_attention("att_sk", att_sk);
    add_attention("att_im", att_im);
    switch (fusion_mode) {
      case FusionMode::kronecker:
        out.push_back({"fusion.w_sk", &kron.w_sk});
        out.push_back({"fusion.w_im", &kron.w_im});
        break;
      case FusionMode::concat:
        out.push_back({"fusion.concat_w", &concat_w});
        out.push_back({"fusion.concat_b", &concat_b});
        break;
      case FusionMode::mfb:
        out.push_back({"fusion.mfb_u", &mfb_u});
        out.push_back({"fusion.mfb_v", &mfb_v});
        out.push_back({"fusion.mfb_w", &mfb_w});
        out.push_back({"fusion.mfb_b", &mfb_b});
        break;
    }
    out.push_back({"gcn1.weight", &gcn1.weight});
    out.push_back({"gcn2.weight", &gcn2.weight});
    out.push_back({"enc_im.weight", &enc_im.weight});
    out.push_back({"enc_im.bias", &enc_im.bias});
    out.push_back({"enc_sk.weight", &enc_sk.weight});
    out.push_back({"enc_sk.bias", &enc_sk.bias});
    out.push_back({"decoder.w_mu", &decoder.w_mu});
    out.push_back({"decoder.b_mu", &decoder.b_mu});
    out.push_back({"decoder.w_logvar", &decoder.w_logvar});
    out.push_back({"decoder.b_logvar", &decoder.b_logvar});
    return out;
  }

  std::vector<std::pair<std::string, const Var<Scalar>*>> named() const {
    std::vector<std::pair<std::string, const Var<Scalar>*>> out;
    for (auto& p : const_cast<ModelParams*>(this)->named()) out.emplace_back(p.name, p.var);
    return out;
  }

  void zero_grad() {
    for (auto& p : named()) p.var->zero_grad();
  }

  /// Deep copy; the copy shares no graph nodes with this one.
  ModelParams clone() const {
    ModelParams copy = *this;
    for (auto& p : copy.named()) *p.var = Var<Scalar>::parameter(p.var->value());
    return copy;
  }
};

/// N_B category-coherent (sketch, image, semantics, label) tuples. Feature
/// maps are stacked L rows per item.
template <typename Scalar>
struct TripletBatch {
  Index locations = 1;
  Matrix<Scalar> sketch_feats;  // (N_B * L) x C
  Matrix<Scalar> image_feats;   // (N_B * L) x C
  Matrix<Scalar> semantics;     // N_B x d_s
  std::vector<std::uint32_t> labels;

  Index size() const { return semantics.rows(); }
};

/// Fuses the attended sketch and image features according to the model's
/// fusion mode. Every mode produces d_f^2 columns.
template <typename Scalar>
Var<Scalar> fuse_modalities(const Var<Scalar>& h_sk, const Var<Scalar>& h_im,
                            const ModelParams<Scalar>& p) {
  switch (p.fusion_mode) {
    case FusionMode::kronecker:
      return fuse(h_sk, h_im, p.kron);
    case FusionMode::concat:
      return ad::relu(ad::add(ad::matmul(ad::concat_cols(h_sk, h_im), p.concat_w), p.concat_b));
    case FusionMode::mfb: {
      // Factorized bilinear pooling: product of the two k-fold expansions,
      // sum-pooled over each group of k factors.
      auto joint = ad::mul(ad::matmul(h_sk, p.mfb_u), ad::matmul(h_im, p.mfb_v));
      const Index k = p.mfb_factor;
      const Index width = p.mfb_u.cols() / k;
      Matrix<Scalar> pool = Matrix<Scalar>::Zero(width * k, width);
      for (Index j = 0; j < width; ++j) pool.block(j * k, j, k, 1).setOnes();
      auto pooled = ad::matmul(joint, Var<Scalar>::constant(std::move(pool)));
      return ad::relu(ad::add(ad::matmul(pooled, p.mfb_w), p.mfb_b));
    }
  }
  throw ConfigError("unknown fusion mode");
}

template <typename Scalar>
struct CodeProbabilities {
  Var<Scalar> h_sk, h_im;  // attended features
  Var<Scalar> fused;
  Var<Scalar> b;           // N_B x M, second graph layer output in (0, 1)
  Var<Scalar> f_out;       // image encoder, N_B x M
  Var<Scalar> g_out;       // sketch encoder, N_B x M
};

/// Everything up to (not including) the stochastic neurons.
template <typename Scalar>
CodeProbabilities<Scalar> forward_probabilities(const TripletBatch<Scalar>& batch,
                                                const ModelParams<Scalar>& p,
                                                const Matrix<Scalar>& adjacency) {
  CodeProbabilities<Scalar> out;
  out.h_sk = attention_pool(batch.sketch_feats, batch.locations, p.att_sk);
  out.h_im = attention_pool(batch.image_feats, batch.locations, p.att_im);
  out.fused = fuse_modalities(out.h_sk, out.h_im, p);
  if (p.use_gcn) {
    auto hidden = graph_conv(out.fused, adjacency, p.gcn1);
    out.b = graph_conv(hidden, adjacency, p.gcn2);
  } else {
    out.b = dense(dense(out.fused, p.gcn1), p.gcn2);
  }
  out.f_out = encode_soft(out.h_im, p.enc_im);
  out.g_out = encode_soft(out.h_sk, p.enc_sk);
  return out;
}

template <typename Scalar>
struct MultimodalOutputs {
  Var<Scalar> b;
  Var<Scalar> b_tilde;
  Var<Scalar> f_out;
  Var<Scalar> g_out;
};

template <typename Scalar>
MultimodalOutputs<Scalar> forward_multimodal(const TripletBatch<Scalar>& batch,
                                             const ModelParams<Scalar>& p,
                                             const Matrix<Scalar>& adjacency,
                                             const Matrix<Scalar>& eps) {
  auto probs = forward_probabilities(batch, p, adjacency);
  auto bits = stochastic_neurons(probs.b, eps);
  return {probs.b, bits, probs.f_out, probs.g_out};
}

}  // namespace zsih
