#include "zsih/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "zsih/binary_io.hpp"
#include "zsih/log.hpp"
#include "zsih/text.hpp"

namespace zsih {
namespace {

constexpr std::string_view kCheckpointMagic = "ZSIH";
constexpr std::uint16_t kCheckpointVersion = 1;

void write_matrix_values(io::ByteWriter& w, const Matrix<double>& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
}

void read_matrix_values(io::ByteReader& r, Matrix<double>& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
}

void write_metrics(std::ostream& os, std::uint64_t iter, const LossBreakdown& b) {
  os << iter << '\t' << text::format_double(b.total) << '\t' << text::format_double(b.entropy_term) << '\t'
     << text::format_double(b.decode_term) << '\t' << text::format_double(b.code_reg_term) << '\n';
}

}  // namespace

std::vector<ClassId> Dataset::classes() const {
  std::set<ClassId> s(sketches.labels.begin(), sketches.labels.end());
  s.insert(images.labels.begin(), images.labels.end());
  return {s.begin(), s.end()};
}

void check_seen_only(const Dataset& data, const ZeroShotSplit& split) {
  for (ClassId c : data.classes()) {
    if (split.is_unseen(c)) {
      throw DatasetError("training data contains unseen class " + std::to_string(c) + " (" +
                         data.sketches.class_name(c) + "); zero-shot training may only use seen classes");
    }
    if (!split.is_seen(c)) {
      throw DatasetError("training data contains class " + std::to_string(c) + " absent from the split");
    }
  }
}

Matrix<double> stack_maps(const FeatureStore& store, const std::vector<std::size_t>& items) {
  const Index L = store.L, C = store.C;
  Matrix<double> out(static_cast<Index>(items.size()) * L, C);
  for (std::size_t i = 0; i < items.size(); ++i) {
    out.middleRows(static_cast<Index>(i) * L, L) = store.map(items[i]).cast<double>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// BatchSampler

BatchSampler::BatchSampler(const Dataset& data) : data_(&data) {
  if (data.sketches.L != data.images.L || data.sketches.C != data.images.C) {
    throw DatasetError("sketch maps are " + std::to_string(data.sketches.L) + "x" +
                       std::to_string(data.sketches.C) + " but image maps are " + std::to_string(data.images.L) +
                       "x" + std::to_string(data.images.C));
  }
  classes_ = data.classes();
  if (classes_.empty()) throw DatasetError("no training items");
  sketch_items_.resize(classes_.size());
  image_items_.resize(classes_.size());
  auto slot = [this](ClassId c) {
    return static_cast<std::size_t>(std::lower_bound(classes_.begin(), classes_.end(), c) - classes_.begin());
  };
  for (std::size_t i = 0; i < data.sketches.size(); ++i) sketch_items_[slot(data.sketches.labels[i])].push_back(i);
  for (std::size_t i = 0; i < data.images.size(); ++i) image_items_[slot(data.images.labels[i])].push_back(i);
  for (std::size_t k = 0; k < classes_.size(); ++k) {
    const ClassId c = classes_[k];
    if (sketch_items_[k].empty() || image_items_[k].empty()) {
      throw DatasetError("class " + std::to_string(c) + " (" + data.sketches.class_name(c) + ") has no " +
                         (sketch_items_[k].empty() ? "sketches" : "images"));
    }
    if (!data.semantics.contains(c)) {
      throw DatasetError("class " + std::to_string(c) + " has no semantic vector");
    }
  }
}

TripletBatch<double> BatchSampler::sample(std::size_t n, Rng& rng) const {
  std::vector<std::size_t> sk(n), im(n);
  TripletBatch<double> batch;
  batch.locations = data_->sketches.L;
  batch.semantics.resize(static_cast<Index>(n), static_cast<Index>(data_->semantics.dim));
  batch.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(classes_.size()));
    sk[i] = sketch_items_[k][rng.below(sketch_items_[k].size())];
    im[i] = image_items_[k][rng.below(image_items_[k].size())];
    batch.labels[i] = classes_[k];
    batch.semantics.row(static_cast<Index>(i)) = data_->semantics.at(classes_[k]);
  }
  batch.sketch_feats = stack_maps(data_->sketches, sk);
  batch.image_feats = stack_maps(data_->images, im);
  return batch;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string serialize_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.str(config_to_text(ck.config));
  w.u64(ck.iteration);
  const auto named = ck.params.named();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, var] : named) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(var->rows()));
    w.u32(static_cast<std::uint32_t>(var->cols()));
    write_matrix_values(w, var->value());
  }
  if (ck.adam.m.size() != named.size() || ck.adam.v.size() != named.size()) {
    throw ContractError("checkpoint: optimizer state does not match parameters");
  }
  w.u64(ck.adam.step);
  w.f64(ck.adam.lr);
  w.f64(ck.adam.beta1);
  w.f64(ck.adam.beta2);
  w.f64(ck.adam.eps_hat);
  w.f64(ck.adam.grad_clip);
  for (std::size_t i = 0; i < named.size(); ++i) {
    write_matrix_values(w, ck.adam.m[i]);
    write_matrix_values(w, ck.adam.v[i]);
  }
  w.u64(ck.loss_history.size());
  for (double x : ck.loss_history) w.f64(x);
  w.str(ck.rng_state);
  return w.take();
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.set_context("header");
  r.expect_magic(kCheckpointMagic);
  const auto version_at = r.offset();
  if (const auto v = r.u16(); v != kCheckpointVersion) {
    r.fail(version_at, "unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ck;
  r.set_context("config block");
  const auto config_at = r.offset();
  try {
    ck.config = parse_config(r.str());
    validate(ck.config);
  } catch (const ConfigError& e) {
    r.fail(config_at, e.what());
  }
  if (ck.config.C == 0 || ck.config.d_s == 0) r.fail(config_at, "config lacks data dimensions");
  ck.iteration = r.u64();
  Rng scratch(0);
  ck.params = ModelParams<double>::init(ck.config, scratch);
  auto named = ck.params.named();
  r.set_context("parameter table");
  const auto count_at = r.offset();
  if (const auto n = r.u32(); n != named.size()) {
    r.fail(count_at, std::to_string(n) + " parameters, config implies " + std::to_string(named.size()));
  }
  for (auto& p : named) {
    r.set_context("parameter " + p.name);
    const auto at = r.offset();
    const auto name = r.str();
    const auto rows = r.u32(), cols = r.u32();
    if (name != p.name || rows != p.var->rows() || cols != p.var->cols()) {
      r.fail(at, "found " + name + " " + std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
                     p.name + " " + std::to_string(p.var->rows()) + "x" + std::to_string(p.var->cols()));
    }
    read_matrix_values(r, p.var->value_mut());
  }
  r.set_context("optimizer state");
  ck.adam = AdamState<double>::init(ck.params, ck.config);
  ck.adam.step = r.u64();
  ck.adam.lr = r.f64();
  ck.adam.beta1 = r.f64();
  ck.adam.beta2 = r.f64();
  ck.adam.eps_hat = r.f64();
  ck.adam.grad_clip = r.f64();
  for (std::size_t i = 0; i < named.size(); ++i) {
    read_matrix_values(r, ck.adam.m[i]);
    read_matrix_values(r, ck.adam.v[i]);
  }
  r.set_context("loss history");
  const auto n_hist = r.u64();
  if (n_hist > r.remaining() / 8) r.fail(r.offset(), "loss history longer than the file");
  ck.loss_history.resize(n_hist);
  for (auto& x : ck.loss_history) x = r.f64();
  r.set_context("RNG state");
  const auto rng_at = r.offset();
  ck.rng_state = r.str();
  try {
    Rng probe;
    probe.set_state(ck.rng_state);
  } catch (const FormatError&) {
    r.fail(rng_at, "malformed RNG state");
  }
  if (!r.at_end()) r.fail(r.offset(), std::to_string(r.remaining()) + " trailing bytes");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  io::write_file(path, serialize_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(io::read_file(path), path); }

// ---------------------------------------------------------------------------
// Training

ZsihConfig resolve_dims(ZsihConfig config, const Dataset& data) {
  const auto C = data.sketches.C;
  const auto ds = static_cast<std::uint32_t>(data.semantics.dim);
  if (config.C == 0) config.C = C;
  if (config.d_s == 0) config.d_s = ds;
  if (config.C != C) {
    throw ConfigError("config C = " + std::to_string(config.C) + " but features have " + std::to_string(C) +
                      " channels");
  }
  if (config.d_s != ds) {
    throw ConfigError("config d_s = " + std::to_string(config.d_s) + " but semantic vectors have " +
                      std::to_string(ds) + " dimensions");
  }
  return config;
}

Checkpoint initial_checkpoint(const ZsihConfig& config, const Dataset& data) {
  Checkpoint ck;
  ck.config = resolve_dims(config, data);
  validate(ck.config);
  Rng rng(ck.config.seed);
  ck.params = ModelParams<double>::init(ck.config, rng);
  ck.adam = AdamState<double>::init(ck.params, ck.config);
  ck.rng_state = rng.state();
  return ck;
}

bool converged(const std::vector<double>& history, std::size_t window, double tol) {
  if (tol <= 0 || window == 0) return false;
  const std::size_t n = history.size();
  if (n < 2 * window || n % window != 0) return false;
  const double prev = std::accumulate(history.end() - 2 * static_cast<long>(window),
                                      history.end() - static_cast<long>(window), 0.0) / static_cast<double>(window);
  const double cur =
      std::accumulate(history.end() - static_cast<long>(window), history.end(), 0.0) / static_cast<double>(window);
  return prev - cur < tol * std::abs(prev);
}

Checkpoint train(ZsihConfig config, const Dataset& data, const TrainOptions& options) {
  if (options.split) check_seen_only(data, *options.split);
  Checkpoint ck;
  if (options.resume) {
    ck = options.resume->clone();
    const auto T = config.T;
    config = ck.config;
    config.T = T;
    ck.config.T = T;
    resolve_dims(config, data);
  } else {
    ck = initial_checkpoint(config, data);
    config = ck.config;
  }
  BatchSampler sampler(data);
  Rng rng;
  rng.set_state(ck.rng_state);
  const Index n = config.N_B, m = config.M;

  while (ck.iteration < config.T) {
    if (converged(ck.loss_history, config.converge_window, config.converge_tol)) {
      log::info("converged after " + std::to_string(ck.iteration) + " iterations");
      break;
    }
    auto batch = sampler.sample(n, rng);
    const Matrix<double> adjacency = options.identity_adjacency ? Matrix<double>(Matrix<double>::Identity(n, n))
                                                                : build_adjacency(batch.semantics, config.t);
    std::vector<Matrix<double>> eps(config.K, Matrix<double>(n, m));
    for (auto& e : eps)
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) e(i, j) = rng.uniform();

    auto loss = batch_loss(batch, ck.params, adjacency, eps);
    if (!std::isfinite(loss.breakdown.total)) {
      throw TrainingAborted("non-finite loss at iteration " + std::to_string(ck.iteration + 1), ck.clone());
    }
    auto grads = estimate_gradients(loss.loss, ck.params);
    try {
      adam_step(ck.params, std::move(grads), ck.adam);
    } catch (const NonFiniteError& e) {
      throw TrainingAborted(e.what(), ck.clone());
    }
    ++ck.iteration;
    ck.loss_history.push_back(loss.breakdown.total);
    ck.rng_state = rng.state();
    if (options.metrics) write_metrics(*options.metrics, ck.iteration, loss.breakdown);
    if (ck.iteration % 500 == 0) {
      log::debug("iteration " + std::to_string(ck.iteration) + " loss " + text::format_double(loss.breakdown.total));
    }
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Encoding

Matrix<double> encode_soft_codes(const ModelParams<double>& params, const FeatureStore& store) {
  const bool image = store.modality == Modality::image;
  const auto& att = image ? params.att_im : params.att_sk;
  const auto& enc = image ? params.enc_im : params.enc_sk;
  if (store.C != att.score_weights.rows()) {
    throw DimensionError("features have " + std::to_string(store.C) + " channels, model expects " +
                         std::to_string(att.score_weights.rows()));
  }
  const Index m = enc.weight.cols();
  Matrix<double> out(static_cast<Index>(store.size()), m);
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < store.size(); start += kChunk) {
    std::vector<std::size_t> items(std::min(kChunk, store.size() - start));
    std::iota(items.begin(), items.end(), start);
    auto h = attention_pool(stack_maps(store, items), static_cast<Index>(store.L), att);
    out.middleRows(static_cast<Index>(start), static_cast<Index>(items.size())) = encode_soft(h, enc).value();
  }
  return out;
}

}  // namespace zsih
