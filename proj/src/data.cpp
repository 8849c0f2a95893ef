#include "zsih/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "zsih/binary_io.hpp"
#include "zsih/log.hpp"
#include "zsih/random.hpp"
#include "zsih/text.hpp"

namespace zsih {
namespace {

constexpr std::string_view kFeatureMagic = "ZSFT";
constexpr std::uint16_t kFeatureVersion = 1;

std::string where(const std::string& source, std::size_t line) {
  return (source.empty() ? std::string("line ") : source + ":") + std::to_string(line);
}

template <typename F>
void for_each_line(std::string_view text, F&& f) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    f(line, line_no);
    if (nl == std::string_view::npos) break;
    text.remove_prefix(nl + 1);
  }
}

std::vector<ClassId> parse_id_list(std::string_view s, const std::string& at) {
  std::vector<ClassId> out;
  for (auto tok : text::split_ws(s)) {
    try {
      const auto v = text::parse_uint(tok);
      if (v > 0xffffffffull) throw FormatError("class id out of range");
      out.push_back(static_cast<ClassId>(v));
    } catch (const Error& e) {
      throw FormatError(at + ": bad class id '" + std::string(tok) + "'");
    }
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw FormatError(at + ": repeated class id");
  }
  return out;
}

std::string join_ids(const std::vector<ClassId>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(ids[i]);
  }
  return out;
}

}  // namespace

std::string to_string(Modality m) { return m == Modality::sketch ? "sketch" : "image"; }

Modality parse_modality(std::string_view s) {
  if (s == "sketch") return Modality::sketch;
  if (s == "image") return Modality::image;
  throw ConfigError("unknown modality '" + std::string(s) + "' (sketch or image)");
}

// ---------------------------------------------------------------------------
// FeatureStore

void FeatureStore::add(std::uint64_t id, ClassId label, const FeatureMap& map) {
  if (map.rows() != L || map.cols() != C) {
    throw DimensionError("feature map " + std::to_string(map.rows()) + "x" + std::to_string(map.cols()) +
                         " does not match store " + std::to_string(L) + "x" + std::to_string(C));
  }
  ids.push_back(id);
  labels.push_back(label);
  values.insert(values.end(), map.data(), map.data() + map.size());
}

std::string FeatureStore::class_name(ClassId id) const {
  auto it = class_names.find(id);
  return it == class_names.end() ? "class_" + std::to_string(id) : it->second;
}

std::vector<ClassId> FeatureStore::classes() const {
  std::set<ClassId> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

std::string serialize_features(const FeatureStore& store) {
  const std::size_t per = static_cast<std::size_t>(store.L) * store.C;
  if (store.labels.size() != store.ids.size() || store.values.size() != store.ids.size() * per) {
    throw ContractError("serialize_features: inconsistent store");
  }
  io::ByteWriter w;
  w.raw(kFeatureMagic);
  w.u16(kFeatureVersion);
  w.u8(static_cast<std::uint8_t>(store.modality));
  w.u32(store.L);
  w.u32(store.C);
  w.u64(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    w.u64(store.ids[i]);
    w.u32(store.labels[i]);
    for (std::size_t j = 0; j < per; ++j) w.f32(store.values[i * per + j]);
  }
  return w.take();
}

FeatureStore parse_features(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.set_context("header");
  r.expect_magic(kFeatureMagic);
  const auto version_at = r.offset();
  if (const auto v = r.u16(); v != kFeatureVersion) {
    r.fail(version_at, "unsupported feature file version " + std::to_string(v));
  }
  FeatureStore store;
  const auto modality_at = r.offset();
  const auto modality = r.u8();
  if (modality > 1) r.fail(modality_at, "bad modality byte " + std::to_string(modality));
  store.modality = static_cast<Modality>(modality);
  store.L = r.u32();
  store.C = r.u32();
  const auto n = r.u64();
  const std::size_t per = static_cast<std::size_t>(store.L) * store.C;
  const std::size_t record_bytes = 8 + 4 + 4 * per;
  const std::size_t available = r.remaining() / record_bytes;
  if (n > available) {
    r.set_context("record " + std::to_string(available) + " of " + std::to_string(n));
    r.fail(r.offset() + available * record_bytes,
           "truncated: file holds " + std::to_string(available) + " complete records, header declares " +
               std::to_string(n));
  }
  store.ids.reserve(n);
  store.labels.reserve(n);
  store.values.resize(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    r.set_context("record " + std::to_string(i));
    store.ids.push_back(r.u64());
    store.labels.push_back(r.u32());
    for (std::size_t j = 0; j < per; ++j) {
      const auto at = r.offset();
      const float v = r.f32();
      if (!std::isfinite(v)) r.fail(at, "non-finite feature value");
      store.values[i * per + j] = v;
    }
  }
  if (!r.at_end()) {
    r.set_context("after record " + std::to_string(n == 0 ? 0 : n - 1));
    r.fail(r.offset(), std::to_string(r.remaining()) + " trailing bytes");
  }
  return store;
}

void save_features(const std::string& path, const FeatureStore& store) {
  io::write_file(path, serialize_features(store));
}

FeatureStore load_features(const std::string& path) { return parse_features(io::read_file(path), path); }

FeatureStore select_classes(const FeatureStore& store, const std::vector<ClassId>& classes) {
  const std::set<ClassId> keep(classes.begin(), classes.end());
  FeatureStore out;
  out.modality = store.modality;
  out.L = store.L;
  out.C = store.C;
  for (const auto& [id, name] : store.class_names) {
    if (keep.count(id)) out.class_names[id] = name;
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (keep.count(store.labels[i])) out.add(store.ids[i], store.labels[i], store.map(i));
  }
  return out;
}

std::map<ClassId, std::string> parse_class_names(std::string_view text, const std::string& source) {
  std::map<ClassId, std::string> out;
  for_each_line(text, [&](std::string_view line, std::size_t no) {
    if (text::trim(line).empty()) return;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw FormatError(where(source, no) + ": expected id<TAB>name");
    ClassId id;
    try {
      id = static_cast<ClassId>(text::parse_uint(text::trim(line.substr(0, tab))));
    } catch (const Error&) {
      throw FormatError(where(source, no) + ": bad class id");
    }
    const auto name = text::trim(line.substr(tab + 1));
    if (name.empty()) throw FormatError(where(source, no) + ": empty class name");
    out[id] = std::string(name);
  });
  return out;
}

std::string format_class_names(const std::map<ClassId, std::string>& names) {
  std::string out;
  for (const auto& [id, name] : names) out += std::to_string(id) + "\t" + name + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Semantic vectors

long WordVectors::find(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return static_cast<long>(i);
  }
  return -1;
}

WordVectors parse_word_vectors(std::string_view text, const std::string& source,
                               std::vector<std::string>* warnings) {
  WordVectors wv;
  std::map<std::string, std::size_t, std::less<>> index;
  bool first = true;
  for_each_line(text, [&](std::string_view line, std::size_t no) {
    auto tokens = text::split_ws(line);
    if (tokens.empty()) return;
    if (first) {
      first = false;
      // Optional "count dim" header of the common word-vector layout.
      if (tokens.size() == 2 && std::all_of(line.begin(), line.end(), [](char c) {
            return std::isdigit(static_cast<unsigned char>(c)) || c == ' ' || c == '\t';
          })) {
        return;
      }
    }
    if (tokens.size() < 2) throw FormatError(where(source, no) + ": expected a name followed by values");
    std::vector<double> v;
    v.reserve(tokens.size() - 1);
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      double x;
      try {
        x = text::parse_double(tokens[i]);
      } catch (const Error&) {
        throw FormatError(where(source, no) + ": bad number '" + std::string(tokens[i]) + "'");
      }
      if (!std::isfinite(x)) throw FormatError(where(source, no) + ": non-finite value");
      v.push_back(x);
    }
    if (wv.dim == 0) {
      wv.dim = v.size();
    } else if (v.size() != wv.dim) {
      throw FormatError(where(source, no) + ": " + std::to_string(v.size()) + " values, expected " +
                        std::to_string(wv.dim));
    }
    std::string name(tokens[0]);
    if (auto it = index.find(name); it != index.end()) {
      const std::string msg = where(source, no) + ": duplicate entry '" + name + "', keeping the later one";
      log::warn(msg);
      if (warnings) warnings->push_back(msg);
      wv.vectors[it->second] = std::move(v);
      return;
    }
    index.emplace(name, wv.names.size());
    wv.names.push_back(std::move(name));
    wv.vectors.push_back(std::move(v));
  });
  return wv;
}

std::string format_word_vectors(const WordVectors& wv) {
  std::string out;
  for (std::size_t i = 0; i < wv.names.size(); ++i) {
    out += wv.names[i];
    for (double x : wv.vectors[i]) {
      out += ' ';
      out += text::format_double(x);
    }
    out += '\n';
  }
  return out;
}

std::map<std::string, std::string> parse_synonyms(std::string_view text, const std::string& source) {
  std::map<std::string, std::string> out;
  for_each_line(text, [&](std::string_view line, std::size_t no) {
    if (text::trim(line).empty()) return;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw FormatError(where(source, no) + ": expected missing<TAB>substitute");
    const auto from = text::trim(line.substr(0, tab));
    const auto to = text::trim(line.substr(tab + 1));
    if (from.empty() || to.empty()) throw FormatError(where(source, no) + ": empty name");
    out[std::string(from)] = std::string(to);
  });
  return out;
}

const Eigen::RowVectorXd& SemanticTable::at(ClassId id) const {
  auto it = vectors.find(id);
  if (it == vectors.end()) throw DatasetError("no semantic vector for class " + std::to_string(id));
  return it->second;
}

SemanticTable resolve_semantics(const WordVectors& wv, const std::map<ClassId, std::string>& class_names,
                                const std::map<std::string, std::string>& synonyms) {
  SemanticTable table;
  table.dim = wv.dim;
  std::vector<std::string> missing;
  for (const auto& [id, name] : class_names) {
    long idx = wv.find(name);
    if (idx < 0) {
      if (auto it = synonyms.find(name); it != synonyms.end()) {
        idx = wv.find(it->second);
        if (idx >= 0) log::debug("class '" + name + "' resolved through synonym '" + it->second + "'");
      }
    }
    if (idx < 0) {
      missing.push_back(name);
      continue;
    }
    const auto& v = wv.vectors[static_cast<std::size_t>(idx)];
    table.vectors[id] = Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  if (!missing.empty()) {
    std::string msg = "no semantic vector for " + std::to_string(missing.size()) + " class(es):";
    for (const auto& m : missing) msg += " " + m;
    throw DatasetError(msg);
  }
  return table;
}

SemanticTable load_semantics(const std::string& path, const std::map<ClassId, std::string>& class_names,
                             const std::string& synonyms_path) {
  auto wv = parse_word_vectors(io::read_file(path), path);
  std::map<std::string, std::string> syn;
  if (!synonyms_path.empty()) syn = parse_synonyms(io::read_file(synonyms_path), synonyms_path);
  return resolve_semantics(wv, class_names, syn);
}

// ---------------------------------------------------------------------------
// Split

bool ZeroShotSplit::is_seen(ClassId c) const { return std::binary_search(seen.begin(), seen.end(), c); }

bool ZeroShotSplit::is_unseen(ClassId c) const {
  return std::binary_search(unseen.begin(), unseen.end(), c);
}

ZeroShotSplit make_split(std::vector<ClassId> classes, std::size_t n_unseen, std::uint64_t seed) {
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (n_unseen == 0 || n_unseen >= classes.size()) {
    throw ConfigError("n_unseen must be in [1, " + std::to_string(classes.size()) + ") for " +
                      std::to_string(classes.size()) + " classes, got " + std::to_string(n_unseen));
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < n_unseen; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(classes.size() - i));
    std::swap(classes[i], classes[j]);
  }
  ZeroShotSplit split;
  split.seed = seed;
  split.unseen.assign(classes.begin(), classes.begin() + static_cast<long>(n_unseen));
  split.seen.assign(classes.begin() + static_cast<long>(n_unseen), classes.end());
  std::sort(split.unseen.begin(), split.unseen.end());
  std::sort(split.seen.begin(), split.seen.end());
  return split;
}

std::string format_split(const ZeroShotSplit& split) {
  return "seed = " + std::to_string(split.seed) + "\nseen = " + join_ids(split.seen) +
         "\nunseen = " + join_ids(split.unseen) + "\n";
}

ZeroShotSplit parse_split(std::string_view text, const std::string& source) {
  ZeroShotSplit split;
  std::set<std::string> keys;
  for_each_line(text, [&](std::string_view line, std::size_t no) {
    line = text::trim(line.substr(0, line.find('#')));
    if (line.empty()) return;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError(where(source, no) + ": expected key = value");
    const std::string key(text::trim(line.substr(0, eq)));
    const auto value = text::trim(line.substr(eq + 1));
    if (key == "seed") {
      try {
        split.seed = text::parse_uint(value);
      } catch (const Error&) {
        throw FormatError(where(source, no) + ": bad seed");
      }
    } else if (key == "seen") {
      split.seen = parse_id_list(value, where(source, no));
    } else if (key == "unseen") {
      split.unseen = parse_id_list(value, where(source, no));
    } else {
      throw FormatError(where(source, no) + ": unknown key '" + key + "'");
    }
    keys.insert(key);
  });
  if (!keys.count("seen") || !keys.count("unseen")) {
    throw FormatError((source.empty() ? "split" : source) + ": needs both seen and unseen");
  }
  for (auto c : split.unseen) {
    if (split.is_seen(c)) throw FormatError("class " + std::to_string(c) + " is both seen and unseen");
  }
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic data

Eigen::MatrixXd class_latents(const Eigen::MatrixXd& semantics, const Eigen::MatrixXd& projection) {
  if (semantics.cols() != projection.cols()) throw DimensionError("class_latents: width mismatch");
  return semantics * projection.transpose();
}

SyntheticData synth_dataset(const SynthParams& p) {
  if (p.n_classes == 0 || p.per_class == 0 || p.L == 0 || p.C == 0 || p.d_s == 0) {
    throw ConfigError("synthetic dataset sizes must be positive");
  }
  if (!(p.noise >= 0) || !std::isfinite(p.noise)) throw ConfigError("noise must be finite and >= 0");
  Rng rng(p.seed);
  auto normal_matrix = [&rng](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
  };
  const Eigen::Index n = p.n_classes, ds = p.d_s, dz = 2 * ds, C = p.C;

  SyntheticData out;
  out.semantic_matrix = Eigen::MatrixXd(n, ds);
  for (Eigen::Index c = 0; c < n; ++c) {
    Eigen::RowVectorXd v;
    do {
      v = normal_matrix(1, ds);
    } while (v.norm() < 1e-6);
    out.semantic_matrix.row(c) = v / v.norm();
  }
  const Eigen::MatrixXd projection = normal_matrix(dz, ds) / std::sqrt(static_cast<double>(dz));
  out.latents = class_latents(out.semantic_matrix, projection);
  const Eigen::MatrixXd shared = normal_matrix(C, dz);
  const Eigen::MatrixXd transform_sk = (shared + 0.5 * normal_matrix(C, dz)) / std::sqrt(1.25);
  const Eigen::MatrixXd transform_im = (shared + 0.5 * normal_matrix(C, dz)) / std::sqrt(1.25);

  for (ClassId c = 0; c < p.n_classes; ++c) {
    const std::string name = "class_" + std::to_string(c);
    out.semantics.names.push_back(name);
    std::vector<double> v(static_cast<std::size_t>(ds));
    for (Eigen::Index j = 0; j < ds; ++j) v[static_cast<std::size_t>(j)] = out.semantic_matrix(c, j);
    out.semantics.vectors.push_back(std::move(v));
  }
  out.semantics.dim = static_cast<std::size_t>(ds);

  auto fill = [&](FeatureStore& store, Modality modality, const Eigen::MatrixXd& transform) {
    store.modality = modality;
    store.L = p.L;
    store.C = p.C;
    const Eigen::MatrixXd prototypes = out.latents * transform.transpose();  // n x C
    FeatureMap map(p.L, p.C);
    for (ClassId c = 0; c < p.n_classes; ++c) {
      store.class_names[c] = "class_" + std::to_string(c);
      for (std::uint32_t j = 0; j < p.per_class; ++j) {
        for (std::uint32_t l = 0; l < p.L; ++l)
          for (std::uint32_t k = 0; k < p.C; ++k)
            map(l, k) = static_cast<float>(prototypes(c, k) + p.noise * rng.normal());
        store.add(static_cast<std::uint64_t>(c) * p.per_class + j, c, map);
      }
    }
  };
  fill(out.sketches, Modality::sketch, transform_sk);
  fill(out.images, Modality::image, transform_im);
  return out;
}

}  // namespace zsih
