#include "zsih/retrieval.hpp"

#include <algorithm>
#include <cmath>

#include "zsih/binary_io.hpp"
#include "zsih/text.hpp"

namespace zsih {
namespace {

constexpr std::string_view kCodeMagic = "ZSCB";
constexpr std::uint16_t kCodeVersion = 1;
constexpr int kRecallLevels = 11;

}  // namespace

void CodeMatrix::push_back(const std::vector<std::uint8_t>& bits, ClassId label) {
  if (bits.size() != M) {
    throw DimensionError("code of " + std::to_string(bits.size()) + " bits, matrix holds " + std::to_string(M));
  }
  const std::size_t base = words.size();
  words.resize(base + words_per_code(), 0);
  for (std::uint32_t j = 0; j < M; ++j) {
    if (bits[j] > 1) throw DomainError("code bit must be 0 or 1");
    if (bits[j]) words[base + j / 64] |= std::uint64_t{1} << (j % 64);
  }
  labels.push_back(label);
}

CodeMatrix binarize(const Eigen::MatrixXd& soft, std::vector<ClassId> labels, Modality modality) {
  if (static_cast<std::size_t>(soft.rows()) != labels.size()) {
    throw DimensionError(std::to_string(soft.rows()) + " codes but " + std::to_string(labels.size()) + " labels");
  }
  CodeMatrix out;
  out.M = static_cast<std::uint32_t>(soft.cols());
  out.modality = modality;
  out.words.assign(labels.size() * out.words_per_code(), 0);
  for (Eigen::Index i = 0; i < soft.rows(); ++i) {
    auto* w = out.words.data() + static_cast<std::size_t>(i) * out.words_per_code();
    for (Eigen::Index j = 0; j < soft.cols(); ++j) {
      const double v = soft(i, j);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw DomainError("soft code (" + std::to_string(i) + ", " + std::to_string(j) + ") = " +
                          text::format_double(v) + " outside [0, 1]");
      }
      if (v >= 0.5) w[j / 64] |= std::uint64_t{1} << (j % 64);
    }
  }
  out.labels = std::move(labels);
  return out;
}

std::vector<std::size_t> hamming_rank(CodeView query, const CodeMatrix& gallery) {
  if (query.M != gallery.M) {
    throw DimensionError("query has " + std::to_string(query.M) + " bits, gallery " + std::to_string(gallery.M));
  }
  // Counting sort on distance; stable, so equal distances keep index order.
  std::vector<std::uint32_t> dist(gallery.size());
  std::vector<std::size_t> start(gallery.M + 2, 0);
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    dist[i] = hamming_distance(query, gallery.code(i));
    ++start[dist[i] + 1];
  }
  for (std::size_t d = 1; d < start.size(); ++d) start[d] += start[d - 1];
  std::vector<std::size_t> order(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) order[start[dist[i]]++] = i;
  return order;
}

std::optional<double> average_precision(const std::vector<ClassId>& ranked_labels, ClassId query_label) {
  std::size_t hits = 0;
  double sum = 0;
  for (std::size_t r = 0; r < ranked_labels.size(); ++r) {
    if (ranked_labels[r] == query_label) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

RetrievalReport evaluate(const CodeMatrix& queries, const CodeMatrix& gallery, const std::vector<std::size_t>& ks) {
  if (gallery.size() == 0) throw DatasetError("empty gallery");
  if (queries.M != gallery.M) {
    throw DimensionError("query codes have M = " + std::to_string(queries.M) + ", gallery codes M = " +
                         std::to_string(gallery.M));
  }
  const std::size_t n = gallery.size();
  RetrievalReport rep;
  rep.queries = queries.size();
  std::vector<double> p_at_sum(ks.size(), 0.0);
  std::vector<double> interp_sum(kRecallLevels, 0.0);
  std::vector<double> raw_recall(n, 0.0), raw_precision(n, 0.0);
  std::vector<ClassId> ranked(n);
  std::vector<double> precision(n), recall(n);

  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto order = hamming_rank(queries.code(q), gallery);
    for (std::size_t r = 0; r < n; ++r) ranked[r] = gallery.labels[order[r]];
    const ClassId label = queries.labels[q];
    const auto ap = average_precision(ranked, label);
    if (!ap) {
      ++rep.skipped_queries;
      continue;
    }
    rep.per_query_ap.push_back(*ap);
    const auto relevant = static_cast<double>(std::count(ranked.begin(), ranked.end(), label));
    std::size_t hits = 0;
    for (std::size_t r = 0; r < n; ++r) {
      hits += ranked[r] == label;
      precision[r] = static_cast<double>(hits) / static_cast<double>(r + 1);
      recall[r] = static_cast<double>(hits) / relevant;
      raw_recall[r] += recall[r];
      raw_precision[r] += precision[r];
    }
    for (std::size_t k = 0; k < ks.size(); ++k) {
      const std::size_t cut = std::min(ks[k], n);
      p_at_sum[k] += cut == 0 ? 0.0 : precision[cut - 1];
    }
    // Interpolated precision: best precision at any rank reaching the level.
    std::vector<double> suffix_max(n);
    double best = 0;
    for (std::size_t r = n; r-- > 0;) suffix_max[r] = best = std::max(best, precision[r]);
    std::size_t r = 0;
    for (int level = 0; level < kRecallLevels; ++level) {
      const double target = level / 10.0;
      while (r < n && recall[r] < target) ++r;
      interp_sum[level] += r < n ? suffix_max[r] : 0.0;
    }
  }

  const auto counted = static_cast<double>(rep.per_query_ap.size());
  if (!rep.per_query_ap.empty()) {
    double sum = 0;
    for (double ap : rep.per_query_ap) sum += ap;
    rep.map_all = sum / counted;
  }
  for (std::size_t k = 0; k < ks.size(); ++k) {
    rep.precision_at.emplace_back(ks[k], counted > 0 ? p_at_sum[k] / counted : 0.0);
  }
  for (int level = 0; level < kRecallLevels; ++level) {
    rep.pr_curve.emplace_back(level / 10.0, counted > 0 ? interp_sum[level] / counted : 0.0);
  }
  if (counted > 0) {
    for (std::size_t r = 0; r < n; ++r) rep.pr_raw.emplace_back(raw_recall[r] / counted, raw_precision[r] / counted);
  }
  return rep;
}

std::string format_report(const RetrievalReport& rep) {
  std::string out;
  auto line = [&out](const std::string& name, const std::string& value) { out += name + "\t" + value + "\n"; };
  line("mAP@all", text::format_double(rep.map_all));
  for (const auto& [k, p] : rep.precision_at) line("precision@" + std::to_string(k), text::format_double(p));
  line("queries", std::to_string(rep.queries));
  line("skipped_queries", std::to_string(rep.skipped_queries));
  for (const auto& [r, p] : rep.pr_curve) line("interp_precision@recall=" + text::format_double(r), text::format_double(p));
  return out;
}

std::string format_pr_dump(const RetrievalReport& rep) {
  std::string out = "kind\trecall\tprecision\n";
  for (const auto& [r, p] : rep.pr_curve) out += "interpolated\t" + text::format_double(r) + "\t" + text::format_double(p) + "\n";
  for (const auto& [r, p] : rep.pr_raw) out += "raw\t" + text::format_double(r) + "\t" + text::format_double(p) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Code files

std::string serialize_codes(const CodeMatrix& codes) {
  io::ByteWriter w;
  w.raw(kCodeMagic);
  w.u16(kCodeVersion);
  w.u64(codes.size());
  w.u32(codes.M);
  w.u8(static_cast<std::uint8_t>(codes.modality));
  const std::size_t nbytes = (codes.M + 7) / 8;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    w.u32(codes.labels[i]);
    const auto view = codes.code(i);
    for (std::size_t b = 0; b < nbytes; ++b) w.u8(static_cast<std::uint8_t>(view.words[b / 8] >> (8 * (b % 8))));
  }
  for (ClassId label : codes.labels) w.u32(label);
  return w.take();
}

CodeMatrix parse_codes(std::string_view bytes, const std::string& source) {
  io::ByteReader r(bytes, source);
  r.set_context("header");
  r.expect_magic(kCodeMagic);
  const auto version_at = r.offset();
  if (const auto v = r.u16(); v != kCodeVersion) r.fail(version_at, "unsupported code file version " + std::to_string(v));
  const auto n = r.u64();
  CodeMatrix codes;
  codes.M = r.u32();
  const auto modality_at = r.offset();
  const auto modality = r.u8();
  if (modality > 1) r.fail(modality_at, "bad modality byte " + std::to_string(modality));
  codes.modality = static_cast<Modality>(modality);
  const std::size_t nbytes = (codes.M + 7) / 8;
  const std::size_t record = 4 + nbytes;
  if (n > r.remaining() / (record + 4)) {
    const std::size_t whole = r.remaining() / record;
    r.set_context("record " + std::to_string(std::min<std::size_t>(whole, n)) + " of " + std::to_string(n));
    r.fail(r.offset() + std::min<std::size_t>(whole, n) * record, "truncated code file");
  }
  codes.words.assign(n * codes.words_per_code(), 0);
  codes.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.set_context("record " + std::to_string(i));
    codes.labels.push_back(r.u32());
    auto* w = codes.words.data() + i * codes.words_per_code();
    for (std::size_t b = 0; b < nbytes; ++b) {
      const auto at = r.offset();
      const std::uint64_t byte = r.u8();
      if (b + 1 == nbytes && codes.M % 8 != 0 && (byte >> (codes.M % 8)) != 0) {
        r.fail(at, "padding bits set beyond bit " + std::to_string(codes.M));
      }
      w[b / 8] |= byte << (8 * (b % 8));
    }
  }
  r.set_context("label trailer");
  for (std::size_t i = 0; i < n; ++i) {
    const auto at = r.offset();
    if (const auto label = r.u32(); label != codes.labels[i]) {
      r.fail(at, "trailer label " + std::to_string(label) + " disagrees with record " + std::to_string(i) + " label " +
                     std::to_string(codes.labels[i]));
    }
  }
  if (!r.at_end()) r.fail(r.offset(), std::to_string(r.remaining()) + " trailing bytes");
  return codes;
}

void save_codes(const std::string& path, const CodeMatrix& codes) { io::write_file(path, serialize_codes(codes)); }

CodeMatrix load_codes(const std::string& path) { return parse_codes(io::read_file(path), path); }

}  // namespace zsih
