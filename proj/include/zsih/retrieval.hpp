#pragma once

#include <Eigen/Dense>
#include <bit>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "zsih/data.hpp"

namespace zsih {

/// Borrowed view of one packed code.
struct CodeView {
  const std::uint64_t* words;
  std::uint32_t M;
};

/// N binary codes of M bits, packed LSB-first into 64-bit words.
struct CodeMatrix {
  std::uint32_t M = 0;
  Modality modality = Modality::image;
  std::vector<std::uint64_t> words;  // size() * words_per_code()
  std::vector<ClassId> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t words_per_code() const { return (M + 63) / 64; }
  CodeView code(std::size_t i) const { return {words.data() + i * words_per_code(), M}; }
  bool bit(std::size_t i, std::uint32_t j) const { return (code(i).words[j / 64] >> (j % 64)) & 1u; }

  /// Appends one code from a 0/1 vector of length M.
  void push_back(const std::vector<std::uint8_t>& bits, ClassId label);
  bool operator==(const CodeMatrix&) const = default;
};

inline std::uint32_t hamming_distance(CodeView a, CodeView b) {
  std::uint32_t d = 0;
  const std::size_t w = (a.M + 63) / 64;
  for (std::size_t i = 0; i < w; ++i) d += static_cast<std::uint32_t>(std::popcount(a.words[i] ^ b.words[i]));
  return d;
}

/// bit = 1 iff soft >= 0.5. Values outside [0, 1] raise DomainError.
CodeMatrix binarize(const Eigen::MatrixXd& soft_codes, std::vector<ClassId> labels, Modality modality);

/// Gallery indices by ascending Hamming distance, ties by ascending index.
std::vector<std::size_t> hamming_rank(CodeView query, const CodeMatrix& gallery);

/// Mean of hits/rank over the ranks holding relevant items; nullopt when
/// no item is relevant.
std::optional<double> average_precision(const std::vector<ClassId>& ranked_labels, ClassId query_label);

struct RetrievalReport {
  double map_all = 0;
  std::vector<std::pair<std::size_t, double>> precision_at;  // (K, mean precision@K)
  std::vector<std::pair<double, double>> pr_curve;            // 11-point interpolated (recall, precision)
  std::vector<std::pair<double, double>> pr_raw;              // per-rank (mean recall, mean precision)
  std::vector<double> per_query_ap;                           // queries with a relevant item
  std::size_t queries = 0;
  std::size_t skipped_queries = 0;  // no relevant gallery item
};

/// Sketch queries against an image gallery. K larger than the gallery
/// counts the whole gallery.
RetrievalReport evaluate(const CodeMatrix& queries, const CodeMatrix& gallery, const std::vector<std::size_t>& ks);

/// "metric<TAB>value" lines.
std::string format_report(const RetrievalReport& report);

/// Tab-separated P-R points for plotting: kind, recall, precision.
std::string format_pr_dump(const RetrievalReport& report);

std::string serialize_codes(const CodeMatrix& codes);
CodeMatrix parse_codes(std::string_view bytes, const std::string& source = "");
void save_codes(const std::string& path, const CodeMatrix& codes);
CodeMatrix load_codes(const std::string& path);

}  // namespace zsih
