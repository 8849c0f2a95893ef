#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace zsih {

enum class FusionMode { kronecker, concat, mfb };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view s);

/// Every model, training and optimizer knob. Field names double as the keys
/// of the flat `key = value` config file.
struct ZsihConfig {
  std::uint32_t M = 32;             // code length in bits
  std::uint32_t d_f = 16;           // attended feature width; fused width is d_f^2
  std::uint32_t gcn_hidden = 64;
  double t = 0.1;                   // adjacency bandwidth
  std::uint32_t N_B = 32;           // batch size
  std::uint32_t K = 1;              // Monte-Carlo draws per item per step
  std::uint64_t T = 3000;           // max training iterations
  std::uint64_t seed = 1;
  FusionMode fusion_mode = FusionMode::kronecker;
  bool use_gcn = true;
  std::uint32_t mfb_factor = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_hat = 1e-8;
  double grad_clip = 0.0;           // global-norm clip, 0 disables
  std::uint32_t converge_window = 200;
  double converge_tol = 1e-5;       // 0 disables the convergence stop
  std::uint32_t C = 0;              // feature channels, taken from the data when 0
  std::uint32_t d_s = 0;            // semantic width, taken from the data when 0

  bool operator==(const ZsihConfig&) const = default;
};

std::vector<std::string> config_keys();

/// Sets one field from its textual value. Unknown keys and malformed values
/// raise ConfigError.
void set_config_value(ZsihConfig& config, std::string_view key, std::string_view value);

/// Applies a "key=value" override.
void apply_override(ZsihConfig& config, std::string_view assignment);

/// Parses `key = value` lines; '#' starts a comment.
ZsihConfig parse_config(std::string_view text, ZsihConfig base = {});
ZsihConfig load_config(const std::string& path);

/// Canonical text form, one key per line in config_keys() order. Round-trips
/// exactly through parse_config.
std::string config_to_text(const ZsihConfig& config);

/// Checks invariants (t > 0, M >= 1, N_B >= 2, ...).
void validate(const ZsihConfig& config);

}  // namespace zsih
