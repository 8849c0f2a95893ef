#include "zsih/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "zsih/errors.hpp"
#include "zsih/text.hpp"

namespace zsih {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kronecker: return "kronecker";
    case FusionMode::concat: return "concat";
    case FusionMode::mfb: return "mfb";
  }
  return "kronecker";
}

FusionMode parse_fusion_mode(std::string_view s) {
  if (s == "kronecker") return FusionMode::kronecker;
  if (s == "concat") return FusionMode::concat;
  if (s == "mfb") return FusionMode::mfb;
  throw ConfigError("unknown fusion_mode '" + std::string(s) + "' (kronecker|concat|mfb)");
}

namespace {

struct Field {
  std::function<void(ZsihConfig&, std::string_view)> set;
  std::function<std::string(const ZsihConfig&)> get;
};

template <typename T>
Field uint_field(T ZsihConfig::*member) {
  return {[member](ZsihConfig& c, std::string_view v) {
            const auto x = text::parse_uint(v);
            if (x > std::numeric_limits<T>::max()) throw FormatError("value out of range");
            c.*member = static_cast<T>(x);
          },
          [member](const ZsihConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(double ZsihConfig::*member) {
  return {[member](ZsihConfig& c, std::string_view v) { c.*member = text::parse_double(v); },
          [member](const ZsihConfig& c) { return text::format_double(c.*member); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"M", uint_field(&ZsihConfig::M)},
      {"d_f", uint_field(&ZsihConfig::d_f)},
      {"gcn_hidden", uint_field(&ZsihConfig::gcn_hidden)},
      {"t", double_field(&ZsihConfig::t)},
      {"N_B", uint_field(&ZsihConfig::N_B)},
      {"K", uint_field(&ZsihConfig::K)},
      {"T", uint_field(&ZsihConfig::T)},
      {"seed", uint_field(&ZsihConfig::seed)},
      {"fusion_mode",
       {[](ZsihConfig& c, std::string_view v) { c.fusion_mode = parse_fusion_mode(v); },
        [](const ZsihConfig& c) { return to_string(c.fusion_mode); }}},
      {"use_gcn",
       {[](ZsihConfig& c, std::string_view v) { c.use_gcn = text::parse_bool(v); },
        [](const ZsihConfig& c) { return std::string(c.use_gcn ? "true" : "false"); }}},
      {"mfb_factor", uint_field(&ZsihConfig::mfb_factor)},
      {"lr", double_field(&ZsihConfig::lr)},
      {"beta1", double_field(&ZsihConfig::beta1)},
      {"beta2", double_field(&ZsihConfig::beta2)},
      {"eps_hat", double_field(&ZsihConfig::eps_hat)},
      {"grad_clip", double_field(&ZsihConfig::grad_clip)},
      {"converge_window", uint_field(&ZsihConfig::converge_window)},
      {"converge_tol", double_field(&ZsihConfig::converge_tol)},
      {"C", uint_field(&ZsihConfig::C)},
      {"d_s", uint_field(&ZsihConfig::d_s)},
  };
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [name, _] : fields()) keys.push_back(name);
  return keys;
}

void set_config_value(ZsihConfig& config, std::string_view key, std::string_view value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      try {
        field.set(config, value);
      } catch (const FormatError& e) {
        throw ConfigError("config key '" + name + "': " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_override(ZsihConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  set_config_value(config, text::trim(assignment.substr(0, eq)),
                   text::trim(assignment.substr(eq + 1)));
}

ZsihConfig parse_config(std::string_view body, ZsihConfig base) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= body.size()) {
    auto end = body.find('\n', pos);
    if (end == std::string_view::npos) end = body.size();
    auto line = body.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = text::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(base, line);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

ZsihConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const ZsihConfig& config) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(config) + "\n";
  return out;
}

void validate(const ZsihConfig& c) {
  if (!(c.t > 0) || !std::isfinite(c.t)) throw ConfigError("t must be positive");
  if (c.M < 1) throw ConfigError("M must be at least 1");
  if (c.N_B < 2) throw ConfigError("N_B must be at least 2");
  if (c.d_f < 1 || c.gcn_hidden < 1) throw ConfigError("layer widths must be positive");
  if (c.K < 1) throw ConfigError("K must be at least 1");
  if (c.mfb_factor < 1) throw ConfigError("mfb_factor must be at least 1");
  if (!(c.lr > 0)) throw ConfigError("lr must be positive");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) {
    throw ConfigError("beta1 and beta2 must lie in [0, 1)");
  }
  if (!(c.eps_hat > 0)) throw ConfigError("eps_hat must be positive");
  if (c.grad_clip < 0) throw ConfigError("grad_clip must be nonnegative");
  if (c.converge_tol < 0) throw ConfigError("converge_tol must be nonnegative");
}

}  // namespace zsih
