#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace zsih::text {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

double parse_double(std::string_view s);
std::uint64_t parse_uint(std::string_view s);
bool parse_bool(std::string_view s);

std::string_view trim(std::string_view s);

/// Splits on runs of spaces and tabs.
std::vector<std::string_view> split_ws(std::string_view s);

}  // namespace zsih::text
