#pragma once

#include <ostream>
#include <string_view>

namespace zsih::log {

enum class Level { error = 0, info = 1, debug = 2 };

/// Threshold from ZSIH_LOG (error, info or debug); info when unset.
Level threshold();
void set_threshold(Level level);

/// Messages go to stderr unless redirected.
void set_sink(std::ostream* sink);

void write(Level level, std::string_view message);

inline void error(std::string_view m) { write(Level::error, m); }
inline void warn(std::string_view m) { write(Level::info, m); }
inline void info(std::string_view m) { write(Level::info, m); }
inline void debug(std::string_view m) { write(Level::debug, m); }

}  // namespace zsih::log
