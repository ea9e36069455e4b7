#pragma once

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>

namespace vb {

// Log verbosity is controlled by the VB_LOG environment variable:
//   0 = warnings only (default), 1 = info, 2 = debug.
// All log output goes to stderr; files written by the tools never
// contain log text, so artifacts stay byte-stable.
enum class LogLevel : int { Warn = 0, Info = 1, Debug = 2 };

inline int log_verbosity() {
    static const int v = [] {
        const char* e = std::getenv("VB_LOG");
        if (!e || !*e) return 0;
        return std::atoi(e);
    }();
    return v;
}

inline std::mutex& log_mutex() {
    static std::mutex m;
    return m;
}

inline void log_line(LogLevel level, const std::string& msg) {
    if (static_cast<int>(level) > log_verbosity()) return;
    static const char* names[] = {"warn", "info", "debug"};
    std::lock_guard<std::mutex> lock(log_mutex());
    std::cerr << "[vb:" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

inline void log_warn(const std::string& msg) { log_line(LogLevel::Warn, msg); }
inline void log_info(const std::string& msg) { log_line(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_line(LogLevel::Debug, msg); }

} // namespace vb
