#include "tunekit/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>

namespace tunekit {

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("TUNEKIT_LOG");
        if (!env) return LogLevel::info;
        if (std::strcmp(env, "error") == 0) return LogLevel::error;
        if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

namespace {
std::mutex g_log_mutex;

void emit(const char* tag, const std::string& msg) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}
}  // namespace

void log_error(const std::string& msg) { emit("error", msg); }

void log_warn(const std::string& msg) { emit("warn", msg); }

void log_info(const std::string& msg) {
    if (log_level() >= LogLevel::info) emit("info", msg);
}

void log_debug(const std::string& msg) {
    if (log_level() >= LogLevel::debug) emit("debug", msg);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string format_percent(double part, double whole) {
    if (whole <= 0.0) fail("format_percent: whole must be positive");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * part / whole);
    return buf;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) out += sep;
        out += parts[i];
    }
    return out;
}

}  // namespace tunekit
