#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tunekit {

// Library-level error. Anything thrown by tunekit derives from this so callers
// can catch one type at the boundary.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad user input (flags, file contents, shapes coming from config). The CLI
// maps these to exit code 1, everything else to 2.
class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }
[[noreturn]] inline void fail_validation(const std::string& msg) { throw ValidationError(msg); }

// ---------------------------------------------------------------------------
// logging, controlled by the TUNEKIT_LOG env var: error | info | debug

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level();
void log_error(const std::string& msg);
void log_warn(const std::string& msg);   // printed at every level
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

// ---------------------------------------------------------------------------
// deterministic RNG
//
// std::mt19937_64 is bit-stable across platforms, the std distributions are
// not, so uniform/normal are derived from raw draws here.

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        // splitmix64; passes through distinct streams for distinct seeds
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) { return int(uniform() * double(n)); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // k distinct values from [0, n), in selection order
    std::vector<int> sample_distinct(int k, int n) {
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        std::vector<int> out;
        out.reserve(k);
        for (int i = 0; i < k; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (int i = int(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[size_t(i)], v[size_t(j)]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// stable seed mixing for derived streams (adapter init, per-step reselects, ...)
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_str(const std::string& s) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// small formatting helpers

std::string format_double(double v);                       // shortest round-trip-ish, for reports
std::string format_percent(double part, double whole);     // "0.23%" style
std::string join(const std::vector<std::string>& parts, const std::string& sep);

}  // namespace tunekit
