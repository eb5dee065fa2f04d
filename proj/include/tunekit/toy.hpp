#pragma once

#include <string>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/data.hpp"

namespace tunekit {

// Deterministic synthetic tasks sized for desk-scale runs.

// response repeats the query verbatim
inline std::vector<StandardRecord> toy_copy_dataset(int n, uint64_t seed = 0) {
    if (n < 1) fail_validation("toy dataset size must be >= 1");
    Rng rng(mix_seed(seed, hash_str("copy")));
    std::vector<StandardRecord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        const int len = 3 + int(rng.uniform_int(6));
        std::string s;
        for (int j = 0; j < len; ++j) s += char('a' + rng.uniform_int(8));
        StandardRecord r;
        r.query = s;
        r.response = s;
        out.push_back(std::move(r));
    }
    return out;
}

// two-digit addition with exact integer answers
inline std::vector<StandardRecord> toy_add_dataset(int n, uint64_t seed = 0) {
    if (n < 1) fail_validation("toy dataset size must be >= 1");
    Rng rng(mix_seed(seed, hash_str("add")));
    std::vector<StandardRecord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        const int a = 10 + int(rng.uniform_int(90));
        const int b = 10 + int(rng.uniform_int(90));
        StandardRecord r;
        r.query = "Calculate " + std::to_string(a) + "+" + std::to_string(b);
        r.response = std::to_string(a + b);
        out.push_back(std::move(r));
    }
    return out;
}

// addition where the chosen answer is correct and the rejected one is off by
// a small nonzero amount, for preference training
inline std::vector<StandardRecord> toy_pref_dataset(int n, uint64_t seed = 0) {
    if (n < 1) fail_validation("toy dataset size must be >= 1");
    Rng rng(mix_seed(seed, hash_str("pref")));
    std::vector<StandardRecord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        const int a = 10 + int(rng.uniform_int(90));
        const int b = 10 + int(rng.uniform_int(90));
        const int sum = a + b;
        int delta = 1 + int(rng.uniform_int(9));
        if (rng.uniform_int(2) == 0) delta = -delta;
        StandardRecord r;
        r.query = "Calculate " + std::to_string(a) + "+" + std::to_string(b);
        r.response = std::to_string(sum);
        r.rejected_response = std::to_string(sum + delta);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace tunekit
