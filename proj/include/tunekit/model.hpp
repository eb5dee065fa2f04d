#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/tensor.hpp"

namespace tunekit {

struct ModelConfig {
    int vocab_size = 260;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 256;
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 260)
            fail_validation("vocab_size must be >= 260 (256 byte tokens plus specials), got " +
                            std::to_string(vocab_size));
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 1)
            fail_validation("model dims must all be >= 1");
        if (d_model % n_heads != 0)
            fail_validation("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
    }
};

struct GenerationParams {
    int max_new_tokens = 32;
    double temperature = 0.0;
    int top_k = 0;
    uint64_t seed = 0;
    int stop_token = -1;  // -1 disables the stop check

    void validate() const {
        if (max_new_tokens < 1) fail_validation("max_new_tokens must be >= 1");
        if (temperature < 0.0) fail_validation("temperature must be >= 0");
        if (top_k < 0) fail_validation("top_k must be >= 0");
    }
};

// Append-only ordered map of path -> parameter. Iteration order is the
// registration order and is the canonical ordering everywhere (init,
// checkpoints, target resolution).
template <class T>
class ParamRegistry {
  public:
    void add(const std::string& path, Tensor<T> t) {
        if (index_.count(path)) fail("duplicate registry path: " + path);
        index_[path] = items_.size();
        items_.emplace_back(path, std::move(t));
    }
    bool has(const std::string& path) const { return index_.count(path) != 0; }
    Tensor<T> get(const std::string& path) const {
        auto it = index_.find(path);
        if (it == index_.end()) fail("unknown registry path: " + path);
        return items_[it->second].second;
    }
    void set(const std::string& path, Tensor<T> t) {
        auto it = index_.find(path);
        if (it == index_.end()) fail("unknown registry path: " + path);
        items_[it->second].second = std::move(t);
    }
    const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }
    std::vector<std::string> paths() const {
        std::vector<std::string> out;
        out.reserve(items_.size());
        for (const auto& [p, t] : items_) out.push_back(p);
        return out;
    }
    size_t size() const { return items_.size(); }
    size_t total_params() const {
        size_t n = 0;
        for (const auto& [p, t] : items_) n += t.numel();
        return n;
    }
    size_t trainable_params() const {
        size_t n = 0;
        for (const auto& [p, t] : items_)
            if (t.requires_grad()) n += t.numel();
        return n;
    }

  private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Interception point for tuners. The base implementation is the plain
// forward; overrides may add deltas, swap the weight, or recompute it.
template <class T>
struct LinearHook {
    virtual ~LinearHook() = default;
    // effective base weight for `path`; hooks that store the weight in another
    // form (e.g. quantized) reconstruct it here
    virtual Tensor<T> weight(const std::string& path, const Tensor<T>& w) {
        (void)path;
        return w;
    }
    virtual Tensor<T> linear(const std::string& path, const Tensor<T>& x, const Tensor<T>& w) {
        (void)path;
        return matmul(x, w);
    }
    virtual Tensor<T> embed(const std::string& path, const Tensor<T>& table,
                            const TokenBatch& ids) {
        (void)path;
        return embedding(table, ids);
    }
};

namespace paths {
inline std::string block(int i, const std::string& rest) {
    return "blocks." + std::to_string(i) + "." + rest;
}
}  // namespace paths

// Decoder-only transformer: pre-norm residual blocks, RMS norm, SiLU
// feed-forward, untied lm_head, no biases, sinusoidal positions. Weights
// are stored input-major ([in, out]) so a layer is x @ W.
template <class T>
struct Model {
    ModelConfig config;
    ParamRegistry<T> params;
    Tensor<T> pos_table;  // [max_seq_len, d_model], fixed, not registered
    LinearHook<T>* hook = nullptr;

    Tensor<T> forward(const TokenBatch& ids) const {
        if (ids.rows < 1 || ids.cols < 1) fail("forward: empty token batch");
        if (ids.cols > config.max_seq_len)
            fail("forward: sequence length " + std::to_string(ids.cols) + " exceeds max_seq_len " +
                 std::to_string(config.max_seq_len));
        for (int32_t id : ids.ids)
            if (id < 0 || id >= config.vocab_size)
                fail("forward: token id " + std::to_string(id) + " outside vocab of " +
                     std::to_string(config.vocab_size));

        LinearHook<T> plain;
        LinearHook<T>* h = hook ? hook : &plain;
        const int d = config.d_model, heads = config.n_heads;
        const T inv_sqrt_dh = T(1.0 / std::sqrt(double(d / heads)));

        Tensor<T> x = h->embed("embed.tok", params.get("embed.tok"), ids);
        x = add(x, position_slice(ids.cols));

        for (int b = 0; b < config.n_layers; ++b) {
            Tensor<T> hn = rms_norm(x, params.get(paths::block(b, "attn_norm.gain")));
            Tensor<T> q = h->linear(paths::block(b, "attn.q_proj"), hn,
                                    params.get(paths::block(b, "attn.q_proj")));
            Tensor<T> k = h->linear(paths::block(b, "attn.k_proj"), hn,
                                    params.get(paths::block(b, "attn.k_proj")));
            Tensor<T> v = h->linear(paths::block(b, "attn.v_proj"), hn,
                                    params.get(paths::block(b, "attn.v_proj")));
            Tensor<T> qh = split_heads(q, heads);
            Tensor<T> kh = split_heads(k, heads);
            Tensor<T> vh = split_heads(v, heads);
            Tensor<T> att = softmax_rows(
                causal_mask(scale(matmul(qh, transpose(kh)), inv_sqrt_dh)));
            Tensor<T> ctx = merge_heads(matmul(att, vh), heads);
            Tensor<T> attn_out = h->linear(paths::block(b, "attn.o_proj"), ctx,
                                           params.get(paths::block(b, "attn.o_proj")));
            x = add(x, attn_out);

            Tensor<T> fn = rms_norm(x, params.get(paths::block(b, "ffn_norm.gain")));
            Tensor<T> up = h->linear(paths::block(b, "ffn.up_proj"), fn,
                                     params.get(paths::block(b, "ffn.up_proj")));
            Tensor<T> down = h->linear(paths::block(b, "ffn.down_proj"), silu(up),
                                       params.get(paths::block(b, "ffn.down_proj")));
            x = add(x, down);
        }
        x = rms_norm(x, params.get("final_norm.gain"));
        return h->linear("lm_head", x, params.get("lm_head"));
    }

    // Returns only the continuation; the stop token, when hit, is excluded.
    std::vector<int> generate(const std::vector<int>& prompt, const GenerationParams& gp) const {
        gp.validate();
        if (prompt.empty()) fail("generate: empty prompt");
        if (int(prompt.size()) > config.max_seq_len)
            fail("generate: prompt length " + std::to_string(prompt.size()) +
                 " exceeds max_seq_len " + std::to_string(config.max_seq_len));
        Rng rng(gp.seed);
        std::vector<int> ctx = prompt;
        std::vector<int> out;
        const int vocab = config.vocab_size;
        for (int step = 0; step < gp.max_new_tokens; ++step) {
            if (int(ctx.size()) >= config.max_seq_len) {
                log_debug("generate stopped at context limit");
                break;
            }
            TokenBatch batch{1, int(ctx.size()), std::vector<int32_t>(ctx.begin(), ctx.end())};
            Tensor<T> logits = forward(batch);
            const T* row = logits.data().data() + size_t(ctx.size() - 1) * vocab;
            int next = gp.temperature == 0.0 ? argmax_row(row, vocab)
                                             : sample_row(row, vocab, gp, rng);
            if (next == gp.stop_token) break;
            out.push_back(next);
            ctx.push_back(next);
        }
        return out;
    }

    Model clone() const {
        Model m;
        m.config = config;
        m.pos_table = pos_table;
        for (const auto& [path, t] : params.items()) m.params.add(path, t.clone());
        return m;
    }

    Tensor<T> position_slice(int seq) const {
        std::vector<T> rows(size_t(seq) * config.d_model);
        std::copy(pos_table.data().begin(), pos_table.data().begin() + rows.size(), rows.begin());
        return Tensor<T>({seq, config.d_model}, std::move(rows));
    }

  private:
    static int argmax_row(const T* row, int n) {
        int best = 0;
        for (int i = 1; i < n; ++i)
            if (row[i] > row[best]) best = i;  // ties keep the lowest index
        return best;
    }

    static int sample_row(const T* row, int n, const GenerationParams& gp, Rng& rng) {
        std::vector<int> cand(static_cast<size_t>(n), 0);
        for (int i = 0; i < n; ++i) cand[size_t(i)] = i;
        if (gp.top_k > 0 && gp.top_k < n) {
            std::partial_sort(cand.begin(), cand.begin() + gp.top_k, cand.end(),
                              [&](int a, int b) {
                                  if (row[a] != row[b]) return row[a] > row[b];
                                  return a < b;
                              });
            cand.resize(size_t(gp.top_k));
        }
        double hi = -1e300;
        for (int i : cand) hi = std::max(hi, double(row[i]) / gp.temperature);
        std::vector<double> probs;
        probs.reserve(cand.size());
        double z = 0;
        for (int i : cand) {
            double p = std::exp(double(row[i]) / gp.temperature - hi);
            probs.push_back(p);
            z += p;
        }
        double u = rng.uniform() * z, acc = 0;
        for (size_t j = 0; j < cand.size(); ++j) {
            acc += probs[j];
            if (u < acc) return cand[j];
        }
        return cand.back();
    }
};

namespace detail {

template <class T>
Tensor<T> sinusoid_table(int max_len, int d) {
    std::vector<T> data(size_t(max_len) * d);
    for (int t = 0; t < max_len; ++t)
        for (int i = 0; i * 2 < d; ++i) {
            const double angle = t / std::pow(10000.0, (2.0 * i) / d);
            data[size_t(t) * d + 2 * i] = T(std::sin(angle));
            if (2 * i + 1 < d) data[size_t(t) * d + 2 * i + 1] = T(std::cos(angle));
        }
    return Tensor<T>({max_len, d}, std::move(data));
}

}  // namespace detail

template <class T>
Model<T> build_model(const ModelConfig& config) {
    config.validate();
    Model<T> m;
    m.config = config;
    m.pos_table = detail::sinusoid_table<T>(config.max_seq_len, config.d_model);

    Rng rng(config.seed);
    // Parameters are created and filled in registry order from one stream,
    // so identical configs give bit-identical weights.
    auto add_proj = [&](const std::string& path, int rows, int cols) {
        Tensor<T> w = Tensor<T>::zeros({rows, cols}, true);
        const T std_dev = T(1.0 / std::sqrt(double(rows)));
        for (auto& x : w.data()) x = T(rng.normal()) * std_dev;
        m.params.add(path, w);
    };
    auto add_gain = [&](const std::string& path) {
        m.params.add(path, Tensor<T>::full({config.d_model}, T(1), true));
    };

    {
        Tensor<T> emb = Tensor<T>::zeros({config.vocab_size, config.d_model}, true);
        const T std_dev = T(1.0 / std::sqrt(double(config.d_model)));
        for (auto& x : emb.data()) x = T(rng.normal()) * std_dev;
        m.params.add("embed.tok", emb);
    }
    for (int b = 0; b < config.n_layers; ++b) {
        add_gain(paths::block(b, "attn_norm.gain"));
        add_proj(paths::block(b, "attn.q_proj"), config.d_model, config.d_model);
        add_proj(paths::block(b, "attn.k_proj"), config.d_model, config.d_model);
        add_proj(paths::block(b, "attn.v_proj"), config.d_model, config.d_model);
        add_proj(paths::block(b, "attn.o_proj"), config.d_model, config.d_model);
        add_gain(paths::block(b, "ffn_norm.gain"));
        add_proj(paths::block(b, "ffn.up_proj"), config.d_model, config.d_ff);
        add_proj(paths::block(b, "ffn.down_proj"), config.d_ff, config.d_model);
    }
    add_gain("final_norm.gain");
    add_proj("lm_head", config.d_model, config.vocab_size);
    return m;
}

namespace detail {

inline bool is_block_linear(const std::string& path) {
    if (path.rfind("blocks.", 0) != 0) return false;
    for (const char* suffix : {".attn.q_proj", ".attn.k_proj", ".attn.v_proj", ".attn.o_proj",
                               ".ffn.up_proj", ".ffn.down_proj"}) {
        const std::string s(suffix);
        if (path.size() > s.size() && path.compare(path.size() - s.size(), s.size(), s) == 0)
            return true;
    }
    return false;
}

}  // namespace detail

// Patterns: "all-linears" (block projections only), "*.suffix" globs, or
// exact paths. Every pattern must match something. Output follows registry
// order with duplicates removed.
template <class T>
std::vector<std::string> resolve_targets(const ParamRegistry<T>& reg,
                                         const std::vector<std::string>& patterns) {
    if (patterns.empty()) fail_validation("resolve_targets: no patterns given");
    std::vector<char> picked(reg.size(), 0);
    const auto& items = reg.items();
    for (const std::string& pat : patterns) {
        bool matched = false;
        for (size_t i = 0; i < items.size(); ++i) {
            const std::string& path = items[i].first;
            bool hit = false;
            if (pat == "all-linears")
                hit = detail::is_block_linear(path);
            else if (!pat.empty() && pat[0] == '*')
                hit = path.size() >= pat.size() - 1 &&
                      path.compare(path.size() - (pat.size() - 1), pat.size() - 1, pat, 1,
                                   pat.size() - 1) == 0;
            else
                hit = path == pat;
            if (hit) {
                picked[i] = 1;
                matched = true;
            }
        }
        if (!matched) fail_validation("target pattern matches nothing: " + pat);
    }
    std::vector<std::string> out;
    for (size_t i = 0; i < items.size(); ++i)
        if (picked[i]) out.push_back(items[i].first);
    return out;
}

template <class T>
std::vector<std::string> resolve_targets(const ParamRegistry<T>& reg, const std::string& spec) {
    std::vector<std::string> patterns;
    std::string cur;
    for (char c : spec) {
        if (c == ',') {
            if (!cur.empty()) patterns.push_back(cur);
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur += c;
        }
    }
    if (!cur.empty()) patterns.push_back(cur);
    return resolve_targets(reg, patterns);
}

}  // namespace tunekit
