#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/model.hpp"
#include "tunekit/tensor.hpp"

namespace tunekit {

enum class TunerVariant { full, lora, lisa, llamapro };

enum class LoraScaling { standard, rs };

struct TunerConfig {
    TunerVariant variant = TunerVariant::lora;
    // lora family (also covers rslora via scaling and dora via use_dora)
    int rank = 8;
    double alpha = 32.0;
    std::string targets = "all-linears";
    LoraScaling scaling = LoraScaling::standard;
    bool use_dora = false;
    uint64_t seed = 0;
    // lisa
    int activated_layers = 2;
    int reselect_interval = 20;
    // llamapro
    int new_blocks = 4;

    void validate() const {
        switch (variant) {
            case TunerVariant::full:
                break;
            case TunerVariant::lora:
                if (rank < 1) fail_validation("lora rank must be >= 1");
                if (alpha <= 0) fail_validation("lora alpha must be > 0");
                break;
            case TunerVariant::lisa:
                if (activated_layers < 1) fail_validation("lisa activated_layers must be >= 1");
                if (reselect_interval < 1) fail_validation("lisa reselect_interval must be >= 1");
                break;
            case TunerVariant::llamapro:
                if (new_blocks < 1) fail_validation("llamapro new_blocks must be >= 1");
                break;
        }
    }

    double scale() const {
        return scaling == LoraScaling::rs ? alpha / std::sqrt(double(rank))
                                          : alpha / double(rank);
    }
};

inline const char* tuner_variant_name(TunerVariant v) {
    switch (v) {
        case TunerVariant::full: return "full";
        case TunerVariant::lora: return "lora";
        case TunerVariant::lisa: return "lisa";
        case TunerVariant::llamapro: return "llamapro";
    }
    return "?";
}

template <class T>
struct AdapterEntry {
    std::string path;
    Tensor<T> a;                // [d_in, rank]
    Tensor<T> b;                // [rank, d_out], zero at init
    Tensor<T> m;                // [d_out] magnitude, dora only
    std::vector<T> saved_base;  // original weight values, kept while merged
};

template <class T>
struct Adapter {
    std::string name;
    TunerConfig config;
    std::vector<AdapterEntry<T>> entries;
    bool active = true;
    bool merged = false;
    std::vector<int> inserted_blocks;  // llamapro
    std::vector<int> selected_blocks;  // lisa
};

struct ReportRow {
    std::string name;
    size_t trainable_count = 0;
    size_t total_count = 0;
    std::string percent;
};

namespace detail {

// low-rank delta s * (x @ A) @ B; scale is applied as one multiply so the
// rs/standard ratio stays exact for power-of-two scales
template <class T>
Tensor<T> lora_delta(const Tensor<T>& x, const AdapterEntry<T>& e, T s) {
    return scale(matmul(matmul(x, e.a), e.b), s);
}

// magnitude-times-direction reweighting: each output unit of W0 + s*A@B is
// normalized over the input axis and rescaled by the learned magnitude
template <class T>
Tensor<T> dora_effective_weight(const Tensor<T>& w0, const AdapterEntry<T>& e, T s) {
    Tensor<T> wt = transpose(add(w0, scale(matmul(e.a, e.b), s)));  // [out, in]
    Tensor<T> unit = scale_rows(wt, reciprocal(row_l2norm(wt)));
    return transpose(scale_rows(unit, e.m));
}

inline int block_index_of(const std::string& path) {
    if (path.rfind("blocks.", 0) != 0) return -1;
    size_t dot = path.find('.', 7);
    if (dot == std::string::npos) return -1;
    return std::stoi(path.substr(7, dot - 7));
}

inline std::vector<std::string> block_param_paths(int b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    return {p + "attn_norm.gain", p + "attn.q_proj", p + "attn.k_proj", p + "attn.v_proj",
            p + "attn.o_proj",    p + "ffn_norm.gain", p + "ffn.up_proj", p + "ffn.down_proj"};
}

}  // namespace detail

// Block indices, in the expanded model, that llamapro_expand inserts for a
// given original depth. Lets a resumed run recover which blocks train.
inline std::vector<int> llamapro_inserted_indices(int n_layers, int n_new_blocks) {
    if (n_new_blocks < 1) fail_validation("llamapro new_blocks must be >= 1");
    if (n_new_blocks > n_layers)
        fail_validation("llamapro new_blocks " + std::to_string(n_new_blocks) + " exceeds n_layers " +
                        std::to_string(n_layers));
    std::vector<int> copy_after;
    for (int i = 0; i < n_new_blocks; ++i)
        copy_after.push_back(int((int64_t(n_layers) * (i + 1) + n_new_blocks - 1) / n_new_blocks) -
                             1);
    std::vector<int> inserted;
    int dst = 0;
    size_t next_copy = 0;
    for (int src = 0; src < n_layers; ++src) {
        ++dst;
        if (next_copy < copy_after.size() && copy_after[next_copy] == src) {
            inserted.push_back(dst);
            ++dst;
            ++next_copy;
        }
    }
    return inserted;
}

// Inserts copies of existing blocks at evenly spaced positions. Each copy
// zeroes its attn.o_proj and ffn.down_proj so both residual branches start
// as identities. Only the inserted blocks are trainable in the result.
template <class T>
Model<T> llamapro_expand(const Model<T>& model, int n_new_blocks, std::vector<int>* inserted_out) {
    const int n_layers = model.config.n_layers;
    if (n_new_blocks < 1) fail_validation("llamapro new_blocks must be >= 1");
    if (n_new_blocks > n_layers)
        fail_validation("llamapro new_blocks " + std::to_string(n_new_blocks) +
                        " exceeds n_layers " + std::to_string(n_layers));

    // copy after the last block of each of n roughly equal groups
    std::vector<int> copy_after;
    for (int i = 0; i < n_new_blocks; ++i)
        copy_after.push_back(int((int64_t(n_layers) * (i + 1) + n_new_blocks - 1) / n_new_blocks) -
                             1);

    ModelConfig cfg = model.config;
    cfg.n_layers = n_layers + n_new_blocks;
    Model<T> out = build_model<T>(cfg);

    std::vector<int> inserted;
    int dst = 0;
    auto copy_block = [&](int src, int dest, bool zero_outputs, bool trainable) {
        for (const std::string& rest : {std::string("attn_norm.gain"), std::string("attn.q_proj"),
                                        std::string("attn.k_proj"), std::string("attn.v_proj"),
                                        std::string("attn.o_proj"), std::string("ffn_norm.gain"),
                                        std::string("ffn.up_proj"), std::string("ffn.down_proj")}) {
            Tensor<T> w = model.params.get(paths::block(src, rest)).clone();
            if (zero_outputs && (rest == "attn.o_proj" || rest == "ffn.down_proj"))
                std::fill(w.data().begin(), w.data().end(), T(0));
            w.set_requires_grad(trainable);
            out.params.set(paths::block(dest, rest), w);
        }
    };
    size_t next_copy = 0;
    for (int src = 0; src < n_layers; ++src) {
        copy_block(src, dst++, false, false);
        if (next_copy < copy_after.size() && copy_after[next_copy] == src) {
            inserted.push_back(dst);
            copy_block(src, dst++, true, true);
            ++next_copy;
        }
    }
    for (const char* path : {"embed.tok", "final_norm.gain", "lm_head"}) {
        Tensor<T> w = model.params.get(path).clone();
        w.set_requires_grad(false);
        out.params.set(path, w);
    }
    if (inserted_out) *inserted_out = inserted;
    return out;
}

// Owns the (possibly expanded) model plus all adapter state, and feeds
// adapter deltas into the forward pass as the model's linear hook.
template <class T>
class TunedModel : public LinearHook<T> {
  public:
    TunedModel(Model<T> base, std::vector<std::pair<std::string, TunerConfig>> adapter_configs) {
        for (auto& [name, cfg] : adapter_configs) cfg.validate();
        validate_combination(adapter_configs);

        // a pre-installed hook means the base weights live elsewhere (e.g. a
        // quantized base); only additive adapters keep that coherent
        if (base.hook)
            for (const auto& [name, cfg] : adapter_configs)
                if (cfg.variant != TunerVariant::lora)
                    fail_validation("a model with a base weight hook supports only lora adapters");

        // llamapro restructures the model first so later target resolution
        // sees the final registry
        std::vector<int> inserted;
        const TunerConfig* pro = nullptr;
        for (const auto& [name, cfg] : adapter_configs)
            if (cfg.variant == TunerVariant::llamapro) pro = &cfg;
        if (pro) {
            model_ = llamapro_expand(base, pro->new_blocks, &inserted);
        } else {
            model_ = std::move(base);
        }
        base_ = model_.hook;

        const bool any_freezing = [&] {
            for (const auto& [name, cfg] : adapter_configs)
                if (cfg.variant != TunerVariant::full) return true;
            return false;
        }();
        if (any_freezing && !pro)
            for (const auto& [path, t] : model_.params.items()) {
                Tensor<T> handle = t;
                handle.set_requires_grad(false);
            }
        // (llamapro_expand already set the flags it needs)

        for (const auto& [name, cfg] : adapter_configs) {
            Adapter<T> ad;
            ad.name = name;
            ad.config = cfg;
            switch (cfg.variant) {
                case TunerVariant::full:
                    break;
                case TunerVariant::llamapro:
                    ad.inserted_blocks = inserted;
                    break;
                case TunerVariant::lisa:
                    init_lisa(ad);
                    break;
                case TunerVariant::lora:
                    init_lora(ad, inserted);
                    break;
            }
            adapters_.push_back(std::move(ad));
        }
        model_.hook = this;
    }

    // Adopts a model that was already expanded by an earlier llamapro run,
    // e.g. one reloaded from a checkpoint, instead of expanding again.
    struct AdoptExpanded {};
    TunedModel(Model<T> expanded, const std::string& name, const TunerConfig& cfg,
               std::vector<int> inserted, AdoptExpanded) {
        cfg.validate();
        if (cfg.variant != TunerVariant::llamapro)
            fail_validation("adopting an expanded model is a llamapro-only path");
        if (expanded.hook)
            fail_validation("a model with a base weight hook supports only lora adapters");
        model_ = std::move(expanded);
        base_ = model_.hook;
        for (const auto& [path, t] : model_.params.items()) {
            Tensor<T> handle = t;
            handle.set_requires_grad(false);
        }
        for (int b : inserted) {
            if (b < 0 || b >= model_.config.n_layers)
                fail_validation("inserted block index out of range: " + std::to_string(b));
            for (const std::string& p : detail::block_param_paths(b))
                model_.params.get(p).set_requires_grad(true);
        }
        Adapter<T> ad;
        ad.name = name;
        ad.config = cfg;
        ad.inserted_blocks = std::move(inserted);
        adapters_.push_back(std::move(ad));
        model_.hook = this;
    }

    TunedModel(const TunedModel&) = delete;
    TunedModel& operator=(const TunedModel&) = delete;

    Model<T>& model() { return model_; }
    const Model<T>& model() const { return model_; }

    Tensor<T> forward(const TokenBatch& ids) { return model_.forward(ids); }
    std::vector<int> generate(const std::vector<int>& prompt, const GenerationParams& gp) {
        return model_.generate(prompt, gp);
    }

    Adapter<T>& adapter(const std::string& name) {
        for (auto& ad : adapters_)
            if (ad.name == name) return ad;
        fail("unknown adapter: " + name);
    }
    const std::vector<Adapter<T>>& adapters() const { return adapters_; }

    void set_active(const std::string& name, bool active) { adapter(name).active = active; }

    // folds the adapter delta into the base weights; the original values are
    // kept so unmerge can restore them bit-exactly
    void merge(const std::string& name) {
        Adapter<T>& ad = adapter(name);
        if (base_)
            fail("cannot merge: base weights are served by another hook (quantized base)");
        if (ad.config.variant == TunerVariant::lisa)
            fail("cannot merge a lisa adapter: it has no additive structure");
        if (ad.config.variant == TunerVariant::llamapro)
            fail("cannot merge a llamapro adapter: inserted blocks are already plain weights");
        if (ad.config.variant == TunerVariant::full) fail("full tuning has nothing to merge");
        if (ad.merged) fail("adapter already merged: " + name);
        const T s = T(ad.config.scale());
        for (auto& e : ad.entries) {
            Tensor<T> w = model_.params.get(e.path);
            e.saved_base = w.data();
            Tensor<T> merged = ad.config.use_dora
                                   ? detail::dora_effective_weight(w.detached(), e, s)
                                   : add(w.detached(), scale(matmul(e.a.detached(), e.b.detached()), s));
            w.data() = merged.data();
        }
        ad.merged = true;
    }

    void unmerge(const std::string& name) {
        Adapter<T>& ad = adapter(name);
        if (!ad.merged) fail("adapter not merged: " + name);
        for (auto& e : ad.entries) {
            model_.params.get(e.path).data() = e.saved_base;
            e.saved_base.clear();
        }
        ad.merged = false;
    }

    // every reselect_interval steps picks a fresh set of trainable blocks;
    // embedding, final norm and lm_head stay trainable throughout
    std::vector<int> lisa_reselect(int step) {
        Adapter<T>* lisa = nullptr;
        for (auto& ad : adapters_)
            if (ad.config.variant == TunerVariant::lisa) lisa = &ad;
        if (!lisa) fail("no lisa adapter attached");
        return reselect_blocks(*lisa, step);
    }

    // named trainable parameters: unfrozen base weights under their registry
    // paths, adapter tensors under adapters.<name>.<target>.{A,B,m}
    std::vector<std::pair<std::string, Tensor<T>>> trainable_params() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        for (const auto& [path, t] : model_.params.items())
            if (t.requires_grad()) out.emplace_back(path, t);
        for (const auto& ad : adapters_) {
            if (ad.merged) continue;
            for (const auto& e : ad.entries) {
                const std::string prefix = "adapters." + ad.name + "." + e.path + ".";
                out.emplace_back(prefix + "A", e.a);
                out.emplace_back(prefix + "B", e.b);
                if (ad.config.use_dora) out.emplace_back(prefix + "m", e.m);
            }
        }
        return out;
    }

    size_t total_params() const {
        size_t n = model_.params.total_params();
        for (const auto& ad : adapters_)
            for (const auto& e : ad.entries) {
                n += e.a.numel() + e.b.numel();
                if (ad.config.use_dora) n += e.m.numel();
            }
        return n;
    }

    size_t total_trainable() const {
        size_t n = 0;
        for (const auto& [path, t] : trainable_params()) n += t.numel();
        return n;
    }

    std::vector<ReportRow> trainable_report() const {
        std::vector<ReportRow> rows;
        const size_t total = total_params();
        for (const auto& ad : adapters_) {
            ReportRow row;
            row.name = ad.name;
            row.total_count = total;
            switch (ad.config.variant) {
                case TunerVariant::full:
                    row.trainable_count = model_.params.total_params();
                    break;
                case TunerVariant::lora:
                    if (!ad.merged)
                        for (const auto& e : ad.entries) {
                            row.trainable_count += e.a.numel() + e.b.numel();
                            if (ad.config.use_dora) row.trainable_count += e.m.numel();
                        }
                    break;
                case TunerVariant::lisa:
                case TunerVariant::llamapro: {
                    for (const auto& [path, t] : model_.params.items())
                        if (t.requires_grad()) row.trainable_count += t.numel();
                    break;
                }
            }
            row.percent = format_percent(double(row.trainable_count), double(total));
            rows.push_back(std::move(row));
        }
        return rows;
    }

    // LinearHook: base product plus active adapter contributions; the base
    // side chains through any pre-installed hook
    Tensor<T> weight(const std::string& path, const Tensor<T>& w) override {
        return base_ ? base_->weight(path, w) : w;
    }

    Tensor<T> linear(const std::string& path, const Tensor<T>& x, const Tensor<T>& w) override {
        Tensor<T> out;
        bool have_base = false;
        for (auto& ad : adapters_) {
            if (!ad.active || ad.merged || ad.config.variant != TunerVariant::lora ||
                !ad.config.use_dora)
                continue;
            if (const AdapterEntry<T>* e = find_entry(ad, path)) {
                out = matmul(x, detail::dora_effective_weight(weight(path, w), *e,
                                                              T(ad.config.scale())));
                have_base = true;
            }
        }
        if (!have_base) out = base_ ? base_->linear(path, x, w) : matmul(x, w);
        for (auto& ad : adapters_) {
            if (!ad.active || ad.merged || ad.config.variant != TunerVariant::lora ||
                ad.config.use_dora)
                continue;
            if (const AdapterEntry<T>* e = find_entry(ad, path))
                out = add(out, detail::lora_delta(x, *e, T(ad.config.scale())));
        }
        return out;
    }

    Tensor<T> embed(const std::string& path, const Tensor<T>& table,
                    const TokenBatch& ids) override {
        Tensor<T> out = base_ ? base_->embed(path, table, ids) : embedding(table, ids);
        for (auto& ad : adapters_) {
            if (!ad.active || ad.merged || ad.config.variant != TunerVariant::lora) continue;
            if (const AdapterEntry<T>* e = find_entry(ad, path))
                out = add(out, scale(matmul(embedding(e->a, ids), e->b), T(ad.config.scale())));
        }
        return out;
    }

  private:
    static void validate_combination(
        const std::vector<std::pair<std::string, TunerConfig>>& configs) {
        if (configs.empty()) fail_validation("prepare_model: no adapters given");
        int full = 0, lisa = 0, pro = 0;
        std::vector<std::string> names;
        for (const auto& [name, cfg] : configs) {
            if (std::find(names.begin(), names.end(), name) != names.end())
                fail_validation("duplicate adapter name: " + name);
            names.push_back(name);
            full += cfg.variant == TunerVariant::full;
            lisa += cfg.variant == TunerVariant::lisa;
            pro += cfg.variant == TunerVariant::llamapro;
        }
        if (full && configs.size() > 1)
            fail_validation("full tuning cannot be combined with other adapters");
        if (lisa > 1 || pro > 1)
            fail_validation("at most one lisa and one llamapro adapter may be attached");
    }

    std::vector<int> reselect_blocks(Adapter<T>& lisa, int step) {
        if (step % lisa.config.reselect_interval != 0) return lisa.selected_blocks;
        Rng rng(mix_seed(lisa.config.seed, uint64_t(step)));
        std::vector<int> sel =
            rng.sample_distinct(lisa.config.activated_layers, model_.config.n_layers);
        std::sort(sel.begin(), sel.end());
        for (int b = 0; b < model_.config.n_layers; ++b) {
            const bool on = std::binary_search(sel.begin(), sel.end(), b);
            for (const std::string& p : detail::block_param_paths(b))
                model_.params.get(p).set_requires_grad(on);
        }
        lisa.selected_blocks = sel;
        return sel;
    }

    void init_lisa(Adapter<T>& ad) {
        if (ad.config.activated_layers > model_.config.n_layers)
            fail_validation("lisa activated_layers " + std::to_string(ad.config.activated_layers) +
                            " exceeds n_layers " + std::to_string(model_.config.n_layers));
        for (const char* p : {"embed.tok", "final_norm.gain", "lm_head"})
            model_.params.get(p).set_requires_grad(true);
        reselect_blocks(ad, 0);
    }

    void init_lora(Adapter<T>& ad, const std::vector<int>& inserted) {
        auto targets = resolve_targets(model_.params, ad.config.targets);
        for (const std::string& path : targets) {
            const int blk = detail::block_index_of(path);
            if (blk >= 0 && std::find(inserted.begin(), inserted.end(), blk) != inserted.end())
                fail_validation("lora target " + path + " overlaps a llamapro inserted block");
            Tensor<T> w = model_.params.get(path);
            if (w.shape().size() != 2)
                fail_validation("lora target must be a 2-D weight: " + path);
            const bool is_embedding = path == "embed.tok";
            if (ad.config.use_dora && is_embedding)
                fail_validation("dora cannot target the embedding table");
            const int d_in = w.dim(0), d_out = w.dim(1);

            AdapterEntry<T> e;
            e.path = path;
            Rng rng(mix_seed(mix_seed(ad.config.seed, hash_str(ad.name)), hash_str(path)));
            const double bound = 1.0 / std::sqrt(double(d_in));
            e.a = Tensor<T>::zeros({d_in, ad.config.rank}, true);
            for (auto& x : e.a.data()) x = T(rng.uniform(-bound, bound));
            e.b = Tensor<T>::zeros({ad.config.rank, d_out}, true);
            if (ad.config.use_dora) {
                // magnitude starts at the per-output-unit norm of the frozen base
                e.m = Tensor<T>::zeros({d_out}, true);
                for (int j = 0; j < d_out; ++j) {
                    double acc = 0;
                    for (int i = 0; i < d_in; ++i) {
                        const double x = double(w.data()[size_t(i) * d_out + j]);
                        acc += x * x;
                    }
                    e.m.data()[size_t(j)] = T(std::sqrt(acc));
                }
            }
            for (const auto& other : adapters_)
                if (other.config.use_dora)
                    for (const auto& oe : other.entries)
                        if (oe.path == path && ad.config.use_dora)
                            fail_validation("two dora adapters on one target: " + path);
            ad.entries.push_back(std::move(e));
        }
    }

    const AdapterEntry<T>* find_entry(const Adapter<T>& ad, const std::string& path) const {
        for (const auto& e : ad.entries)
            if (e.path == path) return &e;
        return nullptr;
    }

    Model<T> model_;
    LinearHook<T>* base_ = nullptr;
    std::vector<Adapter<T>> adapters_;
};

template <class T>
std::unique_ptr<TunedModel<T>> prepare_model(
    Model<T> base, std::vector<std::pair<std::string, TunerConfig>> adapters) {
    return std::make_unique<TunedModel<T>>(std::move(base), std::move(adapters));
}

}  // namespace tunekit
