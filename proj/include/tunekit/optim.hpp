#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/svd.hpp"
#include "tunekit/tensor.hpp"

namespace tunekit {

struct ParamGroup {
    std::vector<std::string> paths;
    double lr = 5e-5;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Linear warmup to base_lr over ceil(warmup_ratio*total) steps, then cosine
// decay to zero at total_steps.
inline double lr_at(int step, int total_steps, double warmup_ratio, double base_lr) {
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0)
        fail_validation("warmup_ratio must be in [0, 1)");
    if (total_steps < 1) fail_validation("total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        fail_validation("step " + std::to_string(step) + " outside [0, " +
                        std::to_string(total_steps) + "]");
    const int warmup = int(std::ceil(warmup_ratio * total_steps));
    if (step <= warmup) return warmup == 0 ? base_lr : base_lr * double(step) / warmup;
    const int span = total_steps - warmup;
    const double t = double(step - warmup) / double(span);
    return base_lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

namespace detail {

struct AdamSlot {
    double lr, weight_decay, beta1, beta2, eps;
};

// one moment update in double, returning the bias-corrected step direction
inline double adam_update(double g, double& m, double& v, const AdamSlot& h, int t) {
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(h.beta1, t));
    const double vhat = v / (1.0 - std::pow(h.beta2, t));
    return mhat / (std::sqrt(vhat) + h.eps);
}

}  // namespace detail

// Decoupled-weight-decay Adam over named parameters. Weight decay applies to
// 2-D weights only; parameters without a gradient are skipped; gradients are
// cleared after each step.
template <class T>
class AdamW {
  public:
    AdamW(std::vector<std::pair<std::string, Tensor<T>>> named_params,
          std::vector<ParamGroup> groups) {
        std::map<std::string, detail::AdamSlot> by_path;
        std::set<std::string> seen;
        for (const ParamGroup& g : groups) {
            if (g.lr < 0) fail_validation("group lr must be >= 0");
            for (const std::string& p : g.paths) {
                if (seen.count(p)) fail_validation("parameter in two groups: " + p);
                seen.insert(p);
                by_path[p] = {g.lr, g.weight_decay, g.beta1, g.beta2, g.eps};
            }
        }
        for (auto& [name, t] : named_params) {
            auto it = by_path.find(name);
            if (it == by_path.end()) fail_validation("parameter missing from groups: " + name);
            slots_.push_back(Slot{name, t, it->second, {}, {}});
            by_path.erase(it);
        }
        if (!by_path.empty())
            fail_validation("group path is not a trainable parameter: " + by_path.begin()->first);
    }

    AdamW(std::vector<std::pair<std::string, Tensor<T>>> named_params, double lr,
          double weight_decay = 0.01, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : AdamW(named_params, single_group(named_params, lr, weight_decay, beta1, beta2, eps)) {}

    void step() { step(step_count_ + 1); }

    void step(int t) {
        if (t < 1) fail("adamw step index must be >= 1, got " + std::to_string(t));
        step_count_ = t;
        for (Slot& s : slots_) {
            if (!s.param.has_grad()) continue;
            ensure_state(s);
            auto& data = s.param.data();
            const auto& grad = s.param.grad();
            // decay only matrices, never gains or other 1-D params
            const double wd = s.param.shape().size() >= 2 ? s.hyper.weight_decay : 0.0;
            const double lr = s.hyper.lr * lr_scale_;
            for (size_t i = 0; i < data.size(); ++i) {
                double m = s.m[i], v = s.v[i];
                const double upd = detail::adam_update(double(grad[i]), m, v, s.hyper, t);
                s.m[i] = T(m);
                s.v[i] = T(v);
                data[i] = T(double(data[i]) - lr * (upd + wd * double(data[i])));
            }
            s.param.clear_grad();
        }
    }

    // schedule multiplier applied on top of every group's base lr
    void set_lr_scale(double f) {
        if (!(f >= 0.0)) fail("lr scale must be >= 0");
        lr_scale_ = f;
    }

    int steps_done() const { return step_count_; }

    // moment buffers only
    size_t state_floats() const {
        size_t n = 0;
        for (const Slot& s : slots_) n += s.m.size() + s.v.size();
        return n;
    }

    // full accounting if every parameter had state
    size_t state_floats_capacity() const {
        size_t n = 0;
        for (const Slot& s : slots_) n += 2 * s.param.numel();
        return n;
    }

    std::vector<std::pair<std::string, std::vector<T>>> state_entries() const {
        std::vector<std::pair<std::string, std::vector<T>>> out;
        for (const Slot& s : slots_) {
            if (s.m.empty()) continue;
            out.emplace_back(s.name + ".m", s.m);
            out.emplace_back(s.name + ".v", s.v);
        }
        return out;
    }

    void load_state(const std::vector<std::pair<std::string, std::vector<T>>>& entries,
                    int step_count) {
        for (const auto& [key, vals] : entries) {
            const bool is_m = key.size() > 2 && key.compare(key.size() - 2, 2, ".m") == 0;
            const bool is_v = key.size() > 2 && key.compare(key.size() - 2, 2, ".v") == 0;
            if (!is_m && !is_v) fail("bad optimizer state key: " + key);
            const std::string name = key.substr(0, key.size() - 2);
            Slot* slot = find(name);
            if (!slot) fail("optimizer state for unknown parameter: " + name);
            if (vals.size() != slot->param.numel())
                fail("optimizer state size mismatch for " + name);
            (is_m ? slot->m : slot->v) = vals;
        }
        step_count_ = step_count;
    }

  private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        detail::AdamSlot hyper;
        std::vector<T> m, v;
    };

    static std::vector<ParamGroup> single_group(
        const std::vector<std::pair<std::string, Tensor<T>>>& named, double lr, double wd,
        double b1, double b2, double eps) {
        ParamGroup g;
        g.lr = lr;
        g.weight_decay = wd;
        g.beta1 = b1;
        g.beta2 = b2;
        g.eps = eps;
        for (const auto& [name, t] : named) g.paths.push_back(name);
        return {g};
    }

    void ensure_state(Slot& s) {
        if (s.m.empty()) {
            s.m.assign(s.param.numel(), T(0));
            s.v.assign(s.param.numel(), T(0));
        }
    }

    Slot* find(const std::string& name) {
        for (Slot& s : slots_)
            if (s.name == name) return &s;
        return nullptr;
    }

    std::vector<Slot> slots_;
    int step_count_ = 0;
    double lr_scale_ = 1.0;
};

// Places every LoRA B matrix in a group with lr multiplied by ratio; all
// other trainables keep base_lr.
template <class T>
std::vector<ParamGroup> build_param_groups(
    const std::vector<std::pair<std::string, Tensor<T>>>& named_params, double base_lr,
    double loraplus_ratio, double weight_decay = 0.01) {
    if (loraplus_ratio <= 0) fail_validation("loraplus_ratio must be > 0");
    ParamGroup main, bgroup;
    main.lr = base_lr;
    main.weight_decay = weight_decay;
    bgroup.lr = base_lr * loraplus_ratio;
    bgroup.weight_decay = weight_decay;
    for (const auto& [name, t] : named_params) {
        const bool is_b = name.rfind("adapters.", 0) == 0 && name.size() > 2 &&
                          name.compare(name.size() - 2, 2, ".B") == 0;
        (is_b ? bgroup : main).paths.push_back(name);
    }
    if (bgroup.paths.empty()) {
        if (loraplus_ratio != 1.0)
            log_warn("loraplus_ratio set but no lora B matrices found; using one group");
        return {main};
    }
    if (loraplus_ratio == 1.0) {
        main.paths.insert(main.paths.end(), bgroup.paths.begin(), bgroup.paths.end());
        return {main};
    }
    return {main, bgroup};
}

struct GaloreConfig {
    int rank = 128;
    int update_interval = 200;
    double scale = 0.25;
    uint64_t seed = 0;
    double lr = 5e-5;
    double weight_decay = 0.01;  // used by the 1-D fallback only
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (rank < 1) fail_validation("galore rank must be >= 1");
        if (update_interval < 1) fail_validation("galore update_interval must be >= 1");
        if (scale <= 0) fail_validation("galore scale must be > 0");
    }
};

// Adam in a low-rank gradient subspace. Each 2-D parameter keeps an
// orthonormal projector refreshed from the SVD of its current gradient;
// moment buffers live in the projected shape. 1-D parameters fall through
// to plain AdamW. Projected updates skip weight decay so every applied
// delta stays inside span(P).
template <class T>
class GaloreAdamW {
  public:
    GaloreAdamW(std::vector<std::pair<std::string, Tensor<T>>> named_params, GaloreConfig config)
        : config_(config) {
        config_.validate();
        for (auto& [name, t] : named_params) {
            if (t.shape().size() == 2) {
                const int rows = t.dim(0), cols = t.dim(1);
                int r = config_.rank;
                if (r > std::min(rows, cols)) {
                    r = std::min(rows, cols);
                    log_warn("galore rank " + std::to_string(config_.rank) + " clipped to " +
                             std::to_string(r) + " for " + name);
                }
                slots_.push_back(Slot{name, t, r, {}, {}, {}, -1, false});
            } else {
                fallback_params_.emplace_back(name, t);
            }
        }
        if (!fallback_params_.empty())
            fallback_ = std::make_unique<AdamW<T>>(fallback_params_, config_.lr,
                                                   config_.weight_decay, config_.beta1,
                                                   config_.beta2, config_.eps);
    }

    void step() { step(step_count_ + 1); }

    void step(int t) {
        if (t < 1) fail("galore step index must be >= 1, got " + std::to_string(t));
        step_count_ = t;
        const detail::AdamSlot hyper{config_.lr, 0.0, config_.beta1, config_.beta2, config_.eps};
        for (Slot& s : slots_) {
            if (!s.param.has_grad()) continue;
            const int rows = s.param.dim(0), cols = s.param.dim(1);
            if (!s.pinned && (s.last_refresh < 0 || t - s.last_refresh >= config_.update_interval))
                refresh_projector(s, t);
            const std::vector<T>& g = s.param.grad();
            // tall-or-square-by-columns cases: rows<=cols projects rows,
            // otherwise columns
            std::vector<double> gp = project(s, g, rows, cols);
            if (s.m.empty()) {
                s.m.assign(gp.size(), 0.0);
                s.v.assign(gp.size(), 0.0);
            }
            std::vector<double> u(gp.size());
            for (size_t i = 0; i < gp.size(); ++i)
                u[i] = detail::adam_update(gp[i], s.m[i], s.v[i], hyper, t);
            apply_back(s, u, rows, cols);
            s.param.clear_grad();
        }
        if (fallback_) {
            bool any = false;
            for (auto& [n, p] : fallback_params_) any = any || p.has_grad();
            if (any) fallback_->step(t);
        }
    }

    // test hook: replace the projector and pin it against refreshes
    void inject_projector(const std::string& name, const Tensor<T>& p) {
        Slot& s = slot(name);
        const int rows = s.param.dim(0), cols = s.param.dim(1);
        const int lead = rows <= cols ? rows : cols;
        if (p.shape() != std::vector<int>{lead, s.rank})
            fail("injected projector shape mismatch for " + name);
        s.projector.assign(p.data().begin(), p.data().end());
        s.pinned = true;
        s.last_refresh = 0;
    }

    Tensor<T> projector(const std::string& name) {
        Slot& s = slot(name);
        if (s.projector.empty()) fail("projector not initialized yet for " + name);
        const int rows = s.param.dim(0), cols = s.param.dim(1);
        const int lead = rows <= cols ? rows : cols;
        std::vector<T> vals(s.projector.size());
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = T(s.projector[i]);
        return Tensor<T>({lead, s.rank}, std::move(vals));
    }

    int last_refresh(const std::string& name) { return slot(name).last_refresh; }

    // moment buffers only; the projector is workspace, not optimizer state
    size_t state_floats() const {
        size_t n = 0;
        for (const Slot& s : slots_) n += s.m.size() + s.v.size();
        if (fallback_) n += fallback_->state_floats();
        return n;
    }

    int steps_done() const { return step_count_; }

    // schedule multiplier applied on top of config lr, forwarded to the fallback
    void set_lr_scale(double f) {
        if (!(f >= 0.0)) fail("lr scale must be >= 0");
        lr_scale_ = f;
        if (fallback_) fallback_->set_lr_scale(f);
    }

    // projected moments and projectors, serialized for exact resume; slots
    // that never received a gradient are skipped
    std::vector<std::pair<std::string, std::vector<double>>> projected_state_entries() const {
        std::vector<std::pair<std::string, std::vector<double>>> out;
        for (const Slot& s : slots_) {
            if (s.m.empty() && s.projector.empty()) continue;
            out.emplace_back("galore." + s.name + ".m", s.m);
            out.emplace_back("galore." + s.name + ".v", s.v);
            out.emplace_back("galore." + s.name + ".projector", s.projector);
            out.emplace_back("galore." + s.name + ".last_refresh",
                             std::vector<double>{double(s.last_refresh)});
        }
        return out;
    }

    std::vector<std::pair<std::string, std::vector<T>>> fallback_state_entries() const {
        if (!fallback_) return {};
        return fallback_->state_entries();
    }

    void load_state(const std::vector<std::pair<std::string, std::vector<T>>>& fallback_entries,
                    const std::vector<std::pair<std::string, std::vector<double>>>& projected,
                    int step_count) {
        for (const auto& [key, vals] : projected) {
            if (key.rfind("galore.", 0) != 0) fail("bad galore state key: " + key);
            const size_t dot = key.rfind('.');
            const std::string kind = key.substr(dot + 1);
            const std::string name = key.substr(7, dot - 7);
            Slot& s = slot(name);
            const int rows = s.param.dim(0), cols = s.param.dim(1);
            const size_t proj_len = size_t(rows <= cols ? rows : cols) * size_t(s.rank);
            const size_t mom_len = size_t(s.rank) * size_t(rows <= cols ? cols : rows);
            if (kind == "m" || kind == "v") {
                if (!vals.empty() && vals.size() != mom_len)
                    fail("galore moment size mismatch for " + name);
                (kind == "m" ? s.m : s.v) = vals;
            } else if (kind == "projector") {
                if (!vals.empty() && vals.size() != proj_len)
                    fail("galore projector size mismatch for " + name);
                s.projector = vals;
            } else if (kind == "last_refresh") {
                if (vals.size() != 1) fail("galore last_refresh must hold one value");
                s.last_refresh = int(vals[0]);
            } else {
                fail("bad galore state key: " + key);
            }
        }
        if (!fallback_entries.empty()) {
            if (!fallback_) fail("galore state holds 1-D entries but there is no fallback");
            fallback_->load_state(fallback_entries, step_count);
        }
        step_count_ = step_count;
    }

  private:
    struct Slot {
        std::string name;
        Tensor<T> param;
        int rank;
        std::vector<double> projector;  // [lead, rank] row-major
        std::vector<double> m, v;       // projected shape
        int last_refresh = -1;
        bool pinned = false;
    };

    Slot& slot(const std::string& name) {
        for (Slot& s : slots_)
            if (s.name == name) return s;
        fail("galore: unknown 2-D parameter " + name);
    }

    void refresh_projector(Slot& s, int t) {
        const int rows = s.param.dim(0), cols = s.param.dim(1);
        Tensor<T> g({rows, cols}, s.param.grad());
        auto f = truncated_svd(g, s.rank, 1e-10, mix_seed(config_.seed, uint64_t(t)));
        const Tensor<T>& factor = rows <= cols ? f.u : f.v;
        s.projector.assign(factor.data().begin(), factor.data().end());
        s.last_refresh = t;
        log_debug("galore projector refreshed for " + s.name + " at step " + std::to_string(t));
    }

    // P^T g for rows<=cols ([r,cols] result), g P for rows>cols ([rows,r])
    std::vector<double> project(const Slot& s, const std::vector<T>& g, int rows, int cols) const {
        const int r = s.rank;
        std::vector<double> out;
        if (rows <= cols) {
            out.assign(size_t(r) * cols, 0.0);
            for (int i = 0; i < rows; ++i)
                for (int k = 0; k < r; ++k) {
                    const double p = s.projector[size_t(i) * r + k];
                    for (int j = 0; j < cols; ++j)
                        out[size_t(k) * cols + j] += p * double(g[size_t(i) * cols + j]);
                }
        } else {
            out.assign(size_t(rows) * r, 0.0);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    const double gv = double(g[size_t(i) * cols + j]);
                    for (int k = 0; k < r; ++k)
                        out[size_t(i) * r + k] += gv * s.projector[size_t(j) * r + k];
                }
        }
        return out;
    }

    // theta -= scale * lr * (P u) or (u P^T)
    void apply_back(Slot& s, const std::vector<double>& u, int rows, int cols) {
        const int r = s.rank;
        auto& data = s.param.data();
        const double f = config_.scale * config_.lr * lr_scale_;
        if (rows <= cols) {
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    double acc = 0;
                    for (int k = 0; k < r; ++k)
                        acc += s.projector[size_t(i) * r + k] * u[size_t(k) * cols + j];
                    data[size_t(i) * cols + j] = T(double(data[size_t(i) * cols + j]) - f * acc);
                }
        } else {
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    double acc = 0;
                    for (int k = 0; k < r; ++k)
                        acc += u[size_t(i) * r + k] * s.projector[size_t(j) * r + k];
                    data[size_t(i) * cols + j] = T(double(data[size_t(i) * cols + j]) - f * acc);
                }
        }
    }

    GaloreConfig config_;
    std::vector<Slot> slots_;
    std::vector<std::pair<std::string, Tensor<T>>> fallback_params_;
    std::unique_ptr<AdamW<T>> fallback_;
    int step_count_ = 0;
    double lr_scale_ = 1.0;
};

}  // namespace tunekit
