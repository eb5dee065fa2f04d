#pragma once

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
//
// The scalar type is a template parameter: float is the training precision,
// double exists for gradient checking (and turns on hard non-finite input
// checks in every primitive). Ops record onto the thread's active tape only
// while a Tape::Scope is alive, so inference runs tape-free by default.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "tunekit/common.hpp"

namespace tunekit {

template <class T>
class Tape;

namespace detail {

inline size_t numel_of(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= size_t(d);
    return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

}  // namespace detail

template <class T>
struct TensorData {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;        // empty means "no grad accumulated yet"
    bool requires_grad = false;
    // producer bookkeeping; node < 0 for leaves
    Tape<T>* tape = nullptr;
    uint64_t tape_gen = 0;
    int node = -1;
};

// integer token ids, kept outside the float tensor world
struct TokenBatch {
    int rows = 0;
    int cols = 0;
    std::vector<int32_t> ids;  // row-major, rows*cols

    int at(int r, int c) const { return ids[size_t(r) * cols + c]; }
};

template <class T>
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        for (int d : shape)
            if (d <= 0) fail("tensor: shape dims must be positive, got " + detail::shape_str(shape));
        if (detail::numel_of(shape) != data.size())
            fail("tensor: shape " + detail::shape_str(shape) + " does not match data size " +
                 std::to_string(data.size()));
        d_ = std::make_shared<TensorData<T>>();
        d_->shape = std::move(shape);
        d_->data = std::move(data);
        d_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        std::vector<T> data(detail::numel_of(shape), T(0));
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
        std::vector<T> data(detail::numel_of(shape), value);
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, T stddev, bool requires_grad = false) {
        std::vector<T> data(detail::numel_of(shape));
        for (auto& v : data) v = T(rng.normal()) * stddev;
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor rand_uniform(std::vector<int> shape, Rng& rng, T lo, T hi,
                               bool requires_grad = false) {
        std::vector<T> data(detail::numel_of(shape));
        for (auto& v : data) v = T(rng.uniform(double(lo), double(hi)));
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return bool(d_); }
    const std::vector<int>& shape() const { return d_->shape; }
    int ndim() const { return int(d_->shape.size()); }

    int dim(int i) const {
        int n = ndim();
        if (i < 0) i += n;
        if (i < 0 || i >= n) fail("tensor: dim index out of range");
        return d_->shape[size_t(i)];
    }

    size_t numel() const { return d_->data.size(); }

    std::vector<T>& data() { return d_->data; }
    const std::vector<T>& data() const { return d_->data; }

    T item() const {
        if (numel() != 1) fail("tensor: item() requires a scalar, shape is " + detail::shape_str(shape()));
        return d_->data[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    bool has_grad() const { return !d_->grad.empty(); }

    const std::vector<T>& grad() const {
        if (d_->grad.empty()) fail("tensor: no gradient accumulated");
        return d_->grad;
    }

    std::vector<T>& mutable_grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->data.size(), T(0));
        return d_->grad;
    }

    void clear_grad() { d_->grad.clear(); }

    double grad_norm() const {
        double s = 0;
        for (T v : d_->grad) s += double(v) * double(v);
        return std::sqrt(s);
    }

    // deep copy of the values; result is a fresh leaf
    Tensor clone() const {
        Tensor out(d_->shape, d_->data, d_->requires_grad);
        return out;
    }

    // deep copy with grad tracking dropped, for feeding values back in as constants
    Tensor detached() const {
        Tensor out(d_->shape, d_->data, false);
        return out;
    }

    std::shared_ptr<TensorData<T>> ptr() const { return d_; }

private:
    std::shared_ptr<TensorData<T>> d_;
};

// ---------------------------------------------------------------------------
// tape

template <class T>
class Tape {
public:
    struct Node {
        const char* op;
        std::vector<std::shared_ptr<TensorData<T>>> inputs;
        std::shared_ptr<TensorData<T>> output;
        std::function<void()> backward;
    };

    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(current_) { current_ = &t; }
        ~Scope() { current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* current() { return current_; }

    size_t size() const { return nodes_.size(); }
    uint64_t generation() const { return gen_; }

    bool owns(const std::shared_ptr<TensorData<T>>& d) const {
        return d->tape == this && d->tape_gen == gen_ && d->node >= 0;
    }

    void record(const char* op, std::vector<std::shared_ptr<TensorData<T>>> inputs,
                const std::shared_ptr<TensorData<T>>& output, std::function<void()> backward) {
        output->tape = this;
        output->tape_gen = gen_;
        output->node = int(nodes_.size());
        nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
    }

    // Reverse sweep from a scalar loss. Grads accumulate (+=) into every
    // requires_grad tensor the tape touched; the tape is cleared afterwards.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            fail("backward: loss must be a scalar, shape is " + detail::shape_str(loss.shape()));
        if (!owns(loss.ptr()))
            fail("backward: tensor was not recorded on the active tape");
        loss.ptr()->grad.assign(1, T(1));
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.output->grad.empty()) continue;  // nothing flowed into this node
            n.backward();
        }
        // requires_grad tensors the loss never reached still end up with a
        // well-defined (zero) gradient
        for (Node& n : nodes_)
            for (auto& in : n.inputs)
                if (in->requires_grad && in->grad.empty()) in->grad.assign(in->data.size(), T(0));
        clear();
    }

    void clear() {
        nodes_.clear();
        ++gen_;
    }

private:
    std::vector<Node> nodes_;
    uint64_t gen_ = 1;
    static thread_local Tape* current_;
};

template <class T>
thread_local Tape<T>* Tape<T>::current_ = nullptr;

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <class T>
bool tracked(const Tensor<T>& t) {
    Tape<T>* tp = Tape<T>::current();
    return t.requires_grad() || (tp && tp->owns(t.ptr()));
}

template <class T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::current()) return false;
    for (const Tensor<T>* t : inputs)
        if (tracked(*t)) return true;
    return false;
}

// grads only accumulate into tensors that can use them
template <class T>
bool wants_grad(const std::shared_ptr<TensorData<T>>& d, Tape<T>* tape) {
    return d->requires_grad || (d->tape == tape && d->node >= 0);
}

template <class T>
std::vector<T>& ensure_grad(const std::shared_ptr<TensorData<T>>& d) {
    if (d->grad.empty()) d->grad.assign(d->data.size(), T(0));
    return d->grad;
}

template <class T>
void check_inputs_finite(const char* op, std::initializer_list<const Tensor<T>*> inputs) {
    if constexpr (std::is_same_v<T, double>) {
        for (const Tensor<T>* t : inputs)
            for (T v : t->data())
                if (!std::isfinite(v))
                    fail(std::string(op) + ": non-finite input value in high-precision mode");
    }
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + size_t(i) * k;
        T* crow = c + size_t(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + size_t(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + size_t(i) * k;
        T* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + size_t(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T* arow = a + size_t(p) * m;
        const T* brow = b + size_t(p) * n;
        for (int i = 0; i < m; ++i) {
            T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + size_t(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitives

// a: [..., m, k] x b: [k, n] or [..., k, n] (matching leading dims) -> [..., m, n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_inputs_finite<T>("matmul", {&a, &b});
    if (a.ndim() < 2 || b.ndim() < 2)
        fail("matmul: operands must have at least 2 dims, got " + detail::shape_str(a.shape()) +
             " x " + detail::shape_str(b.shape()));
    const bool b_batched = b.ndim() > 2;
    if (b_batched && !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(),
                                 b.shape().end() - 2))
        fail("matmul: batched operands need identical leading dims, got " +
             detail::shape_str(a.shape()) + " x " + detail::shape_str(b.shape()));
    if (b_batched && a.ndim() != b.ndim())
        fail("matmul: batched operands need identical leading dims, got " +
             detail::shape_str(a.shape()) + " x " + detail::shape_str(b.shape()));
    const int m = a.dim(-2), k = a.dim(-1);
    if (b.dim(-2) != k)
        fail("matmul: inner dims differ for " + detail::shape_str(a.shape()) + " x " +
             detail::shape_str(b.shape()));
    const int n = b.dim(-1);
    std::vector<int> out_shape(a.shape().begin(), a.shape().end() - 2);
    size_t batch = detail::numel_of(out_shape);
    out_shape.push_back(m);
    out_shape.push_back(n);

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* cp = out.data().data();
    const size_t a_step = size_t(m) * k, b_step = size_t(k) * n, c_step = size_t(m) * n;
    for (size_t l = 0; l < batch; ++l)
        detail::gemm_nn(ap + l * a_step, b_batched ? bp + l * b_step : bp, cp + l * c_step, m, k, n);

    if (detail::should_record<T>({&a, &b})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        tape->record("matmul", {ad, bd}, od, [ad, bd, od, tape, m, k, n, batch, b_batched]() {
            const T* dy = od->grad.data();
            const size_t a_step = size_t(m) * k, b_step = size_t(k) * n, c_step = size_t(m) * n;
            if (detail::wants_grad(ad, tape)) {
                T* da = detail::ensure_grad(ad).data();
                for (size_t l = 0; l < batch; ++l)
                    detail::gemm_nt(dy + l * c_step, bd->data.data() + (b_batched ? l * b_step : 0),
                                    da + l * a_step, m, n, k);
            }
            if (detail::wants_grad(bd, tape)) {
                T* db = detail::ensure_grad(bd).data();
                for (size_t l = 0; l < batch; ++l)
                    detail::gemm_tn(ad->data.data() + l * a_step, dy + l * c_step,
                                    db + (b_batched ? l * b_step : 0), k, m, n);
            }
        });
    }
    return out;
}

// elementwise add; b may broadcast as a suffix of a's shape (leading dims only)
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_inputs_finite<T>("add", {&a, &b});
    const bool same = a.shape() == b.shape();
    if (!same) {
        if (b.ndim() >= a.ndim() ||
            !std::equal(b.shape().begin(), b.shape().end(), a.shape().end() - b.ndim()))
            fail("add: cannot broadcast " + detail::shape_str(b.shape()) + " onto " +
                 detail::shape_str(a.shape()) + " (leading-dim broadcast only)");
    }
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const size_t bn = b.numel(), total = a.numel();
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    for (size_t i = 0; i < total; ++i) op[i] = ap[i] + bp[i % bn];

    if (detail::should_record<T>({&a, &b})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        tape->record("add", {ad, bd}, od, [ad, bd, od, tape, bn, total]() {
            const T* dy = od->grad.data();
            if (detail::wants_grad(ad, tape)) {
                T* da = detail::ensure_grad(ad).data();
                for (size_t i = 0; i < total; ++i) da[i] += dy[i];
            }
            if (detail::wants_grad(bd, tape)) {
                T* db = detail::ensure_grad(bd).data();
                for (size_t i = 0; i < total; ++i) db[i % bn] += dy[i];
            }
        });
    }
    return out;
}

// elementwise multiply, shapes must match exactly
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_inputs_finite<T>("mul", {&a, &b});
    if (a.shape() != b.shape())
        fail("mul: shapes differ, " + detail::shape_str(a.shape()) + " vs " +
             detail::shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const size_t total = a.numel();
    for (size_t i = 0; i < total; ++i) out.data()[i] = a.data()[i] * b.data()[i];

    if (detail::should_record<T>({&a, &b})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
        tape->record("mul", {ad, bd}, od, [ad, bd, od, tape, total]() {
            const T* dy = od->grad.data();
            if (detail::wants_grad(ad, tape)) {
                T* da = detail::ensure_grad(ad).data();
                for (size_t i = 0; i < total; ++i) da[i] += dy[i] * bd->data[i];
            }
            if (detail::wants_grad(bd, tape)) {
                T* db = detail::ensure_grad(bd).data();
                for (size_t i = 0; i < total; ++i) db[i] += dy[i] * ad->data[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    detail::check_inputs_finite<T>("scale", {&a});
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const size_t total = a.numel();
    for (size_t i = 0; i < total; ++i) out.data()[i] = a.data()[i] * factor;

    if (detail::should_record<T>({&a})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), od = out.ptr();
        tape->record("scale", {ad}, od, [ad, od, tape, factor, total]() {
            if (!detail::wants_grad(ad, tape)) return;
            const T* dy = od->grad.data();
            T* da = detail::ensure_grad(ad).data();
            for (size_t i = 0; i < total; ++i) da[i] += dy[i] * factor;
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, scale(b, T(-1)));
}

// softmax over the last dim, with the usual row-max subtraction
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail::check_inputs_finite<T>("softmax_rows", {&a});
    if (a.ndim() < 1 || a.dim(-1) < 1) fail("softmax_rows: rows must be non-empty");
    const int n = a.dim(-1);
    const size_t rows = a.numel() / n;
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (size_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * n;
        T* y = out.data().data() + r * n;
        T mx = x[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int j = 0; j < n; ++j) y[j] /= sum;
    }

    if (detail::should_record<T>({&a})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), od = out.ptr();
        tape->record("softmax_rows", {ad}, od, [ad, od, tape, rows, n]() {
            if (!detail::wants_grad(ad, tape)) return;
            const T* dy = od->grad.data();
            const T* y = od->data.data();
            T* da = detail::ensure_grad(ad).data();
            for (size_t r = 0; r < rows; ++r) {
                const T* yr = y + r * n;
                const T* dyr = dy + r * n;
                T* dar = da + r * n;
                T dot = T(0);
                for (int j = 0; j < n; ++j) dot += dyr[j] * yr[j];
                for (int j = 0; j < n; ++j) dar[j] += (dyr[j] - dot) * yr[j];
            }
        });
    }
    return out;
}

// y = x / sqrt(mean(x^2) + eps) * gain, normalized over the last dim
template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain) {
    detail::check_inputs_finite<T>("rms_norm", {&x, &gain});
    const int d = x.dim(-1);
    if (gain.ndim() != 1 || gain.dim(0) != d)
        fail("rms_norm: gain shape " + detail::shape_str(gain.shape()) + " does not match last dim of " +
             detail::shape_str(x.shape()));
    constexpr T eps = T(1e-5);
    const size_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto rinv = std::make_shared<std::vector<T>>(rows);  // 1/rms per row, for backward
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * d;
        T* yr = out.data().data() + r * d;
        T ms = T(0);
        for (int j = 0; j < d; ++j) ms += xr[j] * xr[j];
        ms /= T(d);
        T ri = T(1) / std::sqrt(ms + eps);
        (*rinv)[r] = ri;
        for (int j = 0; j < d; ++j) yr[j] = xr[j] * ri * gain.data()[j];
    }

    if (detail::should_record<T>({&x, &gain})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), gd = gain.ptr(), od = out.ptr();
        tape->record("rms_norm", {xd, gd}, od, [xd, gd, od, tape, rinv, rows, d]() {
            const T* dy = od->grad.data();
            const bool want_x = detail::wants_grad(xd, tape);
            const bool want_g = detail::wants_grad(gd, tape);
            T* dx = want_x ? detail::ensure_grad(xd).data() : nullptr;
            T* dg = want_g ? detail::ensure_grad(gd).data() : nullptr;
            for (size_t r = 0; r < rows; ++r) {
                const T* xr = xd->data.data() + r * d;
                const T* dyr = dy + r * d;
                const T ri = (*rinv)[r];
                if (dg)
                    for (int j = 0; j < d; ++j) dg[j] += dyr[j] * xr[j] * ri;
                if (dx) {
                    T dot = T(0);
                    for (int j = 0; j < d; ++j) dot += dyr[j] * gd->data[j] * xr[j];
                    const T c = dot * ri * ri * ri / T(d);
                    T* dxr = dx + r * d;
                    for (int j = 0; j < d; ++j) dxr[j] += dyr[j] * gd->data[j] * ri - xr[j] * c;
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
    detail::check_inputs_finite<T>("silu", {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const size_t total = x.numel();
    for (size_t i = 0; i < total; ++i) {
        T v = x.data()[i];
        out.data()[i] = v / (T(1) + std::exp(-v));
    }

    if (detail::should_record<T>({&x})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), od = out.ptr();
        tape->record("silu", {xd}, od, [xd, od, tape, total]() {
            if (!detail::wants_grad(xd, tape)) return;
            const T* dy = od->grad.data();
            T* dx = detail::ensure_grad(xd).data();
            for (size_t i = 0; i < total; ++i) {
                T v = xd->data[i];
                T s = T(1) / (T(1) + std::exp(-v));
                dx[i] += dy[i] * (s + v * s * (T(1) - s));
            }
        });
    }
    return out;
}

// table: [vocab, d] gathered by ids -> [rows, cols, d]
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const TokenBatch& ids) {
    detail::check_inputs_finite<T>("embedding", {&table});
    if (table.ndim() != 2) fail("embedding: table must be 2-D, got " + detail::shape_str(table.shape()));
    if (ids.rows <= 0 || ids.cols <= 0) fail("embedding: token batch is empty");
    const int vocab = table.dim(0), d = table.dim(1);
    for (int32_t id : ids.ids)
        if (id < 0 || id >= vocab)
            fail("embedding: token id " + std::to_string(id) + " out of range for vocab " +
                 std::to_string(vocab));
    Tensor<T> out = Tensor<T>::zeros({ids.rows, ids.cols, d});
    for (size_t i = 0; i < ids.ids.size(); ++i) {
        const T* src = table.data().data() + size_t(ids.ids[i]) * d;
        std::copy(src, src + d, out.data().data() + i * d);
    }

    if (detail::should_record<T>({&table})) {
        Tape<T>* tape = Tape<T>::current();
        auto td = table.ptr(), od = out.ptr();
        auto idv = std::make_shared<std::vector<int32_t>>(ids.ids);
        tape->record("embedding", {td}, od, [td, od, tape, idv, d]() {
            if (!detail::wants_grad(td, tape)) return;
            const T* dy = od->grad.data();
            T* dt = detail::ensure_grad(td).data();
            for (size_t i = 0; i < idv->size(); ++i) {
                T* dst = dt + size_t((*idv)[i]) * d;
                const T* src = dy + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// adds a large negative constant above the diagonal of the trailing [s, s] dims
template <class T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
    detail::check_inputs_finite<T>("causal_mask", {&scores});
    if (scores.ndim() < 2 || scores.dim(-1) != scores.dim(-2))
        fail("causal_mask: trailing dims must be square, got " + detail::shape_str(scores.shape()));
    const int s = scores.dim(-1);
    const size_t batch = scores.numel() / (size_t(s) * s);
    constexpr T neg = T(-1e30);
    Tensor<T> out = Tensor<T>::zeros(scores.shape());
    for (size_t l = 0; l < batch; ++l) {
        const T* x = scores.data().data() + l * s * s;
        T* y = out.data().data() + l * s * s;
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < s; ++j) y[i * s + j] = (j > i) ? x[i * s + j] + neg : x[i * s + j];
    }

    if (detail::should_record<T>({&scores})) {
        Tape<T>* tape = Tape<T>::current();
        auto sd = scores.ptr(), od = out.ptr();
        const size_t total = scores.numel();
        tape->record("causal_mask", {sd}, od, [sd, od, tape, total]() {
            if (!detail::wants_grad(sd, tape)) return;
            const T* dy = od->grad.data();
            T* dx = detail::ensure_grad(sd).data();
            for (size_t i = 0; i < total; ++i) dx[i] += dy[i];
        });
    }
    return out;
}

// swaps the last two dims (materialized)
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::check_inputs_finite<T>("transpose", {&a});
    if (a.ndim() < 2) fail("transpose: needs at least 2 dims, got " + detail::shape_str(a.shape()));
    const int m = a.dim(-2), n = a.dim(-1);
    std::vector<int> out_shape = a.shape();
    std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
    const size_t batch = a.numel() / (size_t(m) * n);
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    for (size_t l = 0; l < batch; ++l) {
        const T* x = a.data().data() + l * m * n;
        T* y = out.data().data() + l * m * n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) y[size_t(j) * m + i] = x[size_t(i) * n + j];
    }

    if (detail::should_record<T>({&a})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), od = out.ptr();
        tape->record("transpose", {ad}, od, [ad, od, tape, m, n, batch]() {
            if (!detail::wants_grad(ad, tape)) return;
            const T* dy = od->grad.data();
            T* da = detail::ensure_grad(ad).data();
            for (size_t l = 0; l < batch; ++l) {
                const T* dyl = dy + l * m * n;
                T* dal = da + l * m * n;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dal[size_t(i) * n + j] += dyl[size_t(j) * m + i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> new_shape) {
    detail::check_inputs_finite<T>("reshape", {&a});
    if (detail::numel_of(new_shape) != a.numel())
        fail("reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
             detail::shape_str(new_shape));
    Tensor<T> out(new_shape, a.data());

    if (detail::should_record<T>({&a})) {
        Tape<T>* tape = Tape<T>::current();
        auto ad = a.ptr(), od = out.ptr();
        const size_t total = a.numel();
        tape->record("reshape", {ad}, od, [ad, od, tape, total]() {
            if (!detail::wants_grad(ad, tape)) return;
            const T* dy = od->grad.data();
            T* da = detail::ensure_grad(ad).data();
            for (size_t i = 0; i < total; ++i) da[i] += dy[i];
        });
    }
    return out;
}

// concatenation along dim 0; trailing dims must match
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) fail("concat_rows: nothing to concatenate");
    std::vector<int> tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int rows = 0;
    for (const auto& p : parts) {
        detail::check_inputs_finite<T>("concat_rows", {&p});
        std::vector<int> pt(p.shape().begin() + 1, p.shape().end());
        if (pt != tail)
            fail("concat_rows: trailing dims differ, " + detail::shape_str(parts[0].shape()) +
                 " vs " + detail::shape_str(p.shape()));
        rows += p.dim(0);
    }
    std::vector<int> out_shape = {rows};
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.numel();
    }

    bool rec = false;
    for (const auto& p : parts)
        if (detail::tracked(p)) rec = true;
    if (rec && Tape<T>::current()) {
        Tape<T>* tape = Tape<T>::current();
        std::vector<std::shared_ptr<TensorData<T>>> ins;
        for (const auto& p : parts) ins.push_back(p.ptr());
        auto od = out.ptr();
        tape->record("concat_rows", ins, od, [ins, od, tape]() {
            const T* dy = od->grad.data();
            size_t off = 0;
            for (auto& in : ins) {
                const size_t n = in->data.size();
                if (detail::wants_grad(in, tape)) {
                    T* da = detail::ensure_grad(in).data();
                    for (size_t i = 0; i < n; ++i) da[i] += dy[off + i];
                }
                off += n;
            }
        });
    }
    return out;
}

// [b, s, d] -> [b*heads, s, d/heads]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
    detail::check_inputs_finite<T>("split_heads", {&x});
    if (x.ndim() != 3) fail("split_heads: expected 3-D input, got " + detail::shape_str(x.shape()));
    const int b = x.dim(0), s = x.dim(1), d = x.dim(2);
    if (heads <= 0 || d % heads != 0)
        fail("split_heads: dim " + std::to_string(d) + " not divisible by heads " +
             std::to_string(heads));
    const int hd = d / heads;
    Tensor<T> out = Tensor<T>::zeros({b * heads, s, hd});
    for (int bi = 0; bi < b; ++bi)
        for (int si = 0; si < s; ++si)
            for (int h = 0; h < heads; ++h) {
                const T* src = x.data().data() + (size_t(bi) * s + si) * d + size_t(h) * hd;
                T* dst = out.data().data() + (size_t(bi * heads + h) * s + si) * hd;
                std::copy(src, src + hd, dst);
            }

    if (detail::should_record<T>({&x})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), od = out.ptr();
        tape->record("split_heads", {xd}, od, [xd, od, tape, b, s, d, heads, hd]() {
            if (!detail::wants_grad(xd, tape)) return;
            const T* dy = od->grad.data();
            T* dx = detail::ensure_grad(xd).data();
            for (int bi = 0; bi < b; ++bi)
                for (int si = 0; si < s; ++si)
                    for (int h = 0; h < heads; ++h) {
                        const T* src = dy + (size_t(bi * heads + h) * s + si) * hd;
                        T* dst = dx + (size_t(bi) * s + si) * d + size_t(h) * hd;
                        for (int j = 0; j < hd; ++j) dst[j] += src[j];
                    }
        });
    }
    return out;
}

// [b*heads, s, hd] -> [b, s, heads*hd]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x, int heads) {
    detail::check_inputs_finite<T>("merge_heads", {&x});
    if (x.ndim() != 3) fail("merge_heads: expected 3-D input, got " + detail::shape_str(x.shape()));
    const int bh = x.dim(0), s = x.dim(1), hd = x.dim(2);
    if (heads <= 0 || bh % heads != 0)
        fail("merge_heads: batch dim " + std::to_string(bh) + " not divisible by heads " +
             std::to_string(heads));
    const int b = bh / heads, d = heads * hd;
    Tensor<T> out = Tensor<T>::zeros({b, s, d});
    for (int bi = 0; bi < b; ++bi)
        for (int si = 0; si < s; ++si)
            for (int h = 0; h < heads; ++h) {
                const T* src = x.data().data() + (size_t(bi * heads + h) * s + si) * hd;
                T* dst = out.data().data() + (size_t(bi) * s + si) * d + size_t(h) * hd;
                std::copy(src, src + hd, dst);
            }

    if (detail::should_record<T>({&x})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), od = out.ptr();
        tape->record("merge_heads", {xd}, od, [xd, od, tape, b, s, d, heads, hd]() {
            if (!detail::wants_grad(xd, tape)) return;
            const T* dy = od->grad.data();
            T* dx = detail::ensure_grad(xd).data();
            for (int bi = 0; bi < b; ++bi)
                for (int si = 0; si < s; ++si)
                    for (int h = 0; h < heads; ++h) {
                        const T* src = dy + (size_t(bi) * s + si) * d + size_t(h) * hd;
                        T* dst = dx + (size_t(bi * heads + h) * s + si) * hd;
                        for (int j = 0; j < hd; ++j) dst[j] += src[j];
                    }
        });
    }
    return out;
}

// [r, c] -> [r], euclidean norm of each row
template <class T>
Tensor<T> row_l2norm(const Tensor<T>& w) {
    detail::check_inputs_finite<T>("row_l2norm", {&w});
    if (w.ndim() != 2) fail("row_l2norm: expected 2-D input, got " + detail::shape_str(w.shape()));
    const int r = w.dim(0), c = w.dim(1);
    Tensor<T> out = Tensor<T>::zeros({r});
    for (int i = 0; i < r; ++i) {
        T s = T(0);
        for (int j = 0; j < c; ++j) {
            T v = w.data()[size_t(i) * c + j];
            s += v * v;
        }
        out.data()[i] = std::sqrt(s);
    }

    if (detail::should_record<T>({&w})) {
        Tape<T>* tape = Tape<T>::current();
        auto wd = w.ptr(), od = out.ptr();
        tape->record("row_l2norm", {wd}, od, [wd, od, tape, r, c]() {
            if (!detail::wants_grad(wd, tape)) return;
            const T* dy = od->grad.data();
            T* dw = detail::ensure_grad(wd).data();
            for (int i = 0; i < r; ++i) {
                T n = od->data[i];
                if (n == T(0)) continue;
                T f = dy[i] / n;
                for (int j = 0; j < c; ++j) dw[size_t(i) * c + j] += f * wd->data[size_t(i) * c + j];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& x) {
    detail::check_inputs_finite<T>("reciprocal", {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const size_t total = x.numel();
    for (size_t i = 0; i < total; ++i) out.data()[i] = T(1) / x.data()[i];

    if (detail::should_record<T>({&x})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), od = out.ptr();
        tape->record("reciprocal", {xd}, od, [xd, od, tape, total]() {
            if (!detail::wants_grad(xd, tape)) return;
            const T* dy = od->grad.data();
            T* dx = detail::ensure_grad(xd).data();
            for (size_t i = 0; i < total; ++i) {
                T y = od->data[i];
                dx[i] -= dy[i] * y * y;
            }
        });
    }
    return out;
}

// scales row i of w by s[i]
template <class T>
Tensor<T> scale_rows(const Tensor<T>& w, const Tensor<T>& s) {
    detail::check_inputs_finite<T>("scale_rows", {&w, &s});
    if (w.ndim() != 2 || s.ndim() != 1 || s.dim(0) != w.dim(0))
        fail("scale_rows: need [r,c] and [r], got " + detail::shape_str(w.shape()) + " and " +
             detail::shape_str(s.shape()));
    const int r = w.dim(0), c = w.dim(1);
    Tensor<T> out = Tensor<T>::zeros(w.shape());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[size_t(i) * c + j] = w.data()[size_t(i) * c + j] * s.data()[i];

    if (detail::should_record<T>({&w, &s})) {
        Tape<T>* tape = Tape<T>::current();
        auto wd = w.ptr(), sd = s.ptr(), od = out.ptr();
        tape->record("scale_rows", {wd, sd}, od, [wd, sd, od, tape, r, c]() {
            const T* dy = od->grad.data();
            if (detail::wants_grad(wd, tape)) {
                T* dw = detail::ensure_grad(wd).data();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) dw[size_t(i) * c + j] += dy[size_t(i) * c + j] * sd->data[i];
            }
            if (detail::wants_grad(sd, tape)) {
                T* ds = detail::ensure_grad(sd).data();
                for (int i = 0; i < r; ++i) {
                    T acc = T(0);
                    for (int j = 0; j < c; ++j) acc += dy[size_t(i) * c + j] * wd->data[size_t(i) * c + j];
                    ds[i] += acc;
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
    detail::check_inputs_finite<T>("softplus", {&x});
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const size_t total = x.numel();
    for (size_t i = 0; i < total; ++i) {
        T v = x.data()[i];
        out.data()[i] = std::log1p(std::exp(-std::abs(v))) + std::max(v, T(0));
    }

    if (detail::should_record<T>({&x})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), od = out.ptr();
        tape->record("softplus", {xd}, od, [xd, od, tape, total]() {
            if (!detail::wants_grad(xd, tape)) return;
            const T* dy = od->grad.data();
            T* dx = detail::ensure_grad(xd).data();
            for (size_t i = 0; i < total; ++i) {
                T s = T(1) / (T(1) + std::exp(-xd->data[i]));
                dx[i] += dy[i] * s;
            }
        });
    }
    return out;
}

// reduce to a scalar
template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    detail::check_inputs_finite<T>("sum_all", {&x});
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);

    if (detail::should_record<T>({&x})) {
        Tape<T>* tape = Tape<T>::current();
        auto xd = x.ptr(), od = out.ptr();
        tape->record("sum_all", {xd}, od, [xd, od, tape]() {
            if (!detail::wants_grad(xd, tape)) return;
            const T dy = od->grad[0];
            T* dx = detail::ensure_grad(xd).data();
            for (size_t i = 0; i < xd->data.size(); ++i) dx[i] += dy;
        });
    }
    return out;
}

// Sum of weights[i] * cross_entropy(logits[i], targets[i]) over all rows.
// Weights are data, not parameters: no gradient flows into them, and a row
// with weight 0 is skipped outright (its target may be any value, including
// an ignore marker). Normalization is the caller's business so that scaling
// one row's weight scales exactly that row's gradient.
template <class T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets,
                                 const std::vector<T>& weights) {
    detail::check_inputs_finite<T>("weighted_cross_entropy", {&logits});
    if (logits.ndim() != 2)
        fail("weighted_cross_entropy: logits must be [rows, vocab], got " +
             detail::shape_str(logits.shape()));
    const int rows = logits.dim(0), vocab = logits.dim(1);
    if (int(targets.size()) != rows || int(weights.size()) != rows)
        fail("weighted_cross_entropy: need one target and weight per row, got " +
             std::to_string(targets.size()) + " targets / " + std::to_string(weights.size()) +
             " weights for " + std::to_string(rows) + " rows");

    auto probs = std::make_shared<std::vector<T>>();
    const bool rec = detail::should_record<T>({&logits});
    if (rec) probs->assign(size_t(rows) * vocab, T(0));

    T loss = T(0);
    for (int i = 0; i < rows; ++i) {
        if (weights[i] == T(0)) continue;
        const int t = targets[i];
        if (t < 0 || t >= vocab)
            fail("weighted_cross_entropy: target " + std::to_string(t) + " out of range for vocab " +
                 std::to_string(vocab) + " at weighted row " + std::to_string(i));
        const T* x = logits.data().data() + size_t(i) * vocab;
        T mx = x[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
        T sum = T(0);
        for (int j = 0; j < vocab; ++j) sum += std::exp(x[j] - mx);
        const T lse = std::log(sum) + mx;
        loss += weights[i] * (lse - x[t]);
        if (rec) {
            T* p = probs->data() + size_t(i) * vocab;
            for (int j = 0; j < vocab; ++j) p[j] = std::exp(x[j] - mx) / sum;
        }
    }
    Tensor<T> out = Tensor<T>::scalar(loss);

    if (rec) {
        Tape<T>* tape = Tape<T>::current();
        auto ld = logits.ptr(), od = out.ptr();
        auto tgt = std::make_shared<std::vector<int>>(targets);
        auto wts = std::make_shared<std::vector<T>>(weights);
        tape->record("weighted_cross_entropy", {ld}, od,
                     [ld, od, tape, probs, tgt, wts, rows, vocab]() {
                         if (!detail::wants_grad(ld, tape)) return;
                         const T dl = od->grad[0];
                         T* dx = detail::ensure_grad(ld).data();
                         for (int i = 0; i < rows; ++i) {
                             const T w = (*wts)[i];
                             if (w == T(0)) continue;
                             const T* p = probs->data() + size_t(i) * vocab;
                             T* dxr = dx + size_t(i) * vocab;
                             const T f = dl * w;
                             for (int j = 0; j < vocab; ++j) dxr[j] += f * p[j];
                             dxr[(*tgt)[i]] -= f;
                         }
                     });
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking (run with T = double)

// Max over all parameter entries of |analytic - numeric| / (|analytic| + |numeric| + 1e-12),
// where numeric is the central difference (f(x+h) - f(x-h)) / 2h. `fn` must
// rebuild the loss from scratch on every call. Non-finite values are a hard error.
template <class T>
double grad_check(const std::function<Tensor<T>()>& fn, const std::vector<Tensor<T>>& params,
                  T h = T(1e-4)) {
    for (auto p : params) {
        if (!p.requires_grad()) fail("grad_check: all checked params must require grad");
        p.clear_grad();
    }
    Tape<T> tape;
    {
        typename Tape<T>::Scope scope(tape);
        Tensor<T> loss = fn();
        if (!std::isfinite(double(loss.item()))) fail("grad_check: non-finite loss");
        tape.backward(loss);
    }
    std::vector<std::vector<T>> analytic;
    for (auto p : params) {
        analytic.push_back(p.has_grad() ? p.grad() : std::vector<T>(p.numel(), T(0)));
        p.clear_grad();
    }

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T> p = params[pi];
        for (size_t i = 0; i < p.numel(); ++i) {
            const T orig = p.data()[i];
            p.data()[i] = orig + h;
            const double f_plus = double(fn().item());
            p.data()[i] = orig - h;
            const double f_minus = double(fn().item());
            p.data()[i] = orig;
            const double numeric = (f_plus - f_minus) / (2.0 * double(h));
            const double ana = double(analytic[pi][i]);
            if (!std::isfinite(numeric) || !std::isfinite(ana))
                fail("grad_check: non-finite gradient estimate");
            const double err = std::abs(ana - numeric) / (std::abs(ana) + std::abs(numeric) + 1e-12);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace tunekit
