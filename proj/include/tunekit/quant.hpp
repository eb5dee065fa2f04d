#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/model.hpp"

namespace tunekit {

// Symmetric blockwise quantization: per block of block_size consecutive
// elements, scale = max|w| / qmax with qmax = 2^(bits-1) - 1, codes are
// round-half-away-from-zero integers in [-qmax, qmax]. Scales are kept in
// 32-bit floats regardless of the source precision. 4-bit codes are packed
// two per byte over the flat element index, low nibble first; a trailing odd
// element leaves the high nibble zero.
struct QuantizedTensor {
    std::vector<int> shape;
    int bits = 8;
    int block_size = 64;
    std::vector<float> scales;
    std::vector<uint8_t> packed;

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) n *= size_t(d);
        return n;
    }
    size_t block_count() const {
        return (numel() + size_t(block_size) - 1) / size_t(block_size);
    }
    int qmax() const { return (1 << (bits - 1)) - 1; }

    int code_at(size_t i) const {
        if (bits == 8) return int(int8_t(packed[i]));
        const uint8_t byte = packed[i / 2];
        int c = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
        if (c & 0x8) c -= 16;
        return c;
    }

    void validate() const {
        if (bits != 4 && bits != 8) fail_validation("unsupported quantization bits: " + std::to_string(bits));
        if (block_size < 1) fail_validation("quantization block_size must be >= 1");
        if (shape.empty()) fail_validation("quantized tensor has no shape");
        if (scales.size() != block_count()) fail("quantized tensor scale count mismatch");
        const size_t want = bits == 8 ? numel() : (numel() + 1) / 2;
        if (packed.size() != want) fail("quantized tensor packed size mismatch");
        for (float s : scales)
            if (!(s >= 0.0f) || !std::isfinite(s)) fail("quantized tensor scale not finite and >= 0");
        const int q = qmax();
        for (size_t i = 0; i < numel(); ++i) {
            const int c = code_at(i);
            if (c < -q || c > q) fail("quantized code outside [-qmax, qmax]");
        }
    }
};

template <class T>
QuantizedTensor quantize_blockwise(const Tensor<T>& t, int bits, int block_size = 64) {
    if (bits != 4 && bits != 8) fail_validation("unsupported quantization bits: " + std::to_string(bits));
    if (block_size < 1) fail_validation("quantization block_size must be >= 1");
    const std::vector<T>& w = t.data();
    for (const T& x : w)
        if (!std::isfinite(double(x))) fail_validation("cannot quantize a non-finite tensor");

    QuantizedTensor q;
    q.shape = t.shape();
    q.bits = bits;
    q.block_size = block_size;
    const size_t n = w.size();
    const int qmax = (1 << (bits - 1)) - 1;
    q.scales.reserve((n + size_t(block_size) - 1) / size_t(block_size));
    q.packed.assign(bits == 8 ? n : (n + 1) / 2, 0);

    for (size_t b0 = 0; b0 < n; b0 += size_t(block_size)) {
        const size_t b1 = std::min(n, b0 + size_t(block_size));
        double maxabs = 0.0;
        for (size_t i = b0; i < b1; ++i) maxabs = std::max(maxabs, std::abs(double(w[i])));
        // the scale rounds toward zero when narrowed to float32 so that exact
        // half-point ratios (w = (k+1/2)*maxabs/qmax) still round away from
        // zero, and |w - code*scale| <= scale/2 stays strict
        const double ds = maxabs / double(qmax);
        float s = float(ds);
        if (double(s) > ds) s = std::nextafterf(s, 0.0f);
        q.scales.push_back(s);
        for (size_t i = b0; i < b1; ++i) {
            int c = 0;
            if (s > 0.0f) {
                c = int(std::round(double(w[i]) / double(s)));
                c = std::max(-qmax, std::min(qmax, c));
            }
            if (bits == 8) {
                q.packed[i] = uint8_t(int8_t(c));
            } else {
                const uint8_t nib = uint8_t(c & 0x0F);
                if (i % 2 == 0)
                    q.packed[i / 2] |= nib;
                else
                    q.packed[i / 2] |= uint8_t(nib << 4);
            }
        }
    }
    return q;
}

template <class T>
Tensor<T> dequantize(const QuantizedTensor& q) {
    q.validate();
    Tensor<T> out = Tensor<T>::zeros(q.shape, false);
    std::vector<T>& d = out.data();
    for (size_t i = 0; i < d.size(); ++i) {
        const double s = double(q.scales[i / size_t(q.block_size)]);
        d[i] = T(double(q.code_at(i)) * s);
    }
    return out;
}

// Frozen quantized base for QLoRA-style tuning. Construction quantizes every
// 2-D registry weight, overwrites the registry values with their dequantized
// form (so direct reads and saved checkpoints agree with the forward pass),
// freezes them, and installs itself as the model's hook so the forward pass
// reconstructs weights from the codes on the fly. Adapters attach on top via
// TunedModel, which chains through this hook. The object must outlive the
// model; it is the authority for the quantized codes.
template <class T>
class QloraBase : public LinearHook<T> {
  public:
    QloraBase(Model<T>& model, int bits, int block_size = 64) {
        if (model.hook)
            fail_validation("qlora: model already has a hook attached; wrap before tuners");
        for (const auto& [path, t] : model.params.items()) {
            Tensor<T> handle = t;
            handle.set_requires_grad(false);
            if (t.shape().size() != 2) continue;
            QuantizedTensor q = quantize_blockwise(t, bits, block_size);
            handle.data() = dequantize<T>(q).data();
            entries_.emplace(path, std::move(q));
        }
        if (entries_.empty()) fail("qlora: model has no 2-D weights to quantize");
        model.hook = this;
    }

    QloraBase(const QloraBase&) = delete;
    QloraBase& operator=(const QloraBase&) = delete;

    Tensor<T> weight(const std::string& path, const Tensor<T>& w) override {
        auto it = entries_.find(path);
        if (it == entries_.end()) return w;
        return dequantize<T>(it->second);
    }
    Tensor<T> linear(const std::string& path, const Tensor<T>& x, const Tensor<T>& w) override {
        return matmul(x, weight(path, w));
    }
    Tensor<T> embed(const std::string& path, const Tensor<T>& table,
                    const TokenBatch& ids) override {
        return embedding(weight(path, table), ids);
    }

    bool has(const std::string& path) const { return entries_.count(path) != 0; }
    const QuantizedTensor& quantized(const std::string& path) const {
        auto it = entries_.find(path);
        if (it == entries_.end()) fail("no quantized entry for: " + path);
        return it->second;
    }
    const std::map<std::string, QuantizedTensor>& entries() const { return entries_; }

  private:
    std::map<std::string, QuantizedTensor> entries_;
};

template <class T>
std::unique_ptr<QloraBase<T>> qlora_wrap(Model<T>& model, int bits, int block_size = 64) {
    return std::make_unique<QloraBase<T>>(model, bits, block_size);
}

}  // namespace tunekit
