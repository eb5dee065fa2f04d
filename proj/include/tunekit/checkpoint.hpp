#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tunekit/model.hpp"
#include "tunekit/quant.hpp"
#include "tunekit/template.hpp"
#include "tunekit/tuners.hpp"

namespace tunekit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian and this port assumes a LE host");

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr char kWeightsMagic[6] = {'T', 'K', 'P', 'T', '1', '\n'};

inline uint32_t crc32_bytes(const uint8_t* p, size_t n) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace detail {

template <class T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
    return "f32";
}
template <>
inline const char* dtype_name<double>() {
    return "f64";
}
template <>
inline const char* dtype_name<int64_t>() {
    return "i64";
}

inline size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64" || dtype == "i64") return 8;
    fail_validation("unknown checkpoint dtype: " + dtype);
}

template <class T>
std::vector<uint8_t> to_bytes(const std::vector<T>& v) {
    std::vector<uint8_t> out(v.size() * sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), v.data(), out.size());
    return out;
}

template <class T>
std::vector<T> from_bytes(const uint8_t* p, size_t byte_len) {
    if (byte_len % sizeof(T) != 0) fail("checkpoint payload length not a multiple of element size");
    std::vector<T> out(byte_len / sizeof(T));
    if (byte_len) std::memcpy(out.data(), p, byte_len);
    return out;
}

inline void append_u64_le(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

inline void append_u32_le(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

inline uint64_t read_u64_le(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}

inline uint32_t read_u32_le(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

// One tensor inside a weights file. Dense entries hold raw little-endian
// element bytes; quantized entries hold the per-block float32 scales followed
// by the packed codes, with dtype naming what they dequantize to.
struct WeightsEntry {
    std::string name;
    std::string dtype;
    std::vector<int> shape;
    std::optional<std::pair<int, int>> quant;  // bits, block_size
    std::vector<uint8_t> payload;

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) n *= size_t(d);
        return n;
    }
    // count of full-precision values on disk: all elements when dense, only
    // the per-block scales when quantized
    size_t stored_floats() const {
        if (!quant) return numel();
        const size_t bs = size_t(quant->second);
        return (numel() + bs - 1) / bs;
    }
};

template <class T>
WeightsEntry dense_entry(const std::string& name, const std::vector<int>& shape,
                         const std::vector<T>& values) {
    WeightsEntry e;
    e.name = name;
    e.dtype = detail::dtype_name<T>();
    e.shape = shape;
    e.payload = detail::to_bytes(values);
    return e;
}

template <class T>
WeightsEntry quant_entry(const std::string& name, const QuantizedTensor& q) {
    q.validate();
    WeightsEntry e;
    e.name = name;
    e.dtype = detail::dtype_name<T>();
    e.shape = q.shape;
    e.quant = {q.bits, q.block_size};
    e.payload = detail::to_bytes(q.scales);
    e.payload.insert(e.payload.end(), q.packed.begin(), q.packed.end());
    return e;
}

inline QuantizedTensor quant_from_entry(const WeightsEntry& e) {
    if (!e.quant) fail("tensor is not quantized: " + e.name);
    QuantizedTensor q;
    q.shape = e.shape;
    q.bits = e.quant->first;
    q.block_size = e.quant->second;
    const size_t scale_bytes = ((e.numel() + size_t(q.block_size) - 1) / size_t(q.block_size)) * 4;
    if (e.payload.size() < scale_bytes) fail("quantized payload shorter than its scale table");
    q.scales = detail::from_bytes<float>(e.payload.data(), scale_bytes);
    q.packed.assign(e.payload.begin() + long(scale_bytes), e.payload.end());
    q.validate();
    return q;
}

template <class T>
std::vector<T> dense_values(const WeightsEntry& e) {
    if (e.quant) fail("tensor is quantized, not dense: " + e.name);
    if (e.dtype != detail::dtype_name<T>())
        fail_validation("checkpoint dtype mismatch for " + e.name + ": stored " + e.dtype +
                        ", requested " + detail::dtype_name<T>());
    std::vector<T> v = detail::from_bytes<T>(e.payload.data(), e.payload.size());
    if (v.size() != e.numel()) fail("checkpoint payload size disagrees with shape for " + e.name);
    return v;
}

// Binary layout: magic "TKPT1\n", u64 LE header length, minified JSON header
// mapping tensor name to {dtype, shape, byte_offset, byte_len, quant?}, the
// payload region (entries laid out name-sorted, offsets relative to the
// payload start), and a trailing u32 LE CRC32 of the payload region.
inline void write_weights_file(const std::string& path, std::vector<WeightsEntry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const WeightsEntry& a, const WeightsEntry& b) { return a.name < b.name; });
    for (size_t i = 1; i < entries.size(); ++i)
        if (entries[i].name == entries[i - 1].name)
            fail("duplicate tensor in weights file: " + entries[i].name);

    nlohmann::json header = nlohmann::json::object();
    std::vector<uint8_t> payload;
    for (const WeightsEntry& e : entries) {
        nlohmann::json meta = {{"dtype", e.dtype},
                               {"shape", e.shape},
                               {"byte_offset", payload.size()},
                               {"byte_len", e.payload.size()}};
        if (e.quant) meta["quant"] = {{"bits", e.quant->first}, {"block_size", e.quant->second}};
        header[e.name] = std::move(meta);
        payload.insert(payload.end(), e.payload.begin(), e.payload.end());
    }
    const std::string header_text = header.dump();

    std::vector<uint8_t> file;
    file.insert(file.end(), kWeightsMagic, kWeightsMagic + sizeof(kWeightsMagic));
    detail::append_u64_le(file, header_text.size());
    file.insert(file.end(), header_text.begin(), header_text.end());
    file.insert(file.end(), payload.begin(), payload.end());
    detail::append_u32_le(file, crc32_bytes(payload.data(), payload.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(file.data()), std::streamsize(file.size()));
    if (!out) fail("short write to: " + path);
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_validation("cannot open file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) fail("short write to: " + path);
}

inline std::vector<WeightsEntry> read_weights_file(const std::string& path) {
    const std::vector<uint8_t> file = read_file_bytes(path);
    if (file.size() < sizeof(kWeightsMagic) + 8 + 4) fail_validation("truncated weights file: " + path);
    if (std::memcmp(file.data(), kWeightsMagic, sizeof(kWeightsMagic)) != 0)
        fail_validation("bad magic in weights file: " + path);
    const uint64_t header_len = detail::read_u64_le(file.data() + sizeof(kWeightsMagic));
    const size_t header_off = sizeof(kWeightsMagic) + 8;
    if (header_len > file.size() - header_off - 4)
        fail_validation("truncated weights file: " + path);
    const size_t payload_off = header_off + header_len;
    const size_t payload_len = file.size() - payload_off - 4;

    const uint32_t stored_crc = detail::read_u32_le(file.data() + file.size() - 4);
    const uint32_t actual_crc = crc32_bytes(file.data() + payload_off, payload_len);
    if (stored_crc != actual_crc)
        fail_validation("weights file checksum mismatch (corrupted payload): " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(file.begin() + long(header_off),
                                       file.begin() + long(payload_off));
    } catch (const nlohmann::json::parse_error& e) {
        fail_validation("bad weights file header: " + std::string(e.what()));
    }
    if (!header.is_object()) fail_validation("weights file header is not an object");

    std::vector<WeightsEntry> entries;
    for (const auto& [name, meta] : header.items()) {
        WeightsEntry e;
        e.name = name;
        e.dtype = meta.at("dtype").get<std::string>();
        detail::dtype_size(e.dtype);
        e.shape = meta.at("shape").get<std::vector<int>>();
        const uint64_t off = meta.at("byte_offset").get<uint64_t>();
        const uint64_t len = meta.at("byte_len").get<uint64_t>();
        if (len > payload_len || off > payload_len - len)
            fail_validation("tensor payload out of bounds: " + name);
        if (meta.count("quant"))
            e.quant = {meta["quant"].at("bits").get<int>(),
                       meta["quant"].at("block_size").get<int>()};
        e.payload.assign(file.begin() + long(payload_off + off),
                         file.begin() + long(payload_off + off + len));
        entries.push_back(std::move(e));
    }
    std::sort(entries.begin(), entries.end(),
              [](const WeightsEntry& a, const WeightsEntry& b) { return a.name < b.name; });
    return entries;
}

// ---------------------------------------------------------------------------
// config.json serialization

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
            {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
}

inline nlohmann::json template_to_json(const TemplateSpec& t) {
    return {{"system_begin", t.system_begin},
            {"system_end", t.system_end},
            {"user_begin", t.user_begin},
            {"user_end", t.user_end},
            {"assistant_begin", t.assistant_begin},
            {"assistant_end", t.assistant_end},
            {"tool_prompt_style", to_string(t.tool_prompt_style)},
            {"bbox_output_type", to_string(t.bbox_output_type)},
            {"default_system", t.default_system},
            {"bos", t.bos},
            {"eos", t.eos},
            {"im_start", t.im_start},
            {"im_end", t.im_end},
            {"image", t.image}};
}

inline TemplateSpec template_from_json(const nlohmann::json& j) {
    TemplateSpec t;
    t.system_begin = j.at("system_begin").get<std::string>();
    t.system_end = j.at("system_end").get<std::string>();
    t.user_begin = j.at("user_begin").get<std::string>();
    t.user_end = j.at("user_end").get<std::string>();
    t.assistant_begin = j.at("assistant_begin").get<std::string>();
    t.assistant_end = j.at("assistant_end").get<std::string>();
    t.tool_prompt_style = tool_style_from(j.at("tool_prompt_style").get<std::string>());
    t.bbox_output_type = bbox_type_from(j.at("bbox_output_type").get<std::string>());
    t.default_system = j.at("default_system").get<std::string>();
    t.bos = j.at("bos").get<std::string>();
    t.eos = j.at("eos").get<std::string>();
    t.im_start = j.at("im_start").get<std::string>();
    t.im_end = j.at("im_end").get<std::string>();
    t.image = j.at("image").get<std::string>();
    t.validate();
    return t;
}

inline TunerVariant tuner_variant_from(const std::string& s) {
    if (s == "full") return TunerVariant::full;
    if (s == "lora") return TunerVariant::lora;
    if (s == "lisa") return TunerVariant::lisa;
    if (s == "llamapro") return TunerVariant::llamapro;
    fail_validation("unknown tuner variant: " + s);
}

inline nlohmann::json tuner_config_to_json(const std::string& name, const TunerConfig& c) {
    return {{"name", name},
            {"variant", tuner_variant_name(c.variant)},
            {"rank", c.rank},
            {"alpha", c.alpha},
            {"targets", c.targets},
            {"scaling", c.scaling == LoraScaling::rs ? "rs" : "standard"},
            {"use_dora", c.use_dora},
            {"seed", c.seed},
            {"activated_layers", c.activated_layers},
            {"reselect_interval", c.reselect_interval},
            {"new_blocks", c.new_blocks}};
}

inline std::pair<std::string, TunerConfig> tuner_config_from_json(const nlohmann::json& j) {
    TunerConfig c;
    c.variant = tuner_variant_from(j.at("variant").get<std::string>());
    c.rank = j.at("rank").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.targets = j.at("targets").get<std::string>();
    const std::string scaling = j.at("scaling").get<std::string>();
    if (scaling != "rs" && scaling != "standard")
        fail_validation("unknown lora scaling: " + scaling);
    c.scaling = scaling == "rs" ? LoraScaling::rs : LoraScaling::standard;
    c.use_dora = j.at("use_dora").get<bool>();
    c.seed = j.at("seed").get<uint64_t>();
    c.activated_layers = j.at("activated_layers").get<int>();
    c.reselect_interval = j.at("reselect_interval").get<int>();
    c.new_blocks = j.at("new_blocks").get<int>();
    c.validate();
    return {j.at("name").get<std::string>(), c};
}

inline nlohmann::json specials_to_json(const TemplateSpec& tpl) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [text, id] : specials_from(tpl).entries)
        out.push_back({{"text", text}, {"id", id}});
    return out;
}

inline nlohmann::json read_config_json(const std::string& dir) {
    const std::string path = dir + "/config.json";
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::parse_error& e) {
        fail_validation("bad config.json in " + dir + ": " + std::string(e.what()));
    }
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
        fail_validation("checkpoint format_version " + std::to_string(version) +
                        " unsupported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
    return j;
}

inline void write_config_json(const std::string& dir, const nlohmann::json& j) {
    const std::string text = j.dump(2) + "\n";
    write_file_bytes(dir + "/config.json",
                     std::vector<uint8_t>(text.begin(), text.end()));
}

inline void check_tensor_manifest(const nlohmann::json& config,
                                  const std::vector<WeightsEntry>& entries) {
    std::vector<std::string> named = config.at("tensors").get<std::vector<std::string>>();
    std::sort(named.begin(), named.end());
    std::vector<std::string> present;
    for (const WeightsEntry& e : entries) present.push_back(e.name);
    if (named != present)
        fail_validation("config.json tensor list disagrees with weights.bin contents");
}

// ---------------------------------------------------------------------------
// model checkpoints

template <class T>
void save_model_checkpoint(const Model<T>& model, const TemplateSpec& tpl, const std::string& dir,
                           const std::map<std::string, QuantizedTensor>* quantized = nullptr) {
    std::filesystem::create_directories(dir);
    std::vector<WeightsEntry> entries;
    std::vector<std::string> names;
    for (const auto& [path, t] : model.params.items()) {
        Tensor<T> handle = t;
        if (quantized && quantized->count(path))
            entries.push_back(quant_entry<T>(path, quantized->at(path)));
        else
            entries.push_back(dense_entry(path, handle.shape(), handle.data()));
        names.push_back(path);
    }
    std::sort(names.begin(), names.end());

    nlohmann::json config = {{"format_version", kCheckpointFormatVersion},
                             {"kind", "model"},
                             {"model", model_config_to_json(model.config)},
                             {"template", template_to_json(tpl)},
                             {"specials", specials_to_json(tpl)},
                             {"tensors", names}};
    write_config_json(dir, config);
    write_weights_file(dir + "/weights.bin", std::move(entries));
}

template <class T>
Model<T> load_model_checkpoint(const std::string& dir, TemplateSpec* tpl_out = nullptr,
                               std::map<std::string, QuantizedTensor>* quantized_out = nullptr) {
    const nlohmann::json config = read_config_json(dir);
    if (config.at("kind").get<std::string>() != "model")
        fail_validation("expected a model checkpoint in " + dir + ", found kind \"" +
                        config.at("kind").get<std::string>() + "\"");
    const ModelConfig mc = model_config_from_json(config.at("model"));
    if (tpl_out) *tpl_out = template_from_json(config.at("template"));

    std::vector<WeightsEntry> entries = read_weights_file(dir + "/weights.bin");
    check_tensor_manifest(config, entries);

    Model<T> model = build_model<T>(mc);
    std::map<std::string, const WeightsEntry*> by_name;
    for (const WeightsEntry& e : entries) by_name[e.name] = &e;
    for (const auto& [path, t] : model.params.items()) {
        auto it = by_name.find(path);
        if (it == by_name.end()) fail_validation("checkpoint missing tensor: " + path);
        const WeightsEntry& e = *it->second;
        Tensor<T> handle = t;
        if (e.shape != handle.shape()) fail_validation("checkpoint shape mismatch for " + path);
        if (e.quant) {
            if (e.dtype != detail::dtype_name<T>())
                fail_validation("checkpoint dtype mismatch for " + path + ": stored " + e.dtype +
                                ", requested " + detail::dtype_name<T>());
            QuantizedTensor q = quant_from_entry(e);
            handle.data() = dequantize<T>(q).data();
            if (quantized_out) quantized_out->emplace(path, std::move(q));
        } else {
            handle.data() = dense_values<T>(e);
        }
        by_name.erase(it);
    }
    if (!by_name.empty())
        fail_validation("checkpoint holds tensors unknown to the model: " + by_name.begin()->first);
    return model;
}

// ---------------------------------------------------------------------------
// adapter checkpoints: only the adapter tensors plus a reference to the base

template <class T>
void save_adapter_checkpoint(const TunedModel<T>& tuned, const std::string& base_ref,
                             const std::string& dir) {
    for (const auto& ad : tuned.adapters()) {
        if (ad.config.variant != TunerVariant::lora)
            fail_validation("only lora-family adapters fit an adapter checkpoint; save a full "
                            "model checkpoint for " +
                            std::string(tuner_variant_name(ad.config.variant)));
        if (ad.merged)
            fail_validation("unmerge adapter \"" + ad.name +
                            "\" before saving an adapter checkpoint");
    }
    std::filesystem::create_directories(dir);

    std::vector<WeightsEntry> entries;
    std::vector<std::string> names;
    nlohmann::json adapters = nlohmann::json::array();
    for (const auto& ad : tuned.adapters()) {
        adapters.push_back(tuner_config_to_json(ad.name, ad.config));
        for (const auto& e : ad.entries) {
            const std::string prefix = "adapters." + ad.name + "." + e.path + ".";
            Tensor<T> a = e.a, b = e.b;
            entries.push_back(dense_entry(prefix + "A", a.shape(), a.data()));
            entries.push_back(dense_entry(prefix + "B", b.shape(), b.data()));
            names.push_back(prefix + "A");
            names.push_back(prefix + "B");
            if (ad.config.use_dora) {
                Tensor<T> m = e.m;
                entries.push_back(dense_entry(prefix + "m", m.shape(), m.data()));
                names.push_back(prefix + "m");
            }
        }
    }
    std::sort(names.begin(), names.end());

    nlohmann::json config = {{"format_version", kCheckpointFormatVersion},
                             {"kind", "adapter"},
                             {"base_checkpoint", base_ref},
                             {"adapters", adapters},
                             {"tensors", names}};
    write_config_json(dir, config);
    write_weights_file(dir + "/weights.bin", std::move(entries));
}

struct AdapterCheckpointMeta {
    std::string base_checkpoint;
    std::vector<std::pair<std::string, TunerConfig>> adapters;
};

inline AdapterCheckpointMeta read_adapter_meta(const std::string& dir) {
    const nlohmann::json config = read_config_json(dir);
    if (config.at("kind").get<std::string>() != "adapter")
        fail_validation("expected an adapter checkpoint in " + dir + ", found kind \"" +
                        config.at("kind").get<std::string>() + "\"");
    AdapterCheckpointMeta meta;
    meta.base_checkpoint = config.at("base_checkpoint").get<std::string>();
    for (const nlohmann::json& j : config.at("adapters"))
        meta.adapters.push_back(tuner_config_from_json(j));
    return meta;
}

// resolves a base_checkpoint reference: absolute paths and paths valid from
// the working directory pass through, otherwise it is tried relative to the
// adapter checkpoint directory
inline std::string resolve_base_ref(const std::string& adapter_dir, const std::string& ref) {
    namespace fs = std::filesystem;
    if (fs::exists(fs::path(ref) / "config.json")) return ref;
    const fs::path sibling = fs::path(adapter_dir) / ref;
    if (fs::exists(sibling / "config.json")) return sibling.string();
    fail_validation("base checkpoint not reachable: " + ref);
}

template <class T>
std::unique_ptr<TunedModel<T>> load_adapter_checkpoint(const std::string& dir, Model<T> base) {
    AdapterCheckpointMeta meta = read_adapter_meta(dir);
    const nlohmann::json config = read_config_json(dir);
    std::vector<WeightsEntry> entries = read_weights_file(dir + "/weights.bin");
    check_tensor_manifest(config, entries);

    auto tuned = std::make_unique<TunedModel<T>>(std::move(base), meta.adapters);

    std::map<std::string, const WeightsEntry*> by_name;
    for (const WeightsEntry& e : entries) by_name[e.name] = &e;
    auto restore = [&](const std::string& name, Tensor<T> into) {
        auto it = by_name.find(name);
        if (it == by_name.end()) fail_validation("adapter checkpoint missing tensor: " + name);
        if (it->second->shape != into.shape())
            fail_validation("adapter checkpoint shape mismatch for " + name);
        into.data() = dense_values<T>(*it->second);
        by_name.erase(it);
    };
    for (auto& ad : tuned->adapters()) {
        for (const auto& e : ad.entries) {
            const std::string prefix = "adapters." + ad.name + "." + e.path + ".";
            restore(prefix + "A", e.a);
            restore(prefix + "B", e.b);
            if (ad.config.use_dora) restore(prefix + "m", e.m);
        }
    }
    if (!by_name.empty())
        fail_validation("adapter checkpoint holds unexpected tensor: " + by_name.begin()->first);
    return tuned;
}

// ---------------------------------------------------------------------------
// optimizer state: same container, entries are flat vectors plus a step count

template <class T>
void save_optimizer_state(
    const std::string& path, const std::vector<std::pair<std::string, std::vector<T>>>& entries,
    int step_count,
    const std::vector<std::pair<std::string, std::vector<double>>>& f64_entries = {}) {
    std::vector<WeightsEntry> out;
    for (const auto& [name, vals] : entries) {
        if (vals.empty()) continue;
        out.push_back(dense_entry(name, {int(vals.size())}, vals));
    }
    for (const auto& [name, vals] : f64_entries) {
        if (vals.empty()) continue;
        out.push_back(dense_entry(name, {int(vals.size())}, vals));
    }
    out.push_back(dense_entry<int64_t>("step_count", {1}, {int64_t(step_count)}));
    write_weights_file(path, std::move(out));
}

// entries prefixed "galore." route to f64_out when given; the rest load as T
template <class T>
int load_optimizer_state(const std::string& path,
                         std::vector<std::pair<std::string, std::vector<T>>>& entries_out,
                         std::vector<std::pair<std::string, std::vector<double>>>* f64_out = nullptr) {
    entries_out.clear();
    if (f64_out) f64_out->clear();
    int step_count = -1;
    for (const WeightsEntry& e : read_weights_file(path)) {
        if (e.name == "step_count") {
            step_count = int(dense_values<int64_t>(e).at(0));
            continue;
        }
        if (f64_out && e.name.rfind("galore.", 0) == 0) {
            f64_out->emplace_back(e.name, dense_values<double>(e));
            continue;
        }
        entries_out.emplace_back(e.name, dense_values<T>(e));
    }
    if (step_count < 0) fail_validation("optimizer state missing step_count: " + path);
    return step_count;
}

// ---------------------------------------------------------------------------
// export: merge adapters into their base and/or post-training-quantize

struct QuantSpec {
    int bits = 8;
    int block_size = 64;
};

struct ExportReport {
    bool merged = false;
    bool quantized = false;
    size_t float_count_before = 0;
    size_t float_count_after = 0;
    uint64_t weight_bytes_before = 0;
    uint64_t weight_bytes_after = 0;
};

namespace detail {

inline size_t stored_float_count(const std::string& weights_path) {
    size_t n = 0;
    for (const WeightsEntry& e : read_weights_file(weights_path)) n += e.stored_floats();
    return n;
}

inline uint64_t file_bytes(const std::string& path) {
    return uint64_t(std::filesystem::file_size(path));
}

}  // namespace detail

template <class T>
ExportReport export_checkpoint(const std::string& src_dir, const std::string& dst_dir,
                               bool merge_lora, const std::optional<QuantSpec>& quant) {
    namespace fs = std::filesystem;
    const nlohmann::json src_config = read_config_json(src_dir);
    const std::string kind = src_config.at("kind").get<std::string>();

    ExportReport report;
    report.weight_bytes_before = detail::file_bytes(src_dir + "/weights.bin");
    report.float_count_before = detail::stored_float_count(src_dir + "/weights.bin");

    if (!merge_lora && !quant) {
        fs::create_directories(dst_dir);
        for (const char* name : {"config.json", "weights.bin", "optimizer_state.bin"}) {
            const std::string src = src_dir + "/" + name;
            if (fs::exists(src)) write_file_bytes(dst_dir + "/" + name, read_file_bytes(src));
        }
        report.weight_bytes_after = detail::file_bytes(dst_dir + "/weights.bin");
        report.float_count_after = report.float_count_before;
        return report;
    }

    Model<T> model;
    TemplateSpec tpl;
    if (merge_lora) {
        if (kind != "adapter")
            fail_validation("merge_lora requires an adapter checkpoint (full, lisa and llamapro "
                            "runs save full model checkpoints with nothing to merge)");
        AdapterCheckpointMeta meta = read_adapter_meta(src_dir);
        const std::string base_dir = resolve_base_ref(src_dir, meta.base_checkpoint);
        report.weight_bytes_before += detail::file_bytes(base_dir + "/weights.bin");
        report.float_count_before += detail::stored_float_count(base_dir + "/weights.bin");
        Model<T> base = load_model_checkpoint<T>(base_dir, &tpl);
        auto tuned = load_adapter_checkpoint<T>(src_dir, std::move(base));
        for (const auto& ad : tuned->adapters()) tuned->merge(ad.name);
        model = std::move(tuned->model());
        model.hook = nullptr;
        report.merged = true;
    } else {
        if (kind != "model")
            fail_validation("quantization without merge_lora requires a model checkpoint");
        model = load_model_checkpoint<T>(src_dir, &tpl);
    }

    std::map<std::string, QuantizedTensor> qmap;
    if (quant) {
        for (const auto& [path, t] : model.params.items()) {
            Tensor<T> handle = t;
            if (handle.shape().size() != 2) continue;
            qmap.emplace(path, quantize_blockwise(handle, quant->bits, quant->block_size));
        }
        report.quantized = true;
    }
    save_model_checkpoint(model, tpl, dst_dir, qmap.empty() ? nullptr : &qmap);

    report.weight_bytes_after = detail::file_bytes(dst_dir + "/weights.bin");
    report.float_count_after = detail::stored_float_count(dst_dir + "/weights.bin");
    return report;
}

}  // namespace tunekit
