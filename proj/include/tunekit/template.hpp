#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tunekit/common.hpp"
#include "tunekit/data.hpp"

namespace tunekit {

// Special token ids sit directly above the 256 byte values.
constexpr int kBosId = 256;
constexpr int kEosId = 257;
constexpr int kImStartId = 258;
constexpr int kImEndId = 259;
constexpr int kImageId = 260;
constexpr int kIgnoreLabel = -100;

enum class ToolPromptStyle { react, toolbench };

inline ToolPromptStyle tool_style_from(const std::string& s) {
    if (s == "react") return ToolPromptStyle::react;
    if (s == "toolbench") return ToolPromptStyle::toolbench;
    fail_validation("unknown tool prompt style: " + s);
}

inline std::string to_string(ToolPromptStyle s) {
    return s == ToolPromptStyle::react ? "react" : "toolbench";
}

enum class Role { system, user, assistant, tool_observation };

struct Segment {
    Role role;
    std::string text;
    bool train = false;  // loss is computed only on train-flagged segments
};

// Chat grammar: each turn is im_start + role name + newline + content +
// im_end + newline; bos opens the conversation and eos closes it.
struct TemplateSpec {
    std::string system_begin = "<|im_start|>system\n";
    std::string system_end = "<|im_end|>\n";
    std::string user_begin = "<|im_start|>user\n";
    std::string user_end = "<|im_end|>\n";
    std::string assistant_begin = "<|im_start|>assistant\n";
    std::string assistant_end = "<|im_end|>\n";
    ToolPromptStyle tool_prompt_style = ToolPromptStyle::react;
    BboxType bbox_output_type = BboxType::norm_1000;
    std::string default_system = "You are a helpful assistant.";
    std::string bos = "<|bos|>";
    std::string eos = "<|eos|>";
    std::string im_start = "<|im_start|>";
    std::string im_end = "<|im_end|>";
    std::string image = "<image>";

    void validate() const {
        for (const std::string* s :
             {&system_begin, &system_end, &user_begin, &user_end, &assistant_begin,
              &assistant_end, &bos, &eos, &im_start, &im_end, &image})
            if (s->empty()) fail_validation("template marker strings must be non-empty");
        // role openers must differ so segments stay identifiable in the text
        if (system_begin == user_begin || system_begin == assistant_begin ||
            user_begin == assistant_begin)
            fail_validation("role begin markers must be distinct");
        if (system_begin == system_end || user_begin == user_end ||
            assistant_begin == assistant_end)
            fail_validation("role begin and end markers must be distinct");
    }
};

// ---------------------------------------------------------------------------
// byte tokenizer with atomic special markers

struct SpecialTokens {
    // marker string -> id, kept sorted longest-first for greedy matching
    std::vector<std::pair<std::string, int>> entries;
};

inline SpecialTokens specials_from(const TemplateSpec& tpl) {
    SpecialTokens s;
    s.entries = {{tpl.bos, kBosId},
                 {tpl.eos, kEosId},
                 {tpl.im_start, kImStartId},
                 {tpl.im_end, kImEndId},
                 {tpl.image, kImageId}};
    std::sort(s.entries.begin(), s.entries.end(),
              [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
    return s;
}

struct TokenSpan {
    size_t begin = 0;  // byte offsets into the source text
    size_t end = 0;
};

// One token per byte (id = byte value); special markers become single tokens.
// Offsets partition the input, so decode(encode(text)) == text.
inline std::pair<std::vector<int>, std::vector<TokenSpan>> tokenize_with_offsets(
    const std::string& text, const SpecialTokens& specials) {
    std::vector<int> ids;
    std::vector<TokenSpan> spans;
    size_t i = 0;
    while (i < text.size()) {
        bool matched = false;
        for (const auto& [marker, id] : specials.entries) {
            if (text.compare(i, marker.size(), marker) == 0) {
                ids.push_back(id);
                spans.push_back({i, i + marker.size()});
                i += marker.size();
                matched = true;
                break;
            }
        }
        if (matched) continue;
        ids.push_back(int(static_cast<unsigned char>(text[i])));
        spans.push_back({i, i + 1});
        ++i;
    }
    return {std::move(ids), std::move(spans)};
}

inline std::string decode(const std::vector<int>& ids, const SpecialTokens& specials) {
    std::string out;
    for (int id : ids) {
        if (id >= 0 && id < 256) {
            out.push_back(char(static_cast<unsigned char>(id)));
            continue;
        }
        bool found = false;
        for (const auto& [marker, mid] : specials.entries)
            if (mid == id) {
                out += marker;
                found = true;
                break;
            }
        if (!found) fail("decode: unknown token id " + std::to_string(id));
    }
    return out;
}

// ---------------------------------------------------------------------------
// rendering

namespace detail {

inline std::string format_coord(double v) {
    if (v == std::floor(v) && std::abs(v) < 1e15) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
        return buf;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

inline std::string format_bbox(const std::array<double, 4>& b) {
    return "[" + format_coord(b[0]) + "," + format_coord(b[1]) + "," + format_coord(b[2]) +
           "," + format_coord(b[3]) + "]";
}

inline std::string tool_field(const json& tool, const char* key) {
    const json& fn = tool.contains("function") ? tool["function"] : tool;
    if (!fn.contains(key)) return "";
    if (fn[key].is_string()) return fn[key].get<std::string>();
    return fn[key].dump();
}

inline std::string render_tools(const std::vector<json>& tools, ToolPromptStyle style) {
    std::string out;
    if (style == ToolPromptStyle::react) {
        out += "\n\nAnswer the following questions as best you can. "
               "You have access to the following tools:\n\n";
        for (const json& t : tools) {
            std::string params = tool_field(t, "parameters");
            if (params.empty()) params = "{}";
            out += tool_field(t, "name") + ": " + tool_field(t, "description") +
                   ", parameters: " + params + "\n";
        }
        out += "\nUse the following format:\n\n"
               "Thought: reason about what to do next\n"
               "Action: the tool to use\n"
               "Action Input: the tool arguments as JSON\n"
               "Observation: the tool result\n"
               "... (Thought/Action/Action Input/Observation can repeat)\n"
               "Thought: I now know the final answer\n"
               "Final Answer: the answer to the original question\n\n"
               "Begin!";
    } else {
        out += "\n\nYou can use the following tools:\n";
        int n = 0;
        for (const json& t : tools) {
            std::string params = tool_field(t, "parameters");
            if (params.empty()) params = "{}";
            out += std::to_string(++n) + ". " + tool_field(t, "name") + ": " +
                   tool_field(t, "description") + "\n   schema: " + params + "\n";
        }
        out += "Call a tool by emitting its name and arguments.";
    }
    return out;
}

// Substitutes <ref-object> with captions and <bbox> with converted boxes.
// Each placeholder kind consumes objects in order with its own counter.
inline std::string substitute_objects(const std::string& text, const StandardRecord& rec,
                                      const TemplateSpec& tpl, size_t& ref_idx,
                                      size_t& bbox_idx) {
    static const std::string kRef = "<ref-object>";
    static const std::string kBox = "<bbox>";
    std::string out;
    size_t i = 0;
    while (i < text.size()) {
        if (text.compare(i, kRef.size(), kRef) == 0) {
            if (ref_idx >= rec.objects.size())
                fail_validation("placeholder count mismatch with objects list");
            out += rec.objects[ref_idx++].caption;
            i += kRef.size();
        } else if (text.compare(i, kBox.size(), kBox) == 0) {
            if (bbox_idx >= rec.objects.size())
                fail_validation("placeholder count mismatch with objects list");
            const GroundingObject& o = rec.objects[bbox_idx++];
            std::optional<std::pair<int, int>> size;
            if (size_t(o.image) < rec.image_sizes.size())
                size = rec.image_sizes[size_t(o.image)];
            out += format_bbox(convert_bbox(o.bbox, o.bbox_type, tpl.bbox_output_type, size));
            i += kBox.size();
        } else {
            out.push_back(text[i]);
            ++i;
        }
    }
    return out;
}

}  // namespace detail

// Renders the conversation as ordered segments: system (with tools folded
// in), history pairs, query, response. include_response=false stops after
// the assistant opener, which is the generation prompt.
inline std::vector<Segment> render(const StandardRecord& rec, const TemplateSpec& tpl,
                                   bool include_response = true,
                                   int drop_history_pairs = 0) {
    tpl.validate();
    rec.validate();
    std::vector<Segment> segs;

    std::string sys = rec.system ? *rec.system : tpl.default_system;
    if (!rec.tools.empty()) sys += detail::render_tools(rec.tools, tpl.tool_prompt_style);
    segs.push_back({Role::system, tpl.bos + tpl.system_begin + sys + tpl.system_end, false});

    size_t ref_idx = 0, bbox_idx = 0;
    const size_t start = size_t(std::min<size_t>(size_t(std::max(drop_history_pairs, 0)),
                                                 rec.history.size()));
    for (size_t h = start; h < rec.history.size(); ++h) {
        segs.push_back(
            {Role::user, tpl.user_begin + rec.history[h].first + tpl.user_end, false});
        segs.push_back({Role::assistant,
                        tpl.assistant_begin + rec.history[h].second + tpl.assistant_end,
                        true});
    }

    const std::string query = detail::substitute_objects(rec.query, rec, tpl, ref_idx, bbox_idx);
    segs.push_back({Role::user, tpl.user_begin + query + tpl.user_end, false});

    if (include_response) {
        const std::string response =
            detail::substitute_objects(rec.response, rec, tpl, ref_idx, bbox_idx);
        segs.push_back({Role::assistant,
                        tpl.assistant_begin + response + tpl.assistant_end + tpl.eos, true});
        // every declared object must be consumed by at least one placeholder kind
        if (std::max(ref_idx, bbox_idx) != rec.objects.size())
            fail_validation("placeholder count mismatch with objects list");
    } else {
        segs.push_back({Role::assistant, tpl.assistant_begin, false});
    }
    return segs;
}

inline std::vector<Segment> render_prompt(const StandardRecord& rec, const TemplateSpec& tpl) {
    return render(rec, tpl, false);
}

inline std::string segments_text(const std::vector<Segment>& segs) {
    std::string out;
    for (const Segment& s : segs) out += s.text;
    return out;
}

// ---------------------------------------------------------------------------
// loss-scale

struct WeightSpan {
    size_t begin = 0;
    size_t end = 0;  // byte range over the concatenated segment text
    double weight = 1.0;
};

// Agent-training weights: the content after a field marker to end of line
// gets 3.0, the literal observation marker gets 2.0, other trained bytes get
// the base weight. Markers match at line starts only.
inline std::vector<WeightSpan> loss_scale_map(const std::vector<Segment>& segments,
                                              double base_weight = 1.0) {
    static const std::vector<std::string> kFieldMarkers = {
        "Action Input:", "Arguments:", "Command:", "Action:", "Name:", "Tool:"};
    static const std::string kObservation = "Observation:";

    std::vector<WeightSpan> spans;
    size_t offset = 0;
    for (const Segment& seg : segments) {
        if (!seg.train) {
            offset += seg.text.size();
            continue;
        }
        spans.push_back({offset, offset + seg.text.size(), base_weight});
        const std::string& t = seg.text;
        size_t line = 0;
        while (line < t.size()) {
            size_t eol = t.find('\n', line);
            if (eol == std::string::npos) eol = t.size();
            bool matched = false;
            for (const std::string& m : kFieldMarkers) {
                if (t.compare(line, m.size(), m) == 0) {
                    if (line + m.size() < eol)
                        spans.push_back({offset + line + m.size(), offset + eol, 3.0});
                    matched = true;
                    break;
                }
            }
            if (!matched && t.compare(line, kObservation.size(), kObservation) == 0)
                spans.push_back({offset + line, offset + line + kObservation.size(), 2.0});
            line = eol + 1;
        }
        offset += seg.text.size();
    }
    return spans;
}

// Per-byte weights over the concatenated text: zero outside every span,
// overlaps resolved by maximum.
inline std::vector<double> flatten_weight_spans(const std::vector<WeightSpan>& spans,
                                                size_t text_len) {
    std::vector<double> w(text_len, 0.0);
    for (const WeightSpan& s : spans)
        for (size_t i = s.begin; i < s.end && i < text_len; ++i) w[i] = std::max(w[i], s.weight);
    return w;
}

// ---------------------------------------------------------------------------
// encoding

struct SegmentSpan {
    Role role;
    bool train = false;
    size_t begin = 0;
    size_t end = 0;  // byte range
};

struct EncodedSample {
    std::vector<int> input_ids;
    std::vector<int> labels;          // kIgnoreLabel where no loss applies
    std::vector<double> loss_weights;  // 0 exactly where labels are ignored
    std::vector<SegmentSpan> spans;
    std::string text;  // the rendered conversation the ids were cut from
};

// Tokens from all segments concatenated; labels are next-token targets on
// train-flagged segments; each weight comes from the byte at its target
// token's start offset. Oldest history pairs are dropped first when the
// sample runs past max_length.
inline EncodedSample encode(const StandardRecord& rec, const TemplateSpec& tpl, int max_length,
                            bool loss_scale_enabled) {
    if (max_length < 1) fail_validation("max_length must be >= 1");
    const SpecialTokens specials = specials_from(tpl);

    std::vector<Segment> segs;
    std::vector<int> ids;
    std::vector<TokenSpan> tok_spans;
    for (int drop = 0;; ++drop) {
        segs = render(rec, tpl, true, drop);
        const std::string text = segments_text(segs);
        auto [i, s] = tokenize_with_offsets(text, specials);
        ids = std::move(i);
        tok_spans = std::move(s);
        if (int(ids.size()) <= max_length) break;
        if (size_t(drop) >= rec.history.size())
            fail_validation("sample too long after history truncation: " +
                            std::to_string(ids.size()) + " tokens > max_length " +
                            std::to_string(max_length));
    }

    EncodedSample out;
    out.text = segments_text(segs);
    out.input_ids = ids;

    size_t offset = 0;
    for (const Segment& s : segs) {
        out.spans.push_back({s.role, s.train, offset, offset + s.text.size()});
        offset += s.text.size();
    }

    std::vector<double> byte_w;
    if (loss_scale_enabled) {
        byte_w = flatten_weight_spans(loss_scale_map(segs, rec.response_weight),
                                      out.text.size());
    } else {
        byte_w.assign(out.text.size(), 0.0);
        for (const SegmentSpan& sp : out.spans)
            if (sp.train)
                for (size_t i = sp.begin; i < sp.end; ++i) byte_w[i] = 1.0;
    }
    auto trained_byte = [&](size_t b) {
        for (const SegmentSpan& sp : out.spans)
            if (sp.train && b >= sp.begin && b < sp.end) return true;
        return false;
    };

    out.labels.assign(ids.size(), kIgnoreLabel);
    out.loss_weights.assign(ids.size(), 0.0);
    for (size_t i = 0; i + 1 < ids.size(); ++i) {
        const size_t target_start = tok_spans[i + 1].begin;
        if (!trained_byte(target_start)) continue;
        out.labels[i] = ids[i + 1];
        out.loss_weights[i] = byte_w[target_start];
    }
    return out;
}

}  // namespace tunekit
