#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tunekit/common.hpp"

namespace tunekit {

using json = nlohmann::json;

enum class BboxType { real, norm_1000, norm_1 };

inline BboxType bbox_type_from(const std::string& s) {
    if (s == "real") return BboxType::real;
    if (s == "norm_1000") return BboxType::norm_1000;
    if (s == "norm_1") return BboxType::norm_1;
    fail_validation("unknown bbox_type: " + s);
}

inline std::string to_string(BboxType t) {
    switch (t) {
        case BboxType::real: return "real";
        case BboxType::norm_1000: return "norm_1000";
        default: return "norm_1";
    }
}

struct GroundingObject {
    std::string caption;
    std::array<double, 4> bbox{};  // x1, y1, x2, y2
    BboxType bbox_type = BboxType::real;
    int image = 0;
};

// One training sample. Field names follow the JSONL keys exactly.
struct StandardRecord {
    std::optional<std::string> system;
    std::string query;
    std::string response;
    std::vector<std::pair<std::string, std::string>> history;
    std::vector<json> tools;
    std::optional<std::string> rejected_response;
    std::vector<std::string> images;
    std::vector<GroundingObject> objects;
    std::vector<std::pair<int, int>> image_sizes;  // width, height per image
    double response_weight = 1.0;

    void validate() const {
        if (query.empty()) fail_validation("record query must be non-empty");
        if (rejected_response && *rejected_response == response)
            fail_validation("rejected_response must differ from response");
        if (response_weight <= 0) fail_validation("response_weight must be > 0");
        for (const GroundingObject& o : objects) {
            if (o.bbox[0] > o.bbox[2] || o.bbox[1] > o.bbox[3])
                fail_validation("bbox corners out of order");
            for (double v : o.bbox)
                if (v < 0) fail_validation("bbox coordinates must be >= 0");
            if (o.image < 0 || size_t(o.image) >= images.size())
                fail_validation("object image index " + std::to_string(o.image) +
                                " outside images list");
        }
        if (!image_sizes.empty() && image_sizes.size() != images.size())
            fail_validation("image_sizes must parallel images");
    }
};

namespace detail {

inline GroundingObject parse_object(const json& j) {
    GroundingObject o;
    if (!j.is_object()) fail_validation("objects entries must be JSON objects");
    o.caption = j.value("caption", std::string());
    if (!j.contains("bbox") || !j["bbox"].is_array() || j["bbox"].size() != 4)
        fail_validation("object bbox must be an array of 4 numbers");
    for (int i = 0; i < 4; ++i) o.bbox[size_t(i)] = j["bbox"][size_t(i)].get<double>();
    o.bbox_type = bbox_type_from(j.value("bbox_type", std::string("real")));
    o.image = j.value("image", 0);
    return o;
}

}  // namespace detail

inline StandardRecord parse_record(const json& j) {
    if (!j.is_object()) fail_validation("record must be a JSON object");
    StandardRecord r;
    if (j.contains("system")) r.system = j["system"].get<std::string>();
    if (!j.contains("query")) fail_validation("record missing query");
    r.query = j["query"].get<std::string>();
    r.response = j.value("response", std::string());
    if (j.contains("history")) {
        for (const json& pair : j["history"]) {
            if (!pair.is_array() || pair.size() != 2)
                fail_validation("history entries must be [query, response] pairs");
            r.history.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
        }
    }
    if (j.contains("tools"))
        for (const json& t : j["tools"]) r.tools.push_back(t);
    if (j.contains("rejected_response"))
        r.rejected_response = j["rejected_response"].get<std::string>();
    if (j.contains("images"))
        for (const json& im : j["images"]) r.images.push_back(im.get<std::string>());
    if (j.contains("objects")) {
        // objects arrive either as a JSON array or as an embedded JSON string
        json objs = j["objects"];
        if (objs.is_string()) objs = json::parse(objs.get<std::string>());
        if (!objs.is_array()) fail_validation("objects must be an array");
        for (const json& o : objs) r.objects.push_back(detail::parse_object(o));
    }
    if (j.contains("image_sizes")) {
        for (const json& sz : j["image_sizes"]) {
            if (!sz.is_array() || sz.size() != 2)
                fail_validation("image_sizes entries must be [width, height]");
            r.image_sizes.emplace_back(sz[0].get<int>(), sz[1].get<int>());
        }
    }
    if (j.contains("response_weight")) r.response_weight = j["response_weight"].get<double>();
    r.validate();
    return r;
}

// Splits a trailing "#N" sample-count suffix off a dataset path.
inline std::pair<std::string, int> split_count_suffix(const std::string& path) {
    const size_t hash = path.rfind('#');
    if (hash == std::string::npos || hash + 1 == path.size()) return {path, -1};
    const std::string digits = path.substr(hash + 1);
    for (char c : digits)
        if (c < '0' || c > '9') return {path, -1};
    return {path.substr(0, hash), std::stoi(digits)};
}

inline std::vector<StandardRecord> parse_jsonl(const std::string& path_with_suffix) {
    auto [path, limit] = split_count_suffix(path_with_suffix);
    std::ifstream in(path);
    if (!in) fail_validation("cannot open dataset: " + path);
    std::vector<StandardRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            fail_validation(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        try {
            out.push_back(parse_record(j));
        } catch (const Error& e) {
            fail_validation(path + " line " + std::to_string(lineno) + ": " + e.what());
        }
        if (limit >= 0 && int(out.size()) == limit) break;
    }
    return out;
}

// Coordinate conversion between pixel values, thousandths, and unit-normalized.
// x coordinates scale by width, y coordinates by height. Thousandths round
// half away from zero; the other directions keep real arithmetic.
inline std::array<double, 4> convert_bbox(const std::array<double, 4>& bbox, BboxType from,
                                          BboxType to,
                                          std::optional<std::pair<int, int>> image_size) {
    for (double v : bbox)
        if (v < 0) fail_validation("bbox coordinates must be >= 0");
    if (from == to) return bbox;
    if (!image_size) fail_validation("bbox conversion requires image dimensions");
    const double w = double(image_size->first), h = double(image_size->second);
    if (w <= 0 || h <= 0) fail_validation("image dimensions must be positive");
    std::array<double, 4> dims = {w, h, w, h};
    if (from == BboxType::real)
        for (int i = 0; i < 4; ++i)
            if (bbox[size_t(i)] > dims[size_t(i)])
                fail_validation("real bbox coordinate " + std::to_string(bbox[size_t(i)]) +
                                " exceeds image dimension " + std::to_string(dims[size_t(i)]));
    std::array<double, 4> out{};
    for (int i = 0; i < 4; ++i) {
        const double v = bbox[size_t(i)];
        const double d = dims[size_t(i)];
        double r = v;
        if (from == BboxType::real && to == BboxType::norm_1000)
            r = std::round(1000.0 * v / d);
        else if (from == BboxType::real && to == BboxType::norm_1)
            r = v / d;
        else if (from == BboxType::norm_1000 && to == BboxType::real)
            r = v * d / 1000.0;
        else if (from == BboxType::norm_1000 && to == BboxType::norm_1)
            r = v / 1000.0;
        else if (from == BboxType::norm_1 && to == BboxType::real)
            r = v * d;
        else if (from == BboxType::norm_1 && to == BboxType::norm_1000)
            r = std::round(1000.0 * v);
        out[size_t(i)] = r;
    }
    return out;
}

}  // namespace tunekit
