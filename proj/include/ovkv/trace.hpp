#pragma once

// Line-delimited JSON serialization for metrics and frame traces. Numeric
// blocks travel as base64 little-endian float32 so a recorded stream can be
// replayed bit-for-bit; the per-step metrics record is embedded in each
// frame record, which is what replay verification compares against.

#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ovkv/core.hpp"
#include "ovkv/engine.hpp"
#include "ovkv/geometry.hpp"

static_assert(std::endian::native == std::endian::little,
              "trace encoding assumes a little-endian host");

namespace ovkv {

inline constexpr char kBase64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve((size + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= size; i += 3) {
        const std::uint32_t n = (p[i] << 16) | (p[i + 1] << 8) | p[i + 2];
        out.push_back(kBase64Alphabet[(n >> 18) & 63]);
        out.push_back(kBase64Alphabet[(n >> 12) & 63]);
        out.push_back(kBase64Alphabet[(n >> 6) & 63]);
        out.push_back(kBase64Alphabet[n & 63]);
    }
    if (i + 1 == size) {
        const std::uint32_t n = p[i] << 16;
        out.push_back(kBase64Alphabet[(n >> 18) & 63]);
        out.push_back(kBase64Alphabet[(n >> 12) & 63]);
        out.append("==");
    } else if (i + 2 == size) {
        const std::uint32_t n = (p[i] << 16) | (p[i + 1] << 8);
        out.push_back(kBase64Alphabet[(n >> 18) & 63]);
        out.push_back(kBase64Alphabet[(n >> 12) & 63]);
        out.push_back(kBase64Alphabet[(n >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(std::string_view text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) {
        throw std::invalid_argument("base64_decode: length not a multiple of four");
    }
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=') {
                if (i + 4 != text.size() || k < 2) {
                    throw std::invalid_argument("base64_decode: misplaced padding");
                }
                vals[k] = 0;
                ++pad;
            } else {
                vals[k] = value_of(c);
                if (vals[k] < 0 || pad > 0) {
                    throw std::invalid_argument("base64_decode: invalid character");
                }
            }
        }
        const std::uint32_t n = (static_cast<std::uint32_t>(vals[0]) << 18) |
                                (static_cast<std::uint32_t>(vals[1]) << 12) |
                                (static_cast<std::uint32_t>(vals[2]) << 6) |
                                static_cast<std::uint32_t>(vals[3]);
        out.push_back(static_cast<unsigned char>((n >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<unsigned char>((n >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<unsigned char>(n & 0xff));
    }
    return out;
}

inline std::string encode_f32(std::span<const float> values) {
    return base64_encode(values.data(), values.size() * sizeof(float));
}

inline std::vector<float> decode_f32(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % sizeof(float) != 0) {
        throw std::invalid_argument("decode_f32: byte count not a multiple of four");
    }
    std::vector<float> out(bytes.size() / sizeof(float));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

inline std::string hex_u64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline nlohmann::json dims_to_json(const ModelDims& d) {
    return {{"num_layers", d.num_layers},   {"num_heads", d.num_heads},
            {"head_dim", d.head_dim},       {"patch_rows", d.patch_rows},
            {"patch_cols", d.patch_cols},   {"num_aux", d.num_aux}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
    ModelDims d;
    d.num_layers = j.at("num_layers").get<std::size_t>();
    d.num_heads = j.at("num_heads").get<std::size_t>();
    d.head_dim = j.at("head_dim").get<std::size_t>();
    d.patch_rows = j.at("patch_rows").get<std::size_t>();
    d.patch_cols = j.at("patch_cols").get<std::size_t>();
    d.num_aux = j.at("num_aux").get<std::size_t>();
    return d;
}

inline nlohmann::json engine_config_to_json(const EngineConfig& cfg) {
    return {{"total_budget", cfg.total_budget},
            {"smoothing_alpha", cfg.smoothing_alpha},
            {"hybrid_beta", cfg.hybrid_beta},
            {"coverage_tau", cfg.coverage_tau},
            {"anchor_eta", cfg.anchor_eta},
            {"max_anchors", cfg.max_anchors},
            {"min_anchor_interval", cfg.min_anchor_interval},
            {"gaussian_kernel_size", cfg.gaussian_kernel_size},
            {"gaussian_sigma", cfg.gaussian_sigma},
            {"dims", dims_to_json(cfg.dims)}};
}

inline EngineConfig engine_config_from_json(const nlohmann::json& j) {
    EngineConfig cfg;
    cfg.total_budget = j.at("total_budget").get<std::size_t>();
    cfg.smoothing_alpha = j.at("smoothing_alpha").get<double>();
    cfg.hybrid_beta = j.at("hybrid_beta").get<double>();
    cfg.coverage_tau = j.at("coverage_tau").get<double>();
    cfg.anchor_eta = j.at("anchor_eta").get<double>();
    cfg.max_anchors = j.at("max_anchors").get<std::size_t>();
    cfg.min_anchor_interval = j.at("min_anchor_interval").get<std::uint64_t>();
    cfg.gaussian_kernel_size = j.at("gaussian_kernel_size").get<std::size_t>();
    cfg.gaussian_sigma = j.at("gaussian_sigma").get<double>();
    cfg.dims = dims_from_json(j.at("dims"));
    return cfg;
}

/// Deterministic per-step record; wall-clock timing is deliberately absent
/// so identical runs serialize to identical bytes.
inline nlohmann::json metrics_to_json(const StepMetrics& m) {
    nlohmann::json j{{"frame", m.frame_index},
                     {"layer_sizes", m.layer_sizes},
                     {"camera_size", m.camera_size},
                     {"bytes_resident", m.bytes_resident},
                     {"tokens_evicted", m.tokens_evicted},
                     {"peak_tokens", m.peak_tokens},
                     {"degenerate_keys", m.degenerate_keys},
                     {"digest", hex_u64(m.state_digest)}};
    if (m.coverage) j["coverage"] = *m.coverage;
    if (m.anchor_registered) j["anchor_registered"] = *m.anchor_registered;
    if (m.anchor_demoted) j["anchor_demoted"] = *m.anchor_demoted;
    return j;
}

inline nlohmann::json pose_to_json(const Pose& p) {
    nlohmann::json row = nlohmann::json::array();
    for (double v : p.rotation.m) row.push_back(v);
    row.push_back(p.translation.x);
    row.push_back(p.translation.y);
    row.push_back(p.translation.z);
    return row;  // 12 reals, row-major R then t
}

inline Pose pose_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 12) {
        throw std::invalid_argument("pose_from_json: expected 12 reals");
    }
    Pose p;
    for (std::size_t i = 0; i < 9; ++i) p.rotation.m[i] = j[i].get<double>();
    p.translation = {j[9].get<double>(), j[10].get<double>(), j[11].get<double>()};
    return p;
}

inline nlohmann::json frame_to_json(const FrameInput& frame, const StepMetrics& metrics) {
    nlohmann::json keys = nlohmann::json::array();
    nlohmann::json values = nlohmann::json::array();
    nlohmann::json residuals = nlohmann::json::array();
    for (std::size_t l = 0; l < frame.layer_keys.size(); ++l) {
        keys.push_back(encode_f32(frame.layer_keys[l]));
        values.push_back(encode_f32(frame.layer_values[l]));
        residuals.push_back(encode_f32(frame.layer_residuals[l]));
    }
    nlohmann::json points = nlohmann::json::array();
    nlohmann::json confidence = nlohmann::json::array();
    for (std::size_t i = 0; i < frame.points.size(); ++i) {
        points.push_back(frame.points.points[i].x);
        points.push_back(frame.points.points[i].y);
        points.push_back(frame.points.points[i].z);
        confidence.push_back(frame.points.confidence[i]);
    }
    return {{"type", "frame"},
            {"frame", frame.frame_index},
            {"keys", std::move(keys)},
            {"values", std::move(values)},
            {"residuals", std::move(residuals)},
            {"residual_dim", frame.residual_dim},
            {"pose", pose_to_json(frame.pose)},
            {"points", std::move(points)},
            {"confidence", std::move(confidence)},
            {"metrics", metrics_to_json(metrics)}};
}

/// Rebuilds the engine-facing frame; query blocks are not recorded because
/// the engine never reads them.
inline FrameInput frame_from_json(const nlohmann::json& j) {
    FrameInput frame;
    frame.frame_index = j.at("frame").get<std::uint64_t>();
    for (const auto& s : j.at("keys")) frame.layer_keys.push_back(decode_f32(s.get<std::string>()));
    for (const auto& s : j.at("values")) {
        frame.layer_values.push_back(decode_f32(s.get<std::string>()));
    }
    for (const auto& s : j.at("residuals")) {
        frame.layer_residuals.push_back(decode_f32(s.get<std::string>()));
    }
    frame.residual_dim = j.at("residual_dim").get<std::size_t>();
    frame.pose = pose_from_json(j.at("pose"));
    const auto& points = j.at("points");
    const auto& confidence = j.at("confidence");
    if (points.size() != confidence.size() * 3) {
        throw std::invalid_argument("frame_from_json: points/confidence size mismatch");
    }
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        frame.points.points.push_back({points[3 * i].get<double>(),
                                       points[3 * i + 1].get<double>(),
                                       points[3 * i + 2].get<double>()});
        frame.points.confidence.push_back(confidence[i].get<double>());
    }
    return frame;
}

}  // namespace ovkv
