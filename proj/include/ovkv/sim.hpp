#pragma once

// Synthetic driver: a small seeded pre-norm transformer over one frame's
// tokens, camera trajectories over a procedural surface, probing scorers
// that swap the fresh-token criterion, and a full-cache oracle harness
// measuring how far budgeted attention readouts drift from unbounded ones.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ovkv/core.hpp"
#include "ovkv/engine.hpp"
#include "ovkv/geometry.hpp"
#include "ovkv/rating.hpp"

namespace ovkv::sim {

/// Patch grid and head layout shared by all synthetic runs.
inline ModelDims toy_dims() {
    ModelDims d;
    d.num_layers = 4;
    d.num_heads = 2;
    d.head_dim = 16;
    d.patch_rows = 8;
    d.patch_cols = 8;
    d.num_aux = 5;
    return d;
}

inline Intrinsics default_intrinsics() { return {64.0, 64.0, 32.0, 32.0, 64, 64}; }

struct ToyModelConfig {
    std::size_t layers = 4;
    std::size_t width = 32;       ///< equals kv_dim for the toy head layout
    std::size_t heads = 2;
    std::size_t head_dim = 16;
    std::size_t ffn_expansion = 4;
    std::size_t num_aux = 5;
    std::uint64_t seed = 1234;
};

struct LayerWeights {
    std::vector<double> ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    // Query and key projections are tied. With independent random
    // projections attention carries no notion of content similarity, and
    // the synthetic stream would rank tokens by pure noise.
    std::vector<double> wq, wk, wv, wo;  ///< width x width, row-major
    std::vector<double> w1, b1, w2, b2;  ///< FFN: width->hidden, hidden->width
    double lambda2 = 0.5;                ///< residual scale on the FFN branch
};

namespace detail {

inline void layer_norm(const std::vector<double>& in, std::size_t count, std::size_t width,
                       const std::vector<double>& gain, const std::vector<double>& bias,
                       std::vector<double>& out) {
    constexpr double eps = 1e-5;
    out.resize(count * width);
    for (std::size_t i = 0; i < count; ++i) {
        const double* row = in.data() + i * width;
        double mean = 0.0;
        for (std::size_t d = 0; d < width; ++d) mean += row[d];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t d = 0; d < width; ++d) {
            const double c = row[d] - mean;
            var += c * c;
        }
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t d = 0; d < width; ++d) {
            out[i * width + d] = gain[d] * (row[d] - mean) * inv + bias[d];
        }
    }
}

// out[i,o] = sum_d in[i,d] * w[d,o]; w is rows x cols row-major.
inline void matmul(const std::vector<double>& in, std::size_t count, std::size_t rows,
                   const std::vector<double>& w, std::size_t cols, std::vector<double>& out) {
    out.assign(count * cols, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
        for (std::size_t d = 0; d < rows; ++d) {
            const double v = in[i * rows + d];
            if (v == 0.0) continue;
            const double* wrow = w.data() + d * cols;
            double* orow = out.data() + i * cols;
            for (std::size_t o = 0; o < cols; ++o) orow[o] += v * wrow[o];
        }
    }
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline std::vector<float> to_f32(const std::vector<double>& in) {
    std::vector<float> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = static_cast<float>(in[i]);
    return out;
}

}  // namespace detail

/// Seeded pre-norm transformer: h = x + Attn(LN(x)), x' = h + l2*FFN(LN(h)).
/// The forward trace keeps every intermediate a test might want to check.
class ToyModel {
public:
    explicit ToyModel(ToyModelConfig cfg) : cfg_(cfg) {
        if (cfg_.heads * cfg_.head_dim != cfg_.width) {
            throw std::invalid_argument("ToyModel: heads * head_dim must equal width");
        }
        std::mt19937_64 rng(cfg_.seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        const std::size_t w = cfg_.width;
        const std::size_t hidden = w * cfg_.ffn_expansion;
        const double proj_scale = 1.0 / std::sqrt(static_cast<double>(w));
        const double ffn_scale = 1.0 / std::sqrt(static_cast<double>(hidden));

        aux_embeddings_.resize(cfg_.num_aux * w);
        for (double& v : aux_embeddings_) v = normal(rng);

        auto draw = [&](std::vector<double>& dst, std::size_t n, double scale) {
            dst.resize(n);
            for (double& v : dst) v = normal(rng) * scale;
        };
        layers_.resize(cfg_.layers);
        for (auto& lw : layers_) {
            draw(lw.ln1_gain, w, 0.05);
            for (double& v : lw.ln1_gain) v += 1.0;
            draw(lw.ln1_bias, w, 0.05);
            draw(lw.ln2_gain, w, 0.05);
            for (double& v : lw.ln2_gain) v += 1.0;
            draw(lw.ln2_bias, w, 0.05);
            draw(lw.wq, w * w, proj_scale);
            lw.wk = lw.wq;
            draw(lw.wv, w * w, proj_scale);
            draw(lw.wo, w * w, proj_scale);
            draw(lw.w1, w * hidden, proj_scale);
            draw(lw.b1, hidden, 0.02);
            draw(lw.w2, hidden * w, ffn_scale);
            draw(lw.b2, w, 0.02);
            lw.lambda2 = 0.3 + 0.4 * uniform(rng);
        }
    }

    struct LayerTrace {
        std::vector<double> x_in, h, residual, x_out;    ///< M x width
        std::vector<float> keys, values, queries;        ///< M x kv_dim
        std::vector<float> residual_f32;                 ///< M x width
    };
    struct ForwardTrace {
        std::vector<LayerTrace> layers;
    };

    [[nodiscard]] ForwardTrace forward(const std::vector<double>& tokens,
                                       std::size_t count) const {
        const std::size_t w = cfg_.width;
        if (tokens.size() != count * w) {
            throw std::invalid_argument("ToyModel::forward: token block size mismatch");
        }
        ForwardTrace trace;
        trace.layers.resize(cfg_.layers);
        std::vector<double> x = tokens;
        std::vector<double> ln, q, k, v, attn, h, f1, f2;
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const LayerWeights& lw = layers_[l];
            LayerTrace& lt = trace.layers[l];
            lt.x_in = x;

            detail::layer_norm(x, count, w, lw.ln1_gain, lw.ln1_bias, ln);
            detail::matmul(ln, count, w, lw.wq, w, q);
            detail::matmul(ln, count, w, lw.wk, w, k);
            detail::matmul(ln, count, w, lw.wv, w, v);

            attn.assign(count * w, 0.0);
            const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim));
            std::vector<double> logits(count);
            for (std::size_t head = 0; head < cfg_.heads; ++head) {
                const std::size_t off = head * cfg_.head_dim;
                for (std::size_t i = 0; i < count; ++i) {
                    double max_logit = -1e300;
                    for (std::size_t j = 0; j < count; ++j) {
                        double dot = 0.0;
                        for (std::size_t d = 0; d < cfg_.head_dim; ++d) {
                            dot += q[i * w + off + d] * k[j * w + off + d];
                        }
                        logits[j] = dot * inv_sqrt_d;
                        max_logit = std::max(max_logit, logits[j]);
                    }
                    double denom = 0.0;
                    for (std::size_t j = 0; j < count; ++j) {
                        logits[j] = std::exp(logits[j] - max_logit);
                        denom += logits[j];
                    }
                    for (std::size_t j = 0; j < count; ++j) {
                        const double p = logits[j] / denom;
                        for (std::size_t d = 0; d < cfg_.head_dim; ++d) {
                            attn[i * w + off + d] += p * v[j * w + off + d];
                        }
                    }
                }
            }
            detail::matmul(attn, count, w, lw.wo, w, h);
            for (std::size_t i = 0; i < count * w; ++i) h[i] += x[i];
            lt.h = h;

            detail::layer_norm(h, count, w, lw.ln2_gain, lw.ln2_bias, ln);
            const std::size_t hidden = w * cfg_.ffn_expansion;
            detail::matmul(ln, count, w, lw.w1, hidden, f1);
            for (std::size_t i = 0; i < count; ++i) {
                for (std::size_t j = 0; j < hidden; ++j) {
                    f1[i * hidden + j] = detail::gelu(f1[i * hidden + j] + lw.b1[j]);
                }
            }
            detail::matmul(f1, count, hidden, lw.w2, w, f2);
            lt.residual.resize(count * w);
            for (std::size_t i = 0; i < count; ++i) {
                for (std::size_t d = 0; d < w; ++d) {
                    lt.residual[i * w + d] = lw.lambda2 * (f2[i * w + d] + lw.b2[d]);
                }
            }
            x = h;
            for (std::size_t i = 0; i < count * w; ++i) x[i] += lt.residual[i];
            lt.x_out = x;
            lt.keys = detail::to_f32(k);
            lt.values = detail::to_f32(v);
            lt.queries = detail::to_f32(q);
            lt.residual_f32 = detail::to_f32(lt.residual);
        }
        return trace;
    }

    [[nodiscard]] const ToyModelConfig& config() const { return cfg_; }
    [[nodiscard]] std::span<const double> aux_embeddings() const { return aux_embeddings_; }
    [[nodiscard]] const LayerWeights& layer_weights(std::size_t l) const { return layers_.at(l); }
    LayerWeights& layer_weights(std::size_t l) { return layers_.at(l); }

private:
    ToyModelConfig cfg_;
    std::vector<double> aux_embeddings_;  ///< num_aux x width
    std::vector<LayerWeights> layers_;
};

enum class SceneKind { Orbit, Corridor, RandomWalk };

inline const char* scene_name(SceneKind kind) {
    switch (kind) {
        case SceneKind::Orbit: return "orbit";
        case SceneKind::Corridor: return "corridor";
        case SceneKind::RandomWalk: return "randomwalk";
    }
    return "?";
}

inline std::optional<SceneKind> parse_scene(std::string_view name) {
    if (name == "orbit") return SceneKind::Orbit;
    if (name == "corridor") return SceneKind::Corridor;
    if (name == "randomwalk") return SceneKind::RandomWalk;
    return std::nullopt;
}

struct SceneConfig {
    SceneKind kind = SceneKind::Orbit;
    std::uint64_t seed = 1;
    ModelDims dims = toy_dims();
    Intrinsics cam = default_intrinsics();
    std::size_t orbit_period = 180;  ///< frames per revolution
};

/// Deterministic camera path plus per-frame geometry. The world is a
/// star-shaped shell around the origin (orbit, random walk) or a box
/// corridor; appearance features are a smooth seeded field of the hit
/// point, with a second "texture" basis whose amplitude varies spatially.
class TrajectoryScene {
public:
    explicit TrajectoryScene(SceneConfig cfg) : cfg_(cfg) {
        cfg_.dims.validate();
        cfg_.cam.validate();
        std::mt19937_64 rng(cfg_.seed * 0x9e3779b97f4a7c15ull + 7);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        auto draw_vec = [&](double scale) {
            return Vec3{normal(rng) * scale, normal(rng) * scale, normal(rng) * scale};
        };
        for (std::size_t i = 0; i < kShellTerms; ++i) {
            shell_freq_[i] = draw_vec(1.2);
            shell_phase_[i] = uniform(rng) * 6.283185307179586;
            shell_amp_[i] = uniform(rng);
        }
        double amp_sum = 0.0;
        for (double a : shell_amp_) amp_sum += a;
        for (double& a : shell_amp_) a /= amp_sum;

        const std::size_t width = feature_width_;
        base_freq_.resize(width);
        base_phase_.resize(width);
        detail_freq_.resize(width);
        detail_phase_.resize(width);
        const double field_scale = 0.55;
        for (std::size_t i = 0; i < width; ++i) {
            base_freq_[i] = draw_vec(field_scale);
            base_phase_[i] = uniform(rng) * 6.283185307179586;
            detail_freq_[i] = draw_vec(2.0 * field_scale);
            detail_phase_[i] = uniform(rng) * 6.283185307179586;
        }
        energy_freq_ = draw_vec(0.35);
        energy_phase_ = uniform(rng) * 6.283185307179586;
        if (cfg_.kind == SceneKind::RandomWalk) {
            walk_poses_.push_back(Pose::identity());
        }
    }

    [[nodiscard]] const SceneConfig& config() const { return cfg_; }

    [[nodiscard]] Pose pose(std::size_t t) const {
        switch (cfg_.kind) {
            case SceneKind::Orbit: {
                const double theta =
                    6.283185307179586 * static_cast<double>(t) /
                    static_cast<double>(cfg_.orbit_period);
                const double c = std::cos(theta), s = std::sin(theta);
                Pose p;
                // Camera on a small ring, looking radially outward.
                p.rotation.m = {s, 0, c, 0, 1, 0, -c, 0, s};
                p.translation = Vec3{c, 0.0, s} * kOrbitRadius;
                return p;
            }
            case SceneKind::Corridor: {
                Pose p;
                p.translation = {0.0, 0.0, kCorridorSpeed * static_cast<double>(t)};
                return p;
            }
            case SceneKind::RandomWalk: {
                extend_walk(t);
                return walk_poses_[t];
            }
        }
        throw std::logic_error("TrajectoryScene: unknown scene kind");
    }

    struct FrameGeometry {
        PointMap points;               ///< camera-local, one per patch
        std::vector<double> features;  ///< row-major N_p x feature width
    };

    [[nodiscard]] FrameGeometry frame_geometry(std::size_t t) const {
        const Pose p = pose(t);
        const std::size_t rows = cfg_.dims.patch_rows;
        const std::size_t cols = cfg_.dims.patch_cols;
        const double px_per_col = static_cast<double>(cfg_.cam.width) / static_cast<double>(cols);
        const double px_per_row = static_cast<double>(cfg_.cam.height) / static_cast<double>(rows);

        FrameGeometry geo;
        geo.points.points.reserve(rows * cols);
        geo.points.confidence.reserve(rows * cols);
        geo.features.reserve(rows * cols * feature_width_);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                const double px = (static_cast<double>(c) + 0.5) * px_per_col;
                const double py = (static_cast<double>(r) + 0.5) * px_per_row;
                const Vec3 dir_cam = Vec3{(px - cfg_.cam.cx) / cfg_.cam.fx,
                                          (py - cfg_.cam.cy) / cfg_.cam.fy, 1.0}
                                         .normalized();
                const Vec3 dir_world = p.rotation * dir_cam;
                const double dist = raycast(p.translation, dir_world);
                const Vec3 local = dir_cam * dist;
                geo.points.points.push_back(local);
                geo.points.confidence.push_back(1.0 / (1.0 + local.z));
                const Vec3 hit = p.translation + dir_world * dist;
                append_features(hit, geo.features);
            }
        }
        return geo;
    }

    [[nodiscard]] std::size_t feature_width() const { return feature_width_; }

private:
    static constexpr std::size_t kShellTerms = 4;
    static constexpr double kShellRadius = 8.0;
    static constexpr double kShellBump = 0.2;
    static constexpr double kOrbitRadius = 1.5;
    static constexpr double kCorridorSpeed = 0.05;
    static constexpr double kCorridorHalfX = 3.0;
    static constexpr double kCorridorHalfY = 2.0;
    static constexpr double kCorridorFar = 50.0;

    [[nodiscard]] double shell_radius(const Vec3& dir) const {
        double s = 0.0;
        for (std::size_t i = 0; i < kShellTerms; ++i) {
            s += shell_amp_[i] * std::sin(shell_freq_[i].dot(dir) * kShellRadius +
                                          shell_phase_[i]);
        }
        return kShellRadius * (1.0 + kShellBump * s);
    }

    [[nodiscard]] double raycast(const Vec3& origin, const Vec3& dir) const {
        if (cfg_.kind == SceneKind::Corridor) {
            double best = kCorridorFar;
            if (std::abs(dir.x) > 1e-9) {
                const double tx = ((dir.x > 0 ? kCorridorHalfX : -kCorridorHalfX) - origin.x) / dir.x;
                if (tx > 1e-6) best = std::min(best, tx);
            }
            if (std::abs(dir.y) > 1e-9) {
                const double ty = ((dir.y > 0 ? kCorridorHalfY : -kCorridorHalfY) - origin.y) / dir.y;
                if (ty > 1e-6) best = std::min(best, ty);
            }
            return best;
        }
        // Star shell: start on the base sphere, then a few corrections for
        // the radial bumps. The camera stays well inside, so the bracket is
        // safe and the iteration is strongly contractive.
        const double b = origin.dot(dir);
        const double c = origin.dot(origin) - kShellRadius * kShellRadius;
        double t = -b + std::sqrt(std::max(b * b - c, 0.0));
        for (int it = 0; it < 8; ++it) {
            const Vec3 w = origin + dir * t;
            const double r = w.norm();
            t += shell_radius(w * (1.0 / r)) - r;
        }
        return t;
    }

    void append_features(const Vec3& w, std::vector<double>& out) const {
        const double raw = std::sin(energy_freq_.dot(w) * kShellRadius + energy_phase_);
        const double energy = 0.5 + 0.45 * raw;  // texture amplitude in [0.05, 0.95]
        for (std::size_t i = 0; i < feature_width_; ++i) {
            const double base = std::sin(base_freq_[i].dot(w) + base_phase_[i]);
            const double detail = std::sin(detail_freq_[i].dot(w) + detail_phase_[i]);
            out.push_back(base + 2.0 * energy * detail);
        }
    }

    void extend_walk(std::size_t t) const {
        while (walk_poses_.size() <= t) {
            const std::size_t step = walk_poses_.size();
            std::mt19937_64 rng(cfg_.seed * 0x2545f4914f6cdd1dull + step);
            std::normal_distribution<double> normal(0.0, 1.0);
            const double yaw = normal(rng) * 0.05;
            const double pitch = normal(rng) * 0.03;
            const Pose& prev = walk_poses_.back();
            Mat3 ry, rx;
            ry.m = {std::cos(yaw), 0, std::sin(yaw), 0, 1, 0, -std::sin(yaw), 0, std::cos(yaw)};
            rx.m = {1, 0, 0, 0, std::cos(pitch), -std::sin(pitch),
                    0, std::sin(pitch), std::cos(pitch)};
            Pose next;
            next.rotation = orthonormalized(prev.rotation * ry * rx);
            const Vec3 forward = next.rotation * Vec3{0, 0, 1};
            Vec3 pos = prev.translation + forward * 0.04 +
                       Vec3{normal(rng) * 0.02, normal(rng) * 0.02, normal(rng) * 0.02};
            const double r = pos.norm();
            if (r > 3.0) pos = pos * (3.0 / r);  // stay inside the shell
            next.translation = pos;
            walk_poses_.push_back(next);
        }
    }

    // Gram-Schmidt on columns; keeps composed rotations from drifting.
    static Mat3 orthonormalized(const Mat3& r) {
        Vec3 c0{r.m[0], r.m[3], r.m[6]};
        Vec3 c1{r.m[1], r.m[4], r.m[7]};
        c0 = c0.normalized();
        c1 = (c1 - c0 * c0.dot(c1)).normalized();
        const Vec3 c2 = c0.cross(c1);
        Mat3 out;
        out.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
        return out;
    }

    SceneConfig cfg_;
    std::size_t feature_width_ = 32;
    std::array<Vec3, kShellTerms> shell_freq_{};
    std::array<double, kShellTerms> shell_phase_{};
    std::array<double, kShellTerms> shell_amp_{};
    std::vector<Vec3> base_freq_, detail_freq_;
    std::vector<double> base_phase_, detail_phase_;
    Vec3 energy_freq_;
    double energy_phase_ = 0.0;
    mutable std::vector<Pose> walk_poses_;
};

/// Runs the toy model over frame `t` of the scene and packages everything
/// the engine consumes. Aux tokens are the model's learned constants; patch
/// tokens are the scene's appearance features.
inline FrameInput generate_frame(const TrajectoryScene& scene, std::size_t t,
                                 const ToyModel& model) {
    const ModelDims& dims = scene.config().dims;
    const std::size_t width = model.config().width;
    if (model.config().num_aux != dims.num_aux) {
        throw std::invalid_argument("generate_frame: aux token count mismatch");
    }
    if (scene.feature_width() != width) {
        throw std::invalid_argument("generate_frame: feature width does not match the model");
    }
    auto geo = scene.frame_geometry(t);

    const std::size_t m = dims.tokens_per_frame();
    std::vector<double> tokens(m * width);
    const auto aux = model.aux_embeddings();
    std::copy(aux.begin(), aux.end(), tokens.begin());
    std::copy(geo.features.begin(), geo.features.end(),
              tokens.begin() + static_cast<std::ptrdiff_t>(dims.num_aux * width));

    const auto trace = model.forward(tokens, m);
    FrameInput frame;
    frame.frame_index = t;
    frame.residual_dim = width;
    frame.pose = scene.pose(t);
    frame.points = std::move(geo.points);
    frame.layer_keys.reserve(trace.layers.size());
    for (const auto& lt : trace.layers) {
        frame.layer_keys.push_back(lt.keys);
        frame.layer_values.push_back(lt.values);
        frame.layer_queries.push_back(lt.queries);
        frame.layer_residuals.push_back(lt.residual_f32);
    }
    return frame;
}

enum class ProbeKind { FfnResidual, AttentionWeight, QKDot, Random };

inline const char* probe_name(ProbeKind kind) {
    switch (kind) {
        case ProbeKind::FfnResidual: return "ffn";
        case ProbeKind::AttentionWeight: return "attention";
        case ProbeKind::QKDot: return "qk";
        case ProbeKind::Random: return "random";
    }
    return "?";
}

inline std::optional<ProbeKind> parse_probe(std::string_view name) {
    if (name == "ffn") return ProbeKind::FfnResidual;
    if (name == "attention") return ProbeKind::AttentionWeight;
    if (name == "qk") return ProbeKind::QKDot;
    if (name == "random") return ProbeKind::Random;
    return std::nullopt;
}

/// Swaps the criterion used to score the current frame's tokens while the
/// rest of the pipeline (diversity, hybrid ranking, anchors) stays fixed.
/// Only the AttentionWeight scorer may materialize attention matrices; the
/// allocation counter makes that observable.
class ProbeScorer final : public CurrentFrameScorer {
public:
    ProbeScorer(ProbeKind kind, EngineConfig cfg, std::uint64_t seed = 0)
        : kind_(kind), cfg_(std::move(cfg)), seed_(seed) {}

    [[nodiscard]] ProbeKind kind() const { return kind_; }
    [[nodiscard]] std::uint64_t attention_allocations() const { return attention_allocations_; }

    [[nodiscard]] std::vector<double> score(std::size_t layer, const FrameInput& frame,
                                            std::span<const TokenEntry> entries) const override {
        switch (kind_) {
            case ProbeKind::FfnResidual: return ffn_scores(layer, frame);
            case ProbeKind::AttentionWeight: return attention_scores(layer, frame, entries);
            case ProbeKind::QKDot: return qk_scores(layer, frame, entries);
            case ProbeKind::Random: return random_scores(layer, frame);
        }
        throw std::logic_error("ProbeScorer: unknown kind");
    }

private:
    [[nodiscard]] std::vector<double> ffn_scores(std::size_t layer,
                                                 const FrameInput& frame) const {
        FfnResidual residual;
        residual.data = frame.layer_residuals.at(layer);
        residual.tokens = cfg_.dims.tokens_per_frame();
        residual.dim = frame.residual_dim;
        const ActivationGrid smoothed =
            smooth(activation_score(residual, cfg_.dims, frame.frame_index),
                   cfg_.smoothing_alpha, cfg_.gaussian_kernel_size, cfg_.gaussian_sigma);
        std::vector<double> out(cfg_.dims.tokens_per_frame());
        for (std::size_t s = 0; s < out.size(); ++s) {
            out[s] = s < cfg_.dims.num_aux ? smoothed.aux_scores[s]
                                           : smoothed.patch_scores[s - cfg_.dims.num_aux];
        }
        return out;
    }

    // Full softmax attention of the frame's queries over every cached key;
    // a token's score is its attention column sum. Deliberately materializes
    // the matrix, which is exactly what fused attention kernels cannot expose.
    [[nodiscard]] std::vector<double> attention_scores(std::size_t layer, const FrameInput& frame,
                                                       std::span<const TokenEntry> entries) const {
        const auto& queries = require_queries(frame, layer);
        const std::size_t m = cfg_.dims.tokens_per_frame();
        const std::size_t kv = cfg_.dims.kv_dim();
        const std::size_t heads = cfg_.dims.num_heads;
        const std::size_t hd = cfg_.dims.head_dim;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

        std::vector<double> column_sum(entries.size(), 0.0);
        for (std::size_t head = 0; head < heads; ++head) {
            std::vector<double> attn(m * entries.size());  // the counted allocation
            ++attention_allocations_;
            const std::size_t off = head * hd;
            for (std::size_t i = 0; i < m; ++i) {
                double max_logit = -1e300;
                for (std::size_t j = 0; j < entries.size(); ++j) {
                    double dot = 0.0;
                    for (std::size_t d = 0; d < hd; ++d) {
                        dot += static_cast<double>(queries[i * kv + off + d]) *
                               static_cast<double>(entries[j].key[off + d]);
                    }
                    attn[i * entries.size() + j] = dot * inv_sqrt_d;
                    max_logit = std::max(max_logit, attn[i * entries.size() + j]);
                }
                double denom = 0.0;
                for (std::size_t j = 0; j < entries.size(); ++j) {
                    double& a = attn[i * entries.size() + j];
                    a = std::exp(a - max_logit);
                    denom += a;
                }
                for (std::size_t j = 0; j < entries.size(); ++j) {
                    attn[i * entries.size() + j] /= denom;
                    column_sum[j] += attn[i * entries.size() + j];
                }
            }
        }
        return extract_current(frame, entries, column_sum);
    }

    [[nodiscard]] std::vector<double> qk_scores(std::size_t layer, const FrameInput& frame,
                                                std::span<const TokenEntry> entries) const {
        const auto& queries = require_queries(frame, layer);
        const std::size_t m = cfg_.dims.tokens_per_frame();
        const std::size_t kv = cfg_.dims.kv_dim();
        std::vector<double> mean_dot(entries.size(), 0.0);
        for (std::size_t j = 0; j < entries.size(); ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t d = 0; d < kv; ++d) {
                    acc += static_cast<double>(queries[i * kv + d]) *
                           static_cast<double>(entries[j].key[d]);
                }
            }
            mean_dot[j] = acc / static_cast<double>(m);
        }
        return extract_current(frame, entries, mean_dot);
    }

    [[nodiscard]] std::vector<double> random_scores(std::size_t layer,
                                                    const FrameInput& frame) const {
        std::uint64_t mix[3] = {seed_, frame.frame_index, static_cast<std::uint64_t>(layer)};
        std::mt19937_64 rng(fnv1a64(mix, sizeof(mix)));
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        std::vector<double> out(cfg_.dims.tokens_per_frame());
        for (double& v : out) v = uniform(rng);
        return out;
    }

    [[nodiscard]] const std::vector<float>& require_queries(const FrameInput& frame,
                                                            std::size_t layer) const {
        if (frame.layer_queries.size() <= layer ||
            frame.layer_queries[layer].size() !=
                cfg_.dims.tokens_per_frame() * cfg_.dims.kv_dim()) {
            throw std::invalid_argument("ProbeScorer: frame carries no query block");
        }
        return frame.layer_queries[layer];
    }

    [[nodiscard]] std::vector<double> extract_current(const FrameInput& frame,
                                                      std::span<const TokenEntry> entries,
                                                      const std::vector<double>& per_entry) const {
        std::vector<double> out(cfg_.dims.tokens_per_frame(), 0.0);
        std::size_t found = 0;
        for (std::size_t j = 0; j < entries.size(); ++j) {
            if (entries[j].frame_index == frame.frame_index) {
                out[entries[j].slot_index] = per_entry[j];
                ++found;
            }
        }
        if (found != out.size()) {
            throw std::logic_error("ProbeScorer: current frame is not fully cached");
        }
        return out;
    }

    ProbeKind kind_;
    EngineConfig cfg_;
    std::uint64_t seed_ = 0;
    mutable std::uint64_t attention_allocations_ = 0;
};

/// Mean attention output of the frame's queries over the cached keys and
/// values, one block per layer, concatenated. Computed with an online
/// softmax so no attention matrix ever exists.
inline std::vector<double> attention_readout(const FrameInput& frame,
                                             std::span<const LayerCache> caches,
                                             const ModelDims& dims) {
    const std::size_t m = dims.tokens_per_frame();
    const std::size_t kv = dims.kv_dim();
    const std::size_t hd = dims.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> readout;
    readout.reserve(caches.size() * kv);
    std::vector<double> head_out(hd);
    for (std::size_t l = 0; l < caches.size(); ++l) {
        const auto entries = caches[l].entries();
        if (entries.empty()) {
            throw std::invalid_argument("attention_readout: empty cache");
        }
        const auto& queries = frame.layer_queries.at(l);
        std::vector<double> layer_mean(kv, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t head = 0; head < dims.num_heads; ++head) {
                const std::size_t off = head * hd;
                double running_max = -1e300, denom = 0.0;
                std::fill(head_out.begin(), head_out.end(), 0.0);
                for (const auto& e : entries) {
                    double dot = 0.0;
                    for (std::size_t d = 0; d < hd; ++d) {
                        dot += static_cast<double>(queries[i * kv + off + d]) *
                               static_cast<double>(e.key[off + d]);
                    }
                    dot *= inv_sqrt_d;
                    if (dot > running_max) {
                        const double rescale = std::exp(running_max - dot);
                        denom *= rescale;
                        for (double& v : head_out) v *= rescale;
                        running_max = dot;
                    }
                    const double weight = std::exp(dot - running_max);
                    denom += weight;
                    for (std::size_t d = 0; d < hd; ++d) {
                        head_out[d] += weight * static_cast<double>(e.value[off + d]);
                    }
                }
                for (std::size_t d = 0; d < hd; ++d) {
                    layer_mean[off + d] += head_out[d] / denom;
                }
            }
        }
        for (double v : layer_mean) readout.push_back(v / static_cast<double>(m));
    }
    return readout;
}

struct StrategyOutcome {
    ProbeKind kind = ProbeKind::FfnResidual;
    double mean_proxy_error = 0.0;
    double mean_step_seconds = 0.0;
    std::uint64_t peak_bytes = 0;
    std::uint64_t attention_allocations = 0;
    std::size_t total_evicted = 0;
};

struct FullCacheRun {
    std::vector<StrategyOutcome> strategies;
};

/// Shared oracle: one unbounded run of the scene, then one budgeted engine
/// run per strategy. The proxy error of a strategy is the mean L2 distance
/// between its per-frame attention readout and the unbounded one.
inline FullCacheRun oracle_full_cache_run(const SceneConfig& scene_cfg,
                                          const ToyModelConfig& model_cfg,
                                          const EngineConfig& engine_cfg, std::size_t frames,
                                          std::span<const ProbeKind> strategies) {
    if (frames == 0) {
        throw std::invalid_argument("oracle_full_cache_run: needs at least one frame");
    }
    TrajectoryScene scene(scene_cfg);
    ToyModel model(model_cfg);

    std::vector<FrameInput> inputs;
    inputs.reserve(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        inputs.push_back(generate_frame(scene, t, model));
    }

    std::vector<LayerCache> full;
    for (std::size_t l = 0; l < engine_cfg.dims.num_layers; ++l) {
        full.emplace_back(l, engine_cfg.dims.tokens_per_frame());
    }
    std::vector<std::vector<double>> full_readout(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t l = 0; l < full.size(); ++l) {
            std::vector<TokenEntry> tokens(engine_cfg.dims.tokens_per_frame());
            const std::size_t kv = engine_cfg.dims.kv_dim();
            for (std::size_t s = 0; s < tokens.size(); ++s) {
                tokens[s].frame_index = t;
                tokens[s].slot_index = static_cast<std::uint32_t>(s);
                const float* kp = inputs[t].layer_keys[l].data() + s * kv;
                const float* vp = inputs[t].layer_values[l].data() + s * kv;
                tokens[s].key.assign(kp, kp + kv);
                tokens[s].value.assign(vp, vp + kv);
            }
            full[l].append_frame(std::move(tokens));
        }
        full_readout[t] = attention_readout(inputs[t], full, engine_cfg.dims);
    }

    FullCacheRun out;
    for (ProbeKind kind : strategies) {
        Engine engine(engine_cfg);
        engine.set_camera_intrinsics(scene_cfg.cam);
        ProbeScorer scorer(kind, engine_cfg, scene_cfg.seed);
        StrategyOutcome outcome;
        outcome.kind = kind;
        double error_sum = 0.0, seconds_sum = 0.0;
        for (std::size_t t = 0; t < frames; ++t) {
            const StepMetrics sm = engine.step(inputs[t], &scorer);
            seconds_sum += sm.step_seconds;
            outcome.total_evicted += sm.tokens_evicted;
            const std::uint64_t step_peak =
                (sm.peak_tokens + sm.camera_size) *
                engine_cfg.dims.bytes_per_token(sizeof(float));
            outcome.peak_bytes = std::max(outcome.peak_bytes, step_peak);
            const auto readout = attention_readout(inputs[t], engine.layers(), engine_cfg.dims);
            double sq = 0.0;
            for (std::size_t d = 0; d < readout.size(); ++d) {
                const double diff = readout[d] - full_readout[t][d];
                sq += diff * diff;
            }
            error_sum += std::sqrt(sq);
        }
        outcome.mean_proxy_error = error_sum / static_cast<double>(frames);
        outcome.mean_step_seconds = seconds_sum / static_cast<double>(frames);
        outcome.attention_allocations = scorer.attention_allocations();
        out.strategies.push_back(outcome);
    }
    return out;
}

}  // namespace ovkv::sim
