#pragma once

// Streaming orchestration. Each step appends one frame to every layer cache
// plus the camera cache, decides anchor registration from frustum coverage,
// allocates the token budget across layers by mean key diversity, and
// compresses every cache back under budget. Peak residency between append
// and compression is bounded by B + L*M.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ovkv/anchors.hpp"
#include "ovkv/compression.hpp"
#include "ovkv/core.hpp"
#include "ovkv/geometry.hpp"
#include "ovkv/rating.hpp"

namespace ovkv {

/// FNV-1a over raw bytes; stable across runs, used for state digests.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t seed = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

/// Everything the engine consumes for one frame. Producers fill the
/// per-layer key/value/residual blocks in slot order (aux tokens first,
/// then patches row-major). Query blocks are optional extras for probing
/// harnesses; the engine itself never reads them.
struct FrameInput {
    std::uint64_t frame_index = 0;
    std::vector<std::vector<float>> layer_keys;       ///< [L] x (M * kv_dim)
    std::vector<std::vector<float>> layer_values;     ///< [L] x (M * kv_dim)
    std::vector<std::vector<float>> layer_residuals;  ///< [L] x (M * residual_dim)
    std::vector<std::vector<float>> layer_queries;    ///< optional, [L] x (M * kv_dim)
    std::size_t residual_dim = 0;
    Pose pose;        ///< camera-to-world
    PointMap points;  ///< one point per patch, camera coordinates
};

/// Replaces the activation-based score of the current frame's tokens.
/// Returns one score per frame slot for the given layer.
class CurrentFrameScorer {
public:
    virtual ~CurrentFrameScorer() = default;
    [[nodiscard]] virtual std::vector<double> score(std::size_t layer, const FrameInput& frame,
                                                    std::span<const TokenEntry> entries) const = 0;
};

/// Camera cache budget: proportional to the per-frame share of the total
/// budget, but never below one initial plus K_max anchor camera tokens.
inline std::size_t camera_budget(const EngineConfig& cfg) {
    const std::size_t proportional = cfg.total_budget / cfg.dims.tokens_per_frame();
    const std::size_t minimum = 1 + cfg.max_anchors;
    return proportional > minimum ? proportional : minimum;
}

/// Raised when a step's per-layer floors cannot fit in the total budget.
/// The step leaves all engine state untouched.
struct BudgetInfeasible : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic per-step record. step_seconds is wall-clock and therefore
/// excluded from serialized metrics.
struct StepMetrics {
    std::uint64_t frame_index = 0;
    std::vector<std::size_t> layer_sizes;  ///< post-compression
    std::size_t camera_size = 0;
    std::uint64_t bytes_resident = 0;      ///< float32 keys+values, post-compression
    std::size_t tokens_evicted = 0;        ///< layers plus camera cache
    std::size_t peak_tokens = 0;           ///< layer total right after append
    std::optional<double> coverage;        ///< rho_t, absent on frame 0
    std::optional<std::uint64_t> anchor_registered;
    std::optional<std::uint64_t> anchor_demoted;
    std::size_t degenerate_keys = 0;       ///< zero-norm keys seen this step
    std::uint64_t state_digest = 0;
    double step_seconds = 0.0;
};

class Engine {
public:
    explicit Engine(EngineConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t m = cfg_.dims.tokens_per_frame();
        layers_.reserve(cfg_.dims.num_layers);
        for (std::size_t l = 0; l < cfg_.dims.num_layers; ++l) {
            layers_.emplace_back(l, m);
        }
        camera_ = LayerCache(cfg_.dims.num_layers, 1);
    }

    [[nodiscard]] const EngineConfig& config() const { return cfg_; }
    [[nodiscard]] std::span<const LayerCache> layers() const { return layers_; }
    [[nodiscard]] const LayerCache& camera_cache() const { return camera_; }
    [[nodiscard]] const AnchorRegistry& registry() const { return registry_; }
    [[nodiscard]] const std::vector<StepMetrics>& metrics() const { return metrics_; }
    [[nodiscard]] std::uint64_t steps_completed() const { return next_frame_; }

    /// Total bytes held by live tokens (float32 keys and values).
    [[nodiscard]] std::uint64_t bytes_resident() const {
        std::uint64_t tokens = camera_.size();
        for (const auto& l : layers_) tokens += l.size();
        return tokens * cfg_.dims.bytes_per_token(sizeof(float));
    }

    StepMetrics step(const FrameInput& frame, const CurrentFrameScorer* scorer = nullptr) {
        const auto t_begin = std::chrono::steady_clock::now();
        validate_frame(frame);
        const std::uint64_t t = frame.frame_index;
        const std::size_t m = cfg_.dims.tokens_per_frame();

        // Anchor decision and budget feasibility come first so a rejected
        // step cannot leave partial state behind.
        std::optional<double> rho;
        bool will_register = false;
        std::size_t register_quota = 0;
        std::size_t demote_quota = 0;
        if (t > 0) {
            const auto anchor = registry_.most_recent();
            rho = coverage_ratio(*anchor->points, *anchor->pose, frame.pose, camera_intrinsics_);
            will_register = registry_.would_register(t, *rho, cfg_);
            if (will_register) {
                register_quota =
                    select_protected_patches(frame.points.confidence, cfg_.anchor_eta).size();
                if (registry_.historical().size() == cfg_.max_anchors) {
                    demote_quota = registry_.oldest()->protected_patch_slots.size();
                }
            }
        }
        {
            std::size_t floor_sum = 0;
            for (const auto& layer : layers_) {
                std::size_t prot = layer.protected_count();
                if (t == 0) prot += m;
                prot += register_quota;
                prot -= demote_quota;
                floor_sum += prot + m;
            }
            if (floor_sum > cfg_.total_budget) {
                throw BudgetInfeasible(
                    "engine step " + std::to_string(t) + ": per-layer floors need " +
                    std::to_string(floor_sum) + " tokens but the budget is " +
                    std::to_string(cfg_.total_budget) + " (deficit " +
                    std::to_string(floor_sum - cfg_.total_budget) + ")");
            }
        }

        StepMetrics out;
        out.frame_index = t;

        // (1) Append the frame to every layer and the camera cache.
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].append_frame(build_frame_tokens(frame, l));
        }
        camera_.append_frame(build_camera_token(frame));
        out.peak_tokens = 0;
        for (const auto& layer : layers_) out.peak_tokens += layer.size();

        // (2) Anchoring. Registration happens before compression so a new
        // anchor's tokens can never be evicted in their own step.
        if (t == 0) {
            registry_.set_initial(frame.pose, frame.points);
            for (auto& layer : layers_) {
                layer.mark_frame_protected(0, Protection::InitialAnchor);
            }
            camera_.mark_frame_protected(0, Protection::InitialAnchor);
        } else {
            const auto reg = registry_.register_if_needed(t, *rho, frame.pose, frame.points, cfg_);
            if (reg.demoted_anchor_id) {
                for (auto& layer : layers_) layer.demote_anchor(*reg.demoted_anchor_id);
                camera_.demote_anchor(*reg.demoted_anchor_id);
                out.anchor_demoted = reg.demoted_anchor_id;
            }
            if (reg.registered) {
                const AnchorRecord& record = registry_.historical().back();
                std::vector<std::uint32_t> cache_slots;
                cache_slots.reserve(record.protected_patch_slots.size());
                for (std::uint32_t patch : record.protected_patch_slots) {
                    cache_slots.push_back(patch + static_cast<std::uint32_t>(cfg_.dims.num_aux));
                }
                for (auto& layer : layers_) {
                    layer.mark_frame_protected(t, Protection::HistoricalAnchor, record.anchor_id,
                                               &cache_slots);
                }
                camera_.mark_frame_protected(t, Protection::HistoricalAnchor, record.anchor_id);
                out.anchor_registered = record.anchor_id;
            }
        }

        // (3) Diversity per layer, budget allocation, per-layer compression.
        std::vector<std::vector<double>> hist_diversity(layers_.size());
        std::vector<std::vector<std::size_t>> hist_pos(layers_.size());
        std::vector<double> mean_diversity(layers_.size(), 0.0);
        std::vector<std::size_t> floors(layers_.size(), 0);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto entries = layers_[l].entries();
            std::vector<std::span<const float>> keys;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                const auto& e = entries[i];
                if (e.is_protected() || e.frame_index == t) continue;
                keys.emplace_back(e.key.data(), e.key.size());
                hist_pos[l].push_back(i);
            }
            hist_diversity[l] = diversity_scores(keys, &out.degenerate_keys);
            if (!hist_diversity[l].empty()) {
                double sum = 0.0;
                for (double d : hist_diversity[l]) sum += d;
                mean_diversity[l] = sum / static_cast<double>(hist_diversity[l].size());
            }
            floors[l] = layers_[l].protected_count() + m;
        }
        const BudgetAllocation alloc = allocate_budgets(cfg_.total_budget, mean_diversity, floors);

        for (std::size_t l = 0; l < layers_.size(); ++l) {
            layers_[l].set_budget(alloc.per_layer[l]);
            if (layers_[l].size() <= alloc.per_layer[l]) continue;
            const std::vector<double> slot_scores = current_frame_scores(l, frame, scorer);
            std::vector<double> fresh;
            for (const auto& e : layers_[l].entries()) {
                if (!e.is_protected() && e.frame_index == t) {
                    fresh.push_back(slot_scores[e.slot_index]);
                }
            }
            const HybridScores hybrid =
                hybrid_scores(hist_diversity[l], fresh, cfg_.hybrid_beta);
            out.tokens_evicted += compress_layer(layers_[l], hybrid, alloc.per_layer[l]);
        }

        // (4) Camera cache: diversity-only ranking, current token pinned.
        const std::size_t cam_budget = camera_budget(cfg_);
        camera_.set_budget(cam_budget);
        if (camera_.size() > cam_budget) {
            out.tokens_evicted += compress_camera(t, cam_budget, out.degenerate_keys);
        }

        // (5) Invariants and the metrics record.
        std::size_t total = 0;
        for (const auto& layer : layers_) {
            if (layer.size() > layer.budget()) {
                throw std::logic_error("engine: layer exceeded its budget after compression");
            }
            if (layer.protected_count() > protection_bound(cfg_)) {
                throw std::logic_error("engine: protected set exceeded its bound");
            }
            total += layer.size();
            out.layer_sizes.push_back(layer.size());
        }
        if (total > cfg_.total_budget) {
            throw std::logic_error("engine: total cache size exceeded the budget");
        }
        if (camera_.size() > cam_budget) {
            throw std::logic_error("engine: camera cache exceeded its budget");
        }
        out.camera_size = camera_.size();
        out.bytes_resident = bytes_resident();
        out.coverage = rho;
        out.state_digest = compute_digest(frame, rho);
        ++next_frame_;
        out.step_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
        metrics_.push_back(out);
        return out;
    }

    /// Intrinsics used for coverage; producers and engine must agree.
    void set_camera_intrinsics(const Intrinsics& cam) {
        cam.validate();
        camera_intrinsics_ = cam;
    }
    [[nodiscard]] const Intrinsics& camera_intrinsics() const { return camera_intrinsics_; }

private:
    void validate_frame(const FrameInput& frame) const {
        if (frame.frame_index != next_frame_) {
            throw std::invalid_argument("engine: expected frame " + std::to_string(next_frame_) +
                                        ", got " + std::to_string(frame.frame_index));
        }
        const std::size_t L = cfg_.dims.num_layers;
        const std::size_t m = cfg_.dims.tokens_per_frame();
        const std::size_t kv = cfg_.dims.kv_dim();
        if (frame.layer_keys.size() != L || frame.layer_values.size() != L ||
            frame.layer_residuals.size() != L) {
            throw std::invalid_argument("engine: frame does not cover every layer");
        }
        if (frame.residual_dim == 0) {
            throw std::invalid_argument("engine: residual_dim must be positive");
        }
        for (std::size_t l = 0; l < L; ++l) {
            if (frame.layer_keys[l].size() != m * kv || frame.layer_values[l].size() != m * kv) {
                throw std::invalid_argument("engine: key/value block size mismatch at layer " +
                                            std::to_string(l));
            }
            if (frame.layer_residuals[l].size() != m * frame.residual_dim) {
                throw std::invalid_argument("engine: residual block size mismatch at layer " +
                                            std::to_string(l));
            }
        }
        if (frame.points.size() != cfg_.dims.patch_count()) {
            throw std::invalid_argument("engine: point map does not match the patch grid");
        }
        frame.points.validate();
    }

    [[nodiscard]] std::vector<TokenEntry> build_frame_tokens(const FrameInput& frame,
                                                             std::size_t layer) const {
        const std::size_t m = cfg_.dims.tokens_per_frame();
        const std::size_t kv = cfg_.dims.kv_dim();
        const std::size_t aux = cfg_.dims.num_aux;
        std::vector<TokenEntry> tokens(m);
        for (std::size_t s = 0; s < m; ++s) {
            TokenEntry& e = tokens[s];
            e.frame_index = frame.frame_index;
            e.slot_index = static_cast<std::uint32_t>(s);
            if (s == 0 && aux > 0) {
                e.kind = TokenKind::Camera;
            } else if (s < aux) {
                e.kind = TokenKind::Register;
            } else {
                e.kind = TokenKind::Patch;
                const std::size_t p = s - aux;
                e.row = static_cast<std::uint16_t>(p / cfg_.dims.patch_cols);
                e.col = static_cast<std::uint16_t>(p % cfg_.dims.patch_cols);
            }
            if (frame.frame_index == 0) e.protection = Protection::InitialAnchor;
            const float* kp = frame.layer_keys[layer].data() + s * kv;
            const float* vp = frame.layer_values[layer].data() + s * kv;
            e.key.assign(kp, kp + kv);
            e.value.assign(vp, vp + kv);
        }
        return tokens;
    }

    // The camera head consumes final-layer features, so its cache token
    // carries the last layer's camera-slot key/value.
    [[nodiscard]] std::vector<TokenEntry> build_camera_token(const FrameInput& frame) const {
        const std::size_t kv = cfg_.dims.kv_dim();
        const std::size_t last = cfg_.dims.num_layers - 1;
        TokenEntry e;
        e.frame_index = frame.frame_index;
        e.slot_index = 0;
        e.kind = TokenKind::Camera;
        if (frame.frame_index == 0) e.protection = Protection::InitialAnchor;
        e.key.assign(frame.layer_keys[last].data(), frame.layer_keys[last].data() + kv);
        e.value.assign(frame.layer_values[last].data(), frame.layer_values[last].data() + kv);
        return {std::move(e)};
    }

    [[nodiscard]] std::vector<double> current_frame_scores(std::size_t layer,
                                                           const FrameInput& frame,
                                                           const CurrentFrameScorer* scorer) const {
        if (scorer != nullptr) {
            auto scores = scorer->score(layer, frame, layers_[layer].entries());
            if (scores.size() != cfg_.dims.tokens_per_frame()) {
                throw std::invalid_argument("engine: scorer returned wrong score count");
            }
            return scores;
        }
        FfnResidual residual;
        residual.data = frame.layer_residuals[layer];
        residual.tokens = cfg_.dims.tokens_per_frame();
        residual.dim = frame.residual_dim;
        const ActivationGrid raw = activation_score(residual, cfg_.dims, frame.frame_index);
        const ActivationGrid smoothed =
            smooth(raw, cfg_.smoothing_alpha, cfg_.gaussian_kernel_size, cfg_.gaussian_sigma);
        std::vector<double> slot_scores(cfg_.dims.tokens_per_frame());
        for (std::size_t s = 0; s < slot_scores.size(); ++s) {
            slot_scores[s] = s < cfg_.dims.num_aux
                                 ? smoothed.aux_scores[s]
                                 : smoothed.patch_scores[s - cfg_.dims.num_aux];
        }
        return slot_scores;
    }

    std::size_t compress_camera(std::uint64_t t, std::size_t budget,
                                std::size_t& degenerate_counter) {
        std::vector<std::span<const float>> keys;
        std::size_t current_evictable = 0;
        for (const auto& e : camera_.entries()) {
            if (e.is_protected()) continue;
            if (e.frame_index == t) {
                ++current_evictable;
                continue;
            }
            keys.emplace_back(e.key.data(), e.key.size());
        }
        const std::vector<double> div = diversity_scores(keys, &degenerate_counter);
        const HybridScores ranked = hybrid_scores(div, {}, 0.0);
        HybridScores pinned = ranked;
        // The freshest camera token outranks every normalized score so it is
        // only dropped when protected tokens already fill the budget.
        for (std::size_t i = 0; i < current_evictable; ++i) pinned.scores.push_back(2.0);
        pinned.new_count = current_evictable;
        return compress_layer(camera_, pinned, budget);
    }

    [[nodiscard]] std::uint64_t compute_digest(const FrameInput& frame,
                                               const std::optional<double>& rho) const {
        std::uint64_t h = fnv1a64(nullptr, 0);
        auto absorb = [&h](const void* p, std::size_t n) { h = fnv1a64(p, n, h); };
        for (std::size_t l = 0; l < frame.layer_keys.size(); ++l) {
            absorb(frame.layer_keys[l].data(), frame.layer_keys[l].size() * sizeof(float));
            absorb(frame.layer_values[l].data(), frame.layer_values[l].size() * sizeof(float));
            absorb(frame.layer_residuals[l].data(),
                   frame.layer_residuals[l].size() * sizeof(float));
        }
        const double pose_raw[12] = {
            frame.pose.rotation.m[0], frame.pose.rotation.m[1], frame.pose.rotation.m[2],
            frame.pose.rotation.m[3], frame.pose.rotation.m[4], frame.pose.rotation.m[5],
            frame.pose.rotation.m[6], frame.pose.rotation.m[7], frame.pose.rotation.m[8],
            frame.pose.translation.x, frame.pose.translation.y, frame.pose.translation.z};
        absorb(pose_raw, sizeof(pose_raw));
        for (std::size_t i = 0; i < frame.points.size(); ++i) {
            const double point_raw[4] = {frame.points.points[i].x, frame.points.points[i].y,
                                         frame.points.points[i].z, frame.points.confidence[i]};
            absorb(point_raw, sizeof(point_raw));
        }
        if (rho) absorb(&*rho, sizeof(double));
        auto absorb_survivors = [&](const LayerCache& cache) {
            for (const auto& e : cache.entries()) {
                const std::uint64_t ids[2] = {e.frame_index, e.slot_index};
                absorb(ids, sizeof(ids));
            }
        };
        for (const auto& layer : layers_) absorb_survivors(layer);
        absorb_survivors(camera_);
        return h;
    }

    EngineConfig cfg_;
    std::vector<LayerCache> layers_;
    LayerCache camera_{0, 1};
    AnchorRegistry registry_;
    Intrinsics camera_intrinsics_{64.0, 64.0, 32.0, 32.0, 64, 64};
    std::vector<StepMetrics> metrics_;
    std::uint64_t next_frame_ = 0;
};

}  // namespace ovkv
