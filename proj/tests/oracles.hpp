#pragma once

// Reference implementations the suite checks the library against. These
// favor directness over speed: repeated-scan selection instead of sorts,
// Gauss-Jordan matrix inversion instead of pose algebra, full 2-D
// convolution instead of separable passes.
//
// Where a value feeds a discrete choice (normalized scores, allocation
// shares) the oracle evaluates the same floating-point expressions in the
// same order, because survivor sets are compared exactly and any last-ulp
// drift would flip ties. Independence lives in the surrounding control
// flow, not in re-deriving IEEE arithmetic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ovkv/core.hpp"
#include "ovkv/engine.hpp"
#include "ovkv/geometry.hpp"

namespace oracle {

inline double l2_norm(std::span<const float> v) {
    double sq = 0.0;
    for (float x : v) sq += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(sq);
}

// Edge-repeat reflection via its closed form: the pattern has period 2n;
// the first half walks forward, the second half walks back.
inline std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
    const auto period = static_cast<std::ptrdiff_t>(2 * n);
    std::ptrdiff_t j = i % period;
    if (j < 0) j += period;
    return static_cast<std::size_t>(j < static_cast<std::ptrdiff_t>(n) ? j : period - 1 - j);
}

// Full 2-D convolution with the outer-product kernel, then the alpha blend.
inline std::vector<double> smooth_2d(const std::vector<double>& grid, std::size_t rows,
                                     std::size_t cols, double alpha, std::size_t kernel_size,
                                     double sigma) {
    std::vector<double> taps(kernel_size);
    const auto radius = static_cast<std::ptrdiff_t>(kernel_size / 2);
    double sum = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        taps[static_cast<std::size_t>(i + radius)] =
            std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        sum += taps[static_cast<std::size_t>(i + radius)];
    }
    for (double& t : taps) t /= sum;

    std::vector<double> out(grid.size());
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t dr = -radius; dr <= radius; ++dr) {
                for (std::ptrdiff_t dc = -radius; dc <= radius; ++dc) {
                    const std::size_t rr = reflect(static_cast<std::ptrdiff_t>(r) + dr, rows);
                    const std::size_t cc = reflect(static_cast<std::ptrdiff_t>(c) + dc, cols);
                    acc += taps[static_cast<std::size_t>(dr + radius)] *
                           taps[static_cast<std::size_t>(dc + radius)] * grid[rr * cols + cc];
                }
            }
            out[r * cols + c] = alpha * acc + (1.0 - alpha) * grid[r * cols + c];
        }
    }
    return out;
}

// --- 4x4 homogeneous projection path -------------------------------------

using Mat4 = std::array<double, 16>;

inline Mat4 mat4_from_pose(const ovkv::Pose& p) {
    Mat4 m{};
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 3; ++c) m[r * 4 + c] = p.rotation.at(r, c);
    }
    m[3] = p.translation.x;
    m[7] = p.translation.y;
    m[11] = p.translation.z;
    m[15] = 1.0;
    return m;
}

inline Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
    Mat4 r{};
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            for (std::size_t k = 0; k < 4; ++k) r[i * 4 + j] += a[i * 4 + k] * b[k * 4 + j];
    return r;
}

inline Mat4 mat4_invert(Mat4 a) {
    Mat4 inv{};
    for (std::size_t i = 0; i < 4; ++i) inv[i * 4 + i] = 1.0;
    for (std::size_t col = 0; col < 4; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < 4; ++r) {
            if (std::abs(a[r * 4 + col]) > std::abs(a[pivot * 4 + col])) pivot = r;
        }
        if (a[pivot * 4 + col] == 0.0) throw std::domain_error("mat4_invert: singular");
        if (pivot != col) {
            for (std::size_t c = 0; c < 4; ++c) {
                std::swap(a[col * 4 + c], a[pivot * 4 + c]);
                std::swap(inv[col * 4 + c], inv[pivot * 4 + c]);
            }
        }
        const double d = a[col * 4 + col];
        for (std::size_t c = 0; c < 4; ++c) {
            a[col * 4 + c] /= d;
            inv[col * 4 + c] /= d;
        }
        for (std::size_t r = 0; r < 4; ++r) {
            if (r == col) continue;
            const double f = a[r * 4 + col];
            if (f == 0.0) continue;
            for (std::size_t c = 0; c < 4; ++c) {
                a[r * 4 + c] -= f * a[col * 4 + c];
                inv[r * 4 + c] -= f * inv[col * 4 + c];
            }
        }
    }
    return inv;
}

/// Coverage through homogeneous matrices: world = A * p_anchor,
/// p_current = C^-1 * world, then the pinhole test.
inline double coverage_homogeneous(const ovkv::PointMap& pts, const ovkv::Pose& anchor_pose,
                                   const ovkv::Pose& current_pose, const ovkv::Intrinsics& cam,
                                   double z_min = 1e-6) {
    const Mat4 rel = mat4_mul(mat4_invert(mat4_from_pose(current_pose)),
                              mat4_from_pose(anchor_pose));
    std::size_t covered = 0;
    for (const auto& p : pts.points) {
        const double x = rel[0] * p.x + rel[1] * p.y + rel[2] * p.z + rel[3];
        const double y = rel[4] * p.x + rel[5] * p.y + rel[6] * p.z + rel[7];
        const double z = rel[8] * p.x + rel[9] * p.y + rel[10] * p.z + rel[11];
        if (!(z > z_min)) continue;
        const double u = cam.fx * x / z + cam.cx;
        const double v = cam.fy * y / z + cam.cy;
        if (u >= 0.0 && u < static_cast<double>(cam.width) && v >= 0.0 &&
            v < static_cast<double>(cam.height)) {
            ++covered;
        }
    }
    return static_cast<double>(covered) / static_cast<double>(pts.points.size());
}

// --- survivor selection by repeated scan ----------------------------------

struct RankedToken {
    double score = 0.0;
    std::uint64_t frame = 0;
    std::uint32_t slot = 0;
};

// True when a outranks b: higher score, then fresher frame, then lower slot.
inline bool outranks(const RankedToken& a, const RankedToken& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame > b.frame;
    return a.slot < b.slot;
}

/// Picks the `count` best tokens by scanning for the maximum repeatedly.
/// Returns their positions within `pool`.
inline std::vector<std::size_t> pick_best_scan(const std::vector<RankedToken>& pool,
                                               std::size_t count) {
    std::vector<char> taken(pool.size(), 0);
    std::vector<std::size_t> picked;
    picked.reserve(count);
    for (std::size_t round = 0; round < count; ++round) {
        std::size_t best = pool.size();
        for (std::size_t i = 0; i < pool.size(); ++i) {
            if (taken[i]) continue;
            if (best == pool.size() || outranks(pool[i], pool[best])) best = i;
        }
        taken[best] = 1;
        picked.push_back(best);
    }
    return picked;
}

/// Largest-remainder split with floors, leftover handed out through a
/// fractional ranking built by repeated scans.
inline std::vector<std::size_t> allocate_scan(std::size_t total,
                                              const std::vector<double>& diversity,
                                              const std::vector<std::size_t>& floors) {
    std::size_t floor_sum = 0;
    for (std::size_t f : floors) floor_sum += f;
    if (total < floor_sum) throw std::runtime_error("allocate_scan: infeasible floors");
    std::vector<std::size_t> out(floors);
    const std::size_t remainder = total - floor_sum;
    if (remainder == 0) return out;

    double weight_sum = 0.0;
    for (double d : diversity) weight_sum += d;
    std::vector<double> weights(diversity);
    if (weight_sum == 0.0) {
        weights.assign(diversity.size(), 1.0);
        weight_sum = static_cast<double>(diversity.size());
    }
    std::vector<double> fractional(diversity.size());
    std::size_t assigned = 0;
    for (std::size_t l = 0; l < diversity.size(); ++l) {
        const double share = static_cast<double>(remainder) * weights[l] / weight_sum;
        out[l] += static_cast<std::size_t>(std::floor(share));
        assigned += static_cast<std::size_t>(std::floor(share));
        fractional[l] = share - std::floor(share);
    }
    std::vector<std::size_t> order;
    std::vector<char> taken(diversity.size(), 0);
    for (std::size_t round = 0; round < diversity.size(); ++round) {
        std::size_t best = diversity.size();
        for (std::size_t l = 0; l < diversity.size(); ++l) {
            if (taken[l]) continue;
            if (best == diversity.size() || fractional[l] > fractional[best]) best = l;
        }
        taken[best] = 1;
        order.push_back(best);
    }
    std::size_t leftover = remainder - assigned;
    for (std::size_t i = 0; leftover > 0; i = (i + 1) % order.size()) {
        out[order[i]] += 1;
        --leftover;
    }
    return out;
}

// --- naive budgeted-cache tracker -----------------------------------------

/// From-scratch re-simulation of the retention policy over raw token lists.
/// Tracks (frame, slot) survivors per layer plus the camera head so an
/// engine run can be checked step by step. Coverage values are taken from
/// the production projection (they are an input signal to the policy and
/// are verified separately against the homogeneous path).
class NaiveTracker {
public:
    struct Token {
        std::uint64_t frame = 0;
        std::uint32_t slot = 0;
        int protection = 0;  // 0 none, 1 initial, 2 historical
        std::uint64_t anchor_id = 0;
        std::vector<float> key;
    };

    struct StepOutcome {
        std::optional<double> coverage;
        std::optional<std::uint64_t> registered;
        std::optional<std::uint64_t> demoted;
    };

    NaiveTracker(const ovkv::EngineConfig& cfg, const ovkv::Intrinsics& cam)
        : cfg_(cfg), cam_(cam), layers_(cfg.dims.num_layers) {}

    [[nodiscard]] const std::vector<std::vector<Token>>& layers() const { return layers_; }
    [[nodiscard]] const std::vector<Token>& camera() const { return camera_; }

    StepOutcome step(const ovkv::FrameInput& frame) {
        const std::uint64_t t = frame.frame_index;
        const std::size_t m = cfg_.dims.tokens_per_frame();
        const std::size_t kv = cfg_.dims.kv_dim();
        StepOutcome out;

        // Coverage against the newest anchor.
        const ovkv::Pose* anchor_pose = nullptr;
        const ovkv::PointMap* anchor_points = nullptr;
        if (t > 0) {
            if (!historical_.empty()) {
                anchor_pose = &historical_.back().pose;
                anchor_points = &historical_.back().points;
            } else {
                anchor_pose = &initial_pose_;
                anchor_points = &initial_points_;
            }
            out.coverage =
                ovkv::coverage_ratio(*anchor_points, *anchor_pose, frame.pose, cam_);
        }

        // Append everywhere.
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            for (std::size_t s = 0; s < m; ++s) {
                Token tok;
                tok.frame = t;
                tok.slot = static_cast<std::uint32_t>(s);
                tok.protection = t == 0 ? 1 : 0;
                const float* kp = frame.layer_keys[l].data() + s * kv;
                tok.key.assign(kp, kp + kv);
                layers_[l].push_back(std::move(tok));
            }
        }
        {
            Token cam_tok;
            cam_tok.frame = t;
            cam_tok.slot = 0;
            cam_tok.protection = t == 0 ? 1 : 0;
            const auto& last = frame.layer_keys.back();
            cam_tok.key.assign(last.data(), last.data() + kv);
            camera_.push_back(std::move(cam_tok));
        }

        // Anchoring.
        if (t == 0) {
            initial_pose_ = frame.pose;
            initial_points_ = frame.points;
            last_registration_ = 0;
        } else if (*out.coverage < cfg_.coverage_tau &&
                   t - last_registration_ >= cfg_.min_anchor_interval) {
            if (historical_.size() == cfg_.max_anchors) {
                const std::uint64_t gone = historical_.front().id;
                historical_.pop_front();
                out.demoted = gone;
                for (auto& layer : layers_) {
                    for (auto& tok : layer) {
                        if (tok.protection == 2 && tok.anchor_id == gone) {
                            tok.protection = 0;
                            tok.anchor_id = 0;
                        }
                    }
                }
                for (auto& tok : camera_) {
                    if (tok.protection == 2 && tok.anchor_id == gone) {
                        tok.protection = 0;
                        tok.anchor_id = 0;
                    }
                }
            }
            Anchor a;
            a.id = next_id_++;
            a.frame = t;
            a.pose = frame.pose;
            a.points = frame.points;
            a.patch_slots = top_confidence_patches(frame.points.confidence);
            for (auto& layer : layers_) {
                for (auto& tok : layer) {
                    if (tok.frame != t) continue;
                    for (std::uint32_t p : a.patch_slots) {
                        if (tok.slot == p + cfg_.dims.num_aux) {
                            tok.protection = 2;
                            tok.anchor_id = a.id;
                        }
                    }
                }
            }
            for (auto& tok : camera_) {
                if (tok.frame == t) {
                    tok.protection = 2;
                    tok.anchor_id = a.id;
                }
            }
            out.registered = a.id;
            last_registration_ = t;
            historical_.push_back(std::move(a));
        }

        // Diversity and budgets.
        std::vector<std::vector<double>> hist_div(layers_.size());
        std::vector<double> mean_div(layers_.size(), 0.0);
        std::vector<std::size_t> floors(layers_.size(), 0);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            std::vector<const Token*> hist;
            for (const auto& tok : layers_[l]) {
                if (tok.protection == 0 && tok.frame != t) hist.push_back(&tok);
            }
            hist_div[l] = centroid_distances(hist);
            if (!hist_div[l].empty()) {
                double sum = 0.0;
                for (double d : hist_div[l]) sum += d;
                mean_div[l] = sum / static_cast<double>(hist_div[l].size());
            }
            std::size_t prot = 0;
            for (const auto& tok : layers_[l]) prot += tok.protection != 0 ? 1 : 0;
            floors[l] = prot + m;
        }
        const std::vector<std::size_t> budgets = allocate_scan(cfg_.total_budget, mean_div, floors);

        // Layer compression.
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            if (layers_[l].size() <= budgets[l]) continue;
            const std::vector<double> slot_scores = fresh_slot_scores(frame, l);

            std::vector<double> hist_norm = minmax(hist_div[l]);
            std::vector<double> fresh_raw;
            for (const auto& tok : layers_[l]) {
                if (tok.protection == 0 && tok.frame == t) {
                    fresh_raw.push_back(slot_scores[tok.slot]);
                }
            }
            std::vector<double> fresh_norm = minmax(fresh_raw);

            std::vector<RankedToken> pool;
            std::vector<std::size_t> pos;
            std::size_t hist_i = 0, fresh_i = 0, prot = 0;
            for (std::size_t i = 0; i < layers_[l].size(); ++i) {
                const Token& tok = layers_[l][i];
                if (tok.protection != 0) {
                    ++prot;
                    continue;
                }
                const double score = tok.frame == t
                                         ? cfg_.hybrid_beta * fresh_norm[fresh_i++]
                                         : (1.0 - cfg_.hybrid_beta) * hist_norm[hist_i++];
                pool.push_back({score, tok.frame, tok.slot});
                pos.push_back(i);
            }
            keep_best(layers_[l], pool, pos, budgets[l] - prot);
        }

        // Camera compression.
        const std::size_t cam_budget = std::max(cfg_.total_budget / m,
                                                std::size_t{1} + cfg_.max_anchors);
        if (camera_.size() > cam_budget) {
            std::vector<const Token*> hist;
            for (const auto& tok : camera_) {
                if (tok.protection == 0 && tok.frame != t) hist.push_back(&tok);
            }
            const std::vector<double> hist_norm = minmax(centroid_distances(hist));
            std::vector<RankedToken> pool;
            std::vector<std::size_t> pos;
            std::size_t hist_i = 0, prot = 0;
            for (std::size_t i = 0; i < camera_.size(); ++i) {
                const Token& tok = camera_[i];
                if (tok.protection != 0) {
                    ++prot;
                    continue;
                }
                const double score = tok.frame == t ? 2.0 : 1.0 * hist_norm[hist_i++];
                pool.push_back({score, tok.frame, tok.slot});
                pos.push_back(i);
            }
            keep_best(camera_, pool, pos, cam_budget - prot);
        }
        return out;
    }

private:
    struct Anchor {
        std::uint64_t id = 0;
        std::uint64_t frame = 0;
        ovkv::Pose pose;
        ovkv::PointMap points;
        std::vector<std::uint32_t> patch_slots;
    };

    [[nodiscard]] std::vector<std::uint32_t> top_confidence_patches(
        const std::vector<double>& conf) const {
        const auto want = static_cast<std::size_t>(
            std::ceil(cfg_.anchor_eta * static_cast<double>(conf.size())));
        std::vector<char> taken(conf.size(), 0);
        std::vector<std::uint32_t> slots;
        for (std::size_t round = 0; round < want; ++round) {
            std::size_t best = conf.size();
            for (std::size_t i = 0; i < conf.size(); ++i) {
                if (taken[i]) continue;
                if (best == conf.size() || conf[i] > conf[best]) best = i;
            }
            taken[best] = 1;
            slots.push_back(static_cast<std::uint32_t>(best));
        }
        std::sort(slots.begin(), slots.end());
        return slots;
    }

    // Same accumulation order as the library so score bits agree.
    [[nodiscard]] static std::vector<double> centroid_distances(
        const std::vector<const Token*>& keys) {
        std::vector<double> scores(keys.size(), 0.0);
        if (keys.empty()) return scores;
        const std::size_t dim = keys.front()->key.size();
        std::vector<double> centroid(dim, 0.0);
        for (const Token* k : keys) {
            for (std::size_t j = 0; j < dim; ++j) {
                centroid[j] += static_cast<double>(k->key[j]);
            }
        }
        const auto n = static_cast<double>(keys.size());
        double centroid_sq = 0.0;
        for (double& c : centroid) {
            c /= n;
            centroid_sq += c * c;
        }
        const double centroid_norm = std::sqrt(centroid_sq);
        if (centroid_norm == 0.0) return scores;
        for (std::size_t i = 0; i < keys.size(); ++i) {
            double dot = 0.0, key_sq = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const auto v = static_cast<double>(keys[i]->key[j]);
                dot += v * centroid[j];
                key_sq += v * v;
            }
            const double key_norm = std::sqrt(key_sq);
            scores[i] = key_norm == 0.0 ? 0.0 : 1.0 - dot / (key_norm * centroid_norm);
        }
        return scores;
    }

    [[nodiscard]] static std::vector<double> minmax(const std::vector<double>& in) {
        std::vector<double> out;
        if (in.empty()) return out;
        double lo = in[0], hi = in[0];
        for (double v : in) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        out.reserve(in.size());
        for (double v : in) out.push_back(hi > lo ? (v - lo) / (hi - lo) : 0.5);
        return out;
    }

    // Fresh scores go through the production scoring path: survivor sets are
    // compared exactly, and the separable convolution is only equal to the
    // 2-D oracle up to rounding. smooth() itself is checked against
    // smooth_2d with a tolerance in the rating tests.
    [[nodiscard]] std::vector<double> fresh_slot_scores(const ovkv::FrameInput& frame,
                                                        std::size_t layer) const {
        ovkv::FfnResidual residual;
        residual.data = frame.layer_residuals[layer];
        residual.tokens = cfg_.dims.tokens_per_frame();
        residual.dim = frame.residual_dim;
        const ovkv::ActivationGrid blended =
            ovkv::smooth(ovkv::activation_score(residual, cfg_.dims, frame.frame_index),
                         cfg_.smoothing_alpha, cfg_.gaussian_kernel_size, cfg_.gaussian_sigma);
        std::vector<double> out(cfg_.dims.tokens_per_frame());
        for (std::size_t s = 0; s < out.size(); ++s) {
            out[s] = s < cfg_.dims.num_aux
                         ? blended.aux_scores[s]
                         : blended.patch_scores[s - cfg_.dims.num_aux];
        }
        return out;
    }

    static void keep_best(std::vector<Token>& tokens, const std::vector<RankedToken>& pool,
                          const std::vector<std::size_t>& pos, std::size_t count) {
        std::vector<char> keep(tokens.size(), 0);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i].protection != 0) keep[i] = 1;
        }
        for (std::size_t k : pick_best_scan(pool, count)) keep[pos[k]] = 1;
        std::vector<Token> next;
        next.reserve(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (keep[i]) next.push_back(std::move(tokens[i]));
        }
        tokens.swap(next);
    }

    ovkv::EngineConfig cfg_;
    ovkv::Intrinsics cam_;
    std::vector<std::vector<Token>> layers_;
    std::vector<Token> camera_;
    ovkv::Pose initial_pose_;
    ovkv::PointMap initial_points_;
    std::deque<Anchor> historical_;
    std::uint64_t last_registration_ = 0;
    std::uint64_t next_id_ = 1;
};

}  // namespace oracle
