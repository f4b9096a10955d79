#pragma once

// Anchor protection. Frame 0 is always a global anchor; later frames are
// registered as historical anchors when frustum coverage of the newest
// anchor drops below tau and enough frames have passed. At most K_max
// historical anchors are live; registering past that demotes the oldest.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ovkv/core.hpp"
#include "ovkv/geometry.hpp"

namespace ovkv {

/// Patch slots protected for one anchor: the ceil(eta * N_p) highest
/// confidences, ties resolved toward the lower index. Returned sorted
/// ascending. Non-finite confidence values are rejected.
inline std::vector<std::uint32_t> select_protected_patches(std::span<const double> confidence,
                                                           double eta) {
    if (confidence.empty()) {
        throw std::invalid_argument("select_protected_patches: empty confidence vector");
    }
    if (!(eta > 0.0 && eta < 1.0)) {
        throw std::invalid_argument("select_protected_patches: eta must lie in (0, 1)");
    }
    for (double c : confidence) {
        if (!std::isfinite(c)) {
            throw std::domain_error("select_protected_patches: non-finite confidence");
        }
    }
    const auto count = static_cast<std::size_t>(
        std::ceil(eta * static_cast<double>(confidence.size())));

    std::vector<std::uint32_t> order(confidence.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
        if (confidence[a] != confidence[b]) return confidence[a] > confidence[b];
        return a < b;
    });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

/// Hard cap on the protected set per layer: the whole initial frame plus
/// K_max anchors' patch quotas.
inline std::size_t protection_bound(const EngineConfig& cfg) {
    return cfg.dims.tokens_per_frame() + cfg.max_anchors * cfg.protected_patches_per_anchor();
}

/// One live historical anchor.
struct AnchorRecord {
    std::uint64_t anchor_id = 0;
    std::uint64_t frame_index = 0;
    Pose pose;
    PointMap points;
    std::vector<std::uint32_t> protected_patch_slots;  ///< patch indices, sorted
};

/// Bookkeeping for the initial anchor and the FIFO of historical anchors.
/// The registry only decides; the engine applies protection marks to the
/// caches so both always agree.
class AnchorRegistry {
public:
    struct Registration {
        bool registered = false;
        std::uint64_t anchor_id = 0;                      ///< valid when registered
        std::optional<std::uint64_t> demoted_anchor_id;   ///< oldest, if one was pushed out
    };

    [[nodiscard]] bool initial_frame_protected() const { return initial_set_; }
    [[nodiscard]] const std::deque<AnchorRecord>& historical() const { return historical_; }
    [[nodiscard]] std::int64_t last_registration_frame() const { return last_registration_frame_; }

    /// Installs frame 0 as the global anchor. Counts as a registration for
    /// interval gating.
    void set_initial(const Pose& pose, PointMap points) {
        if (initial_set_) {
            throw std::logic_error("AnchorRegistry: initial anchor already set");
        }
        pose.validate();
        points.validate();
        initial_pose_ = pose;
        initial_points_ = std::move(points);
        initial_set_ = true;
        last_registration_frame_ = 0;
        last_seen_frame_ = 0;
    }

    /// Newest live anchor to measure coverage against: the most recent
    /// historical anchor, else the initial one.
    struct AnchorView {
        const Pose* pose = nullptr;
        const PointMap* points = nullptr;
        std::uint64_t frame_index = 0;
    };
    [[nodiscard]] std::optional<AnchorView> most_recent() const {
        if (!historical_.empty()) {
            const AnchorRecord& r = historical_.back();
            return AnchorView{&r.pose, &r.points, r.frame_index};
        }
        if (initial_set_) return AnchorView{&initial_pose_, &initial_points_, 0};
        return std::nullopt;
    }

    /// Pure registration predicate: low coverage and the interval elapsed.
    [[nodiscard]] bool would_register(std::uint64_t frame_index, double coverage,
                                      const EngineConfig& cfg) const {
        if (!initial_set_ || frame_index == 0) return false;
        if (!(coverage < cfg.coverage_tau)) return false;
        return frame_index - static_cast<std::uint64_t>(last_registration_frame_) >=
               cfg.min_anchor_interval;
    }

    [[nodiscard]] const AnchorRecord* oldest() const {
        return historical_.empty() ? nullptr : &historical_.front();
    }

    /// Registers `frame_index` as a historical anchor when would_register
    /// holds, protecting the top-confidence patch quota. At capacity the
    /// oldest anchor is dropped and its id reported so the engine can
    /// demote its tokens. Frame indices must be presented in increasing
    /// order.
    Registration register_if_needed(std::uint64_t frame_index, double coverage,
                                    const Pose& frame_pose, const PointMap& frame_points,
                                    const EngineConfig& cfg) {
        if (!initial_set_) {
            throw std::logic_error("AnchorRegistry: initial anchor not set");
        }
        if (frame_index <= last_seen_frame_) {
            throw std::invalid_argument(
                "AnchorRegistry: frame " + std::to_string(frame_index) +
                " not beyond last seen frame " + std::to_string(last_seen_frame_));
        }
        last_seen_frame_ = frame_index;

        Registration result;
        if (!would_register(frame_index, coverage, cfg)) return result;

        frame_pose.validate();
        frame_points.validate();
        AnchorRecord record;
        record.anchor_id = next_anchor_id_++;
        record.frame_index = frame_index;
        record.pose = frame_pose;
        record.points = frame_points;
        record.protected_patch_slots =
            select_protected_patches(frame_points.confidence, cfg.anchor_eta);

        if (historical_.size() == cfg.max_anchors) {
            result.demoted_anchor_id = historical_.front().anchor_id;
            historical_.pop_front();
        }
        historical_.push_back(std::move(record));
        last_registration_frame_ = static_cast<std::int64_t>(frame_index);
        result.registered = true;
        result.anchor_id = historical_.back().anchor_id;
        return result;
    }

private:
    bool initial_set_ = false;
    Pose initial_pose_;
    PointMap initial_points_;
    std::deque<AnchorRecord> historical_;
    std::int64_t last_registration_frame_ = -1;
    std::uint64_t last_seen_frame_ = 0;
    std::uint64_t next_anchor_id_ = 1;
};

}  // namespace ovkv
