#pragma once

// Eviction policy: geometric diversity for historical tokens, activation
// scores for fresh tokens, a hybrid ranking over both, diversity-weighted
// per-layer budget allocation, and top-k retention with a deterministic
// tie-break.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ovkv/core.hpp"

namespace ovkv {

/// Angular distance of each key from the centroid of the given key set:
/// d_i = 1 - cos(k_i, mean k), in [0, 2]. A zero-norm key or a zero-norm
/// centroid scores 0 and bumps `degenerate_count` once per affected key.
inline std::vector<double> diversity_scores(const std::vector<std::span<const float>>& keys,
                                            std::size_t* degenerate_count = nullptr) {
    std::vector<double> scores(keys.size(), 0.0);
    if (keys.empty()) return scores;

    const std::size_t dim = keys.front().size();
    for (const auto& k : keys) {
        if (k.size() != dim) {
            throw std::invalid_argument("diversity_scores: inconsistent key dimensions");
        }
        for (float v : k) {
            if (!std::isfinite(v)) {
                throw std::domain_error("diversity_scores: non-finite key component");
            }
        }
    }

    std::vector<double> centroid(dim, 0.0);
    for (const auto& k : keys) {
        for (std::size_t j = 0; j < dim; ++j) centroid[j] += static_cast<double>(k[j]);
    }
    const auto n = static_cast<double>(keys.size());
    double centroid_sq = 0.0;
    for (double& c : centroid) {
        c /= n;
        centroid_sq += c * c;
    }
    const double centroid_norm = std::sqrt(centroid_sq);
    if (centroid_norm == 0.0) {
        if (degenerate_count != nullptr) *degenerate_count += keys.size();
        return scores;  // all zeros
    }

    for (std::size_t i = 0; i < keys.size(); ++i) {
        double dot = 0.0, key_sq = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const auto v = static_cast<double>(keys[i][j]);
            dot += v * centroid[j];
            key_sq += v * v;
        }
        const double key_norm = std::sqrt(key_sq);
        if (key_norm == 0.0) {
            if (degenerate_count != nullptr) ++(*degenerate_count);
            scores[i] = 0.0;
            continue;
        }
        scores[i] = 1.0 - dot / (key_norm * centroid_norm);
    }
    return scores;
}

/// Hybrid ranking over one layer's evictable entries: historical tokens
/// first (scored by normalized diversity, weight 1 - beta), then the
/// current frame's tokens (normalized activation, weight beta). Keeps the
/// normalization bounds around for diagnostics.
struct HybridScores {
    std::vector<double> scores;  ///< aligned with [historical..., fresh...]
    std::size_t hist_count = 0;
    std::size_t new_count = 0;
    double hist_min = 0.0, hist_max = 0.0;
    double new_min = 0.0, new_max = 0.0;
};

namespace detail {

// Min-max normalization; a degenerate source (max == min) maps to 0.5.
inline void minmax_normalize(std::span<const double> in, std::vector<double>& out,
                             double& lo_out, double& hi_out, const char* what) {
    double lo = 0.0, hi = 0.0;
    if (!in.empty()) {
        lo = hi = in[0];
        for (double v : in) {
            if (!std::isfinite(v)) {
                throw std::domain_error(std::string("hybrid_scores: non-finite ") + what);
            }
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    lo_out = lo;
    hi_out = hi;
    for (double v : in) {
        out.push_back(hi > lo ? (v - lo) / (hi - lo) : 0.5);
    }
}

}  // namespace detail

inline HybridScores hybrid_scores(std::span<const double> hist_diversity,
                                  std::span<const double> new_activation, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw std::invalid_argument("hybrid_scores: beta must lie in [0, 1]");
    }
    HybridScores out;
    out.hist_count = hist_diversity.size();
    out.new_count = new_activation.size();
    out.scores.reserve(out.hist_count + out.new_count);

    std::vector<double> normalized;
    normalized.reserve(out.hist_count + out.new_count);
    detail::minmax_normalize(hist_diversity, normalized, out.hist_min, out.hist_max,
                             "diversity score");
    detail::minmax_normalize(new_activation, normalized, out.new_min, out.new_max,
                             "activation score");

    for (std::size_t i = 0; i < out.hist_count; ++i) {
        out.scores.push_back((1.0 - beta) * normalized[i]);
    }
    for (std::size_t i = 0; i < out.new_count; ++i) {
        out.scores.push_back(beta * normalized[out.hist_count + i]);
    }
    return out;
}

struct BudgetAllocation {
    std::vector<std::size_t> per_layer;
};

/// Splits `total` tokens across layers: each layer first receives its
/// floor, then the remainder is shared proportionally to per-layer mean
/// diversity using largest-remainder rounding (ties go to the lower layer
/// index). All-zero diversity falls back to a uniform split. A total below
/// the summed floors is rejected, reporting the deficit.
inline BudgetAllocation allocate_budgets(std::size_t total,
                                         std::span<const double> diversity,
                                         std::span<const std::size_t> floors) {
    if (diversity.empty() || diversity.size() != floors.size()) {
        throw std::invalid_argument("allocate_budgets: diversity/floors size mismatch");
    }
    for (double d : diversity) {
        if (!std::isfinite(d) || d < 0.0) {
            throw std::domain_error("allocate_budgets: diversity must be finite and non-negative");
        }
    }
    const std::size_t layer_count = diversity.size();
    std::size_t floor_sum = 0;
    for (std::size_t f : floors) floor_sum += f;
    if (total < floor_sum) {
        throw std::invalid_argument(
            "allocate_budgets: budget " + std::to_string(total) + " is short of the " +
            std::to_string(floor_sum) + " tokens the floors require (deficit " +
            std::to_string(floor_sum - total) + ")");
    }

    BudgetAllocation alloc;
    alloc.per_layer.assign(floors.begin(), floors.end());
    const std::size_t remainder = total - floor_sum;
    if (remainder == 0) return alloc;

    double weight_sum = std::accumulate(diversity.begin(), diversity.end(), 0.0);
    std::vector<double> weights(diversity.begin(), diversity.end());
    if (weight_sum == 0.0) {
        std::fill(weights.begin(), weights.end(), 1.0);
        weight_sum = static_cast<double>(layer_count);
    }

    std::vector<double> fractional(layer_count);
    std::size_t assigned = 0;
    for (std::size_t l = 0; l < layer_count; ++l) {
        const double share =
            static_cast<double>(remainder) * weights[l] / weight_sum;
        const auto base = static_cast<std::size_t>(std::floor(share));
        alloc.per_layer[l] += base;
        assigned += base;
        fractional[l] = share - std::floor(share);
    }

    std::vector<std::size_t> order(layer_count);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (fractional[a] != fractional[b]) return fractional[a] > fractional[b];
        return a < b;
    });
    std::size_t leftover = remainder - assigned;
    for (std::size_t i = 0; leftover > 0; i = (i + 1) % layer_count) {
        alloc.per_layer[order[i]] += 1;
        --leftover;
    }
    return alloc;
}

namespace detail {

// Descending score; ties prefer the fresher frame, then the lower slot.
// Total order over distinct entries, so selection is deterministic.
struct EvictionRankLess {
    const std::vector<double>& score;
    const std::vector<const TokenEntry*>& entry;
    bool operator()(std::size_t a, std::size_t b) const {
        if (score[a] != score[b]) return score[a] > score[b];
        if (entry[a]->frame_index != entry[b]->frame_index) {
            return entry[a]->frame_index > entry[b]->frame_index;
        }
        return entry[a]->slot_index < entry[b]->slot_index;
    }
};

}  // namespace detail

/// Shrinks the cache to `budget` tokens: every protected entry survives,
/// the remaining slots go to the highest hybrid scores, and survivors keep
/// arrival order. A cache already within budget is returned untouched. A
/// budget below the protected count is rejected. Returns the eviction count.
inline std::size_t compress_layer(LayerCache& cache, const HybridScores& scores,
                                  std::size_t budget) {
    const auto entries = cache.entries();
    const std::size_t protected_count = cache.protected_count();
    if (budget < protected_count) {
        throw std::invalid_argument(
            "compress_layer: budget " + std::to_string(budget) +
            " cannot hold " + std::to_string(protected_count) + " protected tokens");
    }
    if (entries.size() <= budget) return 0;

    std::vector<const TokenEntry*> evictable;
    evictable.reserve(entries.size() - protected_count);
    std::vector<std::size_t> evictable_pos;
    evictable_pos.reserve(entries.size() - protected_count);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (!entries[i].is_protected()) {
            evictable.push_back(&entries[i]);
            evictable_pos.push_back(i);
        }
    }
    if (scores.scores.size() != evictable.size()) {
        throw std::invalid_argument(
            "compress_layer: " + std::to_string(scores.scores.size()) +
            " scores for " + std::to_string(evictable.size()) + " evictable entries");
    }

    const std::size_t keep_evictable = budget - protected_count;
    std::vector<std::size_t> rank(evictable.size());
    std::iota(rank.begin(), rank.end(), 0);
    std::sort(rank.begin(), rank.end(),
              detail::EvictionRankLess{scores.scores, evictable});

    std::vector<char> keep(entries.size(), 0);
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].is_protected()) keep[i] = 1;
    }
    for (std::size_t i = 0; i < keep_evictable; ++i) {
        keep[evictable_pos[rank[i]]] = 1;
    }

    const std::size_t before = cache.size();
    cache.apply_keep_mask(keep);
    return before - cache.size();
}

}  // namespace ovkv
