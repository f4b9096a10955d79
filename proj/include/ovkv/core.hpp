#pragma once

// Core vocabulary for the streaming KV-cache engine: model geometry, token
// entries, per-layer caches, byte accounting and the engine configuration.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ovkv {

/// Static shape of the cached model. One frame contributes
/// tokens_per_frame() == num_aux + patch_rows * patch_cols entries per layer.
struct ModelDims {
    std::size_t num_layers = 0;  ///< decoder layers with a KV cache (L)
    std::size_t num_heads = 0;   ///< attention heads per layer (N_h)
    std::size_t head_dim = 0;    ///< per-head channel count (d)
    std::size_t patch_rows = 0;  ///< patch grid height (H_p)
    std::size_t patch_cols = 0;  ///< patch grid width (W_p)
    std::size_t num_aux = 0;     ///< camera + register tokens per frame

    [[nodiscard]] std::size_t patch_count() const { return patch_rows * patch_cols; }
    [[nodiscard]] std::size_t tokens_per_frame() const { return num_aux + patch_count(); }
    [[nodiscard]] std::size_t kv_dim() const { return num_heads * head_dim; }

    /// Bytes held by one cached token (its key and value vectors).
    [[nodiscard]] std::size_t bytes_per_token(std::size_t element_size) const {
        return 2 * kv_dim() * element_size;
    }

    void validate() const {
        if (num_layers == 0 || num_heads == 0 || head_dim == 0 ||
            patch_rows == 0 || patch_cols == 0) {
            throw std::invalid_argument(
                "ModelDims: num_layers, num_heads, head_dim and the patch grid "
                "must all be positive");
        }
    }

    bool operator==(const ModelDims&) const = default;
};

/// Exact byte count of an uncompressed cache after `num_frames` frames:
/// two tensors (K and V) of shape [L, T*M, N_h, d].
/// Throws std::overflow_error when the product does not fit in 64 bits.
inline std::uint64_t cache_footprint_bytes(const ModelDims& dims,
                                           std::uint64_t num_frames,
                                           std::uint64_t element_size) {
    dims.validate();
    if (element_size == 0) {
        throw std::invalid_argument("cache_footprint_bytes: element_size must be positive");
    }
    std::uint64_t acc = 2;
    const std::uint64_t factors[] = {
        static_cast<std::uint64_t>(dims.num_layers),
        num_frames,
        static_cast<std::uint64_t>(dims.tokens_per_frame()),
        static_cast<std::uint64_t>(dims.num_heads),
        static_cast<std::uint64_t>(dims.head_dim),
        element_size,
    };
    for (std::uint64_t f : factors) {
        if (f == 0) return 0;  // only num_frames can be zero after validate()
        if (acc > UINT64_MAX / f) {
            throw std::overflow_error("cache_footprint_bytes: byte count exceeds 64 bits");
        }
        acc *= f;
    }
    return acc;
}

enum class TokenKind : std::uint8_t { Camera, Register, Patch };

enum class Protection : std::uint8_t {
    Unprotected,       ///< evictable, ranked by hybrid score
    InitialAnchor,     ///< frame-0 token, never evicted
    HistoricalAnchor,  ///< protected by a live historical anchor
};

/// One cached token. Entries are value types; the caches own their storage.
struct TokenEntry {
    std::uint64_t frame_index = 0;
    std::uint32_t slot_index = 0;  ///< position within the frame, [0, M)
    TokenKind kind = TokenKind::Patch;
    std::uint16_t row = 0;  ///< patch grid row, meaningful for Patch tokens
    std::uint16_t col = 0;  ///< patch grid column, meaningful for Patch tokens
    Protection protection = Protection::Unprotected;
    std::uint64_t anchor_id = 0;  ///< owning anchor, meaningful for HistoricalAnchor
    std::vector<float> key;       ///< length N_h * d
    std::vector<float> value;     ///< length N_h * d

    [[nodiscard]] bool is_protected() const { return protection != Protection::Unprotected; }
};

/// Append-ordered token store for one layer. Appending preserves arrival
/// order; this type never drops an entry on its own (eviction is applied
/// through apply_keep_mask by the compression policy).
class LayerCache {
public:
    LayerCache() = default;
    LayerCache(std::size_t layer_index, std::size_t tokens_per_frame)
        : layer_index_(layer_index), tokens_per_frame_(tokens_per_frame) {
        if (tokens_per_frame_ == 0) {
            throw std::invalid_argument("LayerCache: tokens_per_frame must be positive");
        }
    }

    [[nodiscard]] std::size_t layer_index() const { return layer_index_; }
    [[nodiscard]] std::size_t tokens_per_frame() const { return tokens_per_frame_; }
    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] bool empty() const { return entries_.empty(); }
    [[nodiscard]] std::span<const TokenEntry> entries() const { return entries_; }

    /// Per-step token budget assigned by the allocator. Zero until the first
    /// allocation.
    [[nodiscard]] std::size_t budget() const { return budget_; }
    void set_budget(std::size_t b) { budget_ = b; }

    [[nodiscard]] std::size_t protected_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.is_protected() ? 1 : 0;
        return n;
    }

    [[nodiscard]] bool has_frames() const { return !entries_.empty(); }
    [[nodiscard]] std::uint64_t last_frame_index() const {
        if (entries_.empty()) {
            throw std::logic_error("LayerCache: last_frame_index on empty cache");
        }
        return entries_.back().frame_index;
    }

    /// Appends one frame of tokens. All tokens must carry the same frame
    /// index, strictly greater than anything already cached, slots must be
    /// exactly 0..M-1 in order, and exactly M tokens must be supplied.
    /// Rejection leaves the cache unchanged.
    void append_frame(std::vector<TokenEntry> tokens) {
        if (tokens.size() != tokens_per_frame_) {
            throw std::invalid_argument(
                "LayerCache::append_frame: expected " + std::to_string(tokens_per_frame_) +
                " tokens, got " + std::to_string(tokens.size()));
        }
        const std::uint64_t frame = tokens.front().frame_index;
        if (!entries_.empty() && frame <= entries_.back().frame_index) {
            throw std::invalid_argument(
                "LayerCache::append_frame: frame index " + std::to_string(frame) +
                " is not greater than cached frame " +
                std::to_string(entries_.back().frame_index));
        }
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const auto& tkn = tokens[i];
            if (tkn.frame_index != frame) {
                throw std::invalid_argument(
                    "LayerCache::append_frame: mixed frame indices within one frame");
            }
            if (tkn.slot_index != i) {
                throw std::invalid_argument(
                    "LayerCache::append_frame: slot " + std::to_string(tkn.slot_index) +
                    " out of order at position " + std::to_string(i));
            }
            if (tkn.protection == Protection::InitialAnchor && frame != 0) {
                throw std::invalid_argument(
                    "LayerCache::append_frame: InitialAnchor protection on frame " +
                    std::to_string(frame));
            }
        }
        entries_.insert(entries_.end(),
                        std::make_move_iterator(tokens.begin()),
                        std::make_move_iterator(tokens.end()));
    }

    /// Marks tokens of `frame` with the given protection. When `slots` is
    /// null every token of the frame is marked; otherwise only the listed
    /// slot indices. Returns the number of entries whose state changed.
    std::size_t mark_frame_protected(std::uint64_t frame, Protection protection,
                                     std::uint64_t anchor_id = 0,
                                     const std::vector<std::uint32_t>* slots = nullptr) {
        std::size_t changed = 0;
        for (auto& e : entries_) {
            if (e.frame_index != frame) continue;
            if (slots != nullptr) {
                bool listed = false;
                for (std::uint32_t s : *slots) {
                    if (e.slot_index == s) { listed = true; break; }
                }
                if (!listed) continue;
            }
            if (e.protection != protection || e.anchor_id != anchor_id) {
                e.protection = protection;
                e.anchor_id = anchor_id;
                ++changed;
            }
        }
        return changed;
    }

    /// Clears HistoricalAnchor protection for one anchor id. The affected
    /// tokens rejoin the evictable pool. Returns the number demoted.
    std::size_t demote_anchor(std::uint64_t anchor_id) {
        std::size_t changed = 0;
        for (auto& e : entries_) {
            if (e.protection == Protection::HistoricalAnchor && e.anchor_id == anchor_id) {
                e.protection = Protection::Unprotected;
                e.anchor_id = 0;
                ++changed;
            }
        }
        return changed;
    }

    /// Keeps exactly the entries whose mask position is nonzero, preserving
    /// order. Used by the compression policy; protected entries must never
    /// be dropped by the caller.
    void apply_keep_mask(const std::vector<char>& keep) {
        if (keep.size() != entries_.size()) {
            throw std::invalid_argument("LayerCache::apply_keep_mask: mask size mismatch");
        }
        std::size_t out = 0;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!keep[i]) continue;
            if (out != i) entries_[out] = std::move(entries_[i]);
            ++out;
        }
        entries_.resize(out);
    }

private:
    std::size_t layer_index_ = 0;
    std::size_t tokens_per_frame_ = 1;
    std::size_t budget_ = 0;
    std::vector<TokenEntry> entries_;
};

/// Tunable parameters of the engine. Defaults follow the reference
/// configuration for large streams; tests use smaller grids.
struct EngineConfig {
    std::size_t total_budget = 200000;       ///< B, token budget summed over layers
    double smoothing_alpha = 0.5;            ///< blend weight of the smoothed score map
    double hybrid_beta = 0.5;                ///< weight of fresh-token activation scores
    double coverage_tau = 0.2;               ///< coverage threshold for anchor registration
    double anchor_eta = 0.05;                ///< protected fraction of patches per anchor
    std::size_t max_anchors = 3;             ///< K_max live historical anchors
    std::uint64_t min_anchor_interval = 100; ///< frames between registrations
    std::size_t gaussian_kernel_size = 5;    ///< odd width of the smoothing kernel
    double gaussian_sigma = 1.0;
    ModelDims dims;

    /// Protected patches per historical anchor: ceil(eta * N_p).
    [[nodiscard]] std::size_t protected_patches_per_anchor() const {
        return static_cast<std::size_t>(
            std::ceil(anchor_eta * static_cast<double>(dims.patch_count())));
    }

    /// Worst-case per-layer token overhead reserved for anchor protection.
    [[nodiscard]] std::size_t anchor_overhead() const {
        return protected_patches_per_anchor() * max_anchors + dims.num_aux * max_anchors;
    }

    void validate() const {
        dims.validate();
        if (total_budget == 0) {
            throw std::invalid_argument("EngineConfig: total_budget must be positive");
        }
        if (!(smoothing_alpha >= 0.0 && smoothing_alpha <= 1.0)) {
            throw std::invalid_argument("EngineConfig: smoothing_alpha must lie in [0, 1]");
        }
        if (!(hybrid_beta >= 0.0 && hybrid_beta <= 1.0)) {
            throw std::invalid_argument("EngineConfig: hybrid_beta must lie in [0, 1]");
        }
        if (!(coverage_tau > 0.0 && coverage_tau < 1.0)) {
            throw std::invalid_argument("EngineConfig: coverage_tau must lie in (0, 1)");
        }
        if (!(anchor_eta > 0.0 && anchor_eta < 1.0)) {
            throw std::invalid_argument("EngineConfig: anchor_eta must lie in (0, 1)");
        }
        if (max_anchors == 0) {
            throw std::invalid_argument("EngineConfig: max_anchors must be positive");
        }
        if (min_anchor_interval == 0) {
            throw std::invalid_argument("EngineConfig: min_anchor_interval must be positive");
        }
        if (gaussian_kernel_size == 0 || gaussian_kernel_size % 2 == 0) {
            throw std::invalid_argument("EngineConfig: gaussian_kernel_size must be odd");
        }
        if (!(gaussian_sigma > 0.0)) {
            throw std::invalid_argument("EngineConfig: gaussian_sigma must be positive");
        }
        const std::size_t per_layer_min = dims.tokens_per_frame() + anchor_overhead();
        if (total_budget < dims.num_layers * per_layer_min) {
            throw std::invalid_argument(
                "EngineConfig: total_budget " + std::to_string(total_budget) +
                " cannot admit the protected set plus one frame per layer (needs at least " +
                std::to_string(dims.num_layers * per_layer_min) + ")");
        }
    }
};

}  // namespace ovkv
