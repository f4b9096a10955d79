#pragma once

// Activation-based token rating. Scores come from the L2 norm of each
// token's scaled FFN residual, so the attention implementation never has to
// expose its weights; the patch score map is then blended with a separable
// Gaussian-smoothed copy of itself. Aux tokens bypass smoothing.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ovkv/core.hpp"

namespace ovkv {

/// Residual block captured after a layer's FFN: one vector of model width
/// per token of the frame, in slot order.
struct FfnResidual {
    std::vector<float> data;  ///< row-major [tokens, dim]
    std::size_t tokens = 0;
    std::size_t dim = 0;

    void validate() const {
        if (tokens == 0 || dim == 0 || data.size() != tokens * dim) {
            throw std::invalid_argument("FfnResidual: data size does not match tokens*dim");
        }
    }

    [[nodiscard]] std::span<const float> row(std::size_t i) const {
        return {data.data() + i * dim, dim};
    }
};

/// Per-frame score map: one score per patch grid cell plus one per aux
/// token, all non-negative.
struct ActivationGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> patch_scores;  ///< row-major [rows, cols]
    std::vector<double> aux_scores;
    std::uint64_t frame_index = 0;

    [[nodiscard]] double at(std::size_t r, std::size_t c) const {
        return patch_scores[r * cols + c];
    }
    double& at(std::size_t r, std::size_t c) { return patch_scores[r * cols + c]; }

    void validate() const {
        if (rows == 0 || cols == 0 || patch_scores.size() != rows * cols) {
            throw std::invalid_argument("ActivationGrid: patch score size mismatch");
        }
    }
};

/// L2 norms of the residual rows, arranged on the patch grid. The residual
/// must hold one row per frame token (aux first, then patches row-major).
inline ActivationGrid activation_score(const FfnResidual& residuals, const ModelDims& dims,
                                       std::uint64_t frame_index) {
    residuals.validate();
    dims.validate();
    if (residuals.tokens != dims.tokens_per_frame()) {
        throw std::invalid_argument(
            "activation_score: expected " + std::to_string(dims.tokens_per_frame()) +
            " residual rows, got " + std::to_string(residuals.tokens));
    }
    ActivationGrid grid;
    grid.rows = dims.patch_rows;
    grid.cols = dims.patch_cols;
    grid.frame_index = frame_index;
    grid.patch_scores.resize(dims.patch_count());
    grid.aux_scores.resize(dims.num_aux);
    for (std::size_t i = 0; i < residuals.tokens; ++i) {
        double sq = 0.0;
        for (float v : residuals.row(i)) {
            if (!std::isfinite(v)) {
                throw std::domain_error("activation_score: non-finite residual at slot " +
                                        std::to_string(i));
            }
            sq += static_cast<double>(v) * static_cast<double>(v);
        }
        const double score = std::sqrt(sq);
        if (i < dims.num_aux) {
            grid.aux_scores[i] = score;
        } else {
            grid.patch_scores[i - dims.num_aux] = score;
        }
    }
    return grid;
}

/// Normalized 1-D Gaussian taps; weights sum to one.
inline std::vector<double> gaussian_kernel_1d(std::size_t size, double sigma) {
    if (size == 0 || size % 2 == 0) {
        throw std::invalid_argument("gaussian_kernel_1d: size must be odd and positive");
    }
    if (!(sigma > 0.0)) {
        throw std::invalid_argument("gaussian_kernel_1d: sigma must be positive");
    }
    std::vector<double> taps(size);
    const auto radius = static_cast<std::ptrdiff_t>(size / 2);
    double sum = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        taps[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (double& v : taps) v /= sum;
    return taps;
}

/// Reflects an out-of-range index back into [0, n) with edge repeat
/// (-1 -> 0, n -> n-1). Folds repeatedly for kernels wider than the grid.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto sn = static_cast<std::ptrdiff_t>(n);
    if (sn == 1) return 0;
    while (i < 0 || i >= sn) {
        if (i < 0) i = -i - 1;
        if (i >= sn) i = 2 * sn - i - 1;
    }
    return static_cast<std::size_t>(i);
}

namespace detail {

// One separable pass along rows (stride 1) or columns (stride cols).
inline void convolve_axis(const std::vector<double>& in, std::vector<double>& out,
                          std::size_t rows, std::size_t cols,
                          const std::vector<double>& taps, bool along_rows) {
    const auto radius = static_cast<std::ptrdiff_t>(taps.size() / 2);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
                std::size_t rr = r, cc = c;
                if (along_rows) {
                    cc = reflect_index(static_cast<std::ptrdiff_t>(c) + k, cols);
                } else {
                    rr = reflect_index(static_cast<std::ptrdiff_t>(r) + k, rows);
                }
                acc += taps[static_cast<std::size_t>(k + radius)] * in[rr * cols + cc];
            }
            out[r * cols + c] = acc;
        }
    }
}

}  // namespace detail

/// Blends the patch score map with its Gaussian-smoothed copy:
/// out = alpha * (G * S) + (1 - alpha) * S. The convolution is separable
/// (rows then columns) with reflected borders; aux scores pass through
/// untouched.
inline ActivationGrid smooth(const ActivationGrid& grid, double alpha,
                             std::size_t kernel_size, double sigma) {
    grid.validate();
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument("smooth: alpha must lie in [0, 1]");
    }
    const std::vector<double> taps = gaussian_kernel_1d(kernel_size, sigma);

    ActivationGrid out = grid;
    if (alpha == 0.0) return out;

    std::vector<double> pass1(grid.patch_scores.size());
    std::vector<double> pass2(grid.patch_scores.size());
    detail::convolve_axis(grid.patch_scores, pass1, grid.rows, grid.cols, taps, true);
    detail::convolve_axis(pass1, pass2, grid.rows, grid.cols, taps, false);
    for (std::size_t i = 0; i < out.patch_scores.size(); ++i) {
        out.patch_scores[i] = alpha * pass2[i] + (1.0 - alpha) * grid.patch_scores[i];
    }
    return out;
}

}  // namespace ovkv
