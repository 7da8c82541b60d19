// Reconstruction loss stack for sparse voxel grids: channel-wise MSE scaled
// by a sparse-population regularizer and reverse-proportion channel weights,
// plus the non-zero-support F1 metric.
//
// The scale and weight factors are intentionally detached: they multiply the
// MSE gradient but no gradient flows through their own definitions (sign()
// is flat almost everywhere and the weights couple all channels through a
// shared denominator).
#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/tensor.hpp"

namespace evgen {

struct LossConfig {
    double k_err = 1e2;
    double k_subopt = 1e-3;
    double c_min = 0.1;
    double act_threshold = 0.5;

    void validate() const {
        if (!(k_err > 0)) throw ValidationError("loss: k_err must be > 0");
        if (!(k_subopt > 0)) throw ValidationError("loss: k_subopt must be > 0");
        if (!(c_min > 0 && c_min <= 1)) throw ValidationError("loss: c_min must be in (0, 1]");
        if (!(act_threshold > 0 && act_threshold < 1))
            throw ValidationError("loss: act_threshold must be in (0, 1)");
    }
};

namespace detail {

inline void require_chw(const nn::Tensor& x, const char* who) {
    if (x.shape.size() != 3) throw ValidationError(std::string(who) + ": expected a [C,H,W] tensor");
}

inline void require_same_grid(const nn::Tensor& x, const nn::Tensor& xhat, const char* who) {
    require_chw(x, who);
    if (!x.same_shape(xhat)) throw ValidationError(std::string(who) + ": shape mismatch");
}

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace detail

// Per channel c: (1/(W*H)) * sum_{i,j} (X - Xhat)^2.
inline std::vector<double> mse_channelwise(const nn::Tensor& x, const nn::Tensor& xhat) {
    detail::require_same_grid(x, xhat, "mse_channelwise");
    const std::size_t c = x.shape[0], plane = x.shape[1] * x.shape[2];
    std::vector<double> out(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double d = x.v[ch * plane + i] - xhat.v[ch * plane + i];
            s += d * d;
        }
        out[ch] = s / double(plane);
    }
    return out;
}

// distance = #{Xhat > act_threshold} - #{X > 0}
// step     = k_err * sign(distance - 1) + 1       (sign(0) = 0)
// scale    = 1 + k_subopt * step * distance
inline std::vector<double> sparsity_scale(const nn::Tensor& x, const nn::Tensor& xhat,
                                          const LossConfig& cfg) {
    detail::require_same_grid(x, xhat, "sparsity_scale");
    const std::size_t c = x.shape[0], plane = x.shape[1] * x.shape[2];
    std::vector<double> out(c, 1.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double nx = 0, nh = 0;
        for (std::size_t i = 0; i < plane; ++i) {
            if (x.v[ch * plane + i] > 0) ++nx;
            if (xhat.v[ch * plane + i] > cfg.act_threshold) ++nh;
        }
        const double distance = nh - nx;
        const double step = cfg.k_err * detail::sign(distance - 1.0) + 1.0;
        out[ch] = 1.0 + cfg.k_subopt * step * distance;
    }
    return out;
}

// Reverse proportion of each channel's mass, floored at c_min. A grid with
// no events at all weights every channel 1.
inline std::vector<double> channel_weights(const nn::Tensor& x, const LossConfig& cfg) {
    detail::require_chw(x, "channel_weights");
    const std::size_t c = x.shape[0], plane = x.shape[1] * x.shape[2];
    std::vector<double> sums(c, 0.0);
    double total = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
            const double v = x.v[ch * plane + i];
            if (v < 0) throw ValidationError("channel_weights: grid must be nonnegative");
            sums[ch] += v;
        }
        total += sums[ch];
    }
    std::vector<double> out(c, 1.0);
    if (total == 0) return out;
    for (std::size_t ch = 0; ch < c; ++ch)
        out[ch] = std::max(cfg.c_min, 1.0 - sums[ch] / total);
    return out;
}

inline double total_loss(const nn::Tensor& x, const nn::Tensor& xhat, const LossConfig& cfg) {
    const auto mse = mse_channelwise(x, xhat);
    const auto scale = sparsity_scale(x, xhat, cfg);
    const auto weight = channel_weights(x, cfg);
    double s = 0;
    for (std::size_t ch = 0; ch < mse.size(); ++ch) s += mse[ch] * scale[ch] * weight[ch];
    return s;
}

// Loss plus its gradient w.r.t. the reconstruction. scale and weight act as
// constants: d/dXhat = scale * weight * 2(Xhat - X)/(W*H), divided by N for
// batched input. Accepts [C,H,W] or [N,C,H,W]; batched loss is the mean.
inline std::pair<double, nn::Tensor> total_loss_grad(const nn::Tensor& x, const nn::Tensor& xhat,
                                                     const LossConfig& cfg) {
    if (!x.same_shape(xhat)) throw ValidationError("total_loss_grad: shape mismatch");
    const bool batched = x.shape.size() == 4;
    if (!batched && x.shape.size() != 3)
        throw ValidationError("total_loss_grad: expected [C,H,W] or [N,C,H,W]");
    const std::size_t n = batched ? x.shape[0] : 1;
    const std::size_t c = x.shape[batched ? 1 : 0];
    const std::size_t h = x.shape[batched ? 2 : 1];
    const std::size_t w = x.shape[batched ? 3 : 2];
    const std::size_t plane = h * w, grid = c * plane;

    nn::Tensor dxhat(x.shape);
    double loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        nn::Tensor xi({c, h, w}), hi({c, h, w});
        std::copy(x.v.begin() + i * grid, x.v.begin() + (i + 1) * grid, xi.v.begin());
        std::copy(xhat.v.begin() + i * grid, xhat.v.begin() + (i + 1) * grid, hi.v.begin());
        const auto mse = mse_channelwise(xi, hi);
        const auto scale = sparsity_scale(xi, hi, cfg);
        const auto weight = channel_weights(xi, cfg);
        for (std::size_t ch = 0; ch < c; ++ch) {
            loss += mse[ch] * scale[ch] * weight[ch];
            const double k = scale[ch] * weight[ch] * 2.0 / (double(plane) * double(n));
            for (std::size_t j = 0; j < plane; ++j) {
                const std::size_t at = i * grid + ch * plane + j;
                dxhat.v[at] = k * (xhat.v[at] - x.v[at]);
            }
        }
    }
    return {loss / double(n), std::move(dxhat)};
}

// F1 over the non-zero support: TP = X>0 and Xhat>thr, FP = X=0 and Xhat>thr,
// FN = X>0 and Xhat<=thr. Both sides empty counts as perfect agreement.
inline double f1_nonzero(const nn::Tensor& x, const nn::Tensor& xhat, double act_threshold) {
    if (!x.same_shape(xhat)) throw ValidationError("f1_nonzero: shape mismatch");
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const bool gt = x.v[i] > 0, pred = xhat.v[i] > act_threshold;
        if (gt && pred) ++tp;
        else if (!gt && pred) ++fp;
        else if (gt && !pred) ++fn;
    }
    const double denom = 2 * tp + fp + fn;
    return denom == 0 ? 1.0 : 2 * tp / denom;
}

}  // namespace evgen
