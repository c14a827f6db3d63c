#pragma once

#include <cmath>
#include <stdexcept>

#include "mdba/core/ndarray.hpp"

namespace mdba {

inline constexpr double kDiceEpsilon = 1e-5;
inline constexpr double kCeClamp = 1e-7;

/// Either algebraic form of the Dice part of the objective. They differ by
/// a constant and must have identical gradients.
enum class LossForm { literal, one_minus_dice };

template <typename T>
inline void check_same_shape(const NdArray<T>& pred, const NdArray<T>& target, const char* who) {
    if (!pred.same_shape(target))
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + pred.shape_string() + " vs " +
                                    target.shape_string());
}

/// Soft Dice score (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps); differentiable in
/// pred. Higher is better; 1.0 at a perfect hard prediction.
template <typename T>
inline T dice_score_soft(const NdArray<T>& pred, const NdArray<T>& target, T epsilon = T(kDiceEpsilon)) {
    check_same_shape(pred, target, "dice_score_soft");
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        inter += double(pred[i]) * double(target[i]);
        psum += double(pred[i]);
        tsum += double(target[i]);
    }
    return T((2.0 * inter + double(epsilon)) / (psum + tsum + double(epsilon)));
}

/// d(dice)/d(pred), scaled by `upstream`, accumulated into grad_pred.
template <typename T>
inline void dice_score_soft_backward(const NdArray<T>& pred, const NdArray<T>& target, T upstream,
                                     NdArray<T>& grad_pred, T epsilon = T(kDiceEpsilon)) {
    check_same_shape(pred, target, "dice_score_soft_backward");
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        inter += double(pred[i]) * double(target[i]);
        psum += double(pred[i]);
        tsum += double(target[i]);
    }
    const double a = 2.0 * inter + double(epsilon);
    const double b = psum + tsum + double(epsilon);
    const double inv_b2 = 1.0 / (b * b);
    for (int64_t i = 0; i < pred.size(); ++i)
        grad_pred[i] += T(double(upstream) * (2.0 * double(target[i]) * b - a) * inv_b2);
}

/// Mean binary cross-entropy; predictions are clamped to
/// [kCeClamp, 1-kCeClamp] before the logs.
template <typename T>
inline T cross_entropy(const NdArray<T>& pred, const NdArray<T>& target) {
    check_same_shape(pred, target, "cross_entropy");
    double acc = 0.0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        double p = std::min(1.0 - kCeClamp, std::max(kCeClamp, double(pred[i])));
        double t = double(target[i]);
        acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    return T(acc / double(pred.size()));
}

template <typename T>
inline void cross_entropy_backward(const NdArray<T>& pred, const NdArray<T>& target, T upstream,
                                   NdArray<T>& grad_pred) {
    check_same_shape(pred, target, "cross_entropy_backward");
    const double inv_n = 1.0 / double(pred.size());
    for (int64_t i = 0; i < pred.size(); ++i) {
        double p = double(pred[i]);
        if (p <= kCeClamp || p >= 1.0 - kCeClamp) continue;  // clamped region: zero slope
        double t = double(target[i]);
        grad_pred[i] += T(double(upstream) * (-t / p + (1.0 - t) / (1.0 - p)) * inv_n);
    }
}

/// The four terms of the joint objective plus their signed sum. The
/// invariant total == -dcs_scar + ce_scar - dcs_la + ce_la holds exactly.
struct LossBreakdown {
    double dcs_scar = 0.0;
    double ce_scar = 0.0;
    double dcs_la = 0.0;
    double ce_la = 0.0;
    double total = 0.0;
};

/// Joint two-branch loss on the fused probability maps. Pass nullptr for
/// the LA side when the LA branch is disabled (its terms are zero).
template <typename T>
inline LossBreakdown total_loss(const NdArray<T>& scar_fused, const NdArray<T>& scar_gt,
                                const NdArray<T>* la_fused, const NdArray<T>* la_gt) {
    LossBreakdown out;
    out.dcs_scar = double(dice_score_soft(scar_fused, scar_gt));
    out.ce_scar = double(cross_entropy(scar_fused, scar_gt));
    if (la_fused && la_gt) {
        out.dcs_la = double(dice_score_soft(*la_fused, *la_gt));
        out.ce_la = double(cross_entropy(*la_fused, *la_gt));
    }
    out.total = -out.dcs_scar + out.ce_scar - out.dcs_la + out.ce_la;
    return out;
}

/// Analytic gradient of the total loss w.r.t. the fused maps. The two loss
/// forms are computed through separately written expressions; tests assert
/// they agree to 1e-10.
template <typename T>
inline void total_loss_grad(const NdArray<T>& scar_fused, const NdArray<T>& scar_gt,
                            const NdArray<T>* la_fused, const NdArray<T>* la_gt, NdArray<T>& grad_scar,
                            NdArray<T>* grad_la, LossForm form = LossForm::literal) {
    auto branch_grad = [&](const NdArray<T>& pred, const NdArray<T>& target, NdArray<T>& grad) {
        if (form == LossForm::literal) {
            dice_score_soft_backward(pred, target, T(-1), grad);
        } else {
            // d/dp of (1 - DCS): written out on its own
            double inter = 0.0, psum = 0.0, tsum = 0.0;
            for (int64_t i = 0; i < pred.size(); ++i) {
                inter += double(pred[i]) * double(target[i]);
                psum += double(pred[i]);
                tsum += double(target[i]);
            }
            const double a = 2.0 * inter + kDiceEpsilon;
            const double b = psum + tsum + kDiceEpsilon;
            for (int64_t i = 0; i < pred.size(); ++i)
                grad[i] += T((a - 2.0 * double(target[i]) * b) / (b * b));
        }
        cross_entropy_backward(pred, target, T(1), grad);
    };
    branch_grad(scar_fused, scar_gt, grad_scar);
    if (la_fused && la_gt && grad_la) branch_grad(*la_fused, *la_gt, *grad_la);
}

}  // namespace mdba
