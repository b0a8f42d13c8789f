#pragma once

#include "nowcastkd/tensor.hpp"

namespace nowcastkd {

/// Two-level pixel weighting for the heavy-rain-weighted MSE objective.
/// tau is an intensity threshold in raw units (0..255); pixels whose ground
/// truth exceeds tau get weight w_max, everything else weight 1.
struct LossConfig {
    double tau = 219.0;
    double w_max = 10.0;
    /// false: mean over all elements (default). true: bare sum.
    bool sum_reduction = false;

    void validate() const;
};

/// Elementwise weight from raw-unit targets: 1 where target <= tau, w_max
/// where target > tau. The weight is a function of the ground truth only.
Tensor pixel_weight(const Tensor& target_raw, const LossConfig& config);

/// Same rule on normalized targets, thresholding at tau/255. Agrees exactly
/// with pixel_weight on integer-valued raw data.
Tensor pixel_weight_normalized(const Tensor& target_norm, const LossConfig& config);

/// mean (or sum) of weight * (pred - target)^2 with weights from target_raw.
double weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& target_raw,
                    const LossConfig& config);

/// Analytic gradient wrt pred: 2 * weight * (pred - target) / N under mean
/// reduction (no division for sum reduction).
Tensor weighted_mse_grad(const Tensor& pred, const Tensor& target, const Tensor& target_raw,
                         const LossConfig& config);

/// Loss and gradient in one pass; what the trainer calls.
double weighted_mse_with_grad(const Tensor& pred, const Tensor& target, const Tensor& weight,
                              const LossConfig& config, Tensor& grad_out);

}  // namespace nowcastkd
