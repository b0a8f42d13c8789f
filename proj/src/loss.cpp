#include "nowcastkd/loss.hpp"

#include "nowcastkd/errors.hpp"

namespace nowcastkd {

void LossConfig::validate() const {
    if (w_max < 1.0) throw ConfigError("loss: w_max must be >= 1");
    if (tau < 0.0 || tau > 255.0) throw ConfigError("loss: tau must lie in [0, 255]");
}

Tensor pixel_weight(const Tensor& target_raw, const LossConfig& config) {
    config.validate();
    Tensor w(target_raw.shape());
    for (std::int64_t i = 0; i < target_raw.numel(); ++i) {
        w[i] = target_raw[i] > config.tau ? config.w_max : 1.0;
    }
    return w;
}

Tensor pixel_weight_normalized(const Tensor& target_norm, const LossConfig& config) {
    config.validate();
    const double tau_norm = config.tau / 255.0;
    Tensor w(target_norm.shape());
    for (std::int64_t i = 0; i < target_norm.numel(); ++i) {
        w[i] = target_norm[i] > tau_norm ? config.w_max : 1.0;
    }
    return w;
}

double weighted_mse(const Tensor& pred, const Tensor& target, const Tensor& target_raw,
                    const LossConfig& config) {
    check_same_shape(pred, target, "weighted_mse");
    check_same_shape(pred, target_raw, "weighted_mse(target_raw)");
    const Tensor w = pixel_weight(target_raw, config);
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred[i] - target[i];
        acc += w[i] * d * d;
    }
    if (!config.sum_reduction && pred.numel() > 0) acc /= static_cast<double>(pred.numel());
    return acc;
}

Tensor weighted_mse_grad(const Tensor& pred, const Tensor& target, const Tensor& target_raw,
                         const LossConfig& config) {
    check_same_shape(pred, target, "weighted_mse_grad");
    check_same_shape(pred, target_raw, "weighted_mse_grad(target_raw)");
    const Tensor w = pixel_weight(target_raw, config);
    const double scale =
        config.sum_reduction ? 1.0 : 1.0 / static_cast<double>(std::max<std::int64_t>(1, pred.numel()));
    Tensor g(pred.shape());
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        g[i] = 2.0 * w[i] * (pred[i] - target[i]) * scale;
    }
    return g;
}

double weighted_mse_with_grad(const Tensor& pred, const Tensor& target, const Tensor& weight,
                              const LossConfig& config, Tensor& grad_out) {
    check_same_shape(pred, target, "weighted_mse_with_grad");
    check_same_shape(pred, weight, "weighted_mse_with_grad(weight)");
    const double scale =
        config.sum_reduction ? 1.0 : 1.0 / static_cast<double>(std::max<std::int64_t>(1, pred.numel()));
    grad_out = Tensor(pred.shape());
    double acc = 0.0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const double d = pred[i] - target[i];
        acc += weight[i] * d * d;
        grad_out[i] = 2.0 * weight[i] * d * scale;
    }
    return acc * scale;
}

}  // namespace nowcastkd
