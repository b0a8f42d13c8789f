#include "nowcastkd/nn.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace nowcastkd::nn {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// Gathers one sample's receptive fields for one channel group into
// cols[(ci*k*k + ki*k + kj) * (OH*OW) + oy*OW + ox].
void im2col(const double* x, std::int64_t cg, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow,
            double* cols) {
    for (std::int64_t c = 0; c < cg; ++c) {
        const double* xc = x + c * h * w;
        for (std::int64_t ki = 0; ki < k; ++ki) {
            for (std::int64_t kj = 0; kj < k; ++kj) {
                double* row = cols + ((c * k + ki) * k + kj) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) {
                        for (std::int64_t ox = 0; ox < ow; ++ox) row[oy * ow + ox] = 0.0;
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        row[oy * ow + ox] = (ix >= 0 && ix < w) ? xc[iy * w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds column gradients back onto the input grid.
void col2im(const double* cols, std::int64_t cg, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, double* gx) {
    for (std::int64_t c = 0; c < cg; ++c) {
        double* gxc = gx + c * h * w;
        for (std::int64_t ki = 0; ki < k; ++ki) {
            for (std::int64_t kj = 0; kj < k; ++kj) {
                const double* row = cols + ((c * k + ki) * k + kj) * oh * ow;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) gxc[iy * w + ix] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

std::int64_t effective_groups(std::int64_t channels, std::int64_t preferred) {
    for (std::int64_t g = preferred; g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, std::int64_t in_ch, std::int64_t out_ch, std::int64_t ksize,
               std::int64_t stride, std::int64_t pad, std::int64_t groups)
    : in_ch_(in_ch), out_ch_(out_ch), ksize_(ksize), stride_(stride), pad_(pad), groups_(groups) {
    if (in_ch % groups != 0 || out_ch % groups != 0) {
        throw std::invalid_argument("Conv2d " + name + ": groups must divide channel counts");
    }
    weight_.name = name + ".weight";
    weight_.value = Tensor({out_ch, in_ch / groups, ksize, ksize});
    weight_.grad = Tensor(weight_.value.shape());
    bias_.name = name + ".bias";
    bias_.value = Tensor({out_ch});
    bias_.grad = Tensor({out_ch});
}

void Conv2d::init(Rng& rng) {
    const std::int64_t fan_in = (in_ch_ / groups_) * ksize_ * ksize_;
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < weight_.value.numel(); ++i) weight_.value[i] = rng.normal(0.0, stddev);
    bias_.value.zero();
}

Tensor Conv2d::forward(const Tensor& x, Cache* cache) const {
    if (x.ndim() != 4 || x.dim(1) != in_ch_) {
        throw std::invalid_argument("Conv2d " + weight_.name + ": expected input [N," +
                                    std::to_string(in_ch_) + ",H,W], got " + x.shape_str());
    }
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = conv_out_dim(h, ksize_, stride_, pad_);
    const std::int64_t ow = conv_out_dim(w, ksize_, stride_, pad_);
    if (oh <= 0 || ow <= 0) {
        throw std::invalid_argument("Conv2d " + weight_.name + ": input too small " + x.shape_str());
    }
    const std::int64_t cg = in_ch_ / groups_;
    const std::int64_t og = out_ch_ / groups_;
    const std::int64_t krows = cg * ksize_ * ksize_;

    Tensor y({n, out_ch_, oh, ow});
    std::vector<double> cols(static_cast<std::size_t>(krows * oh * ow));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t g = 0; g < groups_; ++g) {
            const double* xg = x.data() + (i * in_ch_ + g * cg) * h * w;
            im2col(xg, cg, h, w, ksize_, stride_, pad_, oh, ow, cols.data());
            ConstMapRM wm(weight_.value.data() + g * og * krows, og, krows);
            ConstMapRM cm(cols.data(), krows, oh * ow);
            MapRM ym(y.data() + (i * out_ch_ + g * og) * oh * ow, og, oh * ow);
            ym.noalias() = wm * cm;
        }
        for (std::int64_t c = 0; c < out_ch_; ++c) {
            double* yc = y.data() + (i * out_ch_ + c) * oh * ow;
            const double b = bias_.value[c];
            for (std::int64_t p = 0; p < oh * ow; ++p) yc[p] += b;
        }
    }
    if (cache) cache->input = x;
    return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, const Cache& cache) {
    const Tensor& x = cache.input;
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = grad_out.dim(2), ow = grad_out.dim(3);
    const std::int64_t cg = in_ch_ / groups_;
    const std::int64_t og = out_ch_ / groups_;
    const std::int64_t krows = cg * ksize_ * ksize_;

    Tensor gx(x.shape());
    std::vector<double> cols(static_cast<std::size_t>(krows * oh * ow));
    std::vector<double> gcols(static_cast<std::size_t>(krows * oh * ow));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t g = 0; g < groups_; ++g) {
            const double* xg = x.data() + (i * in_ch_ + g * cg) * h * w;
            im2col(xg, cg, h, w, ksize_, stride_, pad_, oh, ow, cols.data());
            ConstMapRM gym(grad_out.data() + (i * out_ch_ + g * og) * oh * ow, og, oh * ow);
            ConstMapRM cm(cols.data(), krows, oh * ow);
            MapRM gwm(weight_.grad.data() + g * og * krows, og, krows);
            gwm.noalias() += gym * cm.transpose();

            ConstMapRM wm(weight_.value.data() + g * og * krows, og, krows);
            MapRM gcm(gcols.data(), krows, oh * ow);
            gcm.noalias() = wm.transpose() * gym;
            col2im(gcols.data(), cg, h, w, ksize_, stride_, pad_, oh, ow,
                   gx.data() + (i * in_ch_ + g * cg) * h * w);
        }
        for (std::int64_t c = 0; c < out_ch_; ++c) {
            const double* gyc = grad_out.data() + (i * out_ch_ + c) * oh * ow;
            double acc = 0.0;
            for (std::int64_t p = 0; p < oh * ow; ++p) acc += gyc[p];
            bias_.grad[c] += acc;
        }
    }
    return gx;
}

void Conv2d::visit(const ParamVisitor& fn) {
    fn(weight_);
    fn(bias_);
}

void Conv2d::visit(const ConstParamVisitor& fn) const {
    fn(weight_);
    fn(bias_);
}

// ---------------------------------------------------------------------------
// GroupNorm

GroupNorm::GroupNorm(std::string name, std::int64_t channels, std::int64_t groups, double eps)
    : channels_(channels), groups_(groups), eps_(eps) {
    if (channels % groups != 0) {
        throw std::invalid_argument("GroupNorm " + name + ": groups must divide channels");
    }
    gamma_.name = name + ".gamma";
    gamma_.value = Tensor::full({channels}, 1.0);
    gamma_.grad = Tensor({channels});
    beta_.name = name + ".beta";
    beta_.value = Tensor({channels});
    beta_.grad = Tensor({channels});
}

Tensor GroupNorm::forward(const Tensor& x, Cache* cache) const {
    if (x.ndim() != 4 || x.dim(1) != channels_) {
        throw std::invalid_argument("GroupNorm " + gamma_.name + ": bad input " + x.shape_str());
    }
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t cpg = channels_ / groups_;
    const std::int64_t m = cpg * h * w;

    Tensor y(x.shape());
    std::vector<double> means(static_cast<std::size_t>(n * groups_));
    std::vector<double> rstds(static_cast<std::size_t>(n * groups_));
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t g = 0; g < groups_; ++g) {
            const double* xg = x.data() + (i * channels_ + g * cpg) * h * w;
            double mean = 0.0;
            for (std::int64_t p = 0; p < m; ++p) mean += xg[p];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::int64_t p = 0; p < m; ++p) {
                const double d = xg[p] - mean;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double rstd = 1.0 / std::sqrt(var + eps_);
            means[static_cast<std::size_t>(i * groups_ + g)] = mean;
            rstds[static_cast<std::size_t>(i * groups_ + g)] = rstd;

            double* yg = y.data() + (i * channels_ + g * cpg) * h * w;
            for (std::int64_t c = 0; c < cpg; ++c) {
                const double ga = gamma_.value[g * cpg + c];
                const double be = beta_.value[g * cpg + c];
                const double* xc = xg + c * h * w;
                double* yc = yg + c * h * w;
                for (std::int64_t p = 0; p < h * w; ++p) {
                    yc[p] = ga * (xc[p] - mean) * rstd + be;
                }
            }
        }
    }
    if (cache) {
        cache->input = x;
        cache->mean = std::move(means);
        cache->rstd = std::move(rstds);
    }
    return y;
}

Tensor GroupNorm::backward(const Tensor& grad_out, const Cache& cache) {
    const Tensor& x = cache.input;
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t cpg = channels_ / groups_;
    const std::int64_t m = cpg * h * w;

    Tensor gx(x.shape());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t g = 0; g < groups_; ++g) {
            const double mean = cache.mean[static_cast<std::size_t>(i * groups_ + g)];
            const double rstd = cache.rstd[static_cast<std::size_t>(i * groups_ + g)];
            const double* xg = x.data() + (i * channels_ + g * cpg) * h * w;
            const double* gyg = grad_out.data() + (i * channels_ + g * cpg) * h * w;

            // Per-group reductions of gy*gamma and gy*gamma*xhat.
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::int64_t c = 0; c < cpg; ++c) {
                const double ga = gamma_.value[g * cpg + c];
                const double* xc = xg + c * h * w;
                const double* gyc = gyg + c * h * w;
                double gsum = 0.0, gxsum = 0.0;
                for (std::int64_t p = 0; p < h * w; ++p) {
                    const double xhat = (xc[p] - mean) * rstd;
                    gsum += gyc[p];
                    gxsum += gyc[p] * xhat;
                }
                gamma_.grad[g * cpg + c] += gxsum;
                beta_.grad[g * cpg + c] += gsum;
                sum_dxhat += ga * gsum;
                sum_dxhat_xhat += ga * gxsum;
            }
            const double inv_m = 1.0 / static_cast<double>(m);
            double* gxg = gx.data() + (i * channels_ + g * cpg) * h * w;
            for (std::int64_t c = 0; c < cpg; ++c) {
                const double ga = gamma_.value[g * cpg + c];
                const double* xc = xg + c * h * w;
                const double* gyc = gyg + c * h * w;
                double* gxc = gxg + c * h * w;
                for (std::int64_t p = 0; p < h * w; ++p) {
                    const double xhat = (xc[p] - mean) * rstd;
                    gxc[p] = rstd * (ga * gyc[p] - inv_m * (sum_dxhat + xhat * sum_dxhat_xhat));
                }
            }
        }
    }
    return gx;
}

void GroupNorm::visit(const ParamVisitor& fn) {
    fn(gamma_);
    fn(beta_);
}

void GroupNorm::visit(const ConstParamVisitor& fn) const {
    fn(gamma_);
    fn(beta_);
}

// ---------------------------------------------------------------------------
// SiLU

Tensor SiLU::forward(const Tensor& x, Cache* cache) {
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x[i]));
        y[i] = x[i] * s;
    }
    if (cache) cache->input = x;
    return y;
}

Tensor SiLU::backward(const Tensor& grad_out, const Cache& cache) {
    const Tensor& x = cache.input;
    Tensor gx(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-x[i]));
        gx[i] = grad_out[i] * s * (1.0 + x[i] * (1.0 - s));
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Upsample2x

Tensor Upsample2x::forward(const Tensor& x) {
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor y({n, c, 2 * h, 2 * w});
    for (std::int64_t ic = 0; ic < n * c; ++ic) {
        const double* xp = x.data() + ic * h * w;
        double* yp = y.data() + ic * 4 * h * w;
        for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
                const double v = xp[i * w + j];
                double* row0 = yp + (2 * i) * 2 * w + 2 * j;
                double* row1 = yp + (2 * i + 1) * 2 * w + 2 * j;
                row0[0] = v;
                row0[1] = v;
                row1[0] = v;
                row1[1] = v;
            }
        }
    }
    return y;
}

Tensor Upsample2x::backward(const Tensor& grad_out) {
    const std::int64_t n = grad_out.dim(0), c = grad_out.dim(1);
    const std::int64_t oh = grad_out.dim(2), ow = grad_out.dim(3);
    const std::int64_t h = oh / 2, w = ow / 2;
    Tensor gx({n, c, h, w});
    for (std::int64_t ic = 0; ic < n * c; ++ic) {
        const double* gyp = grad_out.data() + ic * oh * ow;
        double* gxp = gx.data() + ic * h * w;
        for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
                gxp[i * w + j] = gyp[(2 * i) * ow + 2 * j] + gyp[(2 * i) * ow + 2 * j + 1] +
                                 gyp[(2 * i + 1) * ow + 2 * j] + gyp[(2 * i + 1) * ow + 2 * j + 1];
            }
        }
    }
    return gx;
}

// ---------------------------------------------------------------------------
// Channel concat / split

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
        throw std::invalid_argument("concat_channels: incompatible shapes " + a.shape_str() +
                                    " vs " + b.shape_str());
    }
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::int64_t hw = a.dim(2) * a.dim(3);
    Tensor y({n, ca + cb, a.dim(2), a.dim(3)});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy(a.data() + i * ca * hw, a.data() + (i + 1) * ca * hw,
                  y.data() + i * (ca + cb) * hw);
        std::copy(b.data() + i * cb * hw, b.data() + (i + 1) * cb * hw,
                  y.data() + i * (ca + cb) * hw + ca * hw);
    }
    return y;
}

void split_channels(const Tensor& grad, std::int64_t c_a, Tensor& grad_a, Tensor& grad_b) {
    const std::int64_t n = grad.dim(0), c = grad.dim(1);
    const std::int64_t hw = grad.dim(2) * grad.dim(3);
    const std::int64_t c_b = c - c_a;
    grad_a = Tensor({n, c_a, grad.dim(2), grad.dim(3)});
    grad_b = Tensor({n, c_b, grad.dim(2), grad.dim(3)});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy(grad.data() + i * c * hw, grad.data() + i * c * hw + c_a * hw,
                  grad_a.data() + i * c_a * hw);
        std::copy(grad.data() + i * c * hw + c_a * hw, grad.data() + (i + 1) * c * hw,
                  grad_b.data() + i * c_b * hw);
    }
}

// ---------------------------------------------------------------------------
// Clamp

Tensor Clamp::forward(const Tensor& x, double lo, double hi, Cache* cache) {
    Tensor y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        y[i] = x[i] < lo ? lo : (x[i] > hi ? hi : x[i]);
    }
    if (cache) cache->input = x;
    return y;
}

Tensor Clamp::backward(const Tensor& grad_out, const Cache& cache, double lo, double hi) {
    const Tensor& x = cache.input;
    Tensor gx(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        gx[i] = (x[i] > lo && x[i] < hi) ? grad_out[i] : 0.0;
    }
    return gx;
}

}  // namespace nowcastkd::nn
