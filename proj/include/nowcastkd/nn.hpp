#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nowcastkd/rng.hpp"
#include "nowcastkd/tensor.hpp"

namespace nowcastkd::nn {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad() { grad.zero(); }
};

using ParamVisitor = std::function<void(Parameter&)>;
using ConstParamVisitor = std::function<void(const Parameter&)>;

/// 2D convolution over [N, C, H, W] with square kernel, zero padding and
/// optional channel groups. Weight layout [C_out, C_in/groups, k, k].
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, std::int64_t in_ch, std::int64_t out_ch, std::int64_t ksize,
           std::int64_t stride, std::int64_t pad, std::int64_t groups = 1);

    void init(Rng& rng);

    struct Cache {
        Tensor input;
    };

    Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    /// Accumulates weight/bias grads, returns grad wrt input.
    Tensor backward(const Tensor& grad_out, const Cache& cache);

    void visit(const ParamVisitor& fn);
    void visit(const ConstParamVisitor& fn) const;

    std::int64_t in_channels() const { return in_ch_; }
    std::int64_t out_channels() const { return out_ch_; }

private:
    std::int64_t in_ch_ = 0, out_ch_ = 0, ksize_ = 0, stride_ = 1, pad_ = 0, groups_ = 1;
    Parameter weight_;
    Parameter bias_;
};

/// Group normalization over [N, C, H, W]; groups must divide C.
class GroupNorm {
public:
    GroupNorm() = default;
    GroupNorm(std::string name, std::int64_t channels, std::int64_t groups, double eps = 1e-5);

    struct Cache {
        Tensor input;
        std::vector<double> mean;  // per (n, group)
        std::vector<double> rstd;
    };

    Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    Tensor backward(const Tensor& grad_out, const Cache& cache);

    void visit(const ParamVisitor& fn);
    void visit(const ConstParamVisitor& fn) const;

private:
    std::int64_t channels_ = 0, groups_ = 1;
    double eps_ = 1e-5;
    Parameter gamma_;
    Parameter beta_;
};

/// SiLU activation x * sigmoid(x); smooth, so finite-difference checks stay clean.
struct SiLU {
    struct Cache {
        Tensor input;
    };
    static Tensor forward(const Tensor& x, Cache* cache = nullptr);
    static Tensor backward(const Tensor& grad_out, const Cache& cache);
};

/// Nearest-neighbour 2x spatial upsampling of [N, C, H, W].
struct Upsample2x {
    static Tensor forward(const Tensor& x);
    static Tensor backward(const Tensor& grad_out);
};

/// Concatenates two [N, C, H, W] tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& grad, std::int64_t c_a, Tensor& grad_a, Tensor& grad_b);

/// Elementwise clamp to [lo, hi]; backward passes gradient only where the
/// input was strictly inside the interval.
struct Clamp {
    struct Cache {
        Tensor input;
    };
    static Tensor forward(const Tensor& x, double lo, double hi, Cache* cache = nullptr);
    static Tensor backward(const Tensor& grad_out, const Cache& cache, double lo, double hi);
};

/// Largest divisor of `channels` among {preferred, ..., 2, 1} usable as a
/// group count for GroupNorm / grouped convolution.
std::int64_t effective_groups(std::int64_t channels, std::int64_t preferred);

}  // namespace nowcastkd::nn
