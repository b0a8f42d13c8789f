#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nowcastkd/nn.hpp"
#include "nowcastkd/rng.hpp"
#include "nowcastkd/tensor.hpp"

namespace nowcastkd {

struct ModelConfig {
    std::int64_t t_in = 13;
    std::int64_t t_out = 12;
    std::int64_t hid_spatial = 64;
    std::int64_t hid_temporal = 256;
    std::int64_t n_spatial_blocks = 2;   // stride-2 blocks in encoder and decoder
    std::int64_t n_temporal_blocks = 4;  // inception blocks in the translator
    std::vector<std::int64_t> inception_kernels = {3, 5, 7, 11};
    std::uint64_t seed = 42;

    void validate() const;
    std::int64_t downsample_factor() const { return std::int64_t{1} << n_spatial_blocks; }
};

namespace detail {

/// conv(+GroupNorm+SiLU); Down halves the grid (stride 2), Up doubles it
/// (nearest-neighbour upsample then conv).
class ConvBlock {
public:
    enum class Mode { Plain, Down, Up };

    ConvBlock() = default;
    ConvBlock(const std::string& name, Mode mode, std::int64_t in_ch, std::int64_t out_ch);

    struct Cache {
        nn::Conv2d::Cache conv;
        nn::GroupNorm::Cache norm;
        nn::SiLU::Cache act;
    };

    Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    Tensor backward(const Tensor& grad_out, const Cache& cache);
    void init(Rng& rng);
    void visit(const nn::ParamVisitor& fn);
    void visit(const nn::ConstParamVisitor& fn) const;

private:
    Mode mode_ = Mode::Plain;
    nn::Conv2d conv_;
    nn::GroupNorm norm_;
};

/// Parallel grouped convolutions with the configured kernel sizes,
/// concatenated then fused by a 1x1 convolution.
class InceptionBlock {
public:
    InceptionBlock() = default;
    InceptionBlock(const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
                   const std::vector<std::int64_t>& kernels);

    struct Cache {
        std::vector<nn::Conv2d::Cache> branch_conv;
        std::vector<nn::GroupNorm::Cache> branch_norm;
        std::vector<nn::SiLU::Cache> branch_act;
        nn::Conv2d::Cache fuse_conv;
        nn::GroupNorm::Cache fuse_norm;
        nn::SiLU::Cache fuse_act;
    };

    Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    Tensor backward(const Tensor& grad_out, const Cache& cache);
    void init(Rng& rng);
    void visit(const nn::ParamVisitor& fn);
    void visit(const nn::ConstParamVisitor& fn) const;

private:
    std::int64_t branch_ch_ = 0;
    std::vector<nn::Conv2d> branches_;
    std::vector<nn::GroupNorm> branch_norms_;
    nn::Conv2d fuse_;
    nn::GroupNorm fuse_norm_;
};

struct TranslateCache {
    std::vector<InceptionBlock::Cache> downs;
    std::vector<InceptionBlock::Cache> ups;
    nn::Conv2d::Cache remap;
};

struct DecodeCache {
    std::vector<ConvBlock::Cache> blocks;
    nn::Conv2d::Cache readout;
    nn::Clamp::Cache clamp;
    std::int64_t skip_channels = 0;
};

}  // namespace detail

/// SimVP-style nowcasting network: per-frame spatial encoder, stacked-time
/// inception UNet translator, per-frame decoder with a skip connection from
/// the first encoder block. All T_out frames come out of one parallel pass.
class NowcastModel {
public:
    NowcastModel() = default;
    explicit NowcastModel(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }

    struct EncodeResult {
        Tensor latent;  // [N, hid_spatial, H/f, W/f]
        Tensor skip;    // [N, hid_spatial, H/2, W/2], first block output
    };

    struct ForwardCache;

    /// Per-frame spatial features; input [N, 1, H, W] normalized to [0, 1].
    EncodeResult encode(const Tensor& frames) const;

    /// Temporal translation on time-stacked latents
    /// [B, T_in*hid_spatial, h, w] -> [B, T_out*hid_spatial, h, w].
    Tensor translate(const Tensor& stacked) const;

    /// Frame reconstruction [N, hid_spatial, h, w] -> [N, 1, H, W], clamped to
    /// [0, 1]. `skip` must match the encoder's first-block output shape; the
    /// one-argument form evaluates with a zero skip.
    Tensor decode(const Tensor& latent, const Tensor& skip) const;
    Tensor decode(const Tensor& latent) const;

    /// Full pass [B, T_in, 1, H, W] -> [B, T_out, 1, H, W].
    Tensor forward(const Tensor& x, ForwardCache* cache = nullptr) const;

    /// Accumulates parameter gradients for a forward recorded in `cache`;
    /// returns the gradient with respect to the input.
    Tensor backward(const Tensor& grad_y, const ForwardCache& cache);

    void visit_params(const nn::ParamVisitor& fn);
    void visit_params(const nn::ConstParamVisitor& fn) const;
    std::int64_t parameter_count() const;
    void zero_grads();

    /// True when every parameter array is finite.
    bool parameters_finite() const;

private:
    friend NowcastModel init_model(const ModelConfig& config);
    void init_weights_(Rng& rng);

    ModelConfig config_;
    std::vector<detail::ConvBlock> enc_blocks_;
    std::vector<detail::InceptionBlock> tr_downs_;
    std::vector<detail::InceptionBlock> tr_ups_;
    nn::Conv2d tr_remap_;
    std::vector<detail::ConvBlock> dec_blocks_;
    nn::Conv2d readout_;

    Tensor translate_impl(const Tensor& stacked, detail::TranslateCache* cache) const;
    Tensor decode_impl(const Tensor& latent, const Tensor& skip,
                       detail::DecodeCache* cache) const;
};

struct NowcastModel::ForwardCache {
    std::int64_t batch = 0;
    std::vector<detail::ConvBlock::Cache> enc_blocks;
    detail::TranslateCache translate;
    detail::DecodeCache decode;
};

/// Deterministic parameter initialization from config.seed.
NowcastModel init_model(const ModelConfig& config);

}  // namespace nowcastkd
