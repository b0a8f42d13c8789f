#include "nowcastkd/model.hpp"

#include <cmath>
#include <stdexcept>

#include "nowcastkd/errors.hpp"

namespace nowcastkd {

using detail::ConvBlock;
using detail::InceptionBlock;

namespace {

constexpr std::int64_t kNormGroups = 8;

std::int64_t grouped_conv_groups(std::int64_t in_ch, std::int64_t branch_ch) {
    for (std::int64_t g = kNormGroups; g > 1; --g) {
        if (in_ch % g == 0 && branch_ch % g == 0) return g;
    }
    return 1;
}

void check_4d(const Tensor& x, std::int64_t channels, const char* where) {
    if (x.ndim() != 4 || x.dim(1) != channels) {
        throw ContractViolation(std::string(where) + ": expected [N," + std::to_string(channels) +
                                ",H,W], got " + x.shape_str());
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (t_in < 1 || t_out < 1) throw ConfigError("model: t_in and t_out must be >= 1");
    if (hid_spatial < 1 || hid_temporal < 1) throw ConfigError("model: hidden widths must be >= 1");
    if (n_spatial_blocks < 1) throw ConfigError("model: n_spatial_blocks must be >= 1");
    if (n_temporal_blocks < 1 || (n_temporal_blocks > 1 && n_temporal_blocks % 2 != 0)) {
        throw ConfigError("model: n_temporal_blocks must be 1 or even");
    }
    if (inception_kernels.empty()) throw ConfigError("model: inception_kernels must be nonempty");
    for (std::int64_t k : inception_kernels) {
        if (k < 1 || k % 2 == 0) throw ConfigError("model: inception kernels must be odd");
    }
}

// ---------------------------------------------------------------------------
// ConvBlock

namespace detail {

ConvBlock::ConvBlock(const std::string& name, Mode mode, std::int64_t in_ch, std::int64_t out_ch)
    : mode_(mode),
      conv_(name + ".conv", in_ch, out_ch, 3, mode == Mode::Down ? 2 : 1, 1, 1),
      norm_(name + ".norm", out_ch, nn::effective_groups(out_ch, kNormGroups)) {}

Tensor ConvBlock::forward(const Tensor& x, Cache* cache) const {
    Tensor h = mode_ == Mode::Up ? nn::Upsample2x::forward(x) : x;
    h = conv_.forward(h, cache ? &cache->conv : nullptr);
    h = norm_.forward(h, cache ? &cache->norm : nullptr);
    return nn::SiLU::forward(h, cache ? &cache->act : nullptr);
}

Tensor ConvBlock::backward(const Tensor& grad_out, const Cache& cache) {
    Tensor g = nn::SiLU::backward(grad_out, cache.act);
    g = norm_.backward(g, cache.norm);
    g = conv_.backward(g, cache.conv);
    if (mode_ == Mode::Up) g = nn::Upsample2x::backward(g);
    return g;
}

void ConvBlock::init(Rng& rng) { conv_.init(rng); }

void ConvBlock::visit(const nn::ParamVisitor& fn) {
    conv_.visit(fn);
    norm_.visit(fn);
}

void ConvBlock::visit(const nn::ConstParamVisitor& fn) const {
    conv_.visit(fn);
    norm_.visit(fn);
}

// ---------------------------------------------------------------------------
// InceptionBlock

InceptionBlock::InceptionBlock(const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
                               const std::vector<std::int64_t>& kernels) {
    const auto n_branches = static_cast<std::int64_t>(kernels.size());
    branch_ch_ = (out_ch + n_branches - 1) / n_branches;
    const std::int64_t groups = grouped_conv_groups(in_ch, branch_ch_);
    for (std::size_t b = 0; b < kernels.size(); ++b) {
        const std::int64_t k = kernels[b];
        const std::string bname = name + ".branch" + std::to_string(b);
        branches_.emplace_back(bname, in_ch, branch_ch_, k, 1, k / 2, groups);
        branch_norms_.emplace_back(bname + ".norm", branch_ch_,
                                   nn::effective_groups(branch_ch_, kNormGroups));
    }
    fuse_ = nn::Conv2d(name + ".fuse", branch_ch_ * n_branches, out_ch, 1, 1, 0, 1);
    fuse_norm_ = nn::GroupNorm(name + ".fuse.norm", out_ch, nn::effective_groups(out_ch, kNormGroups));
}

Tensor InceptionBlock::forward(const Tensor& x, Cache* cache) const {
    if (cache) {
        cache->branch_conv.resize(branches_.size());
        cache->branch_norm.resize(branches_.size());
        cache->branch_act.resize(branches_.size());
    }
    Tensor cat;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        Tensor h = branches_[b].forward(x, cache ? &cache->branch_conv[b] : nullptr);
        h = branch_norms_[b].forward(h, cache ? &cache->branch_norm[b] : nullptr);
        h = nn::SiLU::forward(h, cache ? &cache->branch_act[b] : nullptr);
        cat = b == 0 ? std::move(h) : nn::concat_channels(cat, h);
    }
    Tensor y = fuse_.forward(cat, cache ? &cache->fuse_conv : nullptr);
    y = fuse_norm_.forward(y, cache ? &cache->fuse_norm : nullptr);
    return nn::SiLU::forward(y, cache ? &cache->fuse_act : nullptr);
}

Tensor InceptionBlock::backward(const Tensor& grad_out, const Cache& cache) {
    Tensor g = nn::SiLU::backward(grad_out, cache.fuse_act);
    g = fuse_norm_.backward(g, cache.fuse_norm);
    Tensor gcat = fuse_.backward(g, cache.fuse_conv);

    Tensor gx;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        Tensor gb;
        if (b + 1 < branches_.size()) {
            Tensor rest;
            nn::split_channels(gcat, branch_ch_, gb, rest);
            gcat = std::move(rest);
        } else {
            gb = std::move(gcat);
        }
        gb = nn::SiLU::backward(gb, cache.branch_act[b]);
        gb = branch_norms_[b].backward(gb, cache.branch_norm[b]);
        gb = branches_[b].backward(gb, cache.branch_conv[b]);
        if (b == 0) {
            gx = std::move(gb);
        } else {
            gx += gb;
        }
    }
    return gx;
}

void InceptionBlock::init(Rng& rng) {
    for (auto& b : branches_) b.init(rng);
    fuse_.init(rng);
}

void InceptionBlock::visit(const nn::ParamVisitor& fn) {
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        branches_[b].visit(fn);
        branch_norms_[b].visit(fn);
    }
    fuse_.visit(fn);
    fuse_norm_.visit(fn);
}

void InceptionBlock::visit(const nn::ConstParamVisitor& fn) const {
    for (std::size_t b = 0; b < branches_.size(); ++b) {
        branches_[b].visit(fn);
        branch_norms_[b].visit(fn);
    }
    fuse_.visit(fn);
    fuse_norm_.visit(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NowcastModel

NowcastModel::NowcastModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::int64_t hs = config_.hid_spatial;
    const std::int64_t ht = config_.hid_temporal;
    const std::int64_t s_blocks = config_.n_spatial_blocks;

    for (std::int64_t i = 0; i < s_blocks; ++i) {
        enc_blocks_.emplace_back("encoder.block" + std::to_string(i), ConvBlock::Mode::Down,
                                 i == 0 ? 1 : hs, hs);
    }

    const std::int64_t c_in = config_.t_in * hs;
    const std::int64_t c_out = config_.t_out * hs;
    if (config_.n_temporal_blocks == 1) {
        tr_downs_.emplace_back("translator.down0", c_in, c_in, config_.inception_kernels);
    } else {
        const std::int64_t n2 = config_.n_temporal_blocks / 2;
        for (std::int64_t i = 0; i < n2; ++i) {
            tr_downs_.emplace_back("translator.down" + std::to_string(i), i == 0 ? c_in : ht, ht,
                                   config_.inception_kernels);
        }
        for (std::int64_t j = 0; j < n2; ++j) {
            const std::int64_t in_ch = j == 0 ? ht : 2 * ht;
            const std::int64_t out_ch = j == n2 - 1 ? c_in : ht;
            tr_ups_.emplace_back("translator.up" + std::to_string(j), in_ch, out_ch,
                                 config_.inception_kernels);
        }
    }
    tr_remap_ = nn::Conv2d("translator.remap", c_in, c_out, 1, 1, 0, 1);

    for (std::int64_t j = 0; j < s_blocks; ++j) {
        const std::int64_t in_ch = j == s_blocks - 1 ? 2 * hs : hs;
        dec_blocks_.emplace_back("decoder.block" + std::to_string(j), ConvBlock::Mode::Up, in_ch,
                                 hs);
    }
    readout_ = nn::Conv2d("decoder.readout", hs, 1, 1, 1, 0, 1);
}

NowcastModel init_model(const ModelConfig& config) {
    NowcastModel model(config);
    Rng rng(config.seed);
    model.init_weights_(rng);
    return model;
}

void NowcastModel::init_weights_(Rng& rng) {
    for (auto& b : enc_blocks_) b.init(rng);
    for (auto& b : tr_downs_) b.init(rng);
    for (auto& b : tr_ups_) b.init(rng);
    tr_remap_.init(rng);
    for (auto& b : dec_blocks_) b.init(rng);
    readout_.init(rng);
}

NowcastModel::EncodeResult NowcastModel::encode(const Tensor& frames) const {
    check_4d(frames, 1, "encode");
    const std::int64_t f = config_.downsample_factor();
    if (frames.dim(2) % f != 0 || frames.dim(3) % f != 0) {
        throw ContractViolation("encode: grid " + frames.shape_str() + " not divisible by " +
                                std::to_string(f));
    }
    EncodeResult result;
    Tensor h = frames;
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
        h = enc_blocks_[i].forward(h);
        if (i == 0) result.skip = h;
    }
    result.latent = std::move(h);
    return result;
}

Tensor NowcastModel::translate(const Tensor& stacked) const {
    check_4d(stacked, config_.t_in * config_.hid_spatial, "translate");
    return translate_impl(stacked, nullptr);
}

Tensor NowcastModel::translate_impl(const Tensor& stacked, detail::TranslateCache* cache) const {
    if (cache) {
        cache->downs.resize(tr_downs_.size());
        cache->ups.resize(tr_ups_.size());
    }
    std::vector<Tensor> skips;
    Tensor z = stacked;
    for (std::size_t i = 0; i < tr_downs_.size(); ++i) {
        z = tr_downs_[i].forward(z, cache ? &cache->downs[i] : nullptr);
        if (!tr_ups_.empty() && i + 1 < tr_downs_.size()) skips.push_back(z);
    }
    for (std::size_t j = 0; j < tr_ups_.size(); ++j) {
        Tensor in = j == 0 ? std::move(z) : nn::concat_channels(z, skips[tr_downs_.size() - 1 - j]);
        z = tr_ups_[j].forward(in, cache ? &cache->ups[j] : nullptr);
    }
    return tr_remap_.forward(z, cache ? &cache->remap : nullptr);
}

Tensor NowcastModel::decode(const Tensor& latent, const Tensor& skip) const {
    check_4d(latent, config_.hid_spatial, "decode");
    check_4d(skip, config_.hid_spatial, "decode(skip)");
    return decode_impl(latent, skip, nullptr);
}

Tensor NowcastModel::decode(const Tensor& latent) const {
    check_4d(latent, config_.hid_spatial, "decode");
    const std::int64_t f = config_.downsample_factor();
    Tensor skip({latent.dim(0), config_.hid_spatial, latent.dim(2) * f / 2, latent.dim(3) * f / 2});
    return decode_impl(latent, skip, nullptr);
}

Tensor NowcastModel::decode_impl(const Tensor& latent, const Tensor& skip,
                                 detail::DecodeCache* cache) const {
    if (cache) cache->blocks.resize(dec_blocks_.size());
    Tensor h = latent;
    for (std::size_t j = 0; j < dec_blocks_.size(); ++j) {
        if (j == dec_blocks_.size() - 1) {
            if (cache) cache->skip_channels = h.dim(1);
            h = nn::concat_channels(h, skip);
        }
        h = dec_blocks_[j].forward(h, cache ? &cache->blocks[j] : nullptr);
    }
    h = readout_.forward(h, cache ? &cache->readout : nullptr);
    return nn::Clamp::forward(h, 0.0, 1.0, cache ? &cache->clamp : nullptr);
}

Tensor NowcastModel::forward(const Tensor& x, ForwardCache* cache) const {
    if (x.ndim() != 5 || x.dim(1) != config_.t_in || x.dim(2) != 1) {
        throw ContractViolation("forward: expected [B," + std::to_string(config_.t_in) +
                                ",1,H,W], got " + x.shape_str());
    }
    if (!x.all_finite()) {
        throw ValidationError("forward: non-finite values in input of shape " + x.shape_str());
    }
    if (!parameters_finite()) {
        throw ValidationError("forward: non-finite model parameters");
    }
    const std::int64_t b = x.dim(0), h = x.dim(3), w = x.dim(4);
    const std::int64_t f = config_.downsample_factor();
    if (h % f != 0 || w % f != 0) {
        throw ContractViolation("forward: grid " + x.shape_str() + " not divisible by " +
                                std::to_string(f));
    }
    const std::int64_t hs = config_.hid_spatial;
    const std::int64_t t_in = config_.t_in, t_out = config_.t_out;

    if (cache) {
        cache->batch = b;
        cache->enc_blocks.resize(enc_blocks_.size());
    }

    Tensor frames = x.reshaped({b * t_in, 1, h, w});
    Tensor skip_full;
    Tensor z = std::move(frames);
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i) {
        z = enc_blocks_[i].forward(z, cache ? &cache->enc_blocks[i] : nullptr);
        if (i == 0) skip_full = z;
    }

    // Time-stack is a pure reshape: [B*T_in, hs, h', w'] == [B, T_in*hs, h', w'].
    z.reshape({b, t_in * hs, h / f, w / f});
    Tensor tr = translate_impl(z, cache ? &cache->translate : nullptr);
    tr.reshape({b * t_out, hs, h / f, w / f});

    // Skip for the decoder: the last input frame's first-block features,
    // broadcast over the output horizon.
    const std::int64_t sh = h / 2, sw = w / 2;
    Tensor skip({b * t_out, hs, sh, sw});
    const std::int64_t plane = hs * sh * sw;
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const double* src = skip_full.data() + ((bi + 1) * t_in - 1) * plane;
        for (std::int64_t t = 0; t < t_out; ++t) {
            std::copy(src, src + plane, skip.data() + (bi * t_out + t) * plane);
        }
    }

    Tensor y = decode_impl(tr, skip, cache ? &cache->decode : nullptr);
    y.reshape({b, t_out, 1, h, w});
    return y;
}

Tensor NowcastModel::backward(const Tensor& grad_y, const ForwardCache& cache) {
    const std::int64_t b = cache.batch;
    const std::int64_t t_in = config_.t_in, t_out = config_.t_out;
    const std::int64_t hs = config_.hid_spatial;
    const std::int64_t h = grad_y.dim(3), w = grad_y.dim(4);
    const std::int64_t f = config_.downsample_factor();

    Tensor g = grad_y.reshaped({b * t_out, 1, h, w});
    g = nn::Clamp::backward(g, cache.decode.clamp, 0.0, 1.0);
    g = readout_.backward(g, cache.decode.readout);

    Tensor g_skip;
    for (std::size_t jr = dec_blocks_.size(); jr-- > 0;) {
        g = dec_blocks_[jr].backward(g, cache.decode.blocks[jr]);
        if (jr == dec_blocks_.size() - 1) {
            Tensor g_main;
            nn::split_channels(g, cache.decode.skip_channels, g_main, g_skip);
            g = std::move(g_main);
        }
    }

    // Translator backward.
    g.reshape({b, t_out * hs, h / f, w / f});
    g = tr_remap_.backward(g, cache.translate.remap);
    std::vector<Tensor> skip_grads(tr_downs_.size() > 0 ? tr_downs_.size() - 1 : 0);
    for (std::size_t jr = tr_ups_.size(); jr-- > 0;) {
        g = tr_ups_[jr].backward(g, cache.translate.ups[jr]);
        if (jr >= 1) {
            Tensor g_z, g_sk;
            nn::split_channels(g, config_.hid_temporal, g_z, g_sk);
            const std::size_t idx = tr_downs_.size() - 1 - jr;
            if (skip_grads[idx].empty()) {
                skip_grads[idx] = std::move(g_sk);
            } else {
                skip_grads[idx] += g_sk;
            }
            g = std::move(g_z);
        }
    }
    for (std::size_t ir = tr_downs_.size(); ir-- > 0;) {
        if (ir + 1 < tr_downs_.size() && !tr_ups_.empty() && !skip_grads[ir].empty()) {
            g += skip_grads[ir];
        }
        g = tr_downs_[ir].backward(g, cache.translate.downs[ir]);
    }

    // Back to per-frame layout and scatter the decoder skip gradient onto the
    // last input frame's slot.
    g.reshape({b * t_in, hs, h / f, w / f});
    const std::int64_t sh = h / 2, sw = w / 2;
    Tensor g_skip_full({b * t_in, hs, sh, sw});
    const std::int64_t plane = hs * sh * sw;
    for (std::int64_t bi = 0; bi < b; ++bi) {
        double* dst = g_skip_full.data() + ((bi + 1) * t_in - 1) * plane;
        for (std::int64_t t = 0; t < t_out; ++t) {
            const double* src = g_skip.data() + (bi * t_out + t) * plane;
            for (std::int64_t p = 0; p < plane; ++p) dst[p] += src[p];
        }
    }

    for (std::size_t ir = enc_blocks_.size(); ir-- > 0;) {
        if (ir == 0) g += g_skip_full;
        g = enc_blocks_[ir].backward(g, cache.enc_blocks[ir]);
    }
    g.reshape({b, t_in, 1, h, w});
    return g;
}

void NowcastModel::visit_params(const nn::ParamVisitor& fn) {
    for (auto& blk : enc_blocks_) blk.visit(fn);
    for (auto& blk : tr_downs_) blk.visit(fn);
    for (auto& blk : tr_ups_) blk.visit(fn);
    tr_remap_.visit(fn);
    for (auto& blk : dec_blocks_) blk.visit(fn);
    readout_.visit(fn);
}

void NowcastModel::visit_params(const nn::ConstParamVisitor& fn) const {
    for (const auto& blk : enc_blocks_) blk.visit(fn);
    for (const auto& blk : tr_downs_) blk.visit(fn);
    for (const auto& blk : tr_ups_) blk.visit(fn);
    tr_remap_.visit(fn);
    for (const auto& blk : dec_blocks_) blk.visit(fn);
    readout_.visit(fn);
}

std::int64_t NowcastModel::parameter_count() const {
    std::int64_t n = 0;
    visit_params([&n](const nn::Parameter& p) { n += p.value.numel(); });
    return n;
}

void NowcastModel::zero_grads() {
    visit_params([](nn::Parameter& p) { p.zero_grad(); });
}

bool NowcastModel::parameters_finite() const {
    bool ok = true;
    visit_params([&ok](const nn::Parameter& p) {
        if (ok && !p.value.all_finite()) ok = false;
    });
    return ok;
}

}  // namespace nowcastkd
