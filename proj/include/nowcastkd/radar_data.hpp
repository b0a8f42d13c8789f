#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nowcastkd/rng.hpp"
#include "nowcastkd/tensor.hpp"

namespace nowcastkd {

/// One radar sample: T_total single-channel intensity grids, raw 0..255.
struct RadarSequence {
    std::string id;
    std::int64_t t_total = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t interval_minutes = 5;
    std::vector<std::uint8_t> frames;  // row-major [T, H, W]

    std::uint8_t at(std::int64_t t, std::int64_t i, std::int64_t j) const {
        return frames[static_cast<std::size_t>((t * height + i) * width + j)];
    }
    void validate() const;
};

/// Geometry and evaluation thresholds governing one dataset.
struct DatasetSpec {
    std::int64_t height = 64;
    std::int64_t width = 64;
    std::int64_t t_in = 13;
    std::int64_t t_out = 12;
    std::int64_t interval_minutes = 5;
    std::vector<double> thresholds = {16, 74, 133, 160, 181, 219};
    double tau = 219;  // defaults to the largest threshold

    void validate() const;
    static DatasetSpec desk_default() { return DatasetSpec{}; }
};

/// Seeded storm-cell generator configuration. Cells are Gaussian blobs with
/// constant per-cell advection, multiplicative growth/decay and additive
/// diffusion of the squared radius.
struct SyntheticGenConfig {
    std::int64_t n_sequences = 100;
    std::int64_t height = 64;
    std::int64_t width = 64;
    std::int64_t t_total = 25;
    std::int64_t interval_minutes = 5;
    std::int64_t n_cells_min = 2;
    std::int64_t n_cells_max = 5;
    double velocity_min = -1.5;  // pixels/frame, per axis
    double velocity_max = 1.5;
    double diffusion = 0.15;  // added to sigma^2 each frame
    double growth_min = 0.97;  // per-frame amplitude multiplier
    double growth_max = 1.03;
    double peak_min = 120.0;
    double peak_max = 255.0;
    double sigma_min = 4.0;
    double sigma_max = 9.0;
    /// At least this fraction of sequences gets one cell whose peak is drawn
    /// from [heavy_intensity, peak_max] with non-decaying amplitude, so the
    /// top-threshold metrics have events to score.
    double heavy_fraction = 0.8;
    double heavy_intensity = 230.0;
    std::uint64_t seed = 1234;
    std::string id_prefix = "synth";

    void validate() const;
};

using Dataset = std::vector<RadarSequence>;

struct SplitResult {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Manifest-level metadata that tags augmented datasets (see distill).
struct DatasetExtras {
    std::optional<std::int64_t> boundary;
    std::optional<std::string> teacher_checkpoint_hash;
};

// --- On-disk format -------------------------------------------------------
// <dir>/manifest.json   {"format_version", "height", "width",
//                        "interval_minutes", "sequences":[{"id","t_total","file"}],
//                        optional "boundary", "teacher_checkpoint_hash"}
// <dir>/<id>.bin        flat little-endian uint8, row-major [T, H, W]

Dataset load_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                     DatasetExtras* extras = nullptr);
void write_dataset(const Dataset& sequences, const std::filesystem::path& dir,
                   const DatasetExtras& extras = {});

/// frames / 255 as [T, H, W] doubles in [0, 1].
Tensor normalize(const RadarSequence& seq);
/// round(x * 255) clipped to [0, 255].
std::vector<std::uint8_t> denormalize(const Tensor& frames);

Dataset generate_synthetic(const SyntheticGenConfig& config);

/// Seeded shuffle, then sizes (n - floor(f_val n) - floor(f_test n),
/// floor(f_val n), floor(f_test n)); the rounding remainder goes to train.
SplitResult split(const Dataset& dataset, double f_train, double f_val, double f_test,
                  std::uint64_t seed);

/// Reads a SEVIR-shaped archive: a JSON descriptor {"n","height","width",
/// "t_total","interval_minutes","data"} next to a flat uint8 file in
/// [N, H, W, T] axis order; frames are transposed to [T, H, W].
Dataset load_nhwt_archive(const std::filesystem::path& descriptor, const DatasetSpec& spec);

}  // namespace nowcastkd
