#include "nowcastkd/radar_data.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <set>

#include "nowcastkd/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace nowcastkd {

namespace {

constexpr int kFormatVersion = 1;

std::vector<std::uint8_t> read_binary_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> data(size);
    if (size > 0) in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size));
    if (!in) throw IoError("short read on " + path.string());
    return data;
}

void write_binary_file(const fs::path& path, const std::uint8_t* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    if (size > 0) out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("short write on " + path.string());
}

json load_json_file(const fs::path& path, const char* kind) {
    std::ifstream in(path);
    if (!in) throw FormatError(std::string(kind) + " not found: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError(std::string("cannot parse ") + kind + " " + path.string() + ": " +
                          e.what());
    }
    return j;
}

}  // namespace

void RadarSequence::validate() const {
    if (id.empty()) throw ValidationError("sequence id must be nonempty");
    if (t_total < 1 || height < 1 || width < 1) {
        throw ValidationError("sequence " + id + ": nonpositive dimensions");
    }
    if (interval_minutes < 1) throw ValidationError("sequence " + id + ": bad interval");
    const auto expected = static_cast<std::size_t>(t_total * height * width);
    if (frames.size() != expected) {
        throw ValidationError("sequence " + id + ": frame buffer has " +
                              std::to_string(frames.size()) + " values, expected " +
                              std::to_string(expected));
    }
}

void DatasetSpec::validate() const {
    if (height < 1 || width < 1) throw ConfigError("dataset: nonpositive grid size");
    if (t_in < 1 || t_out < 1) throw ConfigError("dataset: t_in and t_out must be >= 1");
    if (interval_minutes < 1) throw ConfigError("dataset: interval_minutes must be >= 1");
    if (thresholds.empty()) throw ConfigError("dataset: thresholds must be nonempty");
    for (std::size_t i = 1; i < thresholds.size(); ++i) {
        if (thresholds[i] <= thresholds[i - 1]) {
            throw ConfigError("dataset: thresholds must be strictly increasing");
        }
    }
    if (tau < 0.0 || tau > 255.0) throw ConfigError("dataset: tau must lie in [0, 255]");
}

void SyntheticGenConfig::validate() const {
    if (n_sequences < 0) throw ConfigError("synthetic: n_sequences must be >= 0");
    if (height < 1 || width < 1 || t_total < 1) throw ConfigError("synthetic: bad geometry");
    if (n_cells_min < 1 || n_cells_max < n_cells_min) {
        throw ConfigError("synthetic: empty n_cells range");
    }
    if (velocity_max < velocity_min) throw ConfigError("synthetic: empty velocity range");
    if (growth_max < growth_min || growth_min <= 0.0) {
        throw ConfigError("synthetic: empty growth range");
    }
    if (peak_max < peak_min || peak_min < 0.0) throw ConfigError("synthetic: empty peak range");
    if (sigma_max < sigma_min || sigma_min <= 0.0) throw ConfigError("synthetic: empty sigma range");
    if (diffusion < 0.0) throw ConfigError("synthetic: diffusion must be >= 0");
    if (heavy_fraction < 0.0 || heavy_fraction > 1.0) {
        throw ConfigError("synthetic: heavy_fraction must lie in [0, 1]");
    }
}

Dataset load_dataset(const fs::path& dir, const DatasetSpec& spec, DatasetExtras* extras) {
    spec.validate();
    const json manifest = load_json_file(dir / "manifest.json", "manifest");
    if (!manifest.contains("height") || !manifest.contains("width") ||
        !manifest.contains("sequences")) {
        throw FormatError("manifest " + (dir / "manifest.json").string() +
                          " is missing required keys");
    }
    const auto h = manifest.at("height").get<std::int64_t>();
    const auto w = manifest.at("width").get<std::int64_t>();
    const auto interval = manifest.value("interval_minutes", std::int64_t{5});
    if (h != spec.height || w != spec.width) {
        throw ValidationError("dataset " + dir.string() + ": manifest grid " + std::to_string(h) +
                              "x" + std::to_string(w) + " does not match spec " +
                              std::to_string(spec.height) + "x" + std::to_string(spec.width));
    }
    if (extras) {
        if (manifest.contains("boundary")) extras->boundary = manifest.at("boundary").get<std::int64_t>();
        if (manifest.contains("teacher_checkpoint_hash")) {
            extras->teacher_checkpoint_hash = manifest.at("teacher_checkpoint_hash").get<std::string>();
        }
    }

    Dataset out;
    std::set<std::string> seen_ids;
    for (const auto& entry : manifest.at("sequences")) {
        RadarSequence seq;
        seq.id = entry.at("id").get<std::string>();
        seq.t_total = entry.at("t_total").get<std::int64_t>();
        seq.height = h;
        seq.width = w;
        seq.interval_minutes = interval;
        if (!seen_ids.insert(seq.id).second) {
            throw ValidationError("dataset " + dir.string() + ": duplicate sequence id " + seq.id);
        }
        const fs::path file = dir / entry.at("file").get<std::string>();
        seq.frames = read_binary_file(file);
        const auto expected = static_cast<std::size_t>(seq.t_total * h * w);
        if (seq.frames.size() != expected) {
            throw ValidationError("sequence " + seq.id + ": file " + file.string() + " holds " +
                                  std::to_string(seq.frames.size()) + " bytes, expected " +
                                  std::to_string(expected));
        }
        if (seq.t_total < spec.t_in + spec.t_out) {
            throw ValidationError("sequence " + seq.id + ": t_total " +
                                  std::to_string(seq.t_total) + " < t_in + t_out = " +
                                  std::to_string(spec.t_in + spec.t_out));
        }
        seq.validate();
        out.push_back(std::move(seq));
    }
    return out;
}

void write_dataset(const Dataset& sequences, const fs::path& dir, const DatasetExtras& extras) {
    std::int64_t h = 0, w = 0, interval = 5;
    std::set<std::string> seen_ids;
    for (const auto& seq : sequences) {
        seq.validate();
        if (h == 0) {
            h = seq.height;
            w = seq.width;
            interval = seq.interval_minutes;
        } else if (seq.height != h || seq.width != w) {
            throw ValidationError("write_dataset: sequence " + seq.id +
                                  " grid differs from the rest");
        }
        if (!seen_ids.insert(seq.id).second) {
            throw ValidationError("write_dataset: duplicate sequence id " + seq.id);
        }
    }

    // Stage into a fresh sibling directory, then swap. A reader never sees a
    // half-written manifest.
    const fs::path tmp = dir.parent_path().empty()
                             ? fs::path(dir.string() + ".tmp")
                             : dir.parent_path() / (dir.filename().string() + ".tmp");
    std::error_code ec;
    fs::remove_all(tmp, ec);
    fs::create_directories(tmp);

    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["height"] = h;
    manifest["width"] = w;
    manifest["interval_minutes"] = interval;
    if (extras.boundary) manifest["boundary"] = *extras.boundary;
    if (extras.teacher_checkpoint_hash) {
        manifest["teacher_checkpoint_hash"] = *extras.teacher_checkpoint_hash;
    }
    manifest["sequences"] = json::array();
    for (const auto& seq : sequences) {
        const std::string file = seq.id + ".bin";
        write_binary_file(tmp / file, seq.frames.data(), seq.frames.size());
        manifest["sequences"].push_back({{"id", seq.id}, {"t_total", seq.t_total}, {"file", file}});
    }
    {
        std::ofstream out(tmp / "manifest.json");
        if (!out) throw IoError("cannot write manifest under " + tmp.string());
        out << manifest.dump(2) << "\n";
        if (!out) throw IoError("short write on manifest under " + tmp.string());
    }

    const fs::path old = tmp.string() + ".old";
    fs::remove_all(old, ec);
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old, ec);
}

Tensor normalize(const RadarSequence& seq) {
    seq.validate();
    Tensor out({seq.t_total, seq.height, seq.width});
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        out[i] = static_cast<double>(seq.frames[static_cast<std::size_t>(i)]) / 255.0;
    }
    return out;
}

std::vector<std::uint8_t> denormalize(const Tensor& frames) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(frames.numel()));
    for (std::int64_t i = 0; i < frames.numel(); ++i) {
        const double v = std::round(frames[i] * 255.0);
        out[static_cast<std::size_t>(i)] =
            static_cast<std::uint8_t>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
    }
    return out;
}

Dataset generate_synthetic(const SyntheticGenConfig& config) {
    config.validate();
    Dataset out;
    out.reserve(static_cast<std::size_t>(config.n_sequences));
    const std::int64_t n_heavy = static_cast<std::int64_t>(
        std::ceil(config.heavy_fraction * static_cast<double>(config.n_sequences)));

    for (std::int64_t s = 0; s < config.n_sequences; ++s) {
        Rng rng(Rng::mix(config.seed ^ Rng::mix(static_cast<std::uint64_t>(s))));
        const std::int64_t n_cells = rng.uniform_int(config.n_cells_min, config.n_cells_max);

        struct Cell {
            double cy, cx, vy, vx, sigma0, amp0, growth;
        };
        std::vector<Cell> cells;
        cells.reserve(static_cast<std::size_t>(n_cells));
        for (std::int64_t c = 0; c < n_cells; ++c) {
            Cell cell;
            cell.cy = rng.uniform(0.0, static_cast<double>(config.height));
            cell.cx = rng.uniform(0.0, static_cast<double>(config.width));
            cell.vy = rng.uniform(config.velocity_min, config.velocity_max);
            cell.vx = rng.uniform(config.velocity_min, config.velocity_max);
            cell.sigma0 = rng.uniform(config.sigma_min, config.sigma_max);
            cell.amp0 = rng.uniform(config.peak_min, config.peak_max);
            cell.growth = rng.uniform(config.growth_min, config.growth_max);
            if (c == 0 && s < n_heavy) {
                // Guarantee a heavy-rain core: high peak, centered away from the
                // border, non-decaying amplitude.
                const double lo = std::min(config.heavy_intensity, config.peak_max);
                cell.amp0 = rng.uniform(lo, std::max(config.peak_max, lo));
                cell.cy = rng.uniform(config.height * 0.25, config.height * 0.75);
                cell.cx = rng.uniform(config.width * 0.25, config.width * 0.75);
                cell.growth = std::max(cell.growth, 1.0);
            }
            cells.push_back(cell);
        }

        RadarSequence seq;
        seq.id = config.id_prefix + "-" + std::to_string(s);
        seq.t_total = config.t_total;
        seq.height = config.height;
        seq.width = config.width;
        seq.interval_minutes = config.interval_minutes;
        seq.frames.assign(static_cast<std::size_t>(config.t_total * config.height * config.width),
                          0);

        std::vector<double> field(static_cast<std::size_t>(config.height * config.width));
        for (std::int64_t t = 0; t < config.t_total; ++t) {
            std::fill(field.begin(), field.end(), 0.0);
            for (const Cell& cell : cells) {
                const double amp = cell.amp0 * std::pow(cell.growth, static_cast<double>(t));
                const double var = cell.sigma0 * cell.sigma0 + config.diffusion * static_cast<double>(t);
                const double sigma = std::sqrt(var);
                const double cy = cell.cy + cell.vy * static_cast<double>(t);
                const double cx = cell.cx + cell.vx * static_cast<double>(t);
                const double reach = 4.0 * sigma;
                const std::int64_t i0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cy - reach)));
                const std::int64_t i1 = std::min<std::int64_t>(config.height - 1, static_cast<std::int64_t>(std::ceil(cy + reach)));
                const std::int64_t j0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(cx - reach)));
                const std::int64_t j1 = std::min<std::int64_t>(config.width - 1, static_cast<std::int64_t>(std::ceil(cx + reach)));
                for (std::int64_t i = i0; i <= i1; ++i) {
                    for (std::int64_t j = j0; j <= j1; ++j) {
                        const double dy = static_cast<double>(i) - cy;
                        const double dx = static_cast<double>(j) - cx;
                        field[static_cast<std::size_t>(i * config.width + j)] +=
                            amp * std::exp(-(dy * dy + dx * dx) / (2.0 * var));
                    }
                }
            }
            std::uint8_t* frame =
                seq.frames.data() + static_cast<std::size_t>(t * config.height * config.width);
            for (std::size_t p = 0; p < field.size(); ++p) {
                const double v = std::round(field[p]);
                frame[p] = static_cast<std::uint8_t>(v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v));
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

SplitResult split(const Dataset& dataset, double f_train, double f_val, double f_test,
                  std::uint64_t seed) {
    if (f_train < 0.0 || f_val < 0.0 || f_test < 0.0) {
        throw ConfigError("split: fractions must be nonnegative");
    }
    if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9) {
        throw ConfigError("split: fractions must sum to 1");
    }
    const std::size_t n = dataset.size();
    const auto n_val = static_cast<std::size_t>(std::floor(f_val * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::floor(f_test * static_cast<double>(n)));

    Rng rng(seed);
    const std::vector<std::size_t> perm = rng.permutation(n);

    SplitResult result;
    for (std::size_t i = 0; i < n; ++i) {
        const RadarSequence& seq = dataset[perm[i]];
        if (i < n - n_val - n_test) {
            result.train.push_back(seq);
        } else if (i < n - n_test) {
            result.val.push_back(seq);
        } else {
            result.test.push_back(seq);
        }
    }
    return result;
}

Dataset load_nhwt_archive(const fs::path& descriptor, const DatasetSpec& spec) {
    spec.validate();
    const json desc = load_json_file(descriptor, "archive descriptor");
    for (const char* key : {"n", "height", "width", "t_total", "data"}) {
        if (!desc.contains(key)) {
            throw FormatError("archive descriptor " + descriptor.string() + " is missing key '" +
                              key + "'");
        }
    }
    const auto n = desc.at("n").get<std::int64_t>();
    const auto h = desc.at("height").get<std::int64_t>();
    const auto w = desc.at("width").get<std::int64_t>();
    const auto t = desc.at("t_total").get<std::int64_t>();
    const auto interval = desc.value("interval_minutes", std::int64_t{5});
    if (h != spec.height || w != spec.width) {
        throw ValidationError("archive " + descriptor.string() + ": grid " + std::to_string(h) +
                              "x" + std::to_string(w) + " does not match spec");
    }
    if (t < spec.t_in + spec.t_out) {
        throw ValidationError("archive " + descriptor.string() + ": t_total too short");
    }

    const fs::path data_path = descriptor.parent_path() / desc.at("data").get<std::string>();
    const std::vector<std::uint8_t> raw = read_binary_file(data_path);
    const auto expected = static_cast<std::size_t>(n * h * w * t);
    if (raw.size() != expected) {
        throw ValidationError("archive data " + data_path.string() + " holds " +
                              std::to_string(raw.size()) + " bytes, expected " +
                              std::to_string(expected));
    }

    const std::string stem = descriptor.stem().string();
    Dataset out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::int64_t s = 0; s < n; ++s) {
        RadarSequence seq;
        seq.id = stem + "-" + std::to_string(s);
        seq.t_total = t;
        seq.height = h;
        seq.width = w;
        seq.interval_minutes = interval;
        seq.frames.resize(static_cast<std::size_t>(t * h * w));
        const std::uint8_t* src = raw.data() + s * h * w * t;
        // [H, W, T] -> [T, H, W]
        for (std::int64_t i = 0; i < h; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
                for (std::int64_t k = 0; k < t; ++k) {
                    seq.frames[static_cast<std::size_t>((k * h + i) * w + j)] =
                        src[(i * w + j) * t + k];
                }
            }
        }
        seq.validate();
        out.push_back(std::move(seq));
    }
    return out;
}

}  // namespace nowcastkd
