#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kiunet/errors.hpp"
#include "kiunet/random.hpp"
#include "kiunet/serialization.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet::data {

/// Grayscale image in [0, 1] with its binary mask, both 1x1xHxW.
struct Sample {
    std::string id;
    Tensor<float> image;
    Tensor<float> mask;
};

/// Shortest text that parses back to the same double.
inline std::string shortest(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

/// Parameters of the synthetic small-structure generator.
struct SynthConfig {
    std::size_t image_size = 128;
    std::size_t count = 100;
    int min_ellipses = 1;
    int max_ellipses = 3;
    double min_radius = 2.0;
    double max_radius = 6.0;
    int min_curves = 0;
    int max_curves = 2;
    double min_curve_width = 1.0;
    double max_curve_width = 2.0;
    double min_sigma = 0.5;
    double max_sigma = 1.5;
    double speckle = 0.2;
    double min_background = 0.1;
    double max_background = 0.3;
    double min_intensity = 0.55;
    double max_intensity = 0.85;
    // Accepted foreground fraction of a sample; layouts outside are redrawn.
    double min_foreground = 0.001;
    double max_foreground = 0.15;
    std::size_t border = 2;
    std::uint64_t seed = 0;

    void validate() const {
        auto require = [](bool ok, const std::string& what) {
            if (!ok) throw ConfigError("invalid synth config: " + what);
        };
        require(count >= 1, "count must be >= 1");
        require(image_size >= 8, "image_size must be >= 8");
        require(min_ellipses >= 0 && min_ellipses <= max_ellipses, "ellipse count range");
        require(min_curves >= 0 && min_curves <= max_curves, "curve count range");
        require(max_ellipses + max_curves >= 1, "at least one structure per image");
        require(min_radius >= 1.0 && min_radius <= max_radius, "radius range (radii >= 1 px)");
        require(min_curve_width > 0.0 && min_curve_width <= max_curve_width, "curve width range");
        require(min_sigma > 0.0 && min_sigma <= max_sigma, "blur sigma range (sigma > 0)");
        require(speckle >= 0.0, "speckle strength must be >= 0");
        require(min_background >= 0.0 && min_background <= max_background && max_background < min_intensity &&
                    min_intensity <= max_intensity && max_intensity <= 1.0,
                "intensity ranges (background below structures, all within [0, 1])");
        require(min_foreground >= 0.0 && min_foreground < max_foreground && max_foreground <= 1.0,
                "foreground fraction range");
    }

    std::string describe() const {
        auto range = [](double lo, double hi) { return shortest(lo) + ".." + shortest(hi); };
        std::ostringstream os;
        os << "image_size=" << image_size << " count=" << count << " ellipses=" << min_ellipses << ".."
           << max_ellipses << " radius=" << range(min_radius, max_radius) << " curves=" << min_curves << ".."
           << max_curves << " curve_width=" << range(min_curve_width, max_curve_width)
           << " sigma=" << range(min_sigma, max_sigma) << " speckle=" << shortest(speckle)
           << " background=" << range(min_background, max_background)
           << " intensity=" << range(min_intensity, max_intensity)
           << " foreground=" << range(min_foreground, max_foreground) << " border=" << border << " seed=" << seed;
        return os.str();
    }
};

enum class Split { none, train, test };

inline std::string_view split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::test: return "test";
        case Split::none: return "none";
    }
    return "none";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "none") return Split::none;
    throw FormatError("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
    std::string id;
    std::string image_path;  // relative to the dataset directory
    std::string mask_path;
    Split split = Split::none;
};

/// `<id>\t<image-path>\t<mask-path>\t<split>` lines; `#` lines carry provenance.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> comments;  // without the leading "# "

    std::vector<std::string> ids(Split s) const {
        std::vector<std::string> out;
        for (const auto& e : entries) {
            if (e.split == s) out.push_back(e.id);
        }
        return out;
    }

    std::string str() const {
        std::ostringstream os;
        for (const auto& c : comments) {
            os << "# " << c << "\n";
        }
        for (const auto& e : entries) {
            os << e.id << "\t" << e.image_path << "\t" << e.mask_path << "\t" << split_name(e.split) << "\n";
        }
        return os.str();
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write manifest " + path.string());
        out << str();
    }

    static DatasetManifest parse(std::istream& in) {
        DatasetManifest m;
        std::set<std::string> seen;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            if (line[0] == '#') {
                m.comments.push_back(line.size() > 2 ? line.substr(2) : "");
                continue;
            }
            std::vector<std::string> fields;
            std::stringstream ss(line);
            std::string f;
            while (std::getline(ss, f, '\t')) fields.push_back(f);
            if (fields.size() != 4) {
                throw FormatError("manifest line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
            }
            if (!seen.insert(fields[0]).second) {
                throw FormatError("manifest line " + std::to_string(lineno) + ": duplicate id " + fields[0]);
            }
            m.entries.push_back({fields[0], fields[1], fields[2], parse_split(fields[3])});
        }
        return m;
    }

    static DatasetManifest read(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read manifest " + path.string());
        return parse(in);
    }
};

namespace detail {

// Separable Gaussian blur, kernel truncated at ceil(3 sigma) and renormalized,
// edge-replicating borders.
inline std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t size, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * static_cast<std::size_t>(radius) + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : kernel) v /= total;

    const auto n = static_cast<int>(size);
    auto clampi = [n](int i) { return std::clamp(i, 0, n - 1); };
    std::vector<double> tmp(img.size()), out(img.size());
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += kernel[static_cast<std::size_t>(k + radius)] * img[static_cast<std::size_t>(y * n + clampi(x + k))];
            }
            tmp[static_cast<std::size_t>(y * n + x)] = acc;
        }
    }
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
                acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(clampi(y + k) * n + x)];
            }
            out[static_cast<std::size_t>(y * n + x)] = acc;
        }
    }
    return out;
}

struct Layout {
    std::vector<std::uint8_t> mask;
    std::vector<double> intensity;  // structure brightness per pixel, 0 where background
};

// Draws one structure layout. Returns false when a structure could not be
// placed inside the border within the attempt budget.
inline bool draw_layout(const SynthConfig& cfg, Rng& rng, Layout& layout) {
    const std::size_t n = cfg.image_size;
    const double lo = static_cast<double>(cfg.border);
    const double hi = static_cast<double>(n - 1 - cfg.border);
    layout.mask.assign(n * n, 0);
    layout.intensity.assign(n * n, 0.0);

    auto paint = [&](std::size_t x, std::size_t y, double v) {
        const std::size_t i = y * n + x;
        layout.mask[i] = 1;
        layout.intensity[i] = std::max(layout.intensity[i], v);
    };

    const auto ellipses = rng.uniform_int(cfg.min_ellipses, cfg.max_ellipses);
    for (std::int64_t e = 0; e < ellipses; ++e) {
        const double a = rng.uniform(cfg.min_radius, cfg.max_radius);
        const double b = rng.uniform(cfg.min_radius, cfg.max_radius);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double value = rng.uniform(cfg.min_intensity, cfg.max_intensity);
        const double reach = std::max(a, b);
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            const double cx = rng.uniform(lo, hi);
            const double cy = rng.uniform(lo, hi);
            if (cx - reach < lo || cx + reach > hi || cy - reach < lo || cy + reach > hi) continue;
            placed = true;
            const double ct = std::cos(theta), st = std::sin(theta);
            for (auto y = static_cast<std::size_t>(std::floor(cy - reach)); y <= static_cast<std::size_t>(std::ceil(cy + reach)); ++y) {
                for (auto x = static_cast<std::size_t>(std::floor(cx - reach)); x <= static_cast<std::size_t>(std::ceil(cx + reach)); ++x) {
                    const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                    const double u = (dx * ct + dy * st) / a;
                    const double v = (-dx * st + dy * ct) / b;
                    if (u * u + v * v <= 1.0) paint(x, y, value);
                }
            }
        }
        if (!placed) return false;
    }

    const auto curves = rng.uniform_int(cfg.min_curves, cfg.max_curves);
    for (std::int64_t c = 0; c < curves; ++c) {
        const double width = rng.uniform(cfg.min_curve_width, cfg.max_curve_width);
        const double value = rng.uniform(cfg.min_intensity, cfg.max_intensity);
        const double half = width / 2.0;
        const double margin = lo + std::ceil(half);
        const double top = hi - std::ceil(half);
        if (top <= margin) return false;
        // Quadratic Bezier with all control points inside the margin stays inside it.
        double px[3], py[3];
        for (int k = 0; k < 3; ++k) {
            px[k] = rng.uniform(margin, top);
            py[k] = rng.uniform(margin, top);
        }
        const double length = std::hypot(px[1] - px[0], py[1] - py[0]) + std::hypot(px[2] - px[1], py[2] - py[1]);
        const auto steps = static_cast<std::size_t>(std::ceil(length * 4.0)) + 1;
        const auto r = static_cast<long>(std::ceil(half));
        for (std::size_t s = 0; s <= steps; ++s) {
            const double t = static_cast<double>(s) / static_cast<double>(steps);
            const double qx = (1 - t) * (1 - t) * px[0] + 2 * (1 - t) * t * px[1] + t * t * px[2];
            const double qy = (1 - t) * (1 - t) * py[0] + 2 * (1 - t) * t * py[1] + t * t * py[2];
            const long ix = std::lround(qx), iy = std::lround(qy);
            for (long y = iy - r; y <= iy + r; ++y) {
                for (long x = ix - r; x <= ix + r; ++x) {
                    const double d = std::hypot(static_cast<double>(x) - qx, static_cast<double>(y) - qy);
                    if (d <= std::max(half, 0.5)) paint(static_cast<std::size_t>(x), static_cast<std::size_t>(y), value);
                }
            }
        }
    }
    return true;
}

}  // namespace detail

inline std::string sample_id(std::size_t index) {
    std::ostringstream os;
    os << "s" << std::setw(5) << std::setfill('0') << index;
    return os.str();
}

/// Renders sample `index` of the dataset described by `cfg`; depends only on
/// (cfg, index).
inline Sample generate_sample(const SynthConfig& cfg, std::size_t index) {
    const std::size_t n = cfg.image_size;
    Rng rng(mix_seed(cfg.seed, index));
    const std::string id = sample_id(index);

    detail::Layout layout;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        if (!detail::draw_layout(cfg, rng, layout)) continue;
        const double frac = static_cast<double>(std::count(layout.mask.begin(), layout.mask.end(), 1)) /
                            static_cast<double>(n * n);
        ok = frac >= cfg.min_foreground && frac <= cfg.max_foreground;
    }
    if (!ok) {
        throw GenerationError("sample " + id + ": could not place structures within 100 attempts");
    }

    const double background = rng.uniform(cfg.min_background, cfg.max_background);
    std::vector<double> img(n * n);
    for (std::size_t i = 0; i < img.size(); ++i) {
        img[i] = layout.mask[i] ? layout.intensity[i] : background;
    }
    img = detail::gaussian_blur(img, n, rng.uniform(cfg.min_sigma, cfg.max_sigma));
    std::vector<float> pixels(n * n), mask(n * n);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double noisy = img[i] * (1.0 + cfg.speckle * rng.normal());
        pixels[i] = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
        mask[i] = layout.mask[i] ? 1.0f : 0.0f;
    }
    const Shape shape{1, 1, n, n};
    return {id, Tensor<float>(shape, std::move(pixels)), Tensor<float>(shape, std::move(mask))};
}

inline std::string image_rel_path(const std::string& id) { return "images/" + id + ".kiut"; }
inline std::string mask_rel_path(const std::string& id) { return "masks/" + id + ".kiut"; }

/// Generates `cfg.count` samples and an unsplit manifest recording the generator parameters.
inline std::pair<std::vector<Sample>, DatasetManifest> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<Sample> samples;
    samples.reserve(cfg.count);
    DatasetManifest manifest;
    manifest.comments.push_back("generator synthetic " + cfg.describe());
    for (std::size_t i = 0; i < cfg.count; ++i) {
        samples.push_back(generate_sample(cfg, i));
        manifest.entries.push_back({samples.back().id, image_rel_path(samples.back().id),
                                    mask_rel_path(samples.back().id), Split::none});
    }
    return {std::move(samples), std::move(manifest)};
}

/// Seeded shuffle, then the first round(fraction * n) ids become train.
inline DatasetManifest split(DatasetManifest manifest, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("train fraction must lie in (0, 1)");
    }
    const std::size_t n = manifest.entries.size();
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
    if (n_train == 0 || n_train == n) {
        throw ConfigError("split of " + std::to_string(n) + " samples at fraction " + std::to_string(train_fraction) +
                          " leaves one side empty");
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, 0x5b117));
    rng.shuffle(order);
    for (std::size_t k = 0; k < n; ++k) {
        manifest.entries[order[k]].split = k < n_train ? Split::train : Split::test;
    }
    std::erase_if(manifest.comments, [](const std::string& c) { return c.starts_with("split "); });
    std::ostringstream os;
    os << "split seed=" << seed << " train_fraction=" << shortest(train_fraction);
    manifest.comments.push_back(os.str());
    return manifest;
}

/// Throws NonBinaryMaskError unless every value is exactly 0 or 1.
inline void validate_mask(const Tensor<float>& mask, const std::string& id) {
    auto v = mask.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] != 0.0f && v[i] != 1.0f) {
            throw NonBinaryMaskError("mask of " + id + " has non-binary value " + std::to_string(v[i]) +
                                     " at index " + std::to_string(i));
        }
    }
}

inline void save_sample(const Sample& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    io::save_tensor(dir / image_rel_path(s.id), s.image);
    io::save_tensor(dir / mask_rel_path(s.id), s.mask);
}

// -- PGM (binary P5, 8-bit) --------------------------------------------------

namespace detail {

inline std::string pgm_token(std::istream& in) {
    std::string tok;
    char c;
    while (in.get(c)) {
        if (c == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok += c;
    }
    return tok;
}

}  // namespace detail

/// Reads an 8-bit binary PGM as 1x1xHxW values in [0, 1] (pixel / maxval).
inline Tensor<float> read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    if (detail::pgm_token(in) != "P5") throw FormatError(path.string() + ": not a binary (P5) PGM");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(detail::pgm_token(in));
        h = std::stoul(detail::pgm_token(in));
        maxval = std::stoul(detail::pgm_token(in));
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
        throw FormatError(path.string() + ": unsupported PGM geometry or maxval");
    }
    std::vector<unsigned char> raw(w * h);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw TruncatedFileError(path.string() + ": truncated PGM");
    std::vector<float> v(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        v[i] = static_cast<float>(raw[i]) / static_cast<float>(maxval);
    }
    return Tensor<float>(Shape{1, 1, h, w}, std::move(v));
}

/// Writes a 1x1xHxW map in [0, 1] as an 8-bit P5 PGM (round(v * 255)).
template <typename T>
void write_pgm(const std::filesystem::path& path, const Tensor<T>& t) {
    const Shape& s = t.shape();
    if (s.n != 1 || s.c != 1) throw ShapeError("PGM export expects 1x1xHxW, got " + s.str());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "P5\n" << s.w << " " << s.h << "\n255\n";
    for (T v : t.values()) {
        const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
}

namespace detail {

inline Tensor<float> load_image_file(const std::filesystem::path& path) {
    if (path.extension() == ".pgm") return read_pgm(path);
    return io::load_tensor<float>(path);
}

}  // namespace detail

/// Loads an image/mask pair (KIUT or PGM by extension), validating the mask.
inline Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                          std::string id) {
    Sample s{std::move(id), detail::load_image_file(image_path), detail::load_image_file(mask_path)};
    if (s.image.shape() != s.mask.shape()) {
        throw ShapeError("sample " + s.id + ": image " + s.image.shape().str() + " and mask " + s.mask.shape().str() +
                         " differ in shape");
    }
    if (s.image.shape().n != 1 || s.image.shape().c != 1) {
        throw ShapeError("sample " + s.id + ": expected 1x1xHxW, got " + s.image.shape().str());
    }
    validate_mask(s.mask, s.id);
    return s;
}

/// Writes images/, masks/ and manifest.tsv under `dir`.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples,
                          const DatasetManifest& manifest, const std::string& manifest_name = "manifest.tsv") {
    std::filesystem::create_directories(dir);
    for (const auto& s : samples) save_sample(s, dir);
    manifest.write(dir / manifest_name);
}

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> train;
    std::vector<Sample> test;
    std::vector<Sample> unassigned;
};

inline Dataset load_dataset(const std::filesystem::path& dir, const std::string& manifest_name = "manifest.tsv") {
    Dataset d;
    d.manifest = DatasetManifest::read(dir / manifest_name);
    for (const auto& e : d.manifest.entries) {
        Sample s = load_sample(dir / e.image_path, dir / e.mask_path, e.id);
        switch (e.split) {
            case Split::train: d.train.push_back(std::move(s)); break;
            case Split::test: d.test.push_back(std::move(s)); break;
            case Split::none: d.unassigned.push_back(std::move(s)); break;
        }
    }
    return d;
}

}  // namespace kiunet::data
