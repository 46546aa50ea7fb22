#pragma once

// Procedural cell-image domains with exact ground truth, and the on-disk
// dataset layout (images/*.png, annotations/*.csv, optional styles/*.png).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dtlc/density.hpp"
#include "dtlc/image.hpp"
#include "dtlc/model.hpp"
#include "dtlc/rng.hpp"
#include "dtlc/training.hpp"

namespace dtlc {

struct AnnotatedImage {
    std::string id;  // file stem, or the zero-padded index when generated
    Image pixels;
    DotAnnotations annotations;
    std::optional<Image> style;  // known only for generated domains

    std::size_t count() const { return annotations.points.size(); }
};

enum class CellAppearance { gaussian_blob, ring, textured_blob };
enum class Background { flat, gradient, noise };

inline const char* to_string(CellAppearance a) {
    switch (a) {
        case CellAppearance::gaussian_blob: return "gaussian_blob";
        case CellAppearance::ring: return "ring";
        case CellAppearance::textured_blob: return "textured_blob";
    }
    return "?";
}

inline const char* to_string(Background b) {
    switch (b) {
        case Background::flat: return "flat";
        case Background::gradient: return "gradient";
        case Background::noise: return "noise";
    }
    return "?";
}

struct DomainSpec {
    std::string name = "source";
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t channels = 1;
    double count_mean = 20.0;
    double count_std = 7.0;
    CellAppearance appearance = CellAppearance::gaussian_blob;
    double radius_min = 2.5;
    double radius_max = 4.0;
    double intensity_min = 0.5;
    double intensity_max = 0.9;
    /// false renders dark cells on a bright background.
    bool bright_cells = true;
    Background background = Background::flat;
    double level_min = 0.05;
    double level_max = 0.7;
    double gradient_amplitude = 0.0;
    double noise_amplitude = 0.02;
    double noise_scale = 16.0;
    /// Minimum distance of cell centers from the image border.
    double margin = 4.0;
    std::uint64_t seed = 1;

    /// Pixels farther than this from every cell center are untouched background.
    double influence_radius() const { return 2.0 * radius_max; }

    void validate() const {
        if (height < 64 || width < 64) throw ConfigError("domain " + name + ": image_size must be at least 64x64");
        if (channels != 1 && channels != 3) throw ConfigError("domain " + name + ": channels must be 1 or 3");
        if (count_mean < 0.0 || count_std < 0.0) throw ConfigError("domain " + name + ": count mean/std must be >= 0");
        if (radius_min <= 0.0 || radius_max < radius_min) throw ConfigError("domain " + name + ": bad radius range");
        if (intensity_min < 0.0 || intensity_max < intensity_min) throw ConfigError("domain " + name + ": bad intensity range");
        if (level_min < 0.0 || level_max > 1.0 || level_max < level_min) throw ConfigError("domain " + name + ": bad level range");
        if (margin < 0.0 || 2.0 * margin >= static_cast<double>(std::min(height, width)))
            throw ConfigError("domain " + name + ": margin leaves no room for cells");
        if (noise_scale < 1.0) throw ConfigError("domain " + name + ": noise_scale must be >= 1");
    }
};

/// Scaled-down analogue of a synthetic-cell source set: bright Gaussian
/// blobs on a flat, noisy background whose level varies widely between
/// images.
inline DomainSpec toy_source_domain() { return DomainSpec{}; }

/// Differs from the source in every appearance axis: dark rings on a
/// bright gradient background, larger images, fewer cells.
inline DomainSpec toy_target_domain() {
    DomainSpec d;
    d.name = "target";
    d.height = 96;
    d.width = 96;
    d.count_mean = 10.0;
    d.count_std = 4.0;
    d.appearance = CellAppearance::ring;
    d.radius_min = 3.0;
    d.radius_max = 4.5;
    d.intensity_min = 0.35;
    d.intensity_max = 0.55;
    d.bright_cells = false;
    d.background = Background::gradient;
    d.level_min = 0.6;
    d.level_max = 0.8;
    d.gradient_amplitude = 0.25;
    d.noise_amplitude = 0.02;
    d.margin = 6.0;
    d.seed = 2;
    return d;
}

inline std::map<std::string, std::string> domain_spec_to_kv(const DomainSpec& d) {
    return {
        {"name", d.name},
        {"image_size", std::to_string(d.height) + "x" + std::to_string(d.width)},
        {"channels", std::to_string(d.channels)},
        {"count_mean", detail::format_double(d.count_mean)},
        {"count_std", detail::format_double(d.count_std)},
        {"appearance", to_string(d.appearance)},
        {"radius_min", detail::format_double(d.radius_min)},
        {"radius_max", detail::format_double(d.radius_max)},
        {"intensity_min", detail::format_double(d.intensity_min)},
        {"intensity_max", detail::format_double(d.intensity_max)},
        {"bright_cells", d.bright_cells ? "true" : "false"},
        {"background", to_string(d.background)},
        {"level_min", detail::format_double(d.level_min)},
        {"level_max", detail::format_double(d.level_max)},
        {"gradient_amplitude", detail::format_double(d.gradient_amplitude)},
        {"noise_amplitude", detail::format_double(d.noise_amplitude)},
        {"noise_scale", detail::format_double(d.noise_scale)},
        {"margin", detail::format_double(d.margin)},
        {"seed", std::to_string(d.seed)},
    };
}

/// Applies one key; returns false when the key is not a domain key.
inline bool apply_domain_key(DomainSpec& d, const std::string& key, const std::string& value) {
    const auto real = [&] { return detail::parse_real(value, key); };
    if (key == "name") {
        d.name = value;
    } else if (key == "image_size") {
        const auto x = value.find('x');
        if (x == std::string::npos) {
            d.height = d.width = detail::parse_size(value, key);
        } else {
            d.height = detail::parse_size(value.substr(0, x), key);
            d.width = detail::parse_size(value.substr(x + 1), key);
        }
    } else if (key == "channels") {
        d.channels = detail::parse_size(value, key);
    } else if (key == "count_mean") {
        d.count_mean = real();
    } else if (key == "count_std") {
        d.count_std = real();
    } else if (key == "appearance") {
        if (value == "gaussian_blob") d.appearance = CellAppearance::gaussian_blob;
        else if (value == "ring") d.appearance = CellAppearance::ring;
        else if (value == "textured_blob") d.appearance = CellAppearance::textured_blob;
        else throw ConfigError(key + ": unknown appearance '" + value + "'");
    } else if (key == "radius_min") {
        d.radius_min = real();
    } else if (key == "radius_max") {
        d.radius_max = real();
    } else if (key == "intensity_min") {
        d.intensity_min = real();
    } else if (key == "intensity_max") {
        d.intensity_max = real();
    } else if (key == "bright_cells") {
        if (value != "true" && value != "false") throw ConfigError(key + ": expected true or false");
        d.bright_cells = value == "true";
    } else if (key == "background") {
        if (value == "flat") d.background = Background::flat;
        else if (value == "gradient") d.background = Background::gradient;
        else if (value == "noise") d.background = Background::noise;
        else throw ConfigError(key + ": unknown background '" + value + "'");
    } else if (key == "level_min") {
        d.level_min = real();
    } else if (key == "level_max") {
        d.level_max = real();
    } else if (key == "gradient_amplitude") {
        d.gradient_amplitude = real();
    } else if (key == "noise_amplitude") {
        d.noise_amplitude = real();
    } else if (key == "noise_scale") {
        d.noise_scale = real();
    } else if (key == "margin") {
        d.margin = real();
    } else if (key == "seed") {
        d.seed = detail::parse_size(value, key);
    } else {
        return false;
    }
    return true;
}

namespace detail {

inline Image render_background(const DomainSpec& spec, Rng& rng) {
    Image bg(spec.height, spec.width, spec.channels);
    const double level = rng.uniform(spec.level_min, spec.level_max);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double gx = std::cos(angle), gy = std::sin(angle);

    // Value noise on a coarse lattice, bilinearly interpolated.
    const auto lattice_w = static_cast<std::size_t>(std::ceil(static_cast<double>(spec.width) / spec.noise_scale)) + 2;
    const auto lattice_h = static_cast<std::size_t>(std::ceil(static_cast<double>(spec.height) / spec.noise_scale)) + 2;
    std::vector<double> lattice;
    if (spec.background == Background::noise) {
        lattice.resize(lattice_w * lattice_h);
        for (auto& v : lattice) v = rng.uniform(-0.5, 0.5);
    }
    const double tint[3] = {1.0, 0.85, 0.95};
    const double cy = 0.5 * static_cast<double>(spec.height - 1);
    const double cx = 0.5 * static_cast<double>(spec.width - 1);
    const double extent = static_cast<double>(std::max(spec.height, spec.width));
    for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
            double v = level;
            if (spec.background == Background::gradient)
                v += spec.gradient_amplitude * ((static_cast<double>(x) - cx) * gx + (static_cast<double>(y) - cy) * gy) / extent;
            if (spec.background == Background::noise) {
                const double fx = static_cast<double>(x) / spec.noise_scale, fy = static_cast<double>(y) / spec.noise_scale;
                const auto ix = static_cast<std::size_t>(fx), iy = static_cast<std::size_t>(fy);
                const double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
                const auto L = [&](std::size_t r, std::size_t c) { return lattice[r * lattice_w + c]; };
                const double n = (1 - ty) * ((1 - tx) * L(iy, ix) + tx * L(iy, ix + 1)) +
                                 ty * ((1 - tx) * L(iy + 1, ix) + tx * L(iy + 1, ix + 1));
                v += spec.gradient_amplitude * n;
            }
            const double pixel_noise = spec.noise_amplitude * rng.normal();
            for (std::size_t c = 0; c < spec.channels; ++c) {
                const double t = spec.channels == 3 ? tint[c] : 1.0;
                bg.at(c, y, x) = static_cast<float>(std::clamp((v + pixel_noise) * t, 0.0, 1.0));
            }
        }
    quantize8(bg);
    return bg;
}

}  // namespace detail

inline std::string sample_stem(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04zu", index);
    return buf;
}

/// Renders one image per index. Each image is built from its own stream
/// derive_seed(seed, i), so the result is a pure function of (spec, i, seed).
inline AnnotatedImage generate_image(const DomainSpec& spec, std::size_t index, std::uint64_t seed) {
    Rng rng(derive_seed(seed, index));
    AnnotatedImage out;
    out.id = sample_stem(index);
    out.style = detail::render_background(spec, rng);
    out.pixels = *out.style;
    out.annotations.width = spec.width;
    out.annotations.height = spec.height;

    const double k_real = std::max(0.0, std::round(rng.normal(spec.count_mean, spec.count_std)));
    const auto k = static_cast<std::size_t>(k_real);

    // Accumulate cell contributions, then composite once per touched pixel.
    std::vector<double> signal(spec.height * spec.width, 0.0);
    std::vector<char> touched(spec.height * spec.width, 0);
    for (std::size_t i = 0; i < k; ++i) {
        const Point p{rng.uniform(spec.margin, static_cast<double>(spec.width) - spec.margin),
                      rng.uniform(spec.margin, static_cast<double>(spec.height) - spec.margin)};
        out.annotations.points.push_back(p);
        const double radius = rng.uniform(spec.radius_min, spec.radius_max);
        const double amplitude = rng.uniform(spec.intensity_min, spec.intensity_max);
        const double support = 2.0 * radius;
        const auto lo = [](double v) { return static_cast<std::ptrdiff_t>(std::ceil(v)); };
        const auto hi = [](double v) { return static_cast<std::ptrdiff_t>(std::floor(v)); };
        for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, lo(p.y - support));
             y <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(spec.height) - 1, hi(p.y + support)); ++y)
            for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, lo(p.x - support));
                 x <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(spec.width) - 1, hi(p.x + support)); ++x) {
                const double d = std::hypot(static_cast<double>(x) - p.x, static_cast<double>(y) - p.y);
                if (d > support) continue;
                double v = 0.0;
                switch (spec.appearance) {
                    case CellAppearance::gaussian_blob: {
                        const double s = 0.5 * radius;
                        v = std::exp(-d * d / (2 * s * s));
                        break;
                    }
                    case CellAppearance::ring: {
                        const double w = 0.25 * radius + 0.5;
                        v = std::exp(-(d - radius) * (d - radius) / (2 * w * w));
                        break;
                    }
                    case CellAppearance::textured_blob: {
                        const double s = 0.5 * radius;
                        v = std::exp(-d * d / (2 * s * s)) * (0.6 + 0.4 * rng.uniform());
                        break;
                    }
                }
                const std::size_t idx = static_cast<std::size_t>(y) * spec.width + static_cast<std::size_t>(x);
                signal[idx] += amplitude * v;
                touched[idx] = 1;
            }
    }
    const double sign = spec.bright_cells ? 1.0 : -1.0;
    for (std::size_t c = 0; c < spec.channels; ++c)
        for (std::size_t idx = 0; idx < signal.size(); ++idx) {
            if (!touched[idx]) continue;
            float& px = out.pixels.pixels[c * signal.size() + idx];
            px = quantize8(static_cast<float>(std::clamp(static_cast<double>(px) + sign * signal[idx], 0.0, 1.0)));
        }
    return out;
}

inline std::vector<AnnotatedImage> generate_domain(const DomainSpec& spec, std::size_t n_images, std::uint64_t seed) {
    spec.validate();
    std::vector<AnnotatedImage> out;
    out.reserve(n_images);
    for (std::size_t i = 0; i < n_images; ++i) out.push_back(generate_image(spec, i, seed));
    return out;
}

/// Training item with a rendered density map. The style image is the
/// stored ground truth when present.
inline Sample make_sample(const AnnotatedImage& img, double sigma = kDefaultSigma) {
    Sample s;
    s.image = img.pixels;
    s.density = render_density_map(img.annotations, sigma);
    s.style = img.style;
    s.count = img.count();
    return s;
}

inline std::vector<Sample> make_samples(const std::vector<AnnotatedImage>& images, double sigma = kDefaultSigma) {
    std::vector<Sample> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(make_sample(img, sigma));
    return out;
}

inline std::vector<Image> pixels_of(const std::vector<AnnotatedImage>& images) {
    std::vector<Image> out;
    out.reserve(images.size());
    for (const auto& img : images) out.push_back(img.pixels);
    return out;
}

// --- on-disk datasets ---------------------------------------------------------

/// Writes images/, annotations/, styles/ (when every image has one) and a
/// manifest.tsv with one `id count seed` row per image.
inline void save_annotated_dataset(const std::filesystem::path& dir, const std::vector<AnnotatedImage>& images,
                                   std::uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "annotations");
    const bool styles = !images.empty() && std::all_of(images.begin(), images.end(), [](const auto& i) { return i.style.has_value(); });
    if (styles) fs::create_directories(dir / "styles");
    std::ofstream manifest(dir / "manifest.tsv", std::ios::binary);
    manifest << "id\tcount\tseed\n";
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto stem = sample_stem(i);
        write_png(dir / "images" / (stem + ".png"), images[i].pixels);
        write_annotations_csv(dir / "annotations" / (stem + ".csv"), images[i].annotations.points);
        if (styles) write_png(dir / "styles" / (stem + ".png"), *images[i].style);
        manifest << stem << '\t' << images[i].count() << '\t' << derive_seed(seed, i) << '\n';
    }
    if (!manifest) throw FormatError("cannot write " + (dir / "manifest.tsv").string());
}

/// Pairs images/*.png with annotations/<stem>.csv (and styles/<stem>.png
/// when present), sorted by stem. Missing or malformed annotations are errors.
inline std::vector<AnnotatedImage> load_annotated_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw FormatError("dataset directory " + dir.string() + " does not exist");
    std::vector<AnnotatedImage> out;
    const auto image_dir = dir / "images";
    if (!fs::is_directory(image_dir)) return out;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(image_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        const auto stem = file.stem().string();
        const auto csv = dir / "annotations" / (stem + ".csv");
        if (!fs::exists(csv)) throw FormatError("missing annotation file for image '" + stem + "' (" + csv.string() + ")");
        AnnotatedImage img;
        img.id = stem;
        img.pixels = read_png(file);
        img.annotations.points = read_annotations_csv(csv);
        img.annotations.width = img.pixels.width;
        img.annotations.height = img.pixels.height;
        try {
            validate_annotations(img.annotations);
        } catch (const AnnotationError& e) {
            throw FormatError(csv.string() + ": " + e.what());
        }
        const auto style = dir / "styles" / (stem + ".png");
        if (fs::exists(style)) {
            img.style = read_png(style);
            if (!img.style->same_extent(img.pixels)) throw FormatError(style.string() + ": extent differs from its image");
        }
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace dtlc
