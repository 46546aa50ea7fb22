#pragma once

// Few-shot target-domain image synthesis: cut cell patches out of the
// annotated images, inpaint the holes into style images, train a small
// fully connected GAN on the patches, then paste real and generated patches
// into augmented style images at random locations with exact ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dtlc/density.hpp"
#include "dtlc/domain.hpp"
#include "dtlc/image.hpp"
#include "dtlc/model.hpp"
#include "dtlc/ops.hpp"
#include "dtlc/optim.hpp"
#include "dtlc/parallel.hpp"
#include "dtlc/rng.hpp"
#include "dtlc/training.hpp"

namespace dtlc {

inline constexpr std::size_t kPatchSize = 32;
inline constexpr std::size_t kPatchHalf = kPatchSize / 2;

/// A cell patch is a kPatchSize x kPatchSize image.
using CellPatch = Image;

/// Binary H x W mask; nonzero marks a hole.
struct Mask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;

    Mask() = default;
    Mask(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    std::size_t area() const {
        return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](auto v) { return v != 0; }));
    }

    bool operator==(const Mask&) const = default;
};

// --- step 1: patches ----------------------------------------------------------

/// Mirror index into [0, n) without repeating the edge sample.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

/// Pixel whose window is centred on `p`; the window spans
/// [c - 16, c + 16) on each axis.
inline std::ptrdiff_t patch_center(double coordinate) { return static_cast<std::ptrdiff_t>(std::lround(coordinate)); }

struct PatchSet {
    std::vector<CellPatch> patches;
    Mask hole_mask;
};

/// One patch per annotation. Window parts outside the image are filled by
/// reflection; the hole mask is the union of the windows clipped to the image.
inline PatchSet extract_patches(const AnnotatedImage& img) {
    DotAnnotations ann = img.annotations;
    ann.width = img.pixels.width;
    ann.height = img.pixels.height;
    validate_annotations(ann);
    const Image& src = img.pixels;
    PatchSet out{{}, Mask(src.height, src.width)};
    for (const auto& p : ann.points) {
        const auto top = patch_center(p.y) - static_cast<std::ptrdiff_t>(kPatchHalf);
        const auto left = patch_center(p.x) - static_cast<std::ptrdiff_t>(kPatchHalf);
        CellPatch patch(kPatchSize, kPatchSize, src.channels);
        for (std::size_t py = 0; py < kPatchSize; ++py)
            for (std::size_t px = 0; px < kPatchSize; ++px) {
                const auto y = top + static_cast<std::ptrdiff_t>(py);
                const auto x = left + static_cast<std::ptrdiff_t>(px);
                const auto ry = reflect_index(y, src.height);
                const auto rx = reflect_index(x, src.width);
                for (std::size_t c = 0; c < src.channels; ++c) patch.at(c, py, px) = src.at(c, ry, rx);
                if (y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(src.height) &&
                    x < static_cast<std::ptrdiff_t>(src.width))
                    out.hole_mask.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
            }
        out.patches.push_back(std::move(patch));
    }
    return out;
}

// --- step 2: inpainting -------------------------------------------------------

struct InpaintOptions {
    std::size_t max_iterations = 5000;
    double tolerance = 1e-4;
};

/// Fills masked pixels by 8-neighbour diffusion. Holes are first seeded
/// from the outside in (each new ring takes the mean of its already known
/// neighbours), then Gauss-Seidel sweeps replace every masked pixel by the
/// mean of its neighbours until the largest change drops below the
/// tolerance. Unmasked pixels are copied unchanged.
inline Image inpaint(const Image& img, const Mask& mask, const InpaintOptions& options = {}) {
    if (mask.height != img.height || mask.width != img.width)
        throw DimensionError("inpaint", "extent", "mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                                                      " does not match image " + std::to_string(img.height) + "x" +
                                                      std::to_string(img.width));
    Image out = img;
    const std::size_t holes = mask.area();
    if (holes == 0) return out;
    if (holes == img.area()) throw std::invalid_argument("inpaint: every pixel is masked, nothing to diffuse from");

    const std::size_t H = img.height, W = img.width;
    std::vector<std::size_t> hole_pixels;
    for (std::size_t i = 0; i < H * W; ++i)
        if (mask.values[i]) hole_pixels.push_back(i);

    const auto for_neighbours = [&](std::size_t idx, auto&& fn) {
        const std::size_t y = idx / W, x = idx % W;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dy == 0 && dx == 0) continue;
                const auto ny = static_cast<std::ptrdiff_t>(y) + dy;
                const auto nx = static_cast<std::ptrdiff_t>(x) + dx;
                if (ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(H) || nx >= static_cast<std::ptrdiff_t>(W)) continue;
                fn(static_cast<std::size_t>(ny) * W + static_cast<std::size_t>(nx));
            }
    };

    for (std::size_t c = 0; c < img.channels; ++c) {
        std::vector<double> v(H * W);
        for (std::size_t i = 0; i < H * W; ++i) v[i] = img.pixels[c * H * W + i];
        std::vector<std::uint8_t> known(H * W);
        for (std::size_t i = 0; i < H * W; ++i) known[i] = mask.values[i] ? 0 : 1;

        std::vector<std::size_t> pending = hole_pixels;
        std::vector<std::pair<std::size_t, double>> ring;
        while (!pending.empty()) {
            ring.clear();
            std::vector<std::size_t> rest;
            for (auto idx : pending) {
                double acc = 0.0;
                int n = 0;
                for_neighbours(idx, [&](std::size_t j) {
                    if (known[j]) {
                        acc += v[j];
                        ++n;
                    }
                });
                if (n > 0)
                    ring.emplace_back(idx, acc / n);
                else
                    rest.push_back(idx);
            }
            for (const auto& [idx, value] : ring) {
                v[idx] = value;
                known[idx] = 1;
            }
            pending.swap(rest);
        }

        for (std::size_t it = 0; it < options.max_iterations; ++it) {
            double max_change = 0.0;
            for (auto idx : hole_pixels) {
                double acc = 0.0;
                int n = 0;
                for_neighbours(idx, [&](std::size_t j) {
                    acc += v[j];
                    ++n;
                });
                const double next = acc / n;
                max_change = std::max(max_change, std::abs(next - v[idx]));
                v[idx] = next;
            }
            if (max_change < options.tolerance) break;
        }
        for (auto idx : hole_pixels) out.pixels[c * H * W + idx] = static_cast<float>(v[idx]);
    }
    return out;
}

// --- augmentation -------------------------------------------------------------

struct AugmentSpec {
    unsigned quarter_turns = 0;  // counter-clockwise
    bool flip_horizontal = false;
    bool flip_vertical = false;
    double scale = 1.0;

    bool operator==(const AugmentSpec&) const = default;
};

struct AugmentRange {
    double scale_min = 0.8;
    double scale_max = 1.2;
    bool rotate = true;
    bool flip = true;
};

inline AugmentSpec draw_augment_spec(const AugmentRange& range, Rng& rng, bool square) {
    AugmentSpec s;
    if (range.rotate) s.quarter_turns = static_cast<unsigned>(rng.uniform_int(0, 3));
    if (!square) s.quarter_turns &= 2u;
    if (range.flip) {
        s.flip_horizontal = rng.uniform() < 0.5;
        s.flip_vertical = rng.uniform() < 0.5;
    }
    s.scale = range.scale_min < range.scale_max ? rng.uniform(range.scale_min, range.scale_max) : range.scale_min;
    return s;
}

namespace detail {

/// Zoom about the image centre by `factor`, bilinear, reflected borders.
inline Image rescale(const Image& img, double factor) {
    Image out(img.height, img.width, img.channels);
    const double cy = 0.5 * static_cast<double>(img.height - 1);
    const double cx = 0.5 * static_cast<double>(img.width - 1);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const double sy = cy + (static_cast<double>(y) - cy) / factor;
            const double sx = cx + (static_cast<double>(x) - cx) / factor;
            const double fy = std::floor(sy), fx = std::floor(sx);
            const double ty = sy - fy, tx = sx - fx;
            const auto y0 = reflect_index(static_cast<std::ptrdiff_t>(fy), img.height);
            const auto y1 = reflect_index(static_cast<std::ptrdiff_t>(fy) + 1, img.height);
            const auto x0 = reflect_index(static_cast<std::ptrdiff_t>(fx), img.width);
            const auto x1 = reflect_index(static_cast<std::ptrdiff_t>(fx) + 1, img.width);
            for (std::size_t c = 0; c < img.channels; ++c) {
                const double v = (1 - ty) * ((1 - tx) * img.at(c, y0, x0) + tx * img.at(c, y0, x1)) +
                                 ty * ((1 - tx) * img.at(c, y1, x0) + tx * img.at(c, y1, x1));
                out.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return out;
}

}  // namespace detail

/// Scale, then flips, then rotation. Extent is preserved; odd quarter
/// turns need a square image.
inline Image augment(const Image& img, const AugmentSpec& spec, const AugmentRange& range = {}) {
    if (spec.scale < range.scale_min || spec.scale > range.scale_max)
        throw std::invalid_argument("augment: scale " + std::to_string(spec.scale) + " outside [" +
                                    std::to_string(range.scale_min) + ", " + std::to_string(range.scale_max) + "]");
    const unsigned turns = spec.quarter_turns % 4;
    if (turns % 2 == 1 && img.height != img.width)
        throw std::invalid_argument("augment: quarter-turn rotation needs a square image");
    Image cur = spec.scale == 1.0 ? img : detail::rescale(img, spec.scale);
    const std::size_t H = cur.height, W = cur.width;
    if (spec.flip_horizontal || spec.flip_vertical) {
        Image next(H, W, cur.channels);
        for (std::size_t c = 0; c < cur.channels; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    next.at(c, y, x) = cur.at(c, spec.flip_vertical ? H - 1 - y : y, spec.flip_horizontal ? W - 1 - x : x);
        cur = std::move(next);
    }
    for (unsigned t = 0; t < turns; ++t) {
        // Counter-clockwise: out(y, x) = in(x, W - 1 - y).
        Image next(cur.width, cur.height, cur.channels);
        for (std::size_t c = 0; c < cur.channels; ++c)
            for (std::size_t y = 0; y < next.height; ++y)
                for (std::size_t x = 0; x < next.width; ++x) next.at(c, y, x) = cur.at(c, x, cur.width - 1 - y);
        cur = std::move(next);
    }
    return cur;
}

inline Image augment(const Image& img, const AugmentRange& range, std::uint64_t seed) {
    Rng rng(seed);
    return augment(img, draw_augment_spec(range, rng, img.height == img.width), range);
}

// --- step 3: patch GAN --------------------------------------------------------

struct PatchGanConfig {
    std::size_t latent_dim = 32;
    std::size_t steps = 2000;
    std::size_t batch_size = 16;
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    std::uint64_t seed = 0;
};

struct GanLogEntry {
    double d_loss = 0.0;
    double g_loss = 0.0;
    double d_real = 0.0;  // mean discriminator probability on real patches
    double d_fake = 0.0;  // ... and on generated ones

    bool operator==(const GanLogEntry&) const = default;
};

/// Four dense layers each way. Generator: latent -> 64 -> 128 -> 256 ->
/// 32*32*C with a sigmoid; discriminator: 32*32*C -> 128 -> 64 -> 32 -> 1
/// logit. Leaky ReLU between layers.
class PatchGenerator {
public:
    static constexpr std::size_t kGeneratorWidths[3] = {64, 128, 256};
    static constexpr std::size_t kDiscriminatorWidths[3] = {128, 64, 32};

    PatchGenerator(std::size_t channels, std::size_t latent_dim, std::uint64_t seed)
        : channels_(channels), latent_dim_(latent_dim) {
        if (channels < 1 || latent_dim < 1) throw std::invalid_argument("PatchGenerator: channels and latent_dim must be >= 1");
        generator_.name = "generator";
        discriminator_.name = "discriminator";
        std::size_t in = latent_dim;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t out = i < 3 ? kGeneratorWidths[i] : patch_numel();
            generator_.add("dense" + std::to_string(i) + ".weight", {out, in});
            generator_.add("dense" + std::to_string(i) + ".bias", {out});
            in = out;
        }
        in = patch_numel();
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t out = i < 3 ? kDiscriminatorWidths[i] : 1;
            discriminator_.add("dense" + std::to_string(i) + ".weight", {out, in});
            discriminator_.add("dense" + std::to_string(i) + ".bias", {out});
            in = out;
        }
        initialize_group(generator_, seed);
        initialize_group(discriminator_, seed);
    }

    std::size_t channels() const { return channels_; }
    std::size_t latent_dim() const { return latent_dim_; }
    std::size_t patch_numel() const { return kPatchSize * kPatchSize * channels_; }

    ParamGroup<float>& generator_params() { return generator_; }
    ParamGroup<float>& discriminator_params() { return discriminator_; }
    const ParamGroup<float>& generator_params() const { return generator_; }
    const ParamGroup<float>& discriminator_params() const { return discriminator_; }

    /// [B, latent] -> [B, 32*32*C] in (0, 1).
    Tensor<float> generate(const Tensor<float>& z) const { return run(generator_, z, Activation::sigmoid); }

    /// [B, 32*32*C] -> [B, 1] logits.
    Tensor<float> discriminate(const Tensor<float>& x) const { return run(discriminator_, x, std::nullopt); }

    Tensor<float> latent(std::size_t n, Rng& rng) const {
        std::vector<float> z(n * latent_dim_);
        for (auto& v : z) v = static_cast<float>(rng.normal());
        return Tensor<float>({n, latent_dim_}, std::move(z));
    }

    std::vector<GanLogEntry> log;

private:
    static Tensor<float> run(const ParamGroup<float>& g, Tensor<float> x, std::optional<Activation> head) {
        for (std::size_t i = 0; i < 4; ++i) {
            x = dense(x, g.at(2 * i), g.at(2 * i + 1));
            if (i < 3)
                x = activation(x, Activation::leaky_relu);
            else if (head)
                x = activation(x, *head);
        }
        return x;
    }

    std::size_t channels_;
    std::size_t latent_dim_;
    ParamGroup<float> generator_;
    ParamGroup<float> discriminator_;
};

namespace detail {

inline double mean_probability(const Tensor<float>& logits) {
    double acc = 0.0;
    for (float l : logits.data()) acc += static_cast<double>(sigmoid_scalar(l));
    return acc / static_cast<double>(logits.numel());
}

/// Pads a patch set to at least `minimum` items with flipped/rotated copies.
inline std::vector<CellPatch> pad_patch_set(std::span<const CellPatch> patches, std::size_t minimum) {
    std::vector<CellPatch> out(patches.begin(), patches.end());
    for (unsigned variant = 1; out.size() < minimum; ++variant) {
        const AugmentSpec spec{variant % 4, (variant / 4) % 2 == 1, false, 1.0};
        for (std::size_t i = 0; i < patches.size() && out.size() < minimum; ++i) out.push_back(augment(patches[i], spec));
    }
    return out;
}

}  // namespace detail

/// Non-saturating GAN training with alternating discriminator and
/// generator Adam steps. Fewer than 8 patches are padded with flipped and
/// rotated copies.
inline PatchGenerator train_patch_gan(std::span<const CellPatch> patches, const PatchGanConfig& cfg) {
    if (patches.empty()) throw std::invalid_argument("train_patch_gan: empty patch set");
    if (cfg.batch_size == 0) throw std::invalid_argument("train_patch_gan: batch_size must be >= 1");
    const std::size_t channels = patches.front().channels;
    for (const auto& p : patches)
        if (p.height != kPatchSize || p.width != kPatchSize || p.channels != channels)
            throw DimensionError("train_patch_gan", "extent", "patches must all be 32x32 with one channel count");
    const auto pool = detail::pad_patch_set(patches, 8);

    PatchGenerator gan(channels, cfg.latent_dim, derive_seed(cfg.seed, 0));
    Rng rng(derive_seed(cfg.seed, 1));
    const auto make_adam = [&] {
        AdamState a;
        a.learning_rate = cfg.learning_rate;
        a.beta1 = cfg.beta1;
        a.beta2 = cfg.beta2;
        return a;
    };
    AdamState adam_g = make_adam(), adam_d = make_adam();
    std::vector<Tensor<float>> g_params, d_params;
    for (auto& p : gan.generator_params().params) g_params.push_back(p.tensor);
    for (auto& p : gan.discriminator_params().params) d_params.push_back(p.tensor);

    const std::size_t B = cfg.batch_size, P = gan.patch_numel();
    gan.log.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<float> real_values;
        real_values.reserve(B * P);
        for (std::size_t b = 0; b < B; ++b) {
            const auto& patch = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
            real_values.insert(real_values.end(), patch.pixels.begin(), patch.pixels.end());
        }
        const Tensor<float> real({B, P}, std::move(real_values));

        GanLogEntry entry;
        {
            const auto fake = gan.generate(gan.latent(B, rng)).detach();
            const auto real_logits = gan.discriminate(real);
            const auto fake_logits = gan.discriminate(fake);
            auto loss = add(bce_with_logits(real_logits, 1.0f), bce_with_logits(fake_logits, 0.0f));
            backward(loss);
            adam_step(std::span<Tensor<float>>(d_params), adam_d);
            entry.d_loss = loss.item();
            entry.d_real = detail::mean_probability(real_logits);
            entry.d_fake = detail::mean_probability(fake_logits);
        }
        {
            auto loss = bce_with_logits(gan.discriminate(gan.generate(gan.latent(B, rng))), 1.0f);
            backward(loss);
            adam_step(std::span<Tensor<float>>(g_params), adam_g);
            zero_grads(std::span<Tensor<float>>(d_params));
            entry.g_loss = loss.item();
        }
        gan.log.push_back(entry);
    }
    return gan;
}

inline std::vector<CellPatch> sample_patches(const PatchGenerator& gan, std::size_t n, std::uint64_t seed) {
    std::vector<CellPatch> out;
    if (n == 0) return out;
    Rng rng(seed);
    const auto values = gan.generate(gan.latent(n, rng));
    const std::size_t P = gan.patch_numel();
    for (std::size_t i = 0; i < n; ++i) {
        CellPatch patch(kPatchSize, kPatchSize, gan.channels());
        for (std::size_t k = 0; k < P; ++k) patch.pixels[k] = std::clamp(values.data()[i * P + k], 0.0f, 1.0f);
        out.push_back(std::move(patch));
    }
    return out;
}

// --- step 4: compositing ------------------------------------------------------

struct ComposeOptions {
    std::size_t count_min = 0;
    std::size_t count_max = 0;
    double min_distance = 12.0;
    /// Minimum distance of cell centres from the border. Below 16 px the
    /// pasted patches are clipped at the image edge.
    double margin = static_cast<double>(kPatchHalf);
    bool feather = true;
    bool augment_patches = true;
    AugmentRange patch_augment{};
    double sigma = kDefaultSigma;
};

struct SynthesizedSample {
    Image image;
    DensityMap density;
    Image style;
    DotAnnotations annotations;
    std::uint64_t seed = 0;
};

inline constexpr double kFeatherInner = 10.0;
inline constexpr double kFeatherOuter = 16.0;

/// Paste weights over a patch: 1 up to radius 10 from the patch centre,
/// raised cosine down to 0 at radius 16. Without feathering the whole
/// square is pasted.
inline std::vector<float> patch_alpha(bool feather) {
    std::vector<float> alpha(kPatchSize * kPatchSize, 1.0f);
    if (!feather) return alpha;
    for (std::size_t y = 0; y < kPatchSize; ++y)
        for (std::size_t x = 0; x < kPatchSize; ++x) {
            const double r = std::hypot(static_cast<double>(y) - kPatchHalf, static_cast<double>(x) - kPatchHalf);
            double a = 0.0;
            if (r <= kFeatherInner)
                a = 1.0;
            else if (r < kFeatherOuter)
                a = 0.5 * (1.0 + std::cos(std::numbers::pi * (r - kFeatherInner) / (kFeatherOuter - kFeatherInner)));
            alpha[y * kPatchSize + x] = static_cast<float>(a);
        }
    return alpha;
}

/// Draws k in [count_min, count_max], places k centres by rejection
/// sampling and pastes a randomly chosen (and optionally augmented) patch
/// at each. Only pixels under a nonzero paste weight are rewritten.
inline SynthesizedSample compose_image(const Image& style, std::span<const CellPatch> pool, const ComposeOptions& opt,
                                       std::uint64_t seed) {
    if (opt.count_max < opt.count_min) throw std::invalid_argument("compose_image: count_max < count_min");
    if (!(opt.margin >= 0.0)) throw std::invalid_argument("compose_image: margin must be >= 0");
    if (static_cast<double>(style.width) <= 2 * opt.margin || static_cast<double>(style.height) <= 2 * opt.margin)
        throw std::invalid_argument("compose_image: style image too small for the placement margin");
    Rng rng(seed);
    const auto k = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(opt.count_min), static_cast<std::int64_t>(opt.count_max)));
    if (k > 0 && pool.empty()) throw std::invalid_argument("compose_image: empty patch pool");

    SynthesizedSample out;
    out.seed = seed;
    out.style = style;
    out.image = style;
    out.annotations.width = style.width;
    out.annotations.height = style.height;

    const double x_hi = static_cast<double>(style.width) - opt.margin;
    const double y_hi = static_cast<double>(style.height) - opt.margin;
    const double min_d2 = opt.min_distance * opt.min_distance;
    std::size_t attempts = 0;
    while (out.annotations.points.size() < k) {
        if (++attempts > 1000 * k)
            throw std::runtime_error("compose_image: could not place " + std::to_string(k) + " cells at minimum distance " +
                                     std::to_string(opt.min_distance) + " px; lower the cell count or min_distance");
        const Point p{rng.uniform(opt.margin, x_hi), rng.uniform(opt.margin, y_hi)};
        bool ok = true;
        for (const auto& q : out.annotations.points)
            if ((p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y) < min_d2) {
                ok = false;
                break;
            }
        if (ok) out.annotations.points.push_back(p);
    }

    const auto alpha = patch_alpha(opt.feather);
    const std::size_t plane = style.area();
    std::vector<std::uint8_t> touched(plane, 0);
    for (const auto& p : out.annotations.points) {
        const auto& chosen = pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
        if (chosen.channels != style.channels || chosen.height != kPatchSize || chosen.width != kPatchSize)
            throw DimensionError("compose_image", "channels", "patch does not match the style image channels");
        const CellPatch patch =
            opt.augment_patches ? augment(chosen, draw_augment_spec(opt.patch_augment, rng, true), opt.patch_augment) : chosen;
        const auto top = patch_center(p.y) - static_cast<std::ptrdiff_t>(kPatchHalf);
        const auto left = patch_center(p.x) - static_cast<std::ptrdiff_t>(kPatchHalf);
        for (std::size_t py = 0; py < kPatchSize; ++py)
            for (std::size_t px = 0; px < kPatchSize; ++px) {
                const float a = alpha[py * kPatchSize + px];
                const auto y = top + static_cast<std::ptrdiff_t>(py), x = left + static_cast<std::ptrdiff_t>(px);
                if (a <= 0.0f || y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(style.height) ||
                    x >= static_cast<std::ptrdiff_t>(style.width))
                    continue;
                const std::size_t idx = static_cast<std::size_t>(y) * style.width + static_cast<std::size_t>(x);
                touched[idx] = 1;
                for (std::size_t c = 0; c < style.channels; ++c) {
                    float& dst = out.image.pixels[c * plane + idx];
                    dst = (1.0f - a) * dst + a * patch.at(c, py, px);
                }
            }
    }
    for (std::size_t c = 0; c < style.channels; ++c)
        for (std::size_t idx = 0; idx < plane; ++idx)
            if (touched[idx]) out.image.pixels[c * plane + idx] = quantize8(out.image.pixels[c * plane + idx]);

    out.density = render_density_map(out.annotations, opt.sigma);
    return out;
}

// --- end to end -----------------------------------------------------------------

struct SynthesisConfig {
    std::size_t num_images = 200;
    /// Inclusive cell-count range; unset means the range of the annotated inputs.
    std::optional<std::pair<std::size_t, std::size_t>> count_range;
    double min_distance = 12.0;
    double margin = static_cast<double>(kPatchHalf);
    bool feather = true;
    bool augment_patches = true;
    std::size_t gan_patches = 256;
    PatchGanConfig gan{};
    AugmentRange augment{};
    InpaintOptions inpaint{};
    double sigma = kDefaultSigma;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct SynthesisResult {
    std::vector<SynthesizedSample> samples;
    std::vector<Image> real_styles;  // inpainted style image of each input
    std::vector<CellPatch> real_patches;
    std::vector<CellPatch> generated_patches;
    std::vector<GanLogEntry> gan_log;
    std::pair<std::size_t, std::size_t> count_range{0, 0};
};

inline SynthesisResult synthesize_dataset(std::span<const AnnotatedImage> few, const SynthesisConfig& cfg) {
    if (few.empty()) throw std::invalid_argument("synthesize_dataset: no annotated input images");
    SynthesisResult result;
    std::size_t lo = few.front().count(), hi = lo;
    for (const auto& img : few) {
        if (img.pixels.channels != few.front().pixels.channels)
            throw DimensionError("synthesize_dataset", "channels", "annotated inputs must share one channel count");
        lo = std::min(lo, img.count());
        hi = std::max(hi, img.count());
        auto patches = extract_patches(img);
        result.real_styles.push_back(inpaint(img.pixels, patches.hole_mask, cfg.inpaint));
        for (auto& p : patches.patches) result.real_patches.push_back(std::move(p));
    }
    result.count_range = cfg.count_range.value_or(std::make_pair(lo, hi));
    if (result.count_range.second < result.count_range.first)
        throw std::invalid_argument("synthesize_dataset: count range upper bound below lower bound");

    std::vector<CellPatch> pool = result.real_patches;
    if (!result.real_patches.empty()) {
        PatchGanConfig gan_cfg = cfg.gan;
        gan_cfg.seed = derive_seed(cfg.seed, 1);
        const auto gan = train_patch_gan(result.real_patches, gan_cfg);
        result.gan_log = gan.log;
        result.generated_patches = sample_patches(gan, cfg.gan_patches, derive_seed(cfg.seed, 2));
        pool.insert(pool.end(), result.generated_patches.begin(), result.generated_patches.end());
    }

    ComposeOptions opt;
    opt.count_min = result.count_range.first;
    opt.count_max = result.count_range.second;
    opt.min_distance = cfg.min_distance;
    opt.margin = cfg.margin;
    opt.feather = cfg.feather;
    opt.augment_patches = cfg.augment_patches;
    opt.patch_augment = cfg.augment;
    opt.sigma = cfg.sigma;

    result.samples.resize(cfg.num_images);
    const std::uint64_t sample_stream = derive_seed(cfg.seed, 3);
    parallel_for(cfg.num_images, cfg.workers, [&](std::size_t i) {
        const std::uint64_t s = derive_seed(sample_stream, i);
        Rng rng(s);
        const auto& base = result.real_styles[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(result.real_styles.size()) - 1))];
        Image style = augment(base, draw_augment_spec(cfg.augment, rng, base.height == base.width), cfg.augment);
        quantize8(style);
        result.samples[i] = compose_image(style, pool, opt, rng.next_u64());
        result.samples[i].seed = s;
    });
    return result;
}

/// Training items for synthesized images.
inline std::vector<Sample> synthesized_samples(std::span<const SynthesizedSample> synth) {
    std::vector<Sample> out;
    out.reserve(synth.size());
    for (const auto& s : synth) out.push_back({s.image, s.density, s.style, s.annotations.points.size()});
    return out;
}

/// Training items for annotated real images whose style ground truth is
/// the inpainted image.
inline std::vector<Sample> styled_samples(std::span<const AnnotatedImage> images, std::span<const Image> styles,
                                          double sigma = kDefaultSigma) {
    if (images.size() != styles.size()) throw std::invalid_argument("styled_samples: one style per image required");
    std::vector<Sample> out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Sample s = make_sample(images[i], sigma);
        s.style = styles[i];
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace dtlc
