#pragma once

// Mini-batch training and inference for the counter network.

#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dtlc/density.hpp"
#include "dtlc/image.hpp"
#include "dtlc/model.hpp"
#include "dtlc/optim.hpp"
#include "dtlc/rng.hpp"

namespace dtlc {

/// One training item: input image, ground-truth density map, and the
/// ground-truth style image when the domain-specific decoder is trained.
struct Sample {
    Image image;
    DensityMap density;
    std::optional<Image> style;
    std::size_t count = 0;
};

struct EpochMetrics {
    double total = 0.0;
    double mse = 0.0;
    double perceptual = 0.0;
    double mae = 0.0;
    std::size_t steps = 0;

    bool operator==(const EpochMetrics&) const = default;
};

namespace detail {

// code bit 0 mirrors columns, bit 1 mirrors rows, bit 2 transposes.
template <typename V>
V dihedral_plane(const V& in, std::size_t H, std::size_t W, std::size_t C, unsigned code) {
    V out(in.size());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                std::size_t sy = y, sx = x;
                if (code & 4u) std::swap(sy, sx);
                if (code & 1u) sx = W - 1 - sx;
                if (code & 2u) sy = H - 1 - sy;
                out[(c * H + y) * W + x] = in[(c * H + sy) * W + sx];
            }
    return out;
}

}  // namespace detail

/// Applies one of the 8 symmetries of the square (code 0..7, 0 is the
/// identity) to image, density map and style alike. Pixel values are
/// permuted, never resampled, so counts are preserved exactly.
inline Sample dihedral_transform(const Sample& s, unsigned code) {
    if (code > 7) throw std::invalid_argument("dihedral_transform: code must be in 0..7");
    if ((code & 4u) && s.image.height != s.image.width)
        throw std::invalid_argument("dihedral_transform: transposition needs a square image");
    if (s.density.height != s.image.height || s.density.width != s.image.width)
        throw DimensionError("dihedral_transform", "extent", "density map and image differ in extent");
    Sample out = s;
    const auto H = s.image.height, W = s.image.width;
    out.image.pixels = detail::dihedral_plane(s.image.pixels, H, W, s.image.channels, code);
    out.density.values = detail::dihedral_plane(s.density.values, H, W, 1, code);
    if (s.style) {
        if (!s.style->same_extent(s.image)) throw DimensionError("dihedral_transform", "extent", "style and image differ in extent");
        out.style->pixels = detail::dihedral_plane(s.style->pixels, H, W, s.style->channels, code);
    }
    return out;
}

/// Every sample under an independently drawn symmetry. Non-square samples
/// only get mirrors.
inline std::vector<Sample> random_dihedral(std::span<const Sample> data, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(data.size());
    for (const auto& s : data) {
        auto code = static_cast<unsigned>(rng.uniform_int(0, 7));
        if (s.image.height != s.image.width) code &= 3u;
        out.push_back(dihedral_transform(s, code));
    }
    return out;
}

namespace detail {

template <typename T>
Tensor<T> stack_images(std::span<const Sample> data, std::span<const std::size_t> idx, bool use_style) {
    const Image& first = use_style ? *data[idx[0]].style : data[idx[0]].image;
    std::vector<T> values;
    values.reserve(idx.size() * first.pixels.size());
    for (auto i : idx) {
        const Image& img = use_style ? *data[i].style : data[i].image;
        if (!img.same_extent(first)) throw DimensionError("stack_images", "extent", "images in a batch must share one extent");
        values.insert(values.end(), img.pixels.begin(), img.pixels.end());
    }
    return Tensor<T>({idx.size(), first.channels, first.height, first.width}, std::move(values));
}

template <typename T>
Tensor<T> stack_densities(std::span<const Sample> data, std::span<const std::size_t> idx) {
    const auto& first = data[idx[0]].density;
    std::vector<T> values;
    values.reserve(idx.size() * first.values.size());
    for (auto i : idx) {
        const auto& d = data[i].density;
        if (d.height != first.height || d.width != first.width)
            throw DimensionError("stack_densities", "extent", "density maps in a batch must share one extent");
        for (double v : d.values) values.push_back(static_cast<T>(v));
    }
    return Tensor<T>({idx.size(), 1, first.height, first.width}, std::move(values));
}

template <typename T>
std::vector<double> per_image_sums(const Tensor<T>& density) {
    const std::size_t batch = density.dim(0);
    const std::size_t per = density.numel() / batch;
    std::vector<double> out(batch, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < per; ++i) out[b] += static_cast<double>(density.data()[b * per + i]);
    return out;
}

}  // namespace detail

/// One pass over `data` in an order shuffled from `shuffle_seed`. The
/// reported MAE uses the counts predicted during the pass (before each
/// batch's update). `extractor` may be null only for models without a
/// style decoder.
template <typename T>
EpochMetrics train_epoch(CounterModel<T>& model, std::span<const Sample> data, AdamState& adam,
                         std::size_t batch_size, std::uint64_t shuffle_seed,
                         const PerceptualExtractor<T>* extractor) {
    if (data.empty()) throw std::invalid_argument("train_epoch: empty dataset");
    if (batch_size == 0) throw std::invalid_argument("train_epoch: batch_size must be >= 1");
    const bool styled = model.config().disentangle;
    if (styled && (!extractor || extractor->empty()))
        throw std::invalid_argument("train_epoch: a perceptual extractor is required when the style decoder is enabled");
    if (styled)
        for (const auto& s : data)
            if (!s.style) throw std::invalid_argument("train_epoch: sample without a ground-truth style image");

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(shuffle_seed);
    rng.shuffle(std::span<std::size_t>(order));

    auto params = model.parameters();
    EpochMetrics metrics;
    double abs_err = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, order.size() - start);
        std::span<const std::size_t> idx(order.data() + start, n);
        const auto input = detail::stack_images<T>(data, idx, false);
        const auto target = detail::stack_densities<T>(data, idx);
        std::optional<Tensor<T>> style_target;
        if (styled) style_target = detail::stack_images<T>(data, idx, true);

        auto out = model.forward(input);
        auto loss = total_loss(out.density, target, out.style, style_target ? &*style_target : nullptr, extractor,
                               model.config().density_scale);
        backward(loss.total);
        adam_step(std::span<Tensor<T>>(params), adam);

        const auto counts = detail::per_image_sums(out.density);
        for (std::size_t k = 0; k < n; ++k)
            abs_err += std::abs(counts[k] - static_cast<double>(data[idx[k]].count));
        metrics.total += loss.report.total;
        metrics.mse += loss.report.mse;
        metrics.perceptual += loss.report.perceptual;
        ++metrics.steps;
    }
    metrics.total /= static_cast<double>(metrics.steps);
    metrics.mse /= static_cast<double>(metrics.steps);
    metrics.perceptual /= static_cast<double>(metrics.steps);
    metrics.mae = abs_err / static_cast<double>(data.size());
    return metrics;
}

/// Predicted count (density integral) for each image, in input order.
template <typename T>
std::vector<double> predict_counts(const CounterModel<T>& model, std::span<const Image> images,
                                   std::size_t batch_size = 4) {
    std::vector<double> counts;
    counts.reserve(images.size());
    if (batch_size == 0) throw std::invalid_argument("predict_counts: batch_size must be >= 1");
    for (std::size_t start = 0; start < images.size();) {
        const Image& first = images[start];
        std::size_t n = 1;
        while (n < batch_size && start + n < images.size() && images[start + n].same_extent(first)) ++n;
        std::vector<T> values;
        values.reserve(n * first.pixels.size());
        for (std::size_t k = 0; k < n; ++k)
            values.insert(values.end(), images[start + k].pixels.begin(), images[start + k].pixels.end());
        const Tensor<T> input({n, first.channels, first.height, first.width}, std::move(values));
        const auto out = model.forward(input);
        for (double c : detail::per_image_sums(out.density)) counts.push_back(c);
        start += n;
    }
    return counts;
}

/// Density-map prediction for a single image.
template <typename T>
DensityMap predict_density(const CounterModel<T>& model, const Image& image) {
    const Tensor<T> input({1, image.channels, image.height, image.width},
                          std::vector<T>(image.pixels.begin(), image.pixels.end()));
    const auto out = model.forward(input);
    DensityMap map{image.height, image.width, {}, 0.0};
    map.values.assign(out.density.data().begin(), out.density.data().end());
    return map;
}

}  // namespace dtlc
