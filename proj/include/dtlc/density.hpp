#pragma once

// Ground-truth density maps from dot annotations, count integration, MAE.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtlc {

struct Point {
    double x = 0.0;
    double y = 0.0;

    bool operator==(const Point&) const = default;
};

/// Dot annotations in pixel coordinates; pixel (row i, col j) sits at (x=j, y=i).
struct DotAnnotations {
    std::vector<Point> points;
    std::size_t width = 0;
    std::size_t height = 0;

    bool operator==(const DotAnnotations&) const = default;

    bool contains(const Point& p) const {
        return p.x >= 0.0 && p.y >= 0.0 && p.x < static_cast<double>(width) && p.y < static_cast<double>(height);
    }
};

class AnnotationError : public std::invalid_argument {
public:
    AnnotationError(std::size_t index, const Point& p, std::size_t width, std::size_t height)
        : std::invalid_argument("annotation " + std::to_string(index) + " at (" + std::to_string(p.x) + ", " +
                                std::to_string(p.y) + ") lies outside the " + std::to_string(width) + "x" +
                                std::to_string(height) + " image"),
          index_(index) {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

inline void validate_annotations(const DotAnnotations& ann) {
    for (std::size_t i = 0; i < ann.points.size(); ++i)
        if (!ann.contains(ann.points[i])) throw AnnotationError(i, ann.points[i], ann.width, ann.height);
}

struct DensityMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;  // row-major H x W
    double sigma = 0.0;

    double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
};

inline constexpr double kDefaultSigma = 3.0;
inline constexpr double kTruncationSigmas = 4.0;

/// Sum of unit-mass isotropic Gaussians, one per point. Each kernel is
/// truncated at 4 sigma, clipped to the image, then renormalized, so every
/// cell contributes exactly 1 to the integral. Points are accumulated in
/// (y, x) order, which makes the result independent of input order.
inline DensityMap render_density_map(const DotAnnotations& ann, double sigma = kDefaultSigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("render_density_map: sigma must be > 0");
    validate_annotations(ann);
    DensityMap map{ann.height, ann.width, std::vector<double>(ann.height * ann.width, 0.0), sigma};

    std::vector<Point> points = ann.points;
    std::sort(points.begin(), points.end(), [](const Point& a, const Point& b) {
        return a.y != b.y ? a.y < b.y : a.x < b.x;
    });

    const double radius = std::ceil(kTruncationSigmas * sigma);
    const double inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> kernel;
    for (const Point& p : points) {
        const auto clip = [&](double v, std::size_t extent) {
            return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(extent - 1)));
        };
        const std::size_t r0 = clip(std::floor(p.y - radius), ann.height);
        const std::size_t r1 = clip(std::ceil(p.y + radius), ann.height);
        const std::size_t c0 = clip(std::floor(p.x - radius), ann.width);
        const std::size_t c1 = clip(std::ceil(p.x + radius), ann.width);
        const std::size_t kw = c1 - c0 + 1;
        kernel.assign((r1 - r0 + 1) * kw, 0.0);
        double total = 0.0;
        for (std::size_t r = r0; r <= r1; ++r)
            for (std::size_t c = c0; c <= c1; ++c) {
                const double dy = static_cast<double>(r) - p.y;
                const double dx = static_cast<double>(c) - p.x;
                const double d2 = dx * dx + dy * dy;
                if (d2 > radius * radius) continue;
                const double v = std::exp(-d2 * inv_two_sigma2);
                kernel[(r - r0) * kw + (c - c0)] = v;
                total += v;
            }
        // total > 0: the nearest pixel is within 1 px of the point.
        for (std::size_t r = r0; r <= r1; ++r)
            for (std::size_t c = c0; c <= c1; ++c)
                map.values[r * ann.width + c] += kernel[(r - r0) * kw + (c - c0)] / total;
    }
    return map;
}

inline double estimate_count(std::span<const double> values) {
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc;
}

inline double estimate_count(const DensityMap& map) { return estimate_count(map.values); }

inline double mae(std::span<const double> pred, std::span<const double> truth) {
    if (pred.empty() || truth.empty()) throw std::invalid_argument("mae: empty input");
    if (pred.size() != truth.size())
        throw std::invalid_argument("mae: length mismatch (" + std::to_string(pred.size()) + " vs " +
                                    std::to_string(truth.size()) + ")");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
    return acc / static_cast<double>(pred.size());
}

}  // namespace dtlc
