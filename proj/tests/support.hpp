#pragma once

// Shared fixtures and brute-force reference implementations for the tests.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dtlc/dtlc.hpp"

namespace dtlc::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "t") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("dtlc_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& sub) const { return path_ / sub; }

private:
    std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

template <typename T = double>
std::vector<T> random_values(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return v;
}

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0, bool grad = false) {
    const auto n = shape_numel(shape);
    return Tensor<T>(std::move(shape), random_values<T>(n, seed, lo, hi), grad);
}

// --- oracles ------------------------------------------------------------------

/// Direct seven-loop convolution with zero padding.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, std::size_t B, std::size_t C, std::size_t H,
                                        std::size_t W, const std::vector<double>& w, std::size_t O, std::size_t K,
                                        const std::vector<double>& b, std::size_t stride, std::size_t pad,
                                        std::size_t dil, std::size_t& OH, std::size_t& OW) {
    const long span = static_cast<long>(dil * (K - 1) + 1);
    OH = static_cast<std::size_t>((static_cast<long>(H + 2 * pad) - span) / static_cast<long>(stride) + 1);
    OW = static_cast<std::size_t>((static_cast<long>(W + 2 * pad) - span) / static_cast<long>(stride) + 1);
    std::vector<double> y(B * O * OH * OW, 0.0);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const long iy = static_cast<long>(oy * stride + ky * dil) - static_cast<long>(pad);
                                const long ix = static_cast<long>(ox * stride + kx * dil) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                                acc += x[((n * C + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)] *
                                       w[((o * C + c) * K + ky) * K + kx];
                            }
                    y[((n * O + o) * OH + oy) * OW + ox] = acc;
                }
    return y;
}

inline std::vector<double> naive_matmul_bias(const std::vector<double>& x, std::size_t B, std::size_t I,
                                             const std::vector<double>& w, std::size_t O, const std::vector<double>& b) {
    std::vector<double> y(B * O);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            double acc = b[o];
            for (std::size_t i = 0; i < I; ++i) acc += x[n * I + i] * w[o * I + i];
            y[n * O + o] = acc;
        }
    return y;
}

/// Every pixel's value by explicit window enumeration.
inline std::vector<double> naive_max_pool(const std::vector<double>& x, std::size_t planes, std::size_t H, std::size_t W) {
    std::vector<double> y;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t oy = 0; oy < H / 2; ++oy)
            for (std::size_t ox = 0; ox < W / 2; ++ox) {
                std::vector<double> window;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) window.push_back(x[(p * H + 2 * oy + dy) * W + 2 * ox + dx]);
                y.push_back(*std::max_element(window.begin(), window.end()));
            }
    return y;
}

/// Rectangle sum without any library help: integral of a density map.
inline double loop_sum(const std::vector<double>& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
    return s;
}

/// Small experiment config for pipeline tests: base width 4, a few images,
/// very short schedules.
inline std::string small_config_text(std::uint64_t seed = 3) {
    return "seed = " + std::to_string(seed) +
           "\n[source]\nimages = 8\n[target]\nfew = 2\ntest = 4\n"
           "[synthesis]\nnum_images = 6\ngan_steps = 40\ngan_patches = 16\n"
           "[training]\nbase_width = 4\n"
           "[transfer]\npretrain_epochs = 2\nsynth_epochs = 1\nreal_epochs = 1\ndirect_epochs = 2\n";
}

inline ExperimentConfig small_config(std::uint64_t seed = 3) { return parse_config(small_config_text(seed)); }

/// Tiny generated split usable with tiny_model_config (H, W multiple of 8).
inline std::vector<AnnotatedImage> toy_images(std::size_t n, std::uint64_t seed, bool target = false) {
    return generate_domain(target ? toy_target_domain() : toy_source_domain(), n, seed);
}

}  // namespace dtlc::test
