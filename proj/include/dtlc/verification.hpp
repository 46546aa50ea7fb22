#pragma once

// Finite-difference checks for every differentiable op and for the full
// counter-network loss, in 64-bit mode.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtlc/gradcheck.hpp"
#include "dtlc/model.hpp"
#include "dtlc/ops.hpp"
#include "dtlc/rng.hpp"

namespace dtlc {

struct OpCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t probes = 0;
};

namespace detail {

/// Uniform values in [lo, hi] with random sign when `signed_values`,
/// kept at least `lo` away from zero so kinks are not straddled.
inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo, double hi, bool signed_values,
                                    bool requires_grad = true) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) {
        x = rng.uniform(lo, hi);
        if (signed_values && rng.uniform() < 0.5) x = -x;
    }
    return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

inline OpCheck check(const std::string& name, const std::function<Tensor<double>()>& build,
                     std::vector<Tensor<double>> params, std::uint64_t seed) {
    GradCheckOptions opt;
    opt.seed = seed;
    const auto r = grad_check(build, std::span<Tensor<double>>(params), opt);
    return {name, r.max_rel_error, r.probes};
}

/// Reduces an op output to a scalar through a fixed random target.
inline Tensor<double> reduce(const Tensor<double>& y, std::uint64_t seed) {
    Rng rng(seed);
    return mse_loss(y, random_tensor(y.shape(), rng, 0.0, 1.0, true, false));
}

}  // namespace detail

/// Names of the ops covered by `run_gradchecks`, in report order.
inline std::vector<std::string> differentiable_ops() {
    return {"conv2d", "conv2d_dilated", "max_pool2d", "upsample_nearest", "dense", "relu", "sigmoid", "tanh",
            "leaky_relu", "global_avg_pool", "mse_loss", "bce_with_logits", "add", "scale", "sum",
            "spatial_gate", "channel_gate", "total_loss"};
}

/// Tiny-config model in 64-bit mode with small positive biases, so no
/// ReLU or pooling window sits exactly on a kink.
inline CounterModel<double> gradcheck_model(std::uint64_t seed) {
    CounterModel<double> model(tiny_model_config(seed));
    Rng rng(derive_seed(seed, 77));
    for (auto& g : model.groups())
        for (auto& p : g.params)
            if (p.tensor.rank() == 1)
                for (auto& v : p.tensor.data()) v = rng.uniform(0.05, 0.15);
    return model;
}

/// Targets are the model's own outputs with 10% multiplicative jitter. A
/// small residual keeps the loss, and so its rounding noise, small
/// relative to the gradients.
inline GradCheckResult check_total_loss_at(std::uint64_t seed) {
    auto model = gradcheck_model(seed);
    const auto extractor = PerceptualExtractor<double>::snapshot(model);
    Rng rng(derive_seed(seed, 78));
    const Tensor<double> x = detail::random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0, false, false);
    const auto jitter = [&](const Tensor<double>& t) {
        std::vector<double> v(t.data().begin(), t.data().end());
        for (auto& e : v) e = e * (1.0 + rng.uniform(-0.1, 0.1)) + rng.uniform(0.0, 1e-4);
        return Tensor<double>(t.shape(), std::move(v), false);
    };
    const auto reference = model.forward(x);
    const Tensor<double> y = jitter(reference.density);
    const Tensor<double> s = jitter(*reference.style);
    auto params = model.parameters();
    const auto build = [&] {
        const auto out = model.forward(x);
        return total_loss(out.density, y, out.style, &s, &extractor, model.config().density_scale).total;
    };
    GradCheckOptions opt;
    opt.seed = derive_seed(seed, 79);
    return grad_check(build, std::span<Tensor<double>>(params), opt);
}

/// Central differences are only meaningful where the loss is smooth
/// within +-eps, so test points where a probe switches a ReLU or max-pool
/// branch are redrawn. After `attempts` draws the last result stands.
inline OpCheck check_total_loss(std::uint64_t seed, std::size_t attempts = 16) {
    GradCheckResult r;
    for (std::size_t a = 0; a < attempts; ++a) {
        r = check_total_loss_at(derive_seed(seed, a));
        if (r.kink_crossings == 0) break;
    }
    return {"total_loss", r.max_rel_error, r.probes};
}

inline std::vector<OpCheck> run_gradchecks(std::uint64_t seed = 0) {
    using detail::check;
    using detail::random_tensor;
    using detail::reduce;
    std::vector<OpCheck> out;
    Rng rng(seed);
    std::uint64_t k = 0;
    const auto next = [&] { return derive_seed(seed, ++k); };

    for (std::size_t dilation : {1u, 2u}) {
        auto x = random_tensor({2, 3, 7, 7}, rng, 0.0, 1.0, true);
        auto w = random_tensor({4, 3, 3, 3}, rng, 0.0, 0.5, true);
        auto b = random_tensor({4}, rng, 0.0, 0.5, true);
        const std::uint64_t s = next();
        out.push_back(check(dilation == 1 ? "conv2d" : "conv2d_dilated",
                            [=] { return reduce(conv2d(x, ConvParams<double>{w, b, 1, dilation, dilation}), s); },
                            {x, w, b}, next()));
    }
    {
        // Distinct values so no pooling window has a tie.
        std::vector<double> v(2 * 2 * 6 * 6);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>((i * 37) % v.size());
        Tensor<double> x({2, 2, 6, 6}, v, true);
        const std::uint64_t s = next();
        out.push_back(check("max_pool2d", [=] { return reduce(max_pool2d(x), s); }, {x}, next()));
    }
    {
        auto x = random_tensor({1, 2, 3, 4}, rng, 0.0, 1.0, true);
        const std::uint64_t s = next();
        out.push_back(check("upsample_nearest", [=] { return reduce(upsample_nearest(x, 2), s); }, {x}, next()));
    }
    {
        auto x = random_tensor({3, 5}, rng, 0.0, 1.0, true);
        auto w = random_tensor({4, 5}, rng, 0.0, 1.0, true);
        auto b = random_tensor({4}, rng, 0.0, 1.0, true);
        const std::uint64_t s = next();
        out.push_back(check("dense", [=] { return reduce(dense(x, w, b), s); }, {x, w, b}, next()));
    }
    for (auto kind : {Activation::relu, Activation::sigmoid, Activation::tanh, Activation::leaky_relu}) {
        auto x = random_tensor({2, 3, 4}, rng, 0.05, 2.0, true);
        const std::uint64_t s = next();
        out.push_back(check(activation_name(kind), [=] { return reduce(activation(x, kind), s); }, {x}, next()));
    }
    {
        auto x = random_tensor({2, 3, 4, 5}, rng, 0.0, 1.0, true);
        const std::uint64_t s = next();
        out.push_back(check("global_avg_pool", [=] { return reduce(global_avg_pool(x), s); }, {x}, next()));
    }
    {
        auto x = random_tensor({2, 3, 4}, rng, 0.0, 1.0, true);
        auto t = random_tensor({2, 3, 4}, rng, 0.0, 1.0, true, false);
        out.push_back(check("mse_loss", [=] { return mse_loss(x, t); }, {x}, next()));
    }
    {
        auto x = random_tensor({4, 1}, rng, 0.0, 3.0, true);
        out.push_back(check("bce_with_logits",
                            [=] { return add(bce_with_logits(x, 1.0), scale(bce_with_logits(x, 0.0), 0.5)); }, {x},
                            next()));
    }
    {
        auto a = random_tensor({3, 4}, rng, 0.0, 1.0, true);
        auto b = random_tensor({3, 4}, rng, 0.0, 1.0, true);
        const std::uint64_t s = next();
        out.push_back(check("add", [=] { return reduce(add(a, b), s); }, {a, b}, next()));
    }
    {
        auto a = random_tensor({3, 4}, rng, 0.0, 1.0, true);
        const std::uint64_t s = next();
        out.push_back(check("scale", [=] { return reduce(scale(a, -1.7), s); }, {a}, next()));
    }
    {
        auto a = random_tensor({3, 4}, rng, 0.0, 1.0, true);
        out.push_back(check("sum", [=] { return scale(sum(a), 0.3); }, {a}, next()));
    }
    {
        auto f = random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0, true);
        auto m = random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0, false);
        const std::uint64_t s = next();
        out.push_back(check("spatial_gate", [=] { return reduce(spatial_gate(f, m), s); }, {f, m}, next()));
    }
    {
        auto f = random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0, true);
        auto w = random_tensor({2, 3}, rng, 0.0, 1.0, false);
        const std::uint64_t s = next();
        out.push_back(check("channel_gate", [=] { return reduce(channel_gate(f, w), s); }, {f, w}, next()));
    }
    out.push_back(check_total_loss(next()));
    return out;
}

}  // namespace dtlc
