#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dtlc/tensor.hpp"

namespace dtlc {

struct AdamState {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update in place, then zeroes the gradients.
/// Moment buffers are created lazily on the first step and keyed by
/// position, so the parameter list must keep the same order across calls.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState& state) {
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!params[i].has_grad() && params[i].numel() > 0)
            throw std::logic_error("adam_step: parameter " + std::to_string(i) + " " +
                                   shape_str(params[i].shape()) + " has no gradient");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.0);
            state.v[i].assign(params[i].numel(), 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::logic_error("adam_step: parameter list changed size between steps");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (state.m[i].size() != params[i].numel())
            throw DimensionError("adam_step", "param" + std::to_string(i), state.m[i].size(), params[i].numel());

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto data = params[i].data();
        auto grad = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = static_cast<double>(grad[k]);
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            const double update = state.learning_rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + state.epsilon);
            data[k] = static_cast<T>(static_cast<double>(data[k]) - update);
        }
        params[i].zero_grad();
    }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace dtlc
