#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fssam/model.hpp"
#include "fssam/nn.hpp"
#include "fssam/ops.hpp"
#include "fssam/rng.hpp"

namespace fssam::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

// sum(w * y) with a fixed random weighting, so every output coordinate matters.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
    Rng rng(seed);
    return ops::sum(ops::mul(y, random_tensor(rng, y.shape())));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    EXPECT_EQ(a.shape(), b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel() && i < b.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

/// Rebuilds a parameter set with the given tensors substituted in name order.
inline nn::ParameterSet with_values(const nn::ParameterSet& base, std::span<const Tensor> values) {
    nn::ParameterSet out;
    for (std::size_t i = 0; i < base.names().size(); ++i) out.add(base.names()[i], values[i]);
    return out;
}

inline std::vector<Tensor> values_of(const nn::ParameterSet& params) {
    std::vector<Tensor> v;
    for (const auto& n : params.names()) v.push_back(params.at(n));
    return v;
}

/// Random perturbation of every parameter so zero-initialized biases and
/// unit norms do not hide gradient paths.
inline nn::ParameterSet jitter(const nn::ParameterSet& params, std::uint64_t seed, double amount = 0.2) {
    Rng rng(seed);
    nn::ParameterSet out;
    for (const auto& n : params.names()) {
        const Tensor& t = params.at(n);
        out.add(n, ops::add(t, random_tensor(rng, t.shape(), -amount, amount)));
    }
    return out;
}

inline ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 16;
    c.patch = 4;
    c.d_model = 8;
    c.enc_depth = 1;
    c.n_heads = 2;
    c.mem_depth = 1;
    c.d_mem = 8;
    return c;
}

inline ModelConfig small_config() {
    ModelConfig c;
    c.image_size = 32;
    c.patch = 4;
    c.d_model = 16;
    c.enc_depth = 1;
    c.n_heads = 2;
    c.mem_depth = 2;
    c.d_mem = 8;
    return c;
}

inline Tensor random_image(Rng& rng, std::size_t size) { return random_tensor(rng, {3, size, size}, 0.0, 1.0); }

/// Random axis-aligned rectangle, never empty.
inline BinaryMask random_mask(Rng& rng, std::size_t size) {
    BinaryMask m(size, size);
    const std::size_t y0 = rng.below(size / 2), x0 = rng.below(size / 2);
    const std::size_t y1 = y0 + 1 + rng.below(size - y0 - 1), x1 = x0 + 1 + rng.below(size - x0 - 1);
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) m.at(y, x) = 1;
    return m;
}

/// Copy of the model with every tensor perturbed, so that zero biases and
/// zero-initialized adapters take part in gradient checks.
inline Model jitter_model(const Model& model, std::uint64_t seed, double amount = 0.2) {
    Model out = model;
    Rng rng(seed);
    for (const auto& n : out.tensor_names()) {
        const Tensor& t = out.tensor(n);
        out.set_tensor(n, ops::add(t, random_tensor(rng, t.shape(), -amount, amount)));
    }
    return out;
}

inline Model with_tensors(const Model& model, std::span<const Tensor> values) {
    Model out = model;
    const auto names = out.tensor_names();
    for (std::size_t i = 0; i < names.size(); ++i) out.set_tensor(names[i], values[i]);
    return out;
}

inline std::vector<Tensor> tensors_of(const Model& model) {
    std::vector<Tensor> v;
    for (const auto& n : model.tensor_names()) v.push_back(model.tensor(n));
    return v;
}

}  // namespace fssam::testing
