#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fssam/tensor.hpp"

namespace fssam {

/// Row-major H x W mask of 0/1 bytes.
struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }

    std::size_t count() const;
    bool empty() const { return count() == 0; }
    BinaryMask inverted() const;

    /// [1 x H x W] tensor of 0.0 / 1.0.
    Tensor to_tensor() const;
    /// indicator(logits > 0) of a [1 x H x W] or [H x W] tensor.
    static BinaryMask from_logits(const Tensor& logits);

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

}  // namespace fssam
