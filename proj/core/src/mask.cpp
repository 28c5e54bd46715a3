#include "fssam/mask.hpp"

#include <algorithm>

#include "fssam/errors.hpp"

namespace fssam {

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

BinaryMask BinaryMask::inverted() const {
    BinaryMask m(height, width);
    for (std::size_t i = 0; i < bits.size(); ++i) m.bits[i] = bits[i] ? 0 : 1;
    return m;
}

Tensor BinaryMask::to_tensor() const {
    std::vector<double> v(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) v[i] = bits[i] ? 1.0 : 0.0;
    return Tensor({1, height, width}, std::move(v));
}

BinaryMask BinaryMask::from_logits(const Tensor& logits) {
    const auto& s = logits.shape();
    if (!(s.size() == 3 && s[0] == 1) && s.size() != 2) {
        throw ShapeError("mask from logits expects [1 x H x W] or [H x W], got " + shape_str(s));
    }
    BinaryMask m(s[s.size() - 2], s.back());
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = logits[i] > 0.0 ? 1 : 0;
    return m;
}

}  // namespace fssam
