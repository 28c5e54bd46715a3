#include "fssam/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

#include "fssam/errors.hpp"

namespace fssam::ops {

namespace {

using Buffer = std::shared_ptr<std::vector<double>>;

thread_local KinkMonitor* g_kink_monitor = nullptr;

Buffer buffer(std::size_t n, double value = 0.0) { return std::make_shared<std::vector<double>>(n, value); }

// Records the node when a tape is active and any input is differentiable.
Tensor finish(std::string_view op, Shape shape, Buffer out, std::initializer_list<const Tensor*> inputs,
              BackwardFn fn) {
    if (Tape* tape = Tape::active()) {
        std::vector<NodeId> ids;
        ids.reserve(inputs.size());
        bool tracked = false;
        for (const Tensor* in : inputs) {
            ids.push_back(tape->track(*in));
            tracked = tracked || ids.back() != kNoNode;
        }
        if (tracked) return tape->record(op, std::move(shape), std::move(out), std::move(ids), std::move(fn));
    }
    return Tensor::from_storage(std::move(shape), std::move(out));
}

Tensor finish_many(std::string_view op, Shape shape, Buffer out, std::span<const Tensor> inputs, BackwardFn fn) {
    if (Tape* tape = Tape::active()) {
        std::vector<NodeId> ids;
        ids.reserve(inputs.size());
        bool tracked = false;
        for (const Tensor& in : inputs) {
            ids.push_back(tape->track(in));
            tracked = tracked || ids.back() != kNoNode;
        }
        if (tracked) return tape->record(op, std::move(shape), std::move(out), std::move(ids), std::move(fn));
    }
    return Tensor::from_storage(std::move(shape), std::move(out));
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

Shape replace_last(Shape s, std::size_t v) {
    s.back() = v;
    return s;
}

template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
    auto out = buffer(x.numel());
    const auto xs = x.data();
    for (std::size_t i = 0; i < xs.size(); ++i) (*out)[i] = fwd(xs[i]);
    return finish(op, x.shape(), out, {&x}, [x, out, deriv](auto g, auto gin) {
        const auto xs = x.data();
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * deriv(xs[i], (*out)[i]);
    });
}

}  // namespace

KinkMonitor::KinkMonitor() : previous_(g_kink_monitor) { g_kink_monitor = this; }
KinkMonitor::~KinkMonitor() { g_kink_monitor = previous_; }

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out)[i] = a[i] + b[i];
    return finish("add", a.shape(), out, {&a, &b}, [](auto g, auto gin) {
        for (auto& dst : gin) {
            if (dst.empty()) continue;
            for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out)[i] = a[i] - b[i];
    return finish("sub", a.shape(), out, {&a, &b}, [](auto g, auto gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
        if (!gin[1].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out)[i] = a[i] * b[i];
    return finish("mul", a.shape(), out, {&a, &b}, [a, b](auto g, auto gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * b[i];
        if (!gin[1].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * a[i];
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape("div", a, b);
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out)[i] = a[i] / b[i];
    return finish("div", a.shape(), out, {&a, &b}, [a, b](auto g, auto gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] / b[i];
        if (!gin[1].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i] * a[i] / (b[i] * b[i]);
    });
}

Tensor scale(const Tensor& a, double factor) {
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out)[i] = a[i] * factor;
    return finish("scale", a.shape(), out, {&a}, [factor](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
    });
}

Tensor add_scalar(const Tensor& a, double value) {
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < a.numel(); ++i) (*out)[i] = a[i] + value;
    return finish("add_scalar", a.shape(), out, {&a}, [](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t d = last_dim(x);
    if (bias.numel() != d || bias.rank() != 1) {
        throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    }
    auto out = buffer(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) (*out)[i] = x[i] + bias[i % d];
    return finish("add_row_bias", x.shape(), out, {&x, &bias}, [d](auto g, auto gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
        if (!gin[1].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i % d] += g[i];
    });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.rank() != 3 || bias.rank() != 1 || bias.numel() != x.dim(0)) {
        throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
    }
    const std::size_t plane = x.dim(1) * x.dim(2);
    auto out = buffer(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) (*out)[i] = x[i] + bias[i / plane];
    return finish("add_channel_bias", x.shape(), out, {&x, &bias}, [plane](auto g, auto gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
        if (!gin[1].empty())
            for (std::size_t i = 0; i < g.size(); ++i) gin[1][i / plane] += g[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 1 || b.rank() != 2 || last_dim(a) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t k = b.dim(0), n = b.dim(1), m = a.numel() / k;
    auto out = buffer(m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out->data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            double* orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return finish("matmul", replace_last(a.shape(), n), out, {&a, &b}, [a, b, m, k, n](auto g, auto gin) {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        if (!gin[0].empty()) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* grow = g.data() + i * n;
                std::size_t p = 0;
                for (; p + 4 <= k; p += 4) {
                    const double *b0 = pb + p * n, *b1 = b0 + n, *b2 = b1 + n, *b3 = b2 + n;
                    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = grow[j];
                        s0 += gv * b0[j];
                        s1 += gv * b1[j];
                        s2 += gv * b2[j];
                        s3 += gv * b3[j];
                    }
                    gin[0][i * k + p] += s0;
                    gin[0][i * k + p + 1] += s1;
                    gin[0][i * k + p + 2] += s2;
                    gin[0][i * k + p + 3] += s3;
                }
                for (; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * pb[p * n + j];
                    gin[0][i * k + p] += s;
                }
            }
        }
        if (!gin[1].empty()) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = pa[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) gin[1][p * n + j] += av * g[i * n + j];
                }
        }
    });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    if (a.rank() < 1 || b.rank() != 2 || last_dim(a) != b.dim(1)) {
        throw ShapeError("matmul_bt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + "^T");
    }
    const std::size_t k = b.dim(1), n = b.dim(0), m = a.numel() / k;
    auto out = buffer(m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out->data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        std::size_t j = 0;
        // Four independent dot products per pass; each keeps its own
        // left-to-right summation order.
        for (; j + 4 <= n; j += 4) {
            const double *b0 = pb + j * k, *b1 = b0 + k, *b2 = b1 + k, *b3 = b2 + k;
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                s0 += av * b0[p];
                s1 += av * b1[p];
                s2 += av * b2[p];
                s3 += av * b3[p];
            }
            po[i * n + j] = s0;
            po[i * n + j + 1] = s1;
            po[i * n + j + 2] = s2;
            po[i * n + j + 3] = s3;
        }
        for (; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * pb[j * k + p];
            po[i * n + j] = s;
        }
    }
    return finish("matmul_bt", replace_last(a.shape(), n), out, {&a, &b}, [a, b, m, k, n](auto g, auto gin) {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double gv = g[i * n + j];
                if (gv == 0.0) continue;
                if (!gin[0].empty())
                    for (std::size_t p = 0; p < k; ++p) gin[0][i * k + p] += gv * pb[j * k + p];
                if (!gin[1].empty())
                    for (std::size_t p = 0; p < k; ++p) gin[1][j * k + p] += gv * pa[i * k + p];
            }
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
    const std::size_t r = a.dim(0), c = a.dim(1);
    auto out = buffer(a.numel());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*out)[j * r + i] = a[i * c + j];
    return finish("transpose", {c, r}, out, {&a}, [r, c](auto g, auto gin) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gin[0][i * c + j] += g[j * r + i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    auto out = std::make_shared<std::vector<double>>(a.data().begin(), a.data().end());
    return finish("reshape", std::move(shape), out, {&a}, [](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
    });
}

Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape) {
    if (shape_numel(shape) != index.size()) {
        throw ShapeError("gather: " + std::to_string(index.size()) + " indices do not fill " + shape_str(shape));
    }
    auto out = buffer(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.numel()) throw ShapeError("gather: index out of range for " + shape_str(x.shape()));
        (*out)[i] = x[index[i]];
    }
    auto idx = std::make_shared<const std::vector<std::size_t>>(std::move(index));
    return finish("gather", std::move(shape), out, {&x}, [idx](auto g, auto gin) {
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][(*idx)[i]] += g[i];
    });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
    if (a.rank() != 2 || count == 0 || start + count > a.dim(1)) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                         shape_str(a.shape()));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    auto out = buffer(r * count);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) (*out)[i * count + j] = a[i * c + start + j];
    return finish("slice_cols", {r, count}, out, {&a}, [r, c, start, count](auto g, auto gin) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < count; ++j) gin[0][i * c + start + j] += g[i * count + j];
    });
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t r = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r) {
            throw ShapeError("concat_cols: incompatible part " + shape_str(p.shape()) + " with " +
                             shape_str(parts[0].shape()));
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    auto out = buffer(r * total);
    std::size_t off = 0;
    for (std::size_t t = 0; t < parts.size(); ++t) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[t]; ++j) (*out)[i * total + off + j] = parts[t][i * widths[t] + j];
        off += widths[t];
    }
    return finish_many("concat_cols", {r, total}, out, parts, [r, total, widths](auto g, auto gin) {
        std::size_t off = 0;
        for (std::size_t t = 0; t < widths.size(); ++t) {
            if (!gin[t].empty())
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < widths[t]; ++j) gin[t][i * widths[t] + j] += g[i * total + off + j];
            off += widths[t];
        }
    });
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t c = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
    std::size_t rows = 0;
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != c) {
            throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()) + " with " +
                             shape_str(parts[0].shape()));
        }
        rows += p.dim(0);
        sizes.push_back(p.numel());
    }
    auto out = std::make_shared<std::vector<double>>();
    out->reserve(rows * c);
    for (const auto& p : parts) out->insert(out->end(), p.data().begin(), p.data().end());
    return finish_many("concat_rows", {rows, c}, out, parts, [sizes](auto g, auto gin) {
        std::size_t off = 0;
        for (std::size_t t = 0; t < sizes.size(); ++t) {
            if (!gin[t].empty())
                for (std::size_t i = 0; i < sizes[t]; ++i) gin[t][i] += g[off + i];
            off += sizes[t];
        }
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    const std::size_t len = x.dim(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
    const std::size_t outer = x.numel() / (len * inner);
    auto out = buffer(x.numel());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = x[base];
            for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, x[base + l * inner]);
            double z = 0.0;
            for (std::size_t l = 0; l < len; ++l) {
                const double e = std::exp(x[base + l * inner] - mx);
                (*out)[base + l * inner] = e;
                z += e;
            }
            for (std::size_t l = 0; l < len; ++l) (*out)[base + l * inner] /= z;
        }
    return finish("softmax", x.shape(), out, {&x}, [out, outer, inner, len](auto g, auto gin) {
        const auto& y = *out;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y[base + l * inner];
                for (std::size_t l = 0; l < len; ++l) {
                    const std::size_t i = base + l * inner;
                    gin[0][i] += y[i] * (g[i] - dot);
                }
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::size_t d = last_dim(x);
    if (gamma.numel() != d || beta.numel() != d) {
        throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
    }
    if (eps < 0.0) throw ContractError("layer_norm: eps must be non-negative");
    const std::size_t rows = x.numel() / d;
    auto out = buffer(x.numel());
    auto xhat = buffer(x.numel());
    auto inv_std = buffer(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x[r * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (x[r * d + j] - mu) * is;
            (*xhat)[r * d + j] = h;
            (*out)[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    return finish("layer_norm", x.shape(), out, {&x, &gamma, &beta},
                  [xhat, inv_std, gamma, rows, d](auto g, auto gin) {
                      const auto& h = *xhat;
                      for (std::size_t r = 0; r < rows; ++r) {
                          if (!gin[0].empty()) {
                              double sum_gh = 0.0, sum_ghh = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                  const double gh = g[r * d + j] * gamma[j];
                                  sum_gh += gh;
                                  sum_ghh += gh * h[r * d + j];
                              }
                              const double inv_d = 1.0 / static_cast<double>(d);
                              for (std::size_t j = 0; j < d; ++j) {
                                  const double gh = g[r * d + j] * gamma[j];
                                  gin[0][r * d + j] +=
                                      (*inv_std)[r] * (gh - inv_d * sum_gh - h[r * d + j] * inv_d * sum_ghh);
                              }
                          }
                          if (!gin[1].empty())
                              for (std::size_t j = 0; j < d; ++j) gin[1][j] += g[r * d + j] * h[r * d + j];
                          if (!gin[2].empty())
                              for (std::size_t j = 0; j < d; ++j) gin[2][j] += g[r * d + j];
                      }
                  });
}

Tensor relu(const Tensor& x) {
    if (KinkMonitor* mon = g_kink_monitor) {
        for (double v : x.data()) {
            mon->hash_ ^= v > 0.0 ? 1u : 0u;
            mon->hash_ *= 0x100000001b3ull;
        }
    }
    return unary(
        "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    return unary(
        "gelu", x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
        [](double v, double) {
            const double t = std::tanh(c * (v + k * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
        });
}

namespace {
double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
    return unary(
        "sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return finish("sum", {}, buffer(1, s), {&x}, [](auto g, auto gin) {
        for (auto& v : gin[0]) v += g[0];
    });
}

Tensor mean(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    return finish("mean", {}, buffer(1, s / n), {&x}, [n](auto g, auto gin) {
        for (auto& v : gin[0]) v += g[0] / n;
    });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
    if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(1) != input.dim(0) || kernel.dim(2) != kernel.dim(3)) {
        throw ShapeError("conv2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
    const long oh_num = static_cast<long>(h + 2 * padding) - static_cast<long>(k);
    const long ow_num = static_cast<long>(w + 2 * padding) - static_cast<long>(k);
    if (oh_num < 0 || ow_num < 0) {
        throw ShapeError("conv2d: non-positive output size for input " + shape_str(input.shape()) + ", kernel " +
                         std::to_string(k) + ", padding " + std::to_string(padding));
    }
    const std::size_t oh = static_cast<std::size_t>(oh_num) / stride + 1;
    const std::size_t ow = static_cast<std::size_t>(ow_num) / stride + 1;
    const std::size_t ckk = cin * k * k, npix = oh * ow;

    // im2col: cols[ckk x npix]
    auto cols = std::make_shared<std::vector<double>>(ckk * npix, 0.0);
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
                const std::size_t row = (c * k + ky) * k + kx;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        (*cols)[row * npix + oy * ow + ox] = input[(c * h + iy) * w + ix];
                    }
                }
            }
    auto out = buffer(cout * npix);
    const double* pk = kernel.data().data();
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t r = 0; r < ckk; ++r) {
            const double kv = pk[o * ckk + r];
            if (kv == 0.0) continue;
            const double* crow = cols->data() + r * npix;
            double* orow = out->data() + o * npix;
            for (std::size_t p = 0; p < npix; ++p) orow[p] += kv * crow[p];
        }
    return finish("conv2d", {cout, oh, ow}, out, {&input, &kernel},
                  [cols, kernel, cin, h, w, cout, k, oh, ow, stride, padding, ckk, npix](auto g, auto gin) {
                      const double* pk = kernel.data().data();
                      if (!gin[1].empty()) {
                          for (std::size_t o = 0; o < cout; ++o)
                              for (std::size_t r = 0; r < ckk; ++r) {
                                  const double* crow = cols->data() + r * npix;
                                  double s = 0.0;
                                  for (std::size_t p = 0; p < npix; ++p) s += g[o * npix + p] * crow[p];
                                  gin[1][o * ckk + r] += s;
                              }
                      }
                      if (!gin[0].empty()) {
                          std::vector<double> dcols(ckk * npix, 0.0);
                          for (std::size_t o = 0; o < cout; ++o)
                              for (std::size_t r = 0; r < ckk; ++r) {
                                  const double kv = pk[o * ckk + r];
                                  if (kv == 0.0) continue;
                                  for (std::size_t p = 0; p < npix; ++p) dcols[r * npix + p] += kv * g[o * npix + p];
                              }
                          for (std::size_t c = 0; c < cin; ++c)
                              for (std::size_t ky = 0; ky < k; ++ky)
                                  for (std::size_t kx = 0; kx < k; ++kx) {
                                      const std::size_t row = (c * k + ky) * k + kx;
                                      for (std::size_t oy = 0; oy < oh; ++oy) {
                                          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                                          if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                          for (std::size_t ox = 0; ox < ow; ++ox) {
                                              const long ix =
                                                  static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                                              if (ix < 0 || ix >= static_cast<long>(w)) continue;
                                              gin[0][(c * h + iy) * w + ix] += dcols[row * npix + oy * ow + ox];
                                          }
                                      }
                                  }
                      }
                  });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& kernel, std::size_t stride) {
    if (input.rank() != 3 || kernel.rank() != 4 || kernel.dim(0) != input.dim(0) || kernel.dim(2) != kernel.dim(3)) {
        throw ShapeError("conv_transpose2d: input " + shape_str(input.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
    }
    if (stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = kernel.dim(1), k = kernel.dim(2);
    const std::size_t oh = (h - 1) * stride + k, ow = (w - 1) * stride + k;
    auto out = buffer(cout * oh * ow);
    for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double v = input[(ci * h + y) * w + x];
                if (v == 0.0) continue;
                for (std::size_t co = 0; co < cout; ++co)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            (*out)[(co * oh + y * stride + ky) * ow + x * stride + kx] +=
                                v * kernel[((ci * cout + co) * k + ky) * k + kx];
            }
    return finish("conv_transpose2d", {cout, oh, ow}, out, {&input, &kernel},
                  [input, kernel, cin, h, w, cout, k, oh, ow, stride](auto g, auto gin) {
                      for (std::size_t ci = 0; ci < cin; ++ci)
                          for (std::size_t y = 0; y < h; ++y)
                              for (std::size_t x = 0; x < w; ++x) {
                                  const double v = input[(ci * h + y) * w + x];
                                  double acc = 0.0;
                                  for (std::size_t co = 0; co < cout; ++co)
                                      for (std::size_t ky = 0; ky < k; ++ky)
                                          for (std::size_t kx = 0; kx < k; ++kx) {
                                              const double gv = g[(co * oh + y * stride + ky) * ow + x * stride + kx];
                                              const std::size_t ki = ((ci * cout + co) * k + ky) * k + kx;
                                              acc += gv * kernel[ki];
                                              if (!gin[1].empty()) gin[1][ki] += gv * v;
                                          }
                                  if (!gin[0].empty()) gin[0][(ci * h + y) * w + x] += acc;
                              }
                  });
}

namespace {

struct Tap {
    std::size_t i0, i1;
    double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        auto i0 = static_cast<std::size_t>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const std::size_t i1 = std::min(i0 + 1, in - 1);
        taps[o] = {i0, i1, i1 == i0 ? 0.0 : src - static_cast<double>(i0)};
    }
    return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& input, std::size_t out_h, std::size_t out_w) {
    if (input.rank() != 3 || out_h == 0 || out_w == 0) {
        throw ShapeError("bilinear_resize: expected [C,H,W] input and positive target, got " +
                         shape_str(input.shape()));
    }
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const auto ty = bilinear_taps(h, out_h);
    const auto tx = bilinear_taps(w, out_w);
    auto out = buffer(c * out_h * out_w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& a = ty[y];
                const auto& b = tx[x];
                const double* plane = input.data().data() + ch * h * w;
                const double top = plane[a.i0 * w + b.i0] * (1.0 - b.frac) + plane[a.i0 * w + b.i1] * b.frac;
                const double bot = plane[a.i1 * w + b.i0] * (1.0 - b.frac) + plane[a.i1 * w + b.i1] * b.frac;
                (*out)[(ch * out_h + y) * out_w + x] = top * (1.0 - a.frac) + bot * a.frac;
            }
    return finish("bilinear_resize", {c, out_h, out_w}, out, {&input}, [ty, tx, c, h, w, out_h, out_w](auto g, auto gin) {
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < out_h; ++y)
                for (std::size_t x = 0; x < out_w; ++x) {
                    const auto& a = ty[y];
                    const auto& b = tx[x];
                    const double gv = g[(ch * out_h + y) * out_w + x];
                    double* plane = gin[0].data() + ch * h * w;
                    plane[a.i0 * w + b.i0] += gv * (1.0 - a.frac) * (1.0 - b.frac);
                    plane[a.i0 * w + b.i1] += gv * (1.0 - a.frac) * b.frac;
                    plane[a.i1 * w + b.i0] += gv * a.frac * (1.0 - b.frac);
                    plane[a.i1 * w + b.i1] += gv * a.frac * b.frac;
                }
    });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
    require_same_shape("bce_with_logits", logits, target);
    const double n = static_cast<double>(logits.numel());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double z = logits[i];
        s += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
    }
    return finish("bce_with_logits", {}, buffer(1, s / n), {&logits}, [logits, target, n](auto g, auto gin) {
        for (std::size_t i = 0; i < logits.numel(); ++i) gin[0][i] += g[0] * (stable_sigmoid(logits[i]) - target[i]) / n;
    });
}

}  // namespace fssam::ops
