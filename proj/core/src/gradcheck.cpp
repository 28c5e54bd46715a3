#include "fssam/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fssam/errors.hpp"
#include "fssam/ops.hpp"

namespace fssam {

namespace {

struct Probe {
    double value;
    std::uint64_t kinks;
};

Probe evaluate(const ScalarFn& fn, std::span<const Tensor> params) {
    ops::KinkMonitor monitor;
    const Tensor out = fn(params);
    if (out.numel() != 1) throw ContractError("gradcheck: function must return a scalar");
    return {out.item(), monitor.signature()};
}

}  // namespace

GradcheckResult finite_difference_gradcheck(const ScalarFn& fn, std::vector<Tensor> params, double eps) {
    if (!(eps > 0.0 && eps <= 1e-2)) throw ContractError("gradcheck: eps must lie in (0, 1e-2]");

    for (auto& p : params) p = p.with_requires_grad(true);

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        const Tensor loss = fn(params);
        tape.backward(loss);
        for (const auto& p : params) {
            auto g = tape.grad(p);
            if (g) {
                analytic.emplace_back(g->data().begin(), g->data().end());
            } else {
                analytic.emplace_back(p.numel(), 0.0);
            }
        }
    }

    std::vector<Tensor> probe(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) probe[i] = params[i].detach();

    const Probe base = evaluate(fn, probe);
    const Probe again = evaluate(fn, probe);
    if (base.value != again.value || base.kinks != again.kinks) {
        throw CheckInvalid("gradcheck: function is not deterministic across repeated evaluations");
    }

    GradcheckResult result;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor original = probe[i];
        std::vector<double> values(original.data().begin(), original.data().end());
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double saved = values[j];
            values[j] = saved + eps;
            probe[i] = Tensor(original.shape(), values);
            const Probe plus = evaluate(fn, probe);
            values[j] = saved - eps;
            probe[i] = Tensor(original.shape(), values);
            const Probe minus = evaluate(fn, probe);
            values[j] = saved;

            if (plus.kinks != base.kinks || minus.kinks != base.kinks) {
                ++result.skipped;
                continue;
            }
            const double numeric = (plus.value - minus.value) / (2.0 * eps);
            const double a = analytic[i][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            ++result.checked;
            if (rel > result.max_relative_error) {
                result.max_relative_error = rel;
                result.worst = "param[" + std::to_string(i) + "] coord " + std::to_string(j);
            }
        }
        probe[i] = original;
    }
    return result;
}

}  // namespace fssam
