#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "cli.hpp"
#include "fssam/eval.hpp"
#include "fssam/gradcheck.hpp"
#include "fssam/lora.hpp"
#include "fssam/ops.hpp"
#include "fssam/train.hpp"

namespace fssam::cli {

namespace {

ModelConfig toy() {
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

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

BinaryMask random_mask(Rng& rng, std::size_t size) {
    BinaryMask m(size, size);
    const std::size_t y0 = rng.below(size / 2), x0 = rng.below(size / 2);
    const std::size_t y1 = y0 + 1 + rng.below(size - y0 - 1), x1 = x0 + 1 + rng.below(size - x0 - 1);
    for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) m.at(y, x) = 1;
    return m;
}

Model perturbed(Model model, std::uint64_t seed, double amount = 0.2) {
    Rng rng(seed);
    for (const auto& n : model.tensor_names()) {
        const Tensor& t = model.tensor(n);
        model.set_tensor(n, ops::add(t, random_tensor(rng, t.shape(), -amount, amount)));
    }
    return model;
}

std::vector<Tensor> tensors_of(const Model& m) {
    std::vector<Tensor> v;
    for (const auto& n : m.tensor_names()) v.push_back(m.tensor(n));
    return v;
}

Model with_tensors(Model m, std::span<const Tensor> values) {
    const auto names = m.tensor_names();
    for (std::size_t i = 0; i < names.size(); ++i) m.set_tensor(names[i], values[i]);
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

CheckResult primitive_gradcheck() {
    Rng rng(1);
    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), w = random_tensor(rng, {3, 5});
    const Tensor g = random_tensor(rng, {5}, 0.5, 1.5), be = random_tensor(rng, {5});
    auto fn = [&](std::span<const Tensor> p) {
        const Tensor y = ops::layer_norm(ops::matmul(p[0], p[1]), p[2], p[3], 1e-5);
        return ops::sum(ops::mul(ops::softmax(ops::gelu(y), 1), w));
    };
    const auto r = finite_difference_gradcheck(fn, {a, b, g, be});
    return {"autograd_primitives_gradcheck", r.max_relative_error < 1e-6, fmt("max rel err %.2e", r.max_relative_error)};
}

CheckResult pipeline_gradcheck() {
    const Model model = perturbed(Model(toy(), 2), 3);
    Rng rng(4);
    const Tensor q = random_tensor(rng, {3, 16, 16}, 0, 1);
    const std::vector<SupportItem> support{{random_tensor(rng, {3, 16, 16}, 0, 1), random_mask(rng, 16)}};
    const Tensor w = random_tensor(rng, {1, 16, 16});
    auto fn = [&](std::span<const Tensor> v) {
        return ops::sum(ops::mul(segment(with_tensors(model, v), q, support).logits, w));
    };
    const auto r = finite_difference_gradcheck(fn, tensors_of(model));
    return {"full_pipeline_gradcheck", r.max_relative_error < 1e-4,
            fmt("max rel err %.2e", r.max_relative_error) + " over " + std::to_string(r.checked) + " coords"};
}

CheckResult lora_neutrality() {
    const Model base = perturbed(Model(toy(), 5), 6);
    Model adapted = base;
    lora::select_trainable(adapted, lora::Strategy::lora_enc_mem_dec, 7);
    Rng rng(8);
    bool same = true;
    for (int i = 0; i < 5; ++i) {
        const Tensor q = random_tensor(rng, {3, 16, 16}, 0, 1);
        const std::vector<SupportItem> s{{random_tensor(rng, {3, 16, 16}, 0, 1), random_mask(rng, 16)}};
        const Tensor a = segment(base, q, s).logits, b = segment(adapted, q, s).logits;
        for (std::size_t j = 0; j < a.numel(); ++j) same = same && a[j] == b[j];
    }
    return {"lora_zero_init_neutral", same, same ? "bit-identical" : "outputs differ"};
}

CheckResult lora_merge() {
    Model factored = Model(toy(), 9);
    lora::select_trainable(factored, lora::Strategy::lora_enc_mem_dec, 10);
    factored = perturbed(factored, 11);
    Model merged = factored;
    merged.merge_adapters();
    Rng rng(12);
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
        const Tensor q = random_tensor(rng, {3, 16, 16}, 0, 1);
        const std::vector<SupportItem> s{{random_tensor(rng, {3, 16, 16}, 0, 1), random_mask(rng, 16)}};
        worst = std::max(worst, max_abs_diff(segment(factored, q, s).logits, segment(merged, q, s).logits));
    }
    const bool ok = worst < 1e-9 && merged.param_count() == factored.param_count() && merged.adapted_layers().empty();
    return {"lora_merge_equivalence", ok, fmt("max logit diff %.2e", worst)};
}

CheckResult attention_permutation() {
    const Model model = perturbed(Model(toy(), 13), 14);
    Rng rng(15);
    const Tensor q = random_tensor(rng, {3, 16, 16}, 0, 1);
    std::vector<SupportItem> s;
    for (int i = 0; i < 5; ++i) s.push_back({random_tensor(rng, {3, 16, 16}, 0, 1), random_mask(rng, 16)});
    const std::vector<SupportItem> p{s[2], s[4], s[0], s[3], s[1]};
    const double d = max_abs_diff(segment(model, q, s).logits, segment(model, q, p).logits);
    return {"support_permutation_invariance", d < 1e-9, fmt("max diff %.2e", d)};
}

CheckResult attention_duplication() {
    const Model model = perturbed(Model(toy(), 16), 17);
    Rng rng(18);
    const Tensor q = random_tensor(rng, {3, 16, 16}, 0, 1);
    const std::vector<SupportItem> s{{random_tensor(rng, {3, 16, 16}, 0, 1), random_mask(rng, 16)},
                                     {random_tensor(rng, {3, 16, 16}, 0, 1), random_mask(rng, 16)}};
    std::vector<SupportItem> dup;
    for (int m = 0; m < 3; ++m) dup.insert(dup.end(), s.begin(), s.end());
    const double d = max_abs_diff(segment(model, q, s).logits, segment(model, q, dup).logits);
    return {"support_duplication_invariance", d < 1e-9, fmt("max diff %.2e", d)};
}

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

CheckResult bce_oracle() {
    const Tensor z({1, 2, 2}, {1, -1, 0, 2});
    BinaryMask t(2, 2);
    t.bits = {1, 0, 0, 1};
    double expected = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const double p = sig(z[i]);
        expected -= (t.bits[i] ? std::log(p) : std::log(1 - p)) / 4.0;
    }
    const double got = bce_loss(z, t).item();
    const double zero = bce_loss(Tensor::zeros({1, 2, 2}), t).item();
    const bool ok = std::abs(got - expected) < 1e-12 && std::abs(zero - std::log(2.0)) < 1e-12;
    return {"bce_oracle", ok, fmt("value %.12f", got)};
}

CheckResult dice_oracle() {
    const Tensor z({1, 2, 2}, {1, -1, 0, 2});
    BinaryMask t(2, 2);
    t.bits = {1, 0, 0, 1};
    double pt = 0, p = 0, tt = 0;
    for (std::size_t i = 0; i < 4; ++i) {
        pt += sig(z[i]) * t.bits[i];
        p += sig(z[i]);
        tt += t.bits[i];
    }
    const double expected = 1.0 - (2 * pt + 1) / (p + tt + 1);
    const double got = dice_loss(z, t).item();
    return {"dice_oracle", std::abs(got - expected) < 1e-12, fmt("value %.12f", got) + fmt(" expected %.12f", expected)};
}

CheckResult adamw_reference() {
    AdamWParams h;
    h.lr = 0.05;
    h.weight_decay = 0.1;
    double theta = 1.0, m = 0.0, v = 0.0, worst = 0.0;
    Tensor p({1}, {1.0});
    OptimizerState state;
    for (int t = 1; t <= 10; ++t) {
        const double g = 2.0 * theta;
        m = h.beta1 * m + (1 - h.beta1) * g;
        v = h.beta2 * v + (1 - h.beta2) * g * g;
        theta -= h.lr * h.weight_decay * theta +
                 h.lr * (m / (1 - std::pow(h.beta1, t))) / (std::sqrt(v / (1 - std::pow(h.beta2, t))) + h.eps);
        const Tensor grad({1}, {2.0 * p[0]});
        p = adamw_step(std::span(&p, 1), std::span(&grad, 1), state, h)[0];
        worst = std::max(worst, std::abs(p[0] - theta));
    }
    return {"adamw_scalar_reference", worst < 1e-12, fmt("max deviation %.2e", worst)};
}

CheckResult cosine_endpoints() {
    const bool ok = cosine_lr(0, 100, 1e-4, 1e-6) == 1e-4 && cosine_lr(100, 100, 1e-4, 1e-6) == 1e-6 &&
                    std::abs(cosine_lr(50, 100, 1e-4, 1e-6) - 5.05e-5) < 1e-18 && cosine_lr(101, 100, 1e-4, 1e-6) == 1e-6;
    return {"cosine_schedule_endpoints", ok, ""};
}

CheckResult iou_discriminator() {
    MetricsReport r;
    BinaryMask p(2, 4), t(2, 4);
    p.bits = {1, 1, 1, 1, 0, 0, 0, 0};
    t.bits = {0, 0, 1, 1, 1, 1, 0, 0};
    iou_accumulate(r, 1, p, t);
    iou_accumulate(r, 1, p, p);
    const double v = miou(r).value_or(-1);
    return {"iou_pixel_accumulation", v == 0.6, fmt("class IoU %.6f", v)};
}

CheckResult miou_recount() {
    Rng rng(19);
    MetricsReport r;
    std::map<int, std::pair<std::uint64_t, std::uint64_t>> counts;
    for (int e = 0; e < 100; ++e) {
        const int c = static_cast<int>(1 + rng.below(4));
        BinaryMask p(9, 7), t(9, 7);
        for (auto& b : p.bits) b = rng.below(3) == 0;
        for (auto& b : t.bits) b = rng.below(3) == 0;
        iou_accumulate(r, c, p, t);
        for (std::size_t i = 0; i < p.bits.size(); ++i) {
            counts[c].first += p.bits[i] && t.bits[i];
            counts[c].second += p.bits[i] || t.bits[i];
        }
    }
    bool ok = true;
    double total = 0.0;
    for (const auto& [c, iu] : counts) {
        ok = ok && r.per_class[c].intersection == iu.first && r.per_class[c].union_ == iu.second;
        total += static_cast<double>(iu.first) / static_cast<double>(iu.second);
    }
    ok = ok && miou(r) == total / static_cast<double>(counts.size());
    return {"miou_recount_oracle", ok, ""};
}

CheckResult eval_plumbing() {
    SyntheticConfig s;
    s.image_size = 16;
    s.images_per_class = 4;
    const DatasetIndex index = build_synthetic_dataset(s, {1, 2, 3, 4});
    FoldEval spec;
    spec.classes = {1, 2, 3, 4};
    spec.n_episodes = 20;
    const auto oracle = miou(evaluate_fold(oracle_predictor(), index, spec)).value_or(-1);
    const auto background = miou(evaluate_fold(background_predictor(), index, spec)).value_or(-1);
    spec.jobs = 3;
    const auto again = miou(evaluate_fold(oracle_predictor(), index, spec)).value_or(-1);
    return {"evaluation_plumbing", oracle == 1.0 && background == 0.0 && again == 1.0,
            fmt("oracle %.4f", oracle) + fmt(" background %.4f", background)};
}

CheckResult loss_gradient() {
    Rng rng(20);
    const Tensor z = random_tensor(rng, {1, 6, 6}, -3, 3);
    const BinaryMask t = random_mask(rng, 6);
    auto fn = [&](std::span<const Tensor> v) { return combined_loss(v[0], t, 1.0, 1.0); };
    const auto r = finite_difference_gradcheck(fn, {z});
    return {"combined_loss_gradcheck", r.max_relative_error < 1e-6, fmt("max rel err %.2e", r.max_relative_error)};
}

}  // namespace

std::vector<CheckResult> run_verify_checks(bool verbose) {
    const std::vector<std::function<CheckResult()>> checks{
        primitive_gradcheck, pipeline_gradcheck, lora_neutrality, lora_merge,      attention_permutation,
        attention_duplication, bce_oracle,       dice_oracle,     loss_gradient,   adamw_reference,
        cosine_endpoints,      iou_discriminator, miou_recount,   eval_plumbing};
    std::vector<CheckResult> out;
    for (const auto& check : checks) {
        const auto start = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            r = check();
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = std::string("threw: ") + e.what();
        }
        if (verbose) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            std::printf("%s %-32s %6.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), s, r.detail.c_str());
            std::fflush(stdout);
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace fssam::cli
