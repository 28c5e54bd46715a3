#include <gtest/gtest.h>

#include <set>

#include "fssam/errors.hpp"
#include "fssam/gradcheck.hpp"
#include "fssam/lora.hpp"
#include "fssam/model.hpp"
#include "support.hpp"

using namespace fssam;
using namespace fssam::testing;
using lora::Group;
using lora::Strategy;

namespace {

Tensor run(const Model& model, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t s = model.config().image_size;
    const Tensor q = random_image(rng, s);
    const std::vector<SupportItem> support{{random_image(rng, s), random_mask(rng, s)}};
    return segment(model, q, support).logits;
}

std::size_t numel_of(const Model& model, const std::vector<std::string>& names) {
    std::size_t n = 0;
    for (const auto& name : names) n += model.tensor(name).numel();
    return n;
}

lora::LoraConfig random_config(Rng& rng) {
    lora::LoraConfig cfg;
    cfg.targets.clear();
    for (auto p : {lora::Projection::Q, lora::Projection::K, lora::Projection::V, lora::Projection::O})
        if (rng.below(2)) cfg.targets.insert(p);
    for (auto g : {Group::image_encoder, Group::memory_attention, Group::memory_encoder, Group::mask_decoder})
        if (rng.below(2)) cfg.rank_by_group[g] = 1 + rng.below(40);
    return cfg;
}

}  // namespace

TEST(LoraForward, ZeroUpProjectionAndZeroScaleAreNeutral) {
    Rng rng(1);
    nn::LinearLayer layer{"l", random_tensor(rng, {3, 4}), random_tensor(rng, {3})};
    const Tensor x = random_tensor(rng, {5, 4});
    const Tensor base = nn::linear_forward(layer, x);
    lora::LoraAdapter zero_b{"l", random_tensor(rng, {2, 4}), Tensor::zeros({3, 2}), 1.0};
    EXPECT_TRUE(bit_equal(lora::lora_forward(layer, zero_b, x), base));
    lora::LoraAdapter zero_scale{"l", random_tensor(rng, {2, 4}), random_tensor(rng, {3, 2}), 0.0};
    EXPECT_TRUE(bit_equal(lora::lora_forward(layer, zero_scale, x), base));
}

TEST(LoraForward, HandComputedRankOne) {
    nn::LinearLayer layer{"l", Tensor({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
    lora::LoraAdapter ad{"l", Tensor({1, 2}, {1, 0}), Tensor({2, 1}, {2, 0}), 1.0};
    const Tensor y = lora::lora_forward(layer, ad, Tensor({2}, {3, 5}));
    EXPECT_EQ(y[0], 9.0);
    EXPECT_EQ(y[1], 5.0);
    ad.target = "other";
    EXPECT_THROW(lora::lora_forward(layer, ad, Tensor({2}, {3, 5})), WiringError);
}

TEST(Merge, MatchesFactoredForwardAndKeepsWeightsWhenBIsZero) {
    Rng rng(2);
    nn::LinearLayer layer{"l", random_tensor(rng, {6, 5}), random_tensor(rng, {6})};
    lora::LoraAdapter ad{"l", random_tensor(rng, {3, 5}), random_tensor(rng, {6, 3}), 0.7};
    const nn::LinearLayer merged = lora::merge_lora(layer, ad);
    for (int i = 0; i < 100; ++i) {
        const Tensor x = random_tensor(rng, {5}, -3.0, 3.0);
        EXPECT_LE(max_abs_diff(nn::linear_forward(merged, x), lora::lora_forward(layer, ad, x)), 1e-9);
    }
    EXPECT_TRUE(bit_equal(*merged.bias, *layer.bias));
    ad.b = Tensor::zeros({6, 3});
    EXPECT_TRUE(bit_equal(lora::merge_lora(layer, ad).weight, layer.weight));
}

TEST(Count, FormulaExamples) {
    const std::vector<std::pair<std::size_t, std::size_t>> square{{256, 256}};
    EXPECT_EQ(lora::count_lora_params(square, 4), 2048);
    const std::vector<std::pair<std::size_t, std::size_t>> four(4, {64, 64});
    EXPECT_EQ(lora::count_lora_params(four, 4), 2048);
    EXPECT_THROW(lora::count_lora_params({}, 4), ContractError);
}

TEST(Attach, EncoderRankFourOnDefaultModel) {
    Model model(ModelConfig{}, 3);
    lora::LoraConfig cfg;
    cfg.rank_by_group[Group::image_encoder] = 4;
    const auto trainable = lora::attach_lora(model, cfg, 4);
    EXPECT_EQ(numel_of(model, trainable), 8192u);
    EXPECT_EQ(model.adapted_layers().size(), 16u);
    for (const auto& n : model.params().names()) EXPECT_FALSE(model.tensor(n).requires_grad()) << n;
    for (const auto& layer : model.adapted_layers()) {
        const auto ad = model.adapter(layer);
        for (double v : ad.b.data()) ASSERT_EQ(v, 0.0);
    }
}

TEST(Attach, EmptyConfigLeavesModelUnchanged) {
    const Model base(small_config(), 5);
    Model adapted = base;
    EXPECT_TRUE(lora::attach_lora(adapted, lora::LoraConfig{}, 6).empty());
    EXPECT_TRUE(bit_equal(run(base, 7), run(adapted, 7)));
}

TEST(Attach, UnknownGroupNameIsConfigError) {
    EXPECT_THROW(lora::parse_group("prompt_encoder"), ConfigError);
    EXPECT_EQ(lora::parse_group("memory_encoder"), Group::memory_encoder);
    EXPECT_THROW(lora::parse_strategy("everything"), ConfigError);
    for (auto s : lora::all_strategies()) EXPECT_EQ(lora::parse_strategy(lora::strategy_name(s)), s);
}

TEST(Attach, NeutralityCountAndRankOverRandomConfigs) {
    const Model base = jitter_model(Model(small_config(), 8), 9);
    const Tensor reference = run(base, 10);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const lora::LoraConfig cfg = random_config(rng);
        Model adapted = base;
        const auto trainable = lora::attach_lora(adapted, cfg, 100 + trial);
        EXPECT_TRUE(bit_equal(run(adapted, 10), reference)) << "trial " << trial;

        // Enumeration oracle: group the adapted layers by rank and sum the formula.
        std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> by_rank;
        for (const auto& site : adapted.linear_sites()) {
            if (!adapted.has_adapter(site.name)) continue;
            const auto ad = adapted.adapter(site.name);
            EXPECT_LT(ad.rank(), std::min(site.d_in, site.d_out)) << site.name;
            by_rank[ad.rank()].push_back({site.d_in, site.d_out});
        }
        std::int64_t expected = 0;
        for (const auto& [r, manifest] : by_rank) expected += lora::count_lora_params(manifest, r);
        EXPECT_EQ(static_cast<std::int64_t>(numel_of(adapted, trainable)), expected);
        EXPECT_EQ(trainable.size(), 2 * adapted.adapted_layers().size());
    }
}

TEST(Attach, MemoryEncoderProjectionsAreAdapted) {
    Model model(small_config(), 12);
    lora::LoraConfig cfg;
    cfg.rank_by_group[Group::memory_encoder] = 32;
    lora::attach_lora(model, cfg, 13);
    EXPECT_EQ(model.adapted_layers(), (std::vector<std::string>{"memory_encoder.feat_proj", "memory_encoder.out_proj"}));
    EXPECT_EQ(model.adapter("memory_encoder.out_proj").rank(), 7u);
}

TEST(Strategies, TrainableSets) {
    const Model base(small_config(), 14);
    Model none = base;
    EXPECT_TRUE(lora::select_trainable(none, Strategy::none, 1).empty());

    Model full = base;
    const auto full_names = lora::select_trainable(full, Strategy::full_memory, 1);
    std::size_t memory_params = 0;
    for (const auto& n : base.params().names())
        if (n.rfind("memory_attention.", 0) == 0 || n.rfind("memory_encoder.", 0) == 0)
            memory_params += base.params().at(n).numel();
    EXPECT_EQ(numel_of(full, full_names), memory_params);

    Model enc = base, mem = base, both = base;
    const auto e = lora::select_trainable(enc, Strategy::lora_enc, 1);
    const auto m = lora::select_trainable(mem, Strategy::lora_mem, 1);
    const auto em = lora::select_trainable(both, Strategy::lora_enc_mem, 1);
    std::set<std::string> ue(e.begin(), e.end()), um(m.begin(), m.end()), uem(em.begin(), em.end());
    std::set<std::string> joined = ue;
    joined.insert(um.begin(), um.end());
    EXPECT_EQ(joined.size(), ue.size() + um.size());
    EXPECT_EQ(joined, uem);
    EXPECT_EQ(numel_of(both, em), numel_of(enc, e) + numel_of(mem, m));

    Model mixed = base;
    const auto mx = lora::select_trainable(mixed, Strategy::lora_enc_full_memory, 1);
    EXPECT_EQ(numel_of(mixed, mx), numel_of(enc, e) + memory_params);
}

TEST(Isolation, GradientsReachOnlyTrainableTensors) {
    for (auto strategy : lora::all_strategies()) {
        Model model = jitter_model(Model(tiny_config(), 15), 16);
        const auto names = lora::select_trainable(model, strategy, 17);
        for (const auto& n : names) model.set_tensor(n, model.tensor(n).with_requires_grad(true));
        if (names.empty()) continue;
        Tape tape;
        tape.backward(weighted_sum(run(model, 18), 19));
        std::set<const void*> allowed;
        for (const auto& n : names) allowed.insert(model.tensor(n).storage_key());
        for (const auto& leaf : tape.leaves()) {
            EXPECT_TRUE(allowed.count(leaf.storage_key())) << lora::strategy_name(strategy);
        }
        for (const auto& n : model.tensor_names()) {
            if (!allowed.count(model.tensor(n).storage_key())) EXPECT_FALSE(tape.grad(model.tensor(n))) << n;
        }
    }
}

TEST(Isolation, AdaptedModelGradcheck) {
    Model model = jitter_model(Model(tiny_config(), 20), 21);
    const auto names = lora::select_trainable(model, Strategy::lora_enc_mem_dec, 22);
    model = jitter_model(model, 23, 0.1);
    Rng rng(24);
    const Tensor q = random_image(rng, 16);
    const std::vector<SupportItem> support{{random_image(rng, 16), random_mask(rng, 16)}};
    std::vector<Tensor> values;
    for (const auto& n : names) values.push_back(model.tensor(n));
    auto fn = [&](std::span<const Tensor> v) {
        Model m = model;
        for (std::size_t i = 0; i < names.size(); ++i) m.set_tensor(names[i], v[i]);
        return weighted_sum(segment(m, q, support).logits, 25);
    };
    const auto r = finite_difference_gradcheck(fn, values);
    EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
}

TEST(Merge, ModelLevelEquivalenceAndParameterCount) {
    Model model(small_config(), 30);
    const std::size_t before = model.param_count();
    lora::select_trainable(model, Strategy::lora_enc_mem_dec, 31);
    model = jitter_model(model, 32, 0.05);
    Model merged = model;
    merged.merge_adapters();
    EXPECT_TRUE(merged.merged());
    EXPECT_TRUE(merged.adapted_layers().empty());
    EXPECT_EQ(merged.param_count(), before);
    for (std::uint64_t s = 0; s < 5; ++s) EXPECT_LE(max_abs_diff(run(model, 40 + s), run(merged, 40 + s)), 1e-9);
}
