#include <gtest/gtest.h>

#include <numeric>

#include "fssam/errors.hpp"
#include "fssam/gradcheck.hpp"
#include "fssam/nn.hpp"
#include "support.hpp"

using namespace fssam;
using namespace fssam::testing;

namespace {

nn::ParameterSet block_params(std::size_t d, bool cross, std::uint64_t seed) {
    Rng rng(seed);
    nn::ParameterSet p;
    nn::init_transformer_block(p, "blk", d, cross, rng);
    return jitter(p, seed + 1);
}

Tensor rows(const Tensor& t, const std::vector<std::size_t>& order) {
    const std::size_t d = t.dim(1);
    std::vector<double> out;
    for (auto r : order)
        for (std::size_t c = 0; c < d; ++c) out.push_back(t[r * d + c]);
    return Tensor({order.size(), d}, out);
}

}  // namespace

TEST(Linear, IdentityZeroInputAndHandValues) {
    nn::LinearLayer eye{"eye", Tensor({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2})};
    const Tensor x({1, 2}, {3, -4});
    EXPECT_TRUE(bit_equal(nn::linear_forward(eye, x), x));

    nn::LinearLayer l{"l", Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {1, 1})};
    const Tensor at_zero = nn::linear_forward(l, Tensor::zeros({1, 2}));
    EXPECT_EQ(at_zero[0], 1.0);
    EXPECT_EQ(at_zero[1], 1.0);
    const Tensor y = nn::linear_forward(l, Tensor({2}, {1, 1}));
    EXPECT_EQ(y[0], 4.0);
    EXPECT_EQ(y[1], 8.0);
    EXPECT_THROW(nn::linear_forward(l, Tensor::zeros({3})), ShapeError);
}

TEST(PatchEmbed, TokenCountLocalityAndZero) {
    Rng rng(3);
    nn::ParameterSet p;
    nn::init_linear(p, "proj", 3 * 8 * 8, 16, rng);
    const auto proj = p.linear("proj");
    const Tensor img = random_tensor(rng, {3, 64, 64});
    const Tensor tokens = nn::patch_embed(img, 8, proj);
    EXPECT_EQ(tokens.shape(), (Shape{64, 16}));

    std::vector<double> changed(img.data().begin(), img.data().end());
    changed[1 * 64 * 64 + 20 * 64 + 43] += 1.0;  // row 20, col 43 -> patch (2, 5)
    const Tensor other = nn::patch_embed(Tensor({3, 64, 64}, changed), 8, proj);
    for (std::size_t t = 0; t < 64; ++t) {
        bool differs = false;
        for (std::size_t c = 0; c < 16; ++c) differs = differs || other[t * 16 + c] != tokens[t * 16 + c];
        EXPECT_EQ(differs, t == 2 * 8 + 5) << "token " << t;
    }

    const Tensor zero = nn::patch_embed(Tensor::zeros({3, 64, 64}), 8, proj);
    for (double v : zero.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(nn::patch_embed(Tensor::zeros({3, 60, 64}), 8, proj), ShapeError);
}

TEST(Attention, SingleKeyGivesOutputOfValue) {
    Rng rng(5);
    nn::ParameterSet p;
    nn::init_attention(p, "att", 8, rng);
    p = jitter(p, 6);
    nn::PlainLayers layers(p);
    const nn::AttentionSpec spec{8, 2};
    const Tensor q = random_tensor(rng, {5, 8});
    const Tensor kv = random_tensor(rng, {1, 8});
    const Tensor out = nn::multi_head_attention(q, kv, spec, layers, "att");
    const Tensor expected = layers.linear("att.o", layers.linear("att.v", kv));
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out[r * 8 + c], expected[c], 1e-12);
}

TEST(Attention, KvDuplicationAndPermutationInvariance) {
    Rng rng(7);
    nn::ParameterSet p;
    nn::init_attention(p, "att", 8, rng);
    p = jitter(p, 8);
    nn::PlainLayers layers(p);
    const nn::AttentionSpec spec{8, 4};
    const Tensor q = random_tensor(rng, {4, 8});
    const Tensor kv = random_tensor(rng, {6, 8});
    const Tensor base = nn::multi_head_attention(q, kv, spec, layers, "att");
    for (std::size_t m : {2u, 3u}) {
        std::vector<Tensor> copies(m, kv);
        const Tensor dup = nn::multi_head_attention(q, ops::concat_rows(copies), spec, layers, "att");
        EXPECT_LE(max_abs_diff(base, dup), 1e-9);
    }
    const Tensor perm = nn::multi_head_attention(q, rows(kv, {3, 0, 5, 1, 4, 2}), spec, layers, "att");
    EXPECT_LE(max_abs_diff(base, perm), 1e-9);
    EXPECT_THROW(nn::multi_head_attention(q, random_tensor(rng, {2, 4}), spec, layers, "att"), ShapeError);
}

TEST(Positions, NormOriginAndDistinctness) {
    const std::size_t d = 16;
    const Tensor pe = nn::sinusoidal_positions(64, 64, d);
    for (std::size_t r = 0; r < 64 * 64; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += pe[r * d + c] * pe[r * d + c];
        ASSERT_NEAR(std::sqrt(s), std::sqrt(d / 2.0), 1e-12);
    }
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(pe[k], 0.0);
        EXPECT_EQ(pe[4 + k], 1.0);
        EXPECT_EQ(pe[8 + k], 0.0);
        EXPECT_EQ(pe[12 + k], 1.0);
    }
    // Exhaustive pairwise check over the 64x64 grid.
    double closest = 1e300;
    for (std::size_t a = 0; a < 64 * 64; ++a)
        for (std::size_t b = a + 1; b < 64 * 64; ++b) {
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = pe[a * d + c] - pe[b * d + c];
                s += diff * diff;
            }
            closest = std::min(closest, s);
        }
    EXPECT_GT(closest, 1e-12);
    EXPECT_THROW(nn::sinusoidal_positions(4, 4, 10), ShapeError);
}

TEST(TransformerBlock, ZeroedOutputProjectionsGiveIdentity) {
    auto p = block_params(8, true, 11);
    for (const char* n : {"blk.self_attn.o", "blk.cross_attn.o", "blk.mlp.fc2"}) {
        p.set(std::string(n) + ".weight", Tensor::zeros(p.at(std::string(n) + ".weight").shape()));
        p.set(std::string(n) + ".bias", Tensor::zeros(p.at(std::string(n) + ".bias").shape()));
    }
    nn::PlainLayers layers(p);
    Rng rng(12);
    const Tensor x = random_tensor(rng, {4, 8});
    const Tensor ctx = random_tensor(rng, {6, 8});
    EXPECT_TRUE(bit_equal(nn::transformer_block(x, &ctx, {8, 2}, layers, "blk"), x));
}

TEST(TransformerBlock, ContextEqualToTokensAddsOneSelfAttentionPass) {
    auto p = block_params(8, true, 13);
    nn::PlainLayers layers(p);
    Rng rng(14);
    const Tensor x = random_tensor(rng, {5, 8});
    const nn::AttentionSpec spec{8, 2};
    const Tensor via_block = nn::transformer_block(x, &x, spec, layers, "blk");

    auto norm = [&](const Tensor& t, const std::string& n) {
        return ops::layer_norm(t, p.at(n + ".gamma"), p.at(n + ".beta"), nn::kLayerNormEps);
    };
    Tensor h = x;
    const Tensor a = norm(h, "blk.ln1");
    h = ops::add(h, nn::multi_head_attention(a, a, spec, layers, "blk.self_attn"));
    h = ops::add(h, nn::multi_head_attention(norm(h, "blk.ln_cross"), x, spec, layers, "blk.cross_attn"));
    const Tensor m = norm(h, "blk.ln2");
    h = ops::add(h, layers.linear("blk.mlp.fc2", ops::gelu(layers.linear("blk.mlp.fc1", m))));
    EXPECT_LE(max_abs_diff(via_block, h), 1e-12);
}

TEST(TransformerBlock, GradcheckSmallBlock) {
    const auto p = block_params(8, true, 17);
    Rng rng(18);
    const Tensor x = random_tensor(rng, {4, 8});
    const Tensor ctx = random_tensor(rng, {6, 8});
    auto fn = [&](std::span<const Tensor> v) {
        const auto params = with_values(p, v.subspan(2));
        nn::PlainLayers layers(params);
        return weighted_sum(nn::transformer_block(v[0], &v[1], {8, 2}, layers, "blk"), 19);
    };
    std::vector<Tensor> all{x, ctx};
    for (auto& t : values_of(p)) all.push_back(t);
    const auto r = finite_difference_gradcheck(fn, all);
    EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
    EXPECT_GT(r.checked, 1000u);
}

TEST(DecodeStack, ShapeZeroAndGradcheck) {
    Rng rng(21);
    nn::ParameterSet p;
    nn::init_decode_stack(p, "dec", 8, rng);
    nn::PlainLayers layers(p);
    const Tensor out = nn::upsample_decode_stack(random_tensor(rng, {64, 8}), 8, 8, 64, 64, layers, "dec");
    EXPECT_EQ(out.shape(), (Shape{1, 64, 64}));

    const Tensor zero = nn::upsample_decode_stack(Tensor::zeros({64, 8}), 8, 8, 64, 64, layers, "dec");
    for (double v : zero.data()) ASSERT_EQ(v, 0.0);
    EXPECT_THROW(nn::upsample_decode_stack(Tensor::zeros({64, 8}), 8, 8, 4, 64, layers, "dec"), ShapeError);

    const auto jp = jitter(p, 22, 0.1);
    auto fn = [&](std::span<const Tensor> v) {
        const auto params = with_values(jp, v.subspan(1));
        nn::PlainLayers l(params);
        return weighted_sum(nn::upsample_decode_stack(v[0], 2, 2, 12, 12, l, "dec"), 23);
    };
    std::vector<Tensor> all{random_tensor(rng, {4, 8})};
    for (auto& t : values_of(jp)) all.push_back(t);
    const auto r = finite_difference_gradcheck(fn, all);
    EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
    EXPECT_GT(r.checked, 100u);
}

TEST(Blocks, ShapePreservationOverRandomDraws) {
    Rng rng(31);
    for (int draw = 0; draw < 1000; ++draw) {
        const std::size_t heads = 1 + rng.below(2);
        const std::size_t d = 4 * heads * (1 + rng.below(2));
        const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(6);
        const bool cross = rng.below(2) == 1;
        nn::ParameterSet p;
        nn::init_transformer_block(p, "b", d, cross, rng);
        nn::PlainLayers layers(p);
        const Tensor x = random_tensor(rng, {n, d});
        const Tensor ctx = random_tensor(rng, {m, d});
        const nn::AttentionSpec spec{d, heads};
        ASSERT_EQ(nn::transformer_block(x, cross ? &ctx : nullptr, spec, layers, "b").shape(), x.shape());
        ASSERT_EQ(nn::multi_head_attention(x, ctx, spec, layers, "b.self_attn").shape(), x.shape());

        const std::size_t gh = 1 + rng.below(3), gw = 1 + rng.below(3);
        const std::size_t th = 4 * gh + rng.below(5), tw = 4 * gw + rng.below(5);
        nn::ParameterSet dp;
        nn::init_decode_stack(dp, "d", d, rng);
        nn::PlainLayers dl(dp);
        ASSERT_EQ(nn::upsample_decode_stack(random_tensor(rng, {gh * gw, d}), gh, gw, th, tw, dl, "d").shape(),
                  (Shape{1, th, tw}));

        const std::size_t patch = 1 + rng.below(4);
        const Tensor img = random_tensor(rng, {3, patch * gh, patch * gw});
        nn::ParameterSet pp;
        nn::init_linear(pp, "pe", 3 * patch * patch, d, rng);
        ASSERT_EQ(nn::patch_embed(img, patch, pp.linear("pe")).shape(), (Shape{gh * gw, d}));
    }
}

TEST(ParameterSet, NamesAreUniqueAndShapesFixed) {
    nn::ParameterSet p;
    p.add("a", Tensor::zeros({2}));
    EXPECT_THROW(p.add("a", Tensor::zeros({2})), ContractError);
    EXPECT_THROW(p.set("a", Tensor::zeros({3})), ShapeError);
    EXPECT_THROW(p.at("b"), ContractError);
}
