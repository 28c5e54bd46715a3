#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fssam/rng.hpp"
#include "fssam/tensor.hpp"

namespace fssam::nn {

/// Affine map y = x W^T + b over the trailing axis.
struct LinearLayer {
    std::string name;
    Tensor weight;  // [d_out x d_in]
    std::optional<Tensor> bias;

    std::size_t d_in() const { return weight.dim(1); }
    std::size_t d_out() const { return weight.dim(0); }
};

Tensor linear_forward(const LinearLayer& layer, const Tensor& x);

/// Name-addressed parameter store. Insertion order is preserved and is the
/// canonical order for checkpoints and optimizer state.
class ParameterSet {
public:
    void add(std::string name, Tensor value);
    void set(std::string_view name, Tensor value);
    bool contains(std::string_view name) const;
    const Tensor& at(std::string_view name) const;

    const std::vector<std::string>& names() const noexcept { return names_; }
    std::size_t size() const noexcept { return names_.size(); }
    std::size_t numel() const;

    /// `<name>.weight` plus `<name>.bias` when present.
    LinearLayer linear(std::string_view name) const;

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Source of parameters and linear maps for the blocks below. Model weights
/// implement it so that adapted layers can intercept `linear`.
class LayerProvider {
public:
    virtual ~LayerProvider() = default;
    virtual const Tensor& param(std::string_view name) const = 0;
    virtual Tensor linear(std::string_view name, const Tensor& x) const = 0;
};

/// Plain provider over a ParameterSet.
class PlainLayers final : public LayerProvider {
public:
    explicit PlainLayers(const ParameterSet& params) : params_(params) {}
    const Tensor& param(std::string_view name) const override { return params_.at(name); }
    Tensor linear(std::string_view name, const Tensor& x) const override;

private:
    const ParameterSet& params_;
};

struct AttentionSpec {
    std::size_t d_model = 0;
    std::size_t n_heads = 1;

    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;
};

inline constexpr double kLayerNormEps = 1e-5;

/// image[C x H x W] -> [(H/p * W/p) x C*p*p] without projection.
Tensor patchify(const Tensor& image, std::size_t patch);

/// image[3 x H x W] -> [(H/p * W/p) x d_model], patches in row-major order,
/// each flattened channel-major before projection through `proj`.
Tensor patch_embed(const Tensor& image, std::size_t patch, const LinearLayer& proj);
/// Same, with the projection resolved through a provider.
Tensor patch_embed(const Tensor& image, std::size_t patch, const LayerProvider& layers, std::string_view name);

/// Projections are resolved as `<prefix>.q`, `.k`, `.v`, `.o`.
Tensor multi_head_attention(const Tensor& q_tokens, const Tensor& kv_tokens, const AttentionSpec& spec,
                            const LayerProvider& layers, std::string_view prefix);

/// Row coordinate in channels [0, d/2), column in [d/2, d); each half holds
/// d/4 sines followed by d/4 cosines with frequencies 10000^(-k/(d/4)).
Tensor sinusoidal_positions(std::size_t h, std::size_t w, std::size_t d_model);

/// Pre-norm block. Parameters under `prefix`: ln1, self_attn, [ln_cross,
/// cross_attn], ln2, mlp.fc1, mlp.fc2.
Tensor transformer_block(const Tensor& tokens, const Tensor* context, const AttentionSpec& spec,
                         const LayerProvider& layers, std::string_view prefix);

/// tokens[(h*w) x d] -> logits[1 x target_h x target_w]. Parameters under
/// `prefix`: up0, up1 (transposed convs), head (1x1 conv).
Tensor upsample_decode_stack(const Tensor& tokens, std::size_t h, std::size_t w, std::size_t target_h,
                             std::size_t target_w, const LayerProvider& layers, std::string_view prefix);

/// tokens[(h*w) x d] <-> grid[d x h x w]
Tensor tokens_to_grid(const Tensor& tokens, std::size_t h, std::size_t w);
Tensor grid_to_tokens(const Tensor& grid);

// Initializers. Weights are uniform in +-1/sqrt(fan_in), biases zero, norms
// unit gain.
void init_linear(ParameterSet& params, const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng,
                 bool bias = true);
void init_conv(ParameterSet& params, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
               Rng& rng);
void init_conv_transpose(ParameterSet& params, const std::string& name, std::size_t c_in, std::size_t c_out,
                         std::size_t k, Rng& rng);
void init_layer_norm(ParameterSet& params, const std::string& name, std::size_t d);
/// The key projection has no bias: it would shift every score of a query
/// row equally and receive an identically zero gradient.
void init_attention(ParameterSet& params, const std::string& prefix, std::size_t d, Rng& rng);
void init_transformer_block(ParameterSet& params, const std::string& prefix, std::size_t d, bool cross, Rng& rng);
void init_decode_stack(ParameterSet& params, const std::string& prefix, std::size_t d, Rng& rng);

}  // namespace fssam::nn
