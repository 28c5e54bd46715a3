#include "fssam/nn.hpp"

#include <cmath>

#include "fssam/errors.hpp"
#include "fssam/ops.hpp"

namespace fssam::nn {

namespace {

std::string join(std::string_view prefix, std::string_view leaf) {
    std::string s(prefix);
    s += '.';
    s += leaf;
    return s;
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return Tensor(std::move(shape), std::move(data));
}

Tensor conv_layer(const Tensor& x, const LayerProvider& layers, std::string_view name, std::size_t stride,
                  std::size_t padding) {
    const Tensor y = ops::conv2d(x, layers.param(join(name, "weight")), stride, padding);
    return ops::add_channel_bias(y, layers.param(join(name, "bias")));
}

Tensor conv_transpose_layer(const Tensor& x, const LayerProvider& layers, std::string_view name,
                            std::size_t stride) {
    const Tensor y = ops::conv_transpose2d(x, layers.param(join(name, "weight")), stride);
    return ops::add_channel_bias(y, layers.param(join(name, "bias")));
}

Tensor norm(const Tensor& x, const LayerProvider& layers, std::string_view name) {
    return ops::layer_norm(x, layers.param(join(name, "gamma")), layers.param(join(name, "beta")), kLayerNormEps);
}

}  // namespace

Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
    if (x.rank() == 0 || x.shape().back() != layer.d_in()) {
        throw ShapeError("linear " + layer.name + ": input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(layer.weight.shape()));
    }
    Tensor y = ops::matmul_bt(x, layer.weight);
    if (layer.bias) y = ops::add_row_bias(y, *layer.bias);
    return y;
}

void ParameterSet::add(std::string name, Tensor value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
}

void ParameterSet::set(std::string_view name, Tensor value) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter " + std::string(name));
    auto& slot = values_[it->second];
    if (slot.shape() != value.shape()) {
        throw ShapeError("parameter " + std::string(name) + ": cannot replace " + shape_str(slot.shape()) +
                         " with " + shape_str(value.shape()));
    }
    slot = std::move(value);
}

bool ParameterSet::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

const Tensor& ParameterSet::at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ContractError("unknown parameter " + std::string(name));
    return values_[it->second];
}

std::size_t ParameterSet::numel() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
}

LinearLayer ParameterSet::linear(std::string_view name) const {
    LinearLayer layer{std::string(name), at(join(name, "weight")), std::nullopt};
    const auto bias = join(name, "bias");
    if (contains(bias)) layer.bias = at(bias);
    return layer;
}

Tensor PlainLayers::linear(std::string_view name, const Tensor& x) const {
    return linear_forward(params_.linear(name), x);
}

void AttentionSpec::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("attention: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    }
}

Tensor patchify(const Tensor& image, std::size_t patch) {
    if (image.rank() != 3 || patch == 0 || image.dim(1) % patch != 0 || image.dim(2) % patch != 0) {
        throw ShapeError("patch_embed: image " + shape_str(image.shape()) + " not divisible into " +
                         std::to_string(patch) + "-pixel patches");
    }
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const std::size_t gh = h / patch, gw = w / patch;
    std::vector<std::size_t> index;
    index.reserve(image.numel());
    for (std::size_t pr = 0; pr < gh; ++pr)
        for (std::size_t pc = 0; pc < gw; ++pc)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x)
                        index.push_back(ch * h * w + (pr * patch + y) * w + pc * patch + x);
    return ops::gather(image, std::move(index), {gh * gw, c * patch * patch});
}

Tensor patch_embed(const Tensor& image, std::size_t patch, const LinearLayer& proj) {
    return linear_forward(proj, patchify(image, patch));
}

Tensor patch_embed(const Tensor& image, std::size_t patch, const LayerProvider& layers, std::string_view name) {
    return layers.linear(name, patchify(image, patch));
}

Tensor multi_head_attention(const Tensor& q_tokens, const Tensor& kv_tokens, const AttentionSpec& spec,
                            const LayerProvider& layers, std::string_view prefix) {
    spec.validate();
    if (q_tokens.rank() != 2 || kv_tokens.rank() != 2 || q_tokens.dim(1) != spec.d_model ||
        kv_tokens.dim(1) != spec.d_model) {
        throw ShapeError("attention " + std::string(prefix) + ": tokens " + shape_str(q_tokens.shape()) + " / " +
                         shape_str(kv_tokens.shape()) + " do not match d_model " + std::to_string(spec.d_model));
    }
    const Tensor q = layers.linear(join(prefix, "q"), q_tokens);
    const Tensor k = layers.linear(join(prefix, "k"), kv_tokens);
    const Tensor v = layers.linear(join(prefix, "v"), kv_tokens);
    const std::size_t hd = spec.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<Tensor> heads;
    heads.reserve(spec.n_heads);
    for (std::size_t h = 0; h < spec.n_heads; ++h) {
        const Tensor qh = spec.n_heads == 1 ? q : ops::slice_cols(q, h * hd, hd);
        const Tensor kh = spec.n_heads == 1 ? k : ops::slice_cols(k, h * hd, hd);
        const Tensor vh = spec.n_heads == 1 ? v : ops::slice_cols(v, h * hd, hd);
        const Tensor weights = ops::softmax(ops::scale(ops::matmul_bt(qh, kh), inv_sqrt), 1);
        heads.push_back(ops::matmul(weights, vh));
    }
    const Tensor merged = spec.n_heads == 1 ? heads.front() : ops::concat_cols(heads);
    return layers.linear(join(prefix, "o"), merged);
}

Tensor sinusoidal_positions(std::size_t h, std::size_t w, std::size_t d_model) {
    if (d_model == 0 || d_model % 4 != 0) {
        throw ShapeError("sinusoidal_positions: d_model " + std::to_string(d_model) + " not divisible by 4");
    }
    const std::size_t quarter = d_model / 4;
    std::vector<double> freq(quarter);
    for (std::size_t k = 0; k < quarter; ++k) {
        freq[k] = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
    }
    std::vector<double> data(h * w * d_model);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double* row = data.data() + (r * w + c) * d_model;
            for (std::size_t k = 0; k < quarter; ++k) {
                const double ar = static_cast<double>(r) * freq[k];
                const double ac = static_cast<double>(c) * freq[k];
                row[k] = std::sin(ar);
                row[quarter + k] = std::cos(ar);
                row[2 * quarter + k] = std::sin(ac);
                row[3 * quarter + k] = std::cos(ac);
            }
        }
    }
    return Tensor({h * w, d_model}, std::move(data));
}

Tensor transformer_block(const Tensor& tokens, const Tensor* context, const AttentionSpec& spec,
                         const LayerProvider& layers, std::string_view prefix) {
    Tensor x = tokens;
    const Tensor a = norm(x, layers, join(prefix, "ln1"));
    x = ops::add(x, multi_head_attention(a, a, spec, layers, join(prefix, "self_attn")));
    if (context) {
        const Tensor c = norm(x, layers, join(prefix, "ln_cross"));
        x = ops::add(x, multi_head_attention(c, *context, spec, layers, join(prefix, "cross_attn")));
    }
    const Tensor m = norm(x, layers, join(prefix, "ln2"));
    const Tensor hidden = ops::gelu(layers.linear(join(prefix, "mlp.fc1"), m));
    return ops::add(x, layers.linear(join(prefix, "mlp.fc2"), hidden));
}

Tensor tokens_to_grid(const Tensor& tokens, std::size_t h, std::size_t w) {
    if (tokens.rank() != 2 || tokens.dim(0) != h * w) {
        throw ShapeError("tokens " + shape_str(tokens.shape()) + " do not form a " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
    }
    return ops::reshape(ops::transpose(tokens), {tokens.dim(1), h, w});
}

Tensor grid_to_tokens(const Tensor& grid) {
    if (grid.rank() != 3) throw ShapeError("grid_to_tokens: expected [C x H x W], got " + shape_str(grid.shape()));
    return ops::transpose(ops::reshape(grid, {grid.dim(0), grid.dim(1) * grid.dim(2)}));
}

Tensor upsample_decode_stack(const Tensor& tokens, std::size_t h, std::size_t w, std::size_t target_h,
                             std::size_t target_w, const LayerProvider& layers, std::string_view prefix) {
    if (target_h < h || target_w < w) {
        throw ShapeError("upsample_decode_stack: target " + std::to_string(target_h) + "x" +
                         std::to_string(target_w) + " smaller than grid " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
    Tensor x = tokens_to_grid(tokens, h, w);
    x = ops::relu(conv_transpose_layer(x, layers, join(prefix, "up0"), 2));
    x = ops::relu(conv_transpose_layer(x, layers, join(prefix, "up1"), 2));
    x = conv_layer(x, layers, join(prefix, "head"), 1, 0);
    return ops::bilinear_resize(x, target_h, target_w);
}

void init_linear(ParameterSet& params, const std::string& name, std::size_t d_in, std::size_t d_out, Rng& rng,
                 bool bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    params.add(name + ".weight", uniform_tensor({d_out, d_in}, bound, rng));
    if (bias) params.add(name + ".bias", Tensor::zeros({d_out}));
}

void init_conv(ParameterSet& params, const std::string& name, std::size_t c_in, std::size_t c_out, std::size_t k,
               Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
    params.add(name + ".weight", uniform_tensor({c_out, c_in, k, k}, bound, rng));
    params.add(name + ".bias", Tensor::zeros({c_out}));
}

void init_conv_transpose(ParameterSet& params, const std::string& name, std::size_t c_in, std::size_t c_out,
                         std::size_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(c_in));
    params.add(name + ".weight", uniform_tensor({c_in, c_out, k, k}, bound, rng));
    params.add(name + ".bias", Tensor::zeros({c_out}));
}

void init_layer_norm(ParameterSet& params, const std::string& name, std::size_t d) {
    params.add(name + ".gamma", Tensor::ones({d}));
    params.add(name + ".beta", Tensor::zeros({d}));
}

void init_attention(ParameterSet& params, const std::string& prefix, std::size_t d, Rng& rng) {
    init_linear(params, prefix + ".q", d, d, rng);
    init_linear(params, prefix + ".k", d, d, rng, false);
    init_linear(params, prefix + ".v", d, d, rng);
    init_linear(params, prefix + ".o", d, d, rng);
}

void init_transformer_block(ParameterSet& params, const std::string& prefix, std::size_t d, bool cross, Rng& rng) {
    init_layer_norm(params, prefix + ".ln1", d);
    init_attention(params, prefix + ".self_attn", d, rng);
    if (cross) {
        init_layer_norm(params, prefix + ".ln_cross", d);
        init_attention(params, prefix + ".cross_attn", d, rng);
    }
    init_layer_norm(params, prefix + ".ln2", d);
    init_linear(params, prefix + ".mlp.fc1", d, 4 * d, rng);
    init_linear(params, prefix + ".mlp.fc2", 4 * d, d, rng);
}

void init_decode_stack(ParameterSet& params, const std::string& prefix, std::size_t d, Rng& rng) {
    if (d % 4 != 0) throw ConfigError("decode stack width " + std::to_string(d) + " not divisible by 4");
    init_conv_transpose(params, prefix + ".up0", d, d / 2, 2, rng);
    init_conv_transpose(params, prefix + ".up1", d / 2, d / 4, 2, rng);
    init_conv(params, prefix + ".head", d / 4, 1, 1, rng);
}

}  // namespace fssam::nn
