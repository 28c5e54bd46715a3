#include "fssam/lora.hpp"

#include <array>
#include <cmath>

#include "fssam/errors.hpp"
#include "fssam/model.hpp"
#include "fssam/ops.hpp"

namespace fssam::lora {

namespace {

constexpr std::array<std::pair<Group, std::string_view>, 4> kGroups{{
    {Group::image_encoder, "image_encoder"},
    {Group::memory_attention, "memory_attention"},
    {Group::memory_encoder, "memory_encoder"},
    {Group::mask_decoder, "mask_decoder"},
}};

constexpr std::array<std::pair<Strategy, std::string_view>, 7> kStrategies{{
    {Strategy::none, "none"},
    {Strategy::full_memory, "full_memory"},
    {Strategy::lora_mem, "lora_mem"},
    {Strategy::lora_enc, "lora_enc"},
    {Strategy::lora_enc_mem, "lora_enc_mem"},
    {Strategy::lora_enc_mem_dec, "lora_enc_mem_dec"},
    {Strategy::lora_enc_full_memory, "lora_enc_full_memory"},
}};

constexpr std::array<Strategy, 7> kStrategyList{Strategy::none,         Strategy::full_memory,
                                                Strategy::lora_mem,     Strategy::lora_enc,
                                                Strategy::lora_enc_mem, Strategy::lora_enc_mem_dec,
                                                Strategy::lora_enc_full_memory};

bool is_memory(Group g) { return g == Group::memory_attention || g == Group::memory_encoder; }

}  // namespace

std::string_view group_name(Group g) {
    for (const auto& [k, v] : kGroups)
        if (k == g) return v;
    return "?";
}

Group parse_group(std::string_view name) {
    for (const auto& [k, v] : kGroups)
        if (v == name) return k;
    throw ConfigError("unknown LoRA group '" + std::string(name) + "'");
}

std::optional<Group> group_of(std::string_view name) {
    const auto head = name.substr(0, name.find('.'));
    for (const auto& [k, v] : kGroups)
        if (v == head) return k;
    return std::nullopt;
}

char projection_letter(Projection p) {
    switch (p) {
        case Projection::Q: return 'Q';
        case Projection::K: return 'K';
        case Projection::V: return 'V';
        case Projection::O: return 'O';
    }
    return '?';
}

Projection parse_projection(std::string_view name) {
    if (name.size() == 1) {
        switch (name[0]) {
            case 'q': case 'Q': return Projection::Q;
            case 'k': case 'K': return Projection::K;
            case 'v': case 'V': return Projection::V;
            case 'o': case 'O': return Projection::O;
            default: break;
        }
    }
    throw ConfigError("unknown projection kind '" + std::string(name) + "'");
}

void LoraConfig::validate() const {
    for (const auto& [g, r] : rank_by_group) {
        if (r == 0) throw ConfigError("LoRA rank for " + std::string(group_name(g)) + " must be positive");
    }
    if (!std::isfinite(scale)) throw ConfigError("LoRA scale must be finite");
}

Tensor lora_forward(const nn::LinearLayer& layer, const LoraAdapter& adapter, const Tensor& x) {
    if (adapter.target != layer.name) {
        throw WiringError("adapter for '" + adapter.target + "' applied to layer '" + layer.name + "'");
    }
    if (adapter.a.rank() != 2 || adapter.b.rank() != 2 || adapter.a.dim(1) != layer.d_in() ||
        adapter.b.dim(0) != layer.d_out() || adapter.b.dim(1) != adapter.a.dim(0)) {
        throw WiringError("adapter for '" + adapter.target + "' has shapes " + shape_str(adapter.a.shape()) + ", " +
                          shape_str(adapter.b.shape()) + " incompatible with " + shape_str(layer.weight.shape()));
    }
    const Tensor base = nn::linear_forward(layer, x);
    const Tensor low = ops::matmul_bt(ops::matmul_bt(x, adapter.a), adapter.b);
    return ops::add(base, adapter.scale == 1.0 ? low : ops::scale(low, adapter.scale));
}

nn::LinearLayer merge_lora(const nn::LinearLayer& layer, const LoraAdapter& adapter) {
    if (adapter.target != layer.name) {
        throw WiringError("adapter for '" + adapter.target + "' merged into layer '" + layer.name + "'");
    }
    const Tensor delta = ops::matmul(adapter.b, adapter.a);
    nn::LinearLayer out = layer;
    out.weight = ops::add(layer.weight, adapter.scale == 1.0 ? delta : ops::scale(delta, adapter.scale));
    return out;
}

std::int64_t count_lora_params(std::span<const std::pair<std::size_t, std::size_t>> manifest, std::size_t rank) {
    if (manifest.empty()) throw ContractError("count_lora_params: empty manifest");
    std::int64_t n = 0;
    for (const auto& [d_in, d_out] : manifest) n += static_cast<std::int64_t>(rank * (d_in + d_out));
    return n;
}

std::size_t effective_rank(std::size_t requested, std::size_t d_in, std::size_t d_out) {
    const std::size_t cap = std::min(d_in, d_out);
    return std::max<std::size_t>(1, std::min(requested, cap > 1 ? cap - 1 : 1));
}

std::vector<std::string> attach_lora(Model& model, const LoraConfig& config, std::uint64_t seed) {
    config.validate();
    for (const auto& [g, r] : config.rank_by_group) {
        bool present = false;
        for (const auto& site : model.linear_sites()) present = present || site.group == g;
        if (!present) throw ConfigError("model has no group " + std::string(group_name(g)));
    }

    LoraConfig merged = model.lora_config();
    if (!model.adapted_layers().empty() && merged.scale != config.scale) {
        throw ConfigError("LoRA scale differs from the adapters already attached");
    }
    merged.targets = config.targets;
    merged.scale = config.scale;
    for (const auto& [g, r] : config.rank_by_group) merged.rank_by_group[g] = r;

    model.freeze_all();
    Rng rng(derive_seed(seed, 0x10a4));
    std::vector<std::string> trainable;
    for (const auto& site : model.linear_sites()) {
        auto it = config.rank_by_group.find(site.group);
        if (it == config.rank_by_group.end()) continue;
        const bool targeted =
            site.projection ? config.targets.count(*site.projection) != 0 : site.group == Group::memory_encoder;
        if (!targeted) continue;
        if (model.has_adapter(site.name)) throw ContractError("layer " + site.name + " already has an adapter");

        const std::size_t r = effective_rank(it->second, site.d_in, site.d_out);
        const double bound = 1.0 / std::sqrt(static_cast<double>(site.d_in));
        std::vector<double> a(r * site.d_in);
        for (auto& v : a) v = rng.uniform(-bound, bound);
        model.add_adapter(site.name, Tensor({r, site.d_in}, std::move(a)), Tensor::zeros({site.d_out, r}));
        trainable.push_back(site.name + ".lora_a");
        trainable.push_back(site.name + ".lora_b");
    }
    model.set_lora_config(std::move(merged));
    return trainable;
}

std::string_view strategy_name(Strategy s) {
    for (const auto& [k, v] : kStrategies)
        if (k == s) return v;
    return "?";
}

Strategy parse_strategy(std::string_view name) {
    for (const auto& [k, v] : kStrategies)
        if (v == name) return k;
    throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

std::span<const Strategy> all_strategies() { return kStrategyList; }

LoraConfig strategy_lora_config(Strategy s) {
    LoraConfig cfg;
    const bool enc = s == Strategy::lora_enc || s == Strategy::lora_enc_mem || s == Strategy::lora_enc_mem_dec ||
                     s == Strategy::lora_enc_full_memory;
    const bool mem = s == Strategy::lora_mem || s == Strategy::lora_enc_mem || s == Strategy::lora_enc_mem_dec;
    if (enc) cfg.rank_by_group[Group::image_encoder] = kEncoderRank;
    if (mem) {
        cfg.rank_by_group[Group::memory_attention] = kMemoryRank;
        cfg.rank_by_group[Group::memory_encoder] = kMemoryRank;
    }
    if (s == Strategy::lora_enc_mem_dec) cfg.rank_by_group[Group::mask_decoder] = kDecoderRank;
    return cfg;
}

std::vector<std::string> select_trainable(Model& model, Strategy strategy, std::uint64_t seed) {
    std::vector<std::string> names;
    const LoraConfig cfg = strategy_lora_config(strategy);
    if (!cfg.rank_by_group.empty()) {
        names = attach_lora(model, cfg, seed);
    } else {
        model.freeze_all();
    }
    if (strategy == Strategy::full_memory || strategy == Strategy::lora_enc_full_memory) {
        for (const auto& n : model.params().names()) {
            const auto g = group_of(n);
            if (g && is_memory(*g)) names.push_back(n);
        }
    }
    return names;
}

}  // namespace fssam::lora
