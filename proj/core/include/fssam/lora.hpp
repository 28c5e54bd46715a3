#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fssam/nn.hpp"

namespace fssam {
class Model;
}

namespace fssam::lora {

enum class Projection { Q, K, V, O };

enum class Group { image_encoder, memory_attention, memory_encoder, mask_decoder };

std::string_view group_name(Group g);
/// Throws ConfigError for names outside the four groups.
Group parse_group(std::string_view name);
/// Group owning a parameter or layer, from the first path component.
std::optional<Group> group_of(std::string_view name);

char projection_letter(Projection p);
Projection parse_projection(std::string_view name);

/// Low-rank update scale * B A routed to one linear layer.
struct LoraAdapter {
    std::string target;
    Tensor a;  // [r x d_in]
    Tensor b;  // [d_out x r]
    double scale = 1.0;

    std::size_t rank() const { return a.dim(0); }
};

struct LoraConfig {
    std::set<Projection> targets{Projection::Q, Projection::K, Projection::V, Projection::O};
    std::map<Group, std::size_t> rank_by_group;
    double scale = 1.0;

    void validate() const;
};

/// W x + b + scale * B (A x). Throws WiringError when the adapter belongs to
/// another layer.
Tensor lora_forward(const nn::LinearLayer& layer, const LoraAdapter& adapter, const Tensor& x);

/// Plain layer with W' = W + scale * B A and the same bias.
nn::LinearLayer merge_lora(const nn::LinearLayer& layer, const LoraAdapter& adapter);

/// Sum over layers of r * (d_in + d_out).
std::int64_t count_lora_params(std::span<const std::pair<std::size_t, std::size_t>> manifest, std::size_t rank);

/// Rank actually used for a d_in -> d_out layer: the requested rank, capped
/// so that it stays strictly below min(d_in, d_out).
std::size_t effective_rank(std::size_t requested, std::size_t d_in, std::size_t d_out);

/// Adds one adapter (A uniform in +-1/sqrt(d_in), B zero) to every linear
/// layer of the configured groups whose projection kind is targeted; memory
/// encoder projections are adapted whenever that group is configured. Base
/// parameters are left without gradients. Returns the adapter tensor names,
/// which are exactly the trainable set.
std::vector<std::string> attach_lora(Model& model, const LoraConfig& config, std::uint64_t seed);

enum class Strategy { none, full_memory, lora_mem, lora_enc, lora_enc_mem, lora_enc_mem_dec, lora_enc_full_memory };

inline constexpr std::size_t kEncoderRank = 4;
inline constexpr std::size_t kMemoryRank = 32;
inline constexpr std::size_t kDecoderRank = 32;

std::string_view strategy_name(Strategy s);
/// Throws ConfigError for unknown names.
Strategy parse_strategy(std::string_view name);
std::span<const Strategy> all_strategies();

/// LoRA groups a strategy adapts (empty for none / full_memory).
LoraConfig strategy_lora_config(Strategy s);

/// Applies the strategy to the model (attaching adapters where needed) and
/// returns the names of every tensor that training may update.
std::vector<std::string> select_trainable(Model& model, Strategy strategy, std::uint64_t seed);

}  // namespace fssam::lora
