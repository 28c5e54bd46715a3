#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fssam/lora.hpp"
#include "fssam/mask.hpp"
#include "fssam/nn.hpp"

namespace fssam {

struct ModelConfig {
    std::size_t image_size = 64;
    std::size_t patch = 8;
    std::size_t d_model = 64;
    std::size_t enc_depth = 4;
    std::size_t n_heads = 4;
    std::size_t mem_depth = 2;
    std::size_t d_mem = 32;

    /// Input resolution of the full-size architecture this toy stands in for.
    static constexpr std::size_t kReferenceImageSize = 1024;

    std::size_t grid() const { return image_size / patch; }
    nn::AttentionSpec attention() const { return {d_model, n_heads}; }
    /// Throws ConfigError naming the first violated constraint.
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct FeatureMap {
    Tensor tokens;  // [(h*w) x d_model]
    std::size_t h = 0;
    std::size_t w = 0;
};

struct MemoryBank {
    Tensor tokens;  // [(K*h*w) x d_mem]
    std::vector<std::size_t> boundaries;

    std::size_t frames() const { return boundaries.size(); }
};

struct SegmentationOutput {
    Tensor logits;  // [1 x H x W]
    BinaryMask mask;
};

struct Checkpoint;

/// One linear layer of the model together with the group it belongs to and
/// its attention projection kind, if any.
struct LinearSite {
    std::string name;
    lora::Group group;
    std::optional<lora::Projection> projection;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

/// Parameters, adapters and configuration of one segmentation network.
///
/// Adapter tensors are addressed as `<layer>.lora_a` / `<layer>.lora_b` and
/// live next to the base parameters; `tensor()` and `set_tensor()` reach
/// both. Training marks the tensors it updates as grad-enabled leaves.
class Model final : public nn::LayerProvider {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return cfg_; }
    const nn::ParameterSet& params() const noexcept { return params_; }
    const nn::ParameterSet& adapter_params() const noexcept { return adapter_params_; }
    const lora::LoraConfig& lora_config() const noexcept { return lora_; }
    bool merged() const noexcept { return merged_; }

    const Tensor& param(std::string_view name) const override { return params_.at(name); }
    Tensor linear(std::string_view name, const Tensor& x) const override;

    bool has_tensor(std::string_view name) const;
    const Tensor& tensor(std::string_view name) const;
    void set_tensor(std::string_view name, Tensor value);
    /// Base parameter names followed by adapter tensor names.
    std::vector<std::string> tensor_names() const;
    std::size_t param_count() const { return params_.numel(); }

    std::vector<LinearSite> linear_sites() const;
    bool has_adapter(std::string_view layer) const;
    lora::LoraAdapter adapter(std::string_view layer) const;
    std::vector<std::string> adapted_layers() const;

    /// Used by attach_lora.
    void add_adapter(const std::string& layer, Tensor a, Tensor b);
    void set_lora_config(lora::LoraConfig cfg) { lora_ = std::move(cfg); }

    /// Folds every adapter into its base weight and drops the adapters.
    void merge_adapters();
    /// Restores flags after loading a checkpoint.
    void set_merged(bool merged) { merged_ = merged; }

    /// Every tensor back to a plain leaf without gradients.
    void freeze_all();

private:
    friend Checkpoint load_checkpoint(const std::filesystem::path& path);
    Model() = default;

    ModelConfig cfg_;
    nn::ParameterSet params_;
    nn::ParameterSet adapter_params_;
    std::vector<std::string> adapted_;
    lora::LoraConfig lora_;
    bool merged_ = false;
};

FeatureMap encode_image(const Model& model, const Tensor& image);
/// Memory tokens [(h*w) x d_mem] of one support frame.
Tensor encode_memory(const Model& model, const FeatureMap& feat, const BinaryMask& mask);
MemoryBank build_memory_bank(std::span<const Tensor> entries, std::size_t h, std::size_t w);
FeatureMap memory_attend(const Model& model, const FeatureMap& query, const MemoryBank& bank);
SegmentationOutput decode_mask(const Model& model, const FeatureMap& conditioned);

struct SupportItem {
    Tensor image;
    BinaryMask mask;
};

SegmentationOutput segment(const Model& model, const Tensor& query_image, std::span<const SupportItem> support);

/// Everything a run persists: weights, adapters, configuration and the
/// bookkeeping used by early stopping.
struct Checkpoint {
    Model model;
    double best_val_miou = 0.0;
    long epoch = 0;
    /// Marks a plumbing checkpoint whose predictions are the ground truth.
    bool oracle = false;
    std::string strategy = "none";
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws IngestionError on a missing or malformed file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fssam
