#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fssam/data.hpp"
#include "fssam/model.hpp"
#include "fssam/train.hpp"

namespace fssam::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitTraining = 2;
inline constexpr int kExitUsage = 64;
inline constexpr int kExitNoInput = 66;

/// Everything a command may read, after defaults, the config file and the
/// command-line flags have been layered (flag > file > default).
struct RunConfig {
    ModelConfig model;
    SyntheticConfig synth;
    TrainConfig pretrain;
    TrainConfig metatrain;
    std::size_t n_folds = 4;
    int fold = 0;
    std::size_t k = 1;
    std::uint64_t seed = 0;
    std::string strategy = "lora_enc_mem";
    std::string mode = "standard";
    SamplerKind sampler = SamplerKind::query_first;
    std::size_t jobs = 1;
    std::size_t episodes = 1000;
    std::filesystem::path out = "runs";
    std::filesystem::path data;
    std::filesystem::path ckpt;

    FoldSpec folds() const;
};

/// The full default document; every accepted key appears in it.
nlohmann::ordered_json default_config_json();

/// Overlays `overrides` on the defaults. Throws ConfigError naming the first
/// unknown key or ill-typed value.
RunConfig resolve_config(const nlohmann::json& overrides);

/// Path of `name` inside the output directory. Throws ConfigError when the
/// name would escape it.
std::filesystem::path output_path(const std::filesystem::path& out, const std::string& name);

/// Entry point shared by the executable and the tests; returns the exit code.
int run(const std::vector<std::string>& args);

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Fast invariant suite behind `fssam verify`.
std::vector<CheckResult> run_verify_checks(bool verbose);

}  // namespace fssam::cli
