#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fssam/data.hpp"
#include "fssam/mask.hpp"
#include "fssam/model.hpp"

namespace fssam {

struct ClassCounts {
    std::uint64_t intersection = 0;
    std::uint64_t union_ = 0;

    /// intersection / union; nullopt for an empty union.
    std::optional<double> iou() const;
    bool operator==(const ClassCounts&) const = default;
};

/// Pixel counts accumulated over episodes, per class.
struct MetricsReport {
    std::map<int, ClassCounts> per_class;
    std::size_t n_episodes = 0;
    int fold = -1;
    std::size_t k = 1;
    std::uint64_t seed = 0;
    std::string mode = "standard";
    std::vector<std::string> warnings;

    /// Adds another report's counts and episode total.
    void merge(const MetricsReport& other);
    bool operator==(const MetricsReport&) const = default;
};

/// Adds |pred & truth| and |pred | truth| to the class accumulators.
void iou_accumulate(MetricsReport& report, int class_id, const BinaryMask& predicted, const BinaryMask& truth);

/// Mean IoU over `classes`. Classes whose union is zero are skipped and a
/// warning is appended to `warnings` when given. nullopt when nothing is left.
std::optional<double> miou(const MetricsReport& report, const std::vector<int>& classes,
                           std::vector<std::string>* warnings = nullptr);
/// Mean over every class present in the report.
std::optional<double> miou(const MetricsReport& report, std::vector<std::string>* warnings = nullptr);

using Predictor = std::function<BinaryMask(const Episode&)>;
using EpisodeSource = std::function<Episode(std::size_t index)>;

Predictor model_predictor(const Model& model);
/// Answers with the ground truth.
Predictor oracle_predictor();
Predictor background_predictor();

/// Episode i draws from Rng(derive_seed(seed, i)).
EpisodeSource index_source(const DatasetIndex& index, std::vector<int> classes, std::size_t k, SamplerKind sampler,
                           std::uint64_t seed);
/// Class uniform over `classes`, then a generated episode.
EpisodeSource synthetic_source(SyntheticConfig cfg, std::vector<int> classes, std::size_t k, Similarity similarity,
                               std::uint64_t seed);
/// Replaces the support by the query itself (K = 1).
EpisodeSource identity_support(EpisodeSource source);

/// Runs n episodes over `jobs` threads; partial reports are summed, so the
/// result does not depend on `jobs`. Failures name the episode index.
MetricsReport evaluate(const Predictor& predict, const EpisodeSource& source, std::size_t n_episodes,
                       std::size_t jobs = 1);

struct FoldEval {
    int fold = 0;
    std::vector<int> classes;
    std::size_t k = 1;
    std::size_t n_episodes = 1000;
    SamplerKind sampler = SamplerKind::query_first;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
};

MetricsReport evaluate_fold(const Predictor& predict, const DatasetIndex& test_index, const FoldEval& spec);
MetricsReport evaluate_identity_support(const Predictor& predict, const DatasetIndex& test_index,
                                        const FoldEval& spec);
/// Fold evaluation on an index drawn from another distribution. Throws
/// ProtocolError when a training class appears among the test classes.
MetricsReport evaluate_domain_shift(const Predictor& predict, const std::vector<int>& train_classes,
                                    const DatasetIndex& shifted_index, const FoldEval& spec);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);
/// class_id,intersection,union,iou
std::string report_to_csv(const MetricsReport& report);

}  // namespace fssam
