#include "fssam/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "fssam/errors.hpp"

namespace fssam {

std::optional<double> ClassCounts::iou() const {
    if (union_ == 0) return std::nullopt;
    return static_cast<double>(intersection) / static_cast<double>(union_);
}

void MetricsReport::merge(const MetricsReport& other) {
    for (const auto& [c, counts] : other.per_class) {
        auto& mine = per_class[c];
        mine.intersection += counts.intersection;
        mine.union_ += counts.union_;
    }
    n_episodes += other.n_episodes;
}

void iou_accumulate(MetricsReport& report, int class_id, const BinaryMask& predicted, const BinaryMask& truth) {
    if (predicted.height != truth.height || predicted.width != truth.width) {
        throw ContractError("iou_accumulate: predicted mask " + std::to_string(predicted.height) + "x" +
                            std::to_string(predicted.width) + " vs truth " + std::to_string(truth.height) + "x" +
                            std::to_string(truth.width));
    }
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < truth.bits.size(); ++i) {
        const bool p = predicted.bits[i] != 0, t = truth.bits[i] != 0;
        inter += p && t;
        uni += p || t;
    }
    auto& counts = report.per_class[class_id];
    counts.intersection += inter;
    counts.union_ += uni;
}

std::optional<double> miou(const MetricsReport& report, const std::vector<int>& classes,
                           std::vector<std::string>* warnings) {
    double total = 0.0;
    std::size_t n = 0;
    for (int c : classes) {
        auto it = report.per_class.find(c);
        const auto iou = it == report.per_class.end() ? std::nullopt : it->second.iou();
        if (!iou) {
            if (warnings) warnings->push_back("class " + std::to_string(c) + " has zero union; excluded from mIoU");
            continue;
        }
        total += *iou;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

std::optional<double> miou(const MetricsReport& report, std::vector<std::string>* warnings) {
    std::vector<int> classes;
    for (const auto& [c, counts] : report.per_class) classes.push_back(c);
    return miou(report, classes, warnings);
}

Predictor model_predictor(const Model& model) {
    return [&model](const Episode& ep) { return segment(model, ep.query_image, ep.support).mask; };
}

Predictor oracle_predictor() {
    return [](const Episode& ep) { return ep.query_mask; };
}

Predictor background_predictor() {
    return [](const Episode& ep) { return BinaryMask(ep.query_mask.height, ep.query_mask.width); };
}

EpisodeSource index_source(const DatasetIndex& index, std::vector<int> classes, std::size_t k, SamplerKind sampler,
                           std::uint64_t seed) {
    return [&index, classes = std::move(classes), k, sampler, seed](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        return materialize(index, draw_episode(sampler, index, classes, k, rng));
    };
}

EpisodeSource synthetic_source(SyntheticConfig cfg, std::vector<int> classes, std::size_t k, Similarity similarity,
                               std::uint64_t seed) {
    if (classes.empty()) throw ConfigError("synthetic_source: no classes");
    cfg.distractor_pool = classes;
    return [cfg = std::move(cfg), classes = std::move(classes), k, similarity, seed](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        const int c = classes[rng.below(classes.size())];
        return generate_synthetic_episode(cfg, c, k, similarity, rng);
    };
}

EpisodeSource identity_support(EpisodeSource source) {
    return [source = std::move(source)](std::size_t i) {
        Episode ep = source(i);
        ep.support = {{ep.query_image, ep.query_mask}};
        ep.support_ids = {ep.query_id};
        return ep;
    };
}

namespace {

template <class E>
[[noreturn]] void rethrow_with_index(const E& e, std::size_t i) {
    throw E("episode " + std::to_string(i) + ": " + e.what());
}

void run_episode(const Predictor& predict, const EpisodeSource& source, std::size_t i, MetricsReport& out) {
    try {
        const Episode ep = source(i);
        iou_accumulate(out, ep.class_id, predict(ep), ep.query_mask);
        ++out.n_episodes;
    } catch (const SamplingError& e) {
        rethrow_with_index(e, i);
    } catch (const IngestionError& e) {
        rethrow_with_index(e, i);
    }
}

}  // namespace

MetricsReport evaluate(const Predictor& predict, const EpisodeSource& source, std::size_t n_episodes,
                       std::size_t jobs) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n_episodes));
    MetricsReport report;
    if (jobs == 1) {
        for (std::size_t i = 0; i < n_episodes; ++i) run_episode(predict, source, i, report);
        return report;
    }
    std::vector<MetricsReport> partial(jobs);
    std::atomic<std::size_t> next{0};
    std::mutex failure_lock;
    std::size_t failed_at = n_episodes;
    std::exception_ptr failure;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t i = next++; i < n_episodes; i = next++) {
                try {
                    run_episode(predict, source, i, partial[w]);
                } catch (...) {
                    std::lock_guard lock(failure_lock);
                    if (i < failed_at) {
                        failed_at = i;
                        failure = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
    for (const auto& p : partial) report.merge(p);
    return report;
}

namespace {

MetricsReport run_fold(const Predictor& predict, const EpisodeSource& source, const FoldEval& spec,
                       std::string mode, std::size_t k) {
    if (spec.classes.empty()) throw ConfigError("fold " + std::to_string(spec.fold) + " has no test classes");
    MetricsReport report = evaluate(predict, source, spec.n_episodes, spec.jobs);
    // Every fold class is listed, so unsampled ones surface as zero-union.
    for (int c : spec.classes) report.per_class.try_emplace(c);
    report.fold = spec.fold;
    report.k = k;
    report.seed = spec.seed;
    report.mode = std::move(mode);
    miou(report, &report.warnings);
    return report;
}

}  // namespace

MetricsReport evaluate_fold(const Predictor& predict, const DatasetIndex& test_index, const FoldEval& spec) {
    return run_fold(predict, index_source(test_index, spec.classes, spec.k, spec.sampler, spec.seed), spec,
                    "standard", spec.k);
}

MetricsReport evaluate_identity_support(const Predictor& predict, const DatasetIndex& test_index,
                                        const FoldEval& spec) {
    return run_fold(predict, identity_support(index_source(test_index, spec.classes, 1, spec.sampler, spec.seed)),
                    spec, "identity", 1);
}

MetricsReport evaluate_domain_shift(const Predictor& predict, const std::vector<int>& train_classes,
                                    const DatasetIndex& shifted_index, const FoldEval& spec) {
    const std::set<int> train(train_classes.begin(), train_classes.end());
    for (int c : spec.classes) {
        if (train.count(c)) {
            throw ProtocolError("domain shift: class " + std::to_string(c) + " is both a training and a test class");
        }
    }
    return run_fold(predict, index_source(shifted_index, spec.classes, spec.k, spec.sampler, spec.seed), spec,
                    "shift", spec.k);
}

std::string report_to_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["fold"] = report.fold;
    j["K"] = report.k;
    j["n_episodes"] = report.n_episodes;
    j["seed"] = report.seed;
    j["mode"] = report.mode;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& [c, counts] : report.per_class) {
        nlohmann::ordered_json e;
        e["intersection"] = counts.intersection;
        e["union"] = counts.union_;
        const auto iou = counts.iou();
        e["iou"] = iou ? nlohmann::ordered_json(*iou) : nlohmann::ordered_json(nullptr);
        per[std::to_string(c)] = e;
    }
    j["per_class"] = per;
    const auto m = miou(report);
    j["miou"] = m ? nlohmann::ordered_json(*m) : nlohmann::ordered_json(nullptr);
    j["warnings"] = report.warnings;
    return j.dump(2) + "\n";
}

MetricsReport report_from_json(const std::string& text) {
    MetricsReport r;
    try {
        const auto j = nlohmann::json::parse(text);
        r.fold = j.at("fold").get<int>();
        r.k = j.at("K").get<std::size_t>();
        r.n_episodes = j.at("n_episodes").get<std::size_t>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.mode = j.at("mode").get<std::string>();
        for (const auto& [key, e] : j.at("per_class").items()) {
            r.per_class[std::stoi(key)] = {e.at("intersection").get<std::uint64_t>(), e.at("union").get<std::uint64_t>()};
        }
        r.warnings = j.value("warnings", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError(std::string("malformed report: ") + e.what());
    }
    return r;
}

std::string report_to_csv(const MetricsReport& report) {
    std::ostringstream out;
    out << "class_id,intersection,union,iou\n";
    for (const auto& [c, counts] : report.per_class) {
        out << c << ',' << counts.intersection << ',' << counts.union_ << ',';
        if (const auto iou = counts.iou()) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6f", *iou);
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace fssam
