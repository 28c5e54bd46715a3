#include "fssam/train.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <numbers>
#include <thread>

#include <nlohmann/json.hpp>

#include "fssam/errors.hpp"
#include "fssam/eval.hpp"
#include "fssam/ops.hpp"

namespace fssam {

namespace {

std::atomic<bool> g_dice_mutation{false};

void require_match(const char* what, const Tensor& logits, const BinaryMask& target) {
    if (logits.rank() != 3 || logits.dim(0) != 1 || logits.dim(1) != target.height || logits.dim(2) != target.width) {
        throw ShapeError(std::string(what) + ": logits " + shape_str(logits.shape()) + " vs mask " +
                         std::to_string(target.height) + "x" + std::to_string(target.width));
    }
}

}  // namespace

void set_dice_mutation(bool enabled) { g_dice_mutation = enabled; }

Tensor bce_loss(const Tensor& logits, const BinaryMask& target) {
    require_match("bce_loss", logits, target);
    return ops::bce_with_logits(logits, target.to_tensor());
}

Tensor dice_loss(const Tensor& logits, const BinaryMask& target) {
    require_match("dice_loss", logits, target);
    const Tensor t = target.to_tensor();
    const Tensor p = ops::sigmoid(logits);
    const double factor = g_dice_mutation ? 1.0 : 2.0;
    const Tensor num = ops::add_scalar(ops::scale(ops::sum(ops::mul(p, t)), factor), 1.0);
    const Tensor den = ops::add_scalar(ops::sum(p), static_cast<double>(target.count()) + 1.0);
    return ops::add_scalar(ops::scale(ops::div(num, den), -1.0), 1.0);
}

Tensor combined_loss(const Tensor& logits, const BinaryMask& target, double w_bce, double w_dice) {
    if (!(w_bce >= 0.0) || !(w_dice >= 0.0)) throw ContractError("loss weights must be non-negative");
    return ops::add(ops::scale(bce_loss(logits, target), w_bce), ops::scale(dice_loss(logits, target), w_dice));
}

std::vector<Tensor> adamw_step(std::span<const Tensor> params, std::span<const Tensor> grads,
                               OptimizerState& state, const AdamWParams& h) {
    if (params.size() != grads.size()) {
        throw ContractError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                            std::to_string(grads.size()) + " gradients");
    }
    if (!(h.lr >= 0.0)) throw ContractError("adamw_step: negative learning rate");
    if (state.t == 0 && state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adamw_step: state does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape() || state.m[i].size() != params[i].numel()) {
            throw ContractError("adamw_step: parameter " + std::to_string(i) + " has shape " +
                                shape_str(params[i].shape()) + " but gradient " + shape_str(grads[i].shape()));
        }
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.m[i];
        auto& v = state.v[i];
        std::vector<double> next(params[i].numel());
        for (std::size_t j = 0; j < next.size(); ++j) {
            const double g = grads[i][j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
            const double decayed = params[i][j] * (1.0 - h.lr * h.weight_decay);
            next[j] = decayed - h.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + h.eps);
        }
        out.emplace_back(params[i].shape(), std::move(next));
    }
    return out;
}

double cosine_lr(long t, long total, double lr0, double lr_min) {
    if (t >= total) return lr_min;
    if (t <= 0) return lr0;
    const double frac = static_cast<double>(t) / static_cast<double>(total);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

void TrainConfig::validate() const {
    if (batch == 0) throw ConfigError("batch must be positive");
    if (!(lr >= 0.0) || !(lr_min >= 0.0) || lr_min > lr) throw ConfigError("need 0 <= lr_min <= lr");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in (0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(w_bce >= 0.0) || !(w_dice >= 0.0)) throw ConfigError("loss weights must be non-negative");
    if (train_k == 0) throw ConfigError("train_k must be positive");
    if (patience == 0) throw ConfigError("patience must be positive");
}

std::string log_record_json(const LogRecord& r) {
    nlohmann::ordered_json j;
    j["stage"] = r.stage;
    if (!r.note.empty()) {
        j["warning"] = r.note;
        return j.dump();
    }
    j["epoch"] = r.epoch;
    j["step"] = r.step;
    j["lr"] = r.lr;
    j["loss"] = r.loss;
    if (r.val_loss) j["val_loss"] = *r.val_loss;
    j["val_miou"] = r.val_miou ? nlohmann::ordered_json(*r.val_miou) : nlohmann::ordered_json(nullptr);
    return j.dump();
}

namespace {

struct Validation {
    double loss = 0.0;
    std::optional<double> miou;
};

/// Loss and gradients of one episode, on its own tape.
struct EpisodeGrad {
    double loss = 0.0;
    std::vector<std::vector<double>> grads;
};

EpisodeGrad episode_gradient(const Model& model, const std::vector<std::string>& names, const Episode& ep,
                             const TrainConfig& cfg) {
    Tape tape;
    const Tensor logits = segment(model, ep.query_image, ep.support).logits;
    const Tensor loss = combined_loss(logits, ep.query_mask, cfg.w_bce, cfg.w_dice);
    tape.backward(loss);
    EpisodeGrad out;
    out.loss = loss.item();
    for (const auto& n : names) {
        const Tensor& t = model.tensor(n);
        const auto g = tape.grad(t);
        out.grads.emplace_back(g ? std::vector<double>(g->data().begin(), g->data().end())
                                 : std::vector<double>(t.numel(), 0.0));
    }
    return out;
}

Validation validate(const Model& model, const EpisodeSource& source, const TrainConfig& cfg) {
    MetricsReport report;
    double loss = 0.0;
    for (std::size_t i = 0; i < cfg.val_episodes; ++i) {
        const Episode ep = source(i);
        const auto out = segment(model, ep.query_image, ep.support);
        loss += combined_loss(out.logits, ep.query_mask, cfg.w_bce, cfg.w_dice).item();
        iou_accumulate(report, ep.class_id, out.mask, ep.query_mask);
    }
    Validation v;
    v.loss = cfg.val_episodes ? loss / static_cast<double>(cfg.val_episodes) : 0.0;
    v.miou = miou(report);
    return v;
}

enum class Select { lowest_loss, highest_miou };

struct Loop {
    std::string stage;
    Select select;
    EpisodeSource train;
    EpisodeSource val;
    std::size_t episodes_per_epoch;
};

void emit(TrainResult& result, const LogSink& sink, LogRecord record) {
    if (sink) sink(record);
    result.log.push_back(std::move(record));
}

void run_loop(Model& model, const std::vector<std::string>& names, const Loop& loop, const TrainConfig& cfg,
              const LogSink& sink, TrainResult& result) {
    for (const auto& n : names) model.set_tensor(n, model.tensor(n).with_requires_grad(true));
    const long steps_per_epoch = static_cast<long>((loop.episodes_per_epoch + cfg.batch - 1) / cfg.batch);
    const long total = steps_per_epoch * static_cast<long>(cfg.epochs);
    OptimizerState state;
    AdamWParams h = cfg.adamw();

    double best_score = 0.0;
    bool have_best = false;
    std::size_t since_best = 0;
    long step = 0;
    std::size_t episode = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t epoch_count = 0;
        for (long s = 0; s < steps_per_epoch; ++s, ++step) {
            const std::size_t remaining = loop.episodes_per_epoch - static_cast<std::size_t>(s) * cfg.batch;
            const std::size_t b = std::min(cfg.batch, remaining);
            std::vector<EpisodeGrad> parts(b);
            const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, b));
            if (jobs == 1) {
                for (std::size_t i = 0; i < b; ++i) parts[i] = episode_gradient(model, names, loop.train(episode + i), cfg);
            } else {
                std::atomic<std::size_t> next{0};
                std::vector<std::exception_ptr> errors(b);
                std::vector<std::thread> workers;
                for (std::size_t w = 0; w < jobs; ++w) {
                    workers.emplace_back([&] {
                        for (std::size_t i = next++; i < b; i = next++) {
                            try {
                                parts[i] = episode_gradient(model, names, loop.train(episode + i), cfg);
                            } catch (...) {
                                errors[i] = std::current_exception();
                            }
                        }
                    });
                }
                for (auto& t : workers) t.join();
                for (auto& e : errors)
                    if (e) std::rethrow_exception(e);
            }
            episode += b;

            // Fixed summation order keeps the result independent of `jobs`.
            std::vector<Tensor> params, grads;
            double batch_loss = 0.0;
            for (std::size_t k = 0; k < names.size(); ++k) {
                std::vector<double> g(parts[0].grads[k].size(), 0.0);
                for (const auto& p : parts)
                    for (std::size_t j = 0; j < g.size(); ++j) g[j] += p.grads[k][j];
                for (auto& x : g) x /= static_cast<double>(b);
                params.push_back(model.tensor(names[k]));
                grads.emplace_back(params.back().shape(), std::move(g));
            }
            for (const auto& p : parts) batch_loss += p.loss;
            batch_loss /= static_cast<double>(b);
            if (!std::isfinite(batch_loss)) {
                throw TrainingError(loop.stage + ": non-finite loss at step " + std::to_string(step), step);
            }
            epoch_loss += batch_loss * static_cast<double>(b);
            epoch_count += b;

            h.lr = cosine_lr(step, total, cfg.lr, cfg.lr_min);
            const auto updated = adamw_step(params, grads, state, h);
            for (std::size_t k = 0; k < names.size(); ++k) model.set_tensor(names[k], updated[k].with_requires_grad(true));
        }

        const Validation v = validate(model, loop.val, cfg);
        LogRecord rec;
        rec.stage = loop.stage;
        rec.epoch = static_cast<long>(epoch);
        rec.step = step;
        rec.lr = h.lr;
        rec.loss = epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0;
        rec.val_loss = v.loss;
        rec.val_miou = v.miou;
        emit(result, sink, rec);
        if (!std::isfinite(v.loss)) throw TrainingError(loop.stage + ": non-finite validation loss at step " + std::to_string(step), step);

        const double score = loop.select == Select::lowest_loss ? -v.loss : v.miou.value_or(0.0);
        if (!have_best || score > best_score) {
            have_best = true;
            best_score = score;
            since_best = 0;
            result.checkpoint.model = model;
            result.checkpoint.epoch = static_cast<long>(epoch);
            result.checkpoint.best_val_miou = v.miou.value_or(0.0);
        } else if (++since_best >= cfg.patience) {
            result.stopped_early = true;
            break;
        }
    }
    if (have_best) {
        result.checkpoint.model.freeze_all();
    } else {
        result.checkpoint.model = model;
    }
}

std::size_t numel_of(const Model& model, const std::vector<std::string>& names) {
    std::size_t n = 0;
    for (const auto& name : names) n += model.tensor(name).numel();
    return n;
}

std::size_t default_epoch_size(const SyntheticConfig& synth, const std::vector<int>& classes, const TrainConfig& cfg) {
    return cfg.episodes_per_epoch ? cfg.episodes_per_epoch : synth.images_per_class * classes.size();
}

}  // namespace

TrainResult pretrain_base(Model model, const SyntheticConfig& synth, const std::vector<int>& classes,
                          const TrainConfig& cfg, const LogSink& sink) {
    cfg.validate();
    synth.validate();
    if (synth.image_size != model.config().image_size) {
        throw ConfigError("synthetic image_size " + std::to_string(synth.image_size) + " differs from model image_size " +
                          std::to_string(model.config().image_size));
    }
    TrainResult result{Checkpoint{model, 0.0, 0, false, "pretrain"}, {}, {}, 0, false};
    result.trainable = model.tensor_names();
    result.trainable_count = numel_of(model, result.trainable);
    const Loop loop{"pretrain", Select::lowest_loss,
                    synthetic_source(synth, classes, cfg.train_k, Similarity::video_like, derive_seed(cfg.seed, 1)),
                    synthetic_source(synth, classes, 1, Similarity::video_like, derive_seed(cfg.seed, 2)),
                    default_epoch_size(synth, classes, cfg)};
    run_loop(model, result.trainable, loop, cfg, sink, result);
    return result;
}

TrainResult meta_train(Model model, lora::Strategy strategy, const SyntheticConfig& synth,
                       const std::vector<int>& train_classes, const std::vector<int>& val_classes,
                       const TrainConfig& cfg, const LogSink& sink) {
    cfg.validate();
    synth.validate();
    for (int c : val_classes) {
        if (std::count(train_classes.begin(), train_classes.end(), c)) {
            throw ProtocolError("class " + std::to_string(c) + " is both a training and a validation class");
        }
    }
    const std::string name(lora::strategy_name(strategy));
    TrainResult result{Checkpoint{model, 0.0, 0, false, name}, {}, {}, 0, false};
    if (strategy == lora::Strategy::none || cfg.epochs == 0) {
        LogRecord note;
        note.stage = "metatrain";
        note.note = strategy == lora::Strategy::none ? "strategy none selects no parameters; model returned unchanged"
                                                     : "epochs is 0; model returned unchanged";
        emit(result, sink, note);
        return result;
    }
    result.trainable = lora::select_trainable(model, strategy, cfg.seed);
    result.trainable_count = numel_of(model, result.trainable);
    const Loop loop{"metatrain", Select::highest_miou,
                    synthetic_source(synth, train_classes, cfg.train_k, Similarity::independent,
                                     derive_seed(cfg.seed, 3)),
                    synthetic_source(synth, val_classes, 1, Similarity::independent, derive_seed(cfg.seed, 4)),
                    default_epoch_size(synth, train_classes, cfg)};
    run_loop(model, result.trainable, loop, cfg, sink, result);
    result.checkpoint.strategy = name;
    return result;
}

}  // namespace fssam
