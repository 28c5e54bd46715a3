#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fssam/data.hpp"
#include "fssam/lora.hpp"
#include "fssam/mask.hpp"
#include "fssam/model.hpp"
#include "fssam/tensor.hpp"

namespace fssam {

/// Mean binary cross-entropy of logits[1 x H x W] against the mask.
Tensor bce_loss(const Tensor& logits, const BinaryMask& target);
/// 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1) with p = sigmoid(logits).
Tensor dice_loss(const Tensor& logits, const BinaryMask& target);
Tensor combined_loss(const Tensor& logits, const BinaryMask& target, double w_bce, double w_dice);

/// Fault injection for the verify suite: while enabled, dice_loss drops the
/// factor 2 from its numerator.
void set_dice_mutation(bool enabled);

struct AdamWParams {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

/// Moments aligned with the parameter list passed to adamw_step.
struct OptimizerState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long t = 0;
};

/// Decoupled AdamW: theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
/// Returns the updated parameters; the state advances by one step.
std::vector<Tensor> adamw_step(std::span<const Tensor> params, std::span<const Tensor> grads,
                               OptimizerState& state, const AdamWParams& h);

/// Cosine decay from lr0 at t = 0 to lr_min at t = total; lr_min beyond.
double cosine_lr(long t, long total, double lr0, double lr_min);

struct TrainConfig {
    std::size_t epochs = 50;
    double lr = 1e-4;
    std::size_t batch = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-2;
    double eps = 1e-8;
    double lr_min = 0.0;
    double w_bce = 1.0;
    double w_dice = 1.0;
    /// 0 means images_per_class times the number of training classes.
    std::size_t episodes_per_epoch = 0;
    std::size_t patience = 10;
    std::size_t train_k = 1;
    std::size_t val_episodes = 64;
    std::uint64_t seed = 0;
    /// Threads computing per-episode gradients inside a batch.
    std::size_t jobs = 1;

    void validate() const;
    AdamWParams adamw() const { return {lr, beta1, beta2, eps, weight_decay}; }
};

/// One evaluation point, or a notice when `note` is set.
struct LogRecord {
    std::string stage;
    long epoch = 0;
    long step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_miou;
    std::string note;
};

using LogSink = std::function<void(const LogRecord&)>;

std::string log_record_json(const LogRecord& record);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LogRecord> log;
    std::vector<std::string> trainable;
    std::size_t trainable_count = 0;
    bool stopped_early = false;
};

/// Trains every parameter on video-like episodes of `classes` and keeps the
/// model with the lowest validation loss.
TrainResult pretrain_base(Model model, const SyntheticConfig& synth, const std::vector<int>& classes,
                          const TrainConfig& cfg, const LogSink& sink = {});

/// Trains the strategy's parameters on independent episodes of
/// `train_classes`, validating mIoU on `val_classes` after every epoch, and
/// keeps the best model. Stops after `patience` epochs without improvement.
TrainResult meta_train(Model model, lora::Strategy strategy, const SyntheticConfig& synth,
                       const std::vector<int>& train_classes, const std::vector<int>& val_classes,
                       const TrainConfig& cfg, const LogSink& sink = {});

}  // namespace fssam
