#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "protodensity/datagen.hpp"
#include "protodensity/losses.hpp"
#include "protodensity/model.hpp"

namespace protodensity {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double learning_rate = 1e-2;
    double beta1 = 0.95;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Decoupled (AdamW-style); applied only where a parameter opts in.
    double weight_decay = 5e-4;

    void validate() const;
};

struct AdamMoments {
    Tensor m;
    Tensor v;
};

/// One bias-corrected Adam update of `value` at 1-based step `t`.
void adam_update(Tensor& value, const Tensor& grad, AdamMoments& moments, std::size_t t,
                 const AdamConfig& config, bool decay);

class Adam {
public:
    explicit Adam(AdamConfig config);

    /// The parameter must outlive the optimizer and stay at the same address.
    void add(Parameter& param, bool decay);
    /// Updates every trainable parameter from its grad; non-trainable ones are skipped.
    void step();
    void zero_grad();
    std::size_t steps() const { return t_; }
    const AdamConfig& config() const { return config_; }

private:
    struct Slot {
        Parameter* param;
        bool decay;
        AdamMoments moments;
    };

    AdamConfig config_;
    std::vector<Slot> slots_;
    std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Extractor pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
    std::size_t epochs = 12;
    double learning_rate = 2e-3;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PretrainResult {
    FeatureExtractor extractor;   // frozen
    double initial_mse = 0.0;     // train split, before the first update
    double final_mse = 0.0;       // train split, after the last epoch
    std::vector<double> epoch_mse;  // mean batch loss per epoch
};

/// Trains the extractor plus a temporary 1x1 density head on density MSE,
/// then discards the head and freezes the extractor.
PretrainResult pretrain_extractor(const Dataset& dataset, const PretrainConfig& config);

// ---------------------------------------------------------------------------
// Prototype model training
// ---------------------------------------------------------------------------

struct TrainConfig {
    AdamConfig adam;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 500;
    std::size_t projection_interval = 100;
    // Early stop once validation MAE has not improved by min_delta for this
    // many consecutive epochs. 0 disables early stopping.
    std::size_t patience = 50;
    double min_delta = 0.01;
    std::uint64_t seed = 0;
    LossConfig loss;
    // After every projection, refit theta by least squares on the train split.
    // theta enters only the density term, so this minimizes the total loss
    // over theta with everything else fixed.
    bool refit_head = true;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossReport loss;       // mean over the epoch's batches
    double val_mae = 0.0;  // NaN when there is no validation split
};

struct ProjectionEvent {
    std::size_t epoch = 0;
    std::vector<Provenance> records;
};

struct TrainHistory {
    LossReport initial_loss;  // full train split, before training
    LossReport final_loss;    // full train split, shipped (projected) model
    std::vector<LossReport> steps;
    std::vector<EpochRecord> epochs;
    std::vector<ProjectionEvent> projections;
    std::string stop_reason;
};

std::string steps_csv(const TrainHistory& history);
/// `epoch,density,proto_feature,diversity,total,val_mae`
std::string history_csv(const TrainHistory& history);
/// `epoch,prototype_id,image_id,h,w,distance_before`
std::string projections_csv(const TrainHistory& history);

struct TrainCallbacks {
    /// Runs after every projection with the projected model.
    std::function<void(std::size_t epoch, const CountModel&)> on_projection;
};

/// Extractor output for each sample, in order.
std::vector<Tensor> cache_features(const FeatureExtractor& extractor,
                                   std::span<const Sample> samples);

/// Full-batch loss report over the given samples.
LossReport evaluate_loss(const CountModel& model, std::span<const Tensor> features,
                         std::span<const Sample> samples, const LossConfig& config);

/// Replace every prototype with its nearest processed feature vector over all
/// given images and locations (squared L2, first in scan order on ties).
std::vector<Provenance> project_prototypes(CountModel& model, std::span<const Tensor> features,
                                           std::span<const Sample> samples);
std::vector<Provenance> project_prototypes(CountModel& model, const Dataset& dataset);

/// theta <- argmin sum over samples and pixels of (sum_i theta_i S_i - gt)^2,
/// with prototypes and processing layer held fixed.
void refit_head(CountModel& model, std::span<const Tensor> features,
                std::span<const Sample> samples);

/// Requires a frozen extractor. On a non-finite loss the model is restored to
/// its last good parameters and NumericError is thrown.
TrainHistory train(CountModel& model, const Dataset& dataset, const TrainConfig& config,
                   const TrainCallbacks& callbacks = {});

} // namespace protodensity
