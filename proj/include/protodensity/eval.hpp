#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "protodensity/datagen.hpp"
#include "protodensity/interp.hpp"
#include "protodensity/model.hpp"
#include "protodensity/training.hpp"

namespace protodensity {

struct ImageResult {
    std::uint64_t id = 0;
    double true_count = 0.0;
    double predicted_count = 0.0;
    double abs_error = 0.0;
};

struct EvalReport {
    std::vector<ImageResult> images;
    double mae = 0.0;
};

using CountPredictor = std::function<double(const Sample&)>;

EvalReport mae(const CountPredictor& predictor, std::span<const Sample> samples);
EvalReport mae(const CountModel& model, std::span<const Sample> samples);
EvalReport mae(const CountModel& model, std::span<const Tensor> features,
               std::span<const Sample> samples);

/// MAE on the test split of always predicting the mean train-split count.
double train_mean_baseline(const Dataset& dataset);

/// `id,true_count,predicted_count,abs_error`
std::string eval_csv(const EvalReport& report);

/// Even sizes take the mean of the two middle values.
double median(std::span<const double> values);

struct LocalizationRates {
    // Fraction of each group's prototypes whose top-1 global patch peaks where
    // the source image's GT density exceeds that image's median.
    double cell = 0.0;
    double background = 0.0;
};

LocalizationRates localization_rates(const CountModel& model,
                                     const std::vector<std::vector<PatchBox>>& top_patches,
                                     std::span<const Sample> samples);

// ---------------------------------------------------------------------------
// Experiment harnesses. One run = fresh model from a shared frozen extractor,
// training on the train split, evaluation on the test split.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    ModelDims dims;
    TrainConfig train;
    std::size_t top_k = 3;
    double percentile = 99.0;
};

struct RunResult {
    CountModel model;
    TrainHistory history;
    EvalReport eval;
};

/// `seed` drives both model initialization and the training shuffle.
RunResult run_experiment(const FeatureExtractor& extractor, const Dataset& dataset,
                         const ExperimentConfig& config, std::uint64_t seed,
                         const TrainCallbacks& callbacks = {});

/// full | no_diversity (lambda3 = 0) | no_proto_feature (lambda2 = 0).
LossConfig variant_loss(const std::string& variant, const LossConfig& base);

struct AblationReport {
    std::string variant;
    std::uint64_t seed = 0;
    std::uint64_t manifest_hash = 0;
    double mae = 0.0;
    GroupDistanceStats distances;
    LocalizationRates localization;
    std::size_t epochs = 0;
};

using RunObserver = std::function<void(const std::string& label, const RunResult& run)>;

std::vector<AblationReport> run_ablation(const FeatureExtractor& extractor, const Dataset& dataset,
                                         const ExperimentConfig& base,
                                         std::span<const std::string> variants,
                                         std::span<const std::uint64_t> seeds,
                                         const RunObserver& observer = {});

/// `variant,seed,manifest_hash,mae,min_cell,avg_cell,min_bg,avg_bg,cell_rate,bg_rate,epochs`
std::string ablation_csv(std::span<const AblationReport> reports);
/// Seed-averaged intra-group distances per variant, Minimum/Average x Cell/Background.
std::string ablation_table(std::span<const AblationReport> reports);

struct SweepPoint {
    double value = 0.0;  // K or tau
    std::uint64_t seed = 0;
    std::uint64_t manifest_hash = 0;
    double mae = 0.0;
    std::vector<std::vector<PatchBox>> patches;  // filled by sweep_tau only
};

/// Each K must be even; K_cell = K_bg = K/2.
std::vector<SweepPoint> sweep_k(const FeatureExtractor& extractor, const Dataset& dataset,
                                const ExperimentConfig& base, std::span<const std::size_t> k_values,
                                std::span<const std::uint64_t> seeds,
                                const RunObserver& observer = {});
/// tau applies to both groups.
std::vector<SweepPoint> sweep_tau(const FeatureExtractor& extractor, const Dataset& dataset,
                                  const ExperimentConfig& base, std::span<const double> tau_values,
                                  std::span<const std::uint64_t> seeds,
                                  const RunObserver& observer = {});

/// `k,seed,manifest_hash,mae`
std::string sweep_k_csv(std::span<const SweepPoint> points);
/// `tau,seed,manifest_hash,mae`
std::string sweep_tau_csv(std::span<const SweepPoint> points);
/// `tau,seed,prototype_id,rank,image_id,x0,y0,x1,y1,score`
std::string sweep_tau_patches_csv(std::span<const SweepPoint> points);

} // namespace protodensity
