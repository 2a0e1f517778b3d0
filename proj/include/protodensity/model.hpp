#pragma once

// Prototype density model:
//   image -> frozen extractor F -> sigmoid(conv1x1) F' -> squared distances phi
//   to K prototypes -> log similarities S -> density = sum_i theta_i S_i.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "protodensity/autodiff.hpp"
#include "protodensity/tensor.hpp"

namespace protodensity {

/// Three {conv3x3, ReLU, maxpool2} blocks, channels 1 -> 16 -> 32 -> 64.
struct FeatureExtractor {
    static constexpr std::array<std::size_t, 4> kChannels{1, 16, 32, 64};
    static constexpr std::size_t kDownsample = 8;
    static constexpr std::size_t kOutChannels = 64;

    std::array<Parameter, 3> weight;
    std::array<Parameter, 3> bias;

    /// He-uniform weights, zero bias, all trainable.
    static FeatureExtractor initialized(std::uint64_t seed);

    void set_trainable(bool trainable);
    bool frozen() const;
    std::uint64_t checksum() const;
};

struct ModelDims {
    std::size_t k_cell = 4;
    std::size_t k_bg = 4;
    std::size_t d = 64;      // prototype / processed-feature depth
    std::size_t d_in = 64;   // extractor output channels
    double epsilon = 1e-4;   // similarity transform

    std::size_t k() const { return k_cell + k_bg; }
    void validate() const;
};

struct ProcessingLayer {
    Parameter weight;  // [d x d_in]
    Parameter bias;    // [d]
};

struct PrototypeLayer {
    Parameter prototypes;  // [K x d]; rows 0..k_cell-1 are cell prototypes
    std::size_t k_cell = 0;
    std::size_t k_bg = 0;
    double epsilon = 1e-4;

    std::size_t k() const { return k_cell + k_bg; }
};

struct DensityHead {
    Parameter theta;  // [K]
};

/// Where a projected prototype came from.
struct Provenance {
    std::size_t prototype_id = 0;
    std::uint64_t image_id = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    double distance_before = 0.0;
};

struct CountModel {
    FeatureExtractor extractor;
    ProcessingLayer processing;
    PrototypeLayer prototypes;
    DensityHead head;
    std::vector<Provenance> provenance;  // empty until the first projection

    ModelDims dims() const;

    /// Processing weights U(-1/sqrt(d_in), 1/sqrt(d_in)), bias 0; prototypes
    /// U(0, 1); theta U(-1/sqrt(K), 1/sqrt(K)). The extractor is taken as is.
    static CountModel create(FeatureExtractor extractor, const ModelDims& dims, std::uint64_t seed);
};

struct ForwardResult {
    Tensor features;      // F   [d_in x Hf x Wf]
    Tensor processed;     // F'  [d x Hf x Wf]
    Tensor distances;     // phi [K x Hf x Wf]
    Tensor similarities;  // S   [K x Hf x Wf]
    Tensor density;       // D   [Hf x Wf]
    double count = 0.0;
};

// Inference path. The extractor is never modified.
Tensor extract_features(const FeatureExtractor& extractor, const Tensor& image);
Tensor process_features(const CountModel& model, const Tensor& features);
Tensor similarity_map(const CountModel& model, const Tensor& distances);
Tensor predict_density(const CountModel& model, const Tensor& similarities);
double count(const Tensor& density);
ForwardResult forward(const CountModel& model, const Tensor& image);
/// Same as forward() with F supplied (e.g. from a feature cache).
ForwardResult forward_from_features(const CountModel& model, const Tensor& features);

// Differentiable path.
namespace ad {

Var extract_features(Tape& tape, FeatureExtractor& extractor, Var image);

struct ModelVars {
    Var processing_weight;
    Var processing_bias;
    Var prototypes;
    Var theta;
};
ModelVars bind(Tape& tape, CountModel& model);

struct TapeForward {
    Var processed;
    Var distances;
    Var similarities;
    Var density;  // [Hf x Wf]
};
TapeForward forward_from_features(const ModelVars& vars, Var features, double epsilon);

} // namespace ad

// ---------------------------------------------------------------------------
// Checkpoints: a directory with model.txt, one PDTF file per parameter and
// provenance.csv. Extractor-only checkpoints omit the prototype parts.
// ---------------------------------------------------------------------------

void save_extractor(const std::filesystem::path& dir, const FeatureExtractor& extractor);
/// Loaded extractors are frozen.
FeatureExtractor load_extractor(const std::filesystem::path& dir);

void save_model(const std::filesystem::path& dir, const CountModel& model);
CountModel load_model(const std::filesystem::path& dir);

} // namespace protodensity
