#pragma once

#include <cstddef>
#include <string>

#include "protodensity/autodiff.hpp"
#include "protodensity/tensor.hpp"

namespace protodensity {

struct LossConfig {
    double lambda1 = 1.0;    // density MSE
    double lambda2 = 1.0;    // prototype-to-feature
    double lambda3 = 100.0;  // diversity
    double tau_cell = 0.8;
    double tau_bg = 0.8;
    // Threshold raw dot products instead of cosine similarities.
    bool raw_dot_product = false;

    void validate() const;
};

struct LossReport {
    double density = 0.0;
    double proto_feature = 0.0;
    double diversity = 0.0;
    double total = 0.0;
};

/// `step,density,proto_feature,diversity,total`
std::string loss_csv_header();
std::string loss_csv_row(std::size_t step, const LossReport& report);

/// Flat indices into Phi [B x K x Hf x Wf] read by the prototype-to-feature
/// loss: cell rows at each sample's GT argmax, background rows at its argmin
/// (row-major first on ties). Cell entries come first within each sample.
std::vector<std::size_t> proto_feature_indices(const Tensor& gt, std::size_t k_cell,
                                               std::size_t k_bg);

// Plain evaluation.
double density_loss(const Tensor& pred, const Tensor& gt);
double proto_feature_loss(const Tensor& distances, const Tensor& gt, std::size_t k_cell,
                          std::size_t k_bg);
double diversity_loss(const Tensor& prototypes, std::size_t k_cell, std::size_t k_bg,
                      double tau_cell, double tau_bg, bool raw_dot_product = false);
LossReport total_loss(double density, double proto_feature, double diversity,
                      const LossConfig& config);

namespace ad {

/// mean((pred - gt)^2) over batch and pixels.
Var density_loss(Var pred, Var gt);
/// distances: [B x K x Hf x Wf]; gt: [B x Hf x Wf]. Batch mean of L_cell + L_bg.
Var proto_feature_loss(Var distances, const Tensor& gt, std::size_t k_cell, std::size_t k_bg);
/// Half the sum over groups of the mean thresholded off-diagonal similarity.
/// A group with fewer than two prototypes contributes zero.
Var diversity_loss(Var prototypes, std::size_t k_cell, std::size_t k_bg, double tau_cell,
                   double tau_bg, bool raw_dot_product = false);

struct LossVars {
    Var density;
    Var proto_feature;
    Var diversity;
    Var total;

    LossReport report() const;
};

/// pred, gt: [B x Hf x Wf]; distances: [B x K x Hf x Wf]; prototypes: [K x d].
LossVars total_loss(Var pred, Var gt, Var distances, Var prototypes, std::size_t k_cell,
                    std::size_t k_bg, const LossConfig& config);

} // namespace ad
} // namespace protodensity
