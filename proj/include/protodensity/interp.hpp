#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "protodensity/datagen.hpp"
#include "protodensity/model.hpp"
#include "protodensity/tensor.hpp"

namespace protodensity {

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;  // row-major, 0 or 1

    bool at(std::size_t h, std::size_t w) const { return values[h * width + w] != 0; }
    std::size_t count() const;
};

/// Nearest-rank percentile: the ceil(q*n/100)-th smallest value (1-based).
double percentile_value(std::span<const double> values, double q);

/// mask = (map >= nearest-rank q-th percentile). map: [H x W] or [1 x H x W].
BinaryMask percentile_threshold(const Tensor& map, double q = 99.0);

struct ComponentLabels {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::size_t> labels;  // 0 = background, 1..count in first-encounter order
    std::size_t count = 0;

    std::size_t at(std::size_t h, std::size_t w) const { return labels[h * width + w]; }
};

/// 8-connectivity labelling.
ComponentLabels connected_components(const BinaryMask& mask);

struct PatchBox {
    std::uint64_t image_id = 0;
    std::size_t prototype_id = 0;
    // Inclusive input-pixel coordinates; x runs along the width axis.
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double score = 0.0;
    // Feature-grid location of the highest similarity in the component.
    std::size_t peak_h = 0, peak_w = 0;
};

/// One box per component, sorted by score descending (label order on ties).
std::vector<PatchBox> boxes_from_mask(const ComponentLabels& labels, const Tensor& similarity,
                                      std::uint64_t image_id, std::size_t prototype_id,
                                      std::size_t scale = 8);

/// For each prototype, each image's best box; the k best across images.
/// Result is indexed by prototype id.
std::vector<std::vector<PatchBox>> global_top_patches(const CountModel& model,
                                                      std::span<const Tensor> features,
                                                      std::span<const Sample> samples,
                                                      std::size_t k = 3, double percentile = 99.0);
std::vector<std::vector<PatchBox>> global_top_patches(const CountModel& model,
                                                      std::span<const Sample> samples,
                                                      std::size_t k = 3, double percentile = 99.0);

struct Contribution {
    std::size_t prototype_id = 0;
    double theta = 0.0;
    double similarity = 0.0;
    double contribution = 0.0;  // theta * similarity
};

struct Explanation {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<Contribution> contributions;
    double density = 0.0;  // predicted density at (h, w)
};

Explanation explain_location(const CountModel& model, const ForwardResult& result, std::size_t h,
                             std::size_t w);
Explanation explain_location(const CountModel& model, const Tensor& image, std::size_t h,
                             std::size_t w);

struct GroupStats {
    double min = 0.0;
    double mean = 0.0;
    std::size_t pairs = 0;  // 0 when the group has fewer than two prototypes; min, mean are NaN
};

struct GroupDistanceStats {
    GroupStats cell;
    GroupStats background;
};

/// Pairwise (unsquared) L2 distances within each group.
GroupDistanceStats intra_group_distances(const Tensor& prototypes, std::size_t k_cell,
                                         std::size_t k_bg);

/// `prototype_id,image_id,x0,y0,x1,y1,score`
std::string boxes_csv(std::span<const PatchBox> boxes);
/// `h,w,prototype_id,theta,similarity,contribution`
std::string explanations_csv(std::span<const Explanation> explanations);

} // namespace protodensity
