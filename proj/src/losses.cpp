#include "protodensity/losses.hpp"

#include "protodensity/errors.hpp"
#include "protodensity/io.hpp"
#include "protodensity/ops.hpp"

namespace protodensity {

void LossConfig::validate() const {
    if (!(lambda1 >= 0.0)) throw ConfigError("loss.lambda1: must be non-negative");
    if (!(lambda2 >= 0.0)) throw ConfigError("loss.lambda2: must be non-negative");
    if (!(lambda3 >= 0.0)) throw ConfigError("loss.lambda3: must be non-negative");
    if (!(tau_cell >= -1.0 && tau_cell <= 1.0)) throw ConfigError("loss.tau_cell: must lie in [-1, 1]");
    if (!(tau_bg >= -1.0 && tau_bg <= 1.0)) throw ConfigError("loss.tau_bg: must lie in [-1, 1]");
}

std::string loss_csv_header() { return "step,density,proto_feature,diversity,total"; }

std::string loss_csv_row(std::size_t step, const LossReport& r) {
    return std::to_string(step) + ',' + format_double(r.density) + ',' +
           format_double(r.proto_feature) + ',' + format_double(r.diversity) + ',' +
           format_double(r.total);
}

std::vector<std::size_t> proto_feature_indices(const Tensor& gt, std::size_t k_cell,
                                               std::size_t k_bg) {
    require_rank(gt, 3, "proto_feature_loss gt");
    if (k_cell == 0 || k_bg == 0) {
        throw ConfigError("proto_feature_loss: k_cell and k_bg must both be at least 1");
    }
    const std::size_t batch = gt.dim(0), hw = gt.dim(1) * gt.dim(2);
    const std::size_t k = k_cell + k_bg;
    std::vector<std::size_t> idx;
    idx.reserve(batch * k);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto map = gt.data().subspan(b * hw, hw);
        const std::size_t hi = ops::argmax(map), lo = ops::argmin(map);
        for (std::size_t i = 0; i < k; ++i) idx.push_back((b * k + i) * hw + (i < k_cell ? hi : lo));
    }
    return idx;
}

namespace ad {

namespace {

void check_distances(const Tensor& distances, const Tensor& gt, std::size_t k) {
    require_rank(distances, 4, "proto_feature_loss distances");
    if (distances.dim(0) != gt.dim(0) || distances.dim(2) != gt.dim(1) ||
        distances.dim(3) != gt.dim(2)) {
        throw DimensionError("proto_feature_loss: distances " + shape_string(distances.shape()) +
                             " incompatible with gt " + shape_string(gt.shape()));
    }
    if (distances.dim(1) != k) {
        throw DimensionError("proto_feature_loss: distances have " +
                             std::to_string(distances.dim(1)) + " prototypes, k_cell + k_bg = " +
                             std::to_string(k));
    }
}

Var group_term(Var group, double tau, bool raw) {
    const std::size_t kg = group.value().dim(0);
    Var unit = raw ? group : row_l2_normalize(group);
    Var q = matmul(unit, transpose(unit));
    Var z = relu(add_scalar(q, -tau));
    Tensor off_diag({kg, kg}, 1.0);
    for (std::size_t i = 0; i < kg; ++i) off_diag.at(i, i) = 0.0;
    Var masked = mul(z, group.tape().constant(std::move(off_diag)));
    return scale(sum(masked), 1.0 / static_cast<double>(kg * (kg - 1)));
}

} // namespace

Var density_loss(Var pred, Var gt) {
    require_same_shape(pred.value(), gt.value(), "density_loss");
    Var diff = sub(pred, gt);
    return mean(mul(diff, diff));
}

Var proto_feature_loss(Var distances, const Tensor& gt, std::size_t k_cell, std::size_t k_bg) {
    const std::vector<std::size_t> idx = proto_feature_indices(gt, k_cell, k_bg);
    check_distances(distances.value(), gt, k_cell + k_bg);
    const std::size_t batch = gt.dim(0), k = k_cell + k_bg;
    // Weight each gathered entry by 1/(K_g * B) so the sum is the batch mean.
    Tensor weights({idx.size()});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < k; ++i)
            weights[b * k + i] =
                1.0 / (static_cast<double>(i < k_cell ? k_cell : k_bg) * static_cast<double>(batch));
    Var picked = gather(distances, idx);
    return sum(mul(picked, distances.tape().constant(std::move(weights))));
}

Var diversity_loss(Var prototypes, std::size_t k_cell, std::size_t k_bg, double tau_cell,
                   double tau_bg, bool raw_dot_product) {
    const Tensor& p = prototypes.value();
    require_rank(p, 2, "diversity_loss");
    if (p.dim(0) != k_cell + k_bg) {
        throw DimensionError("diversity_loss: " + std::to_string(p.dim(0)) +
                             " prototypes, k_cell + k_bg = " + std::to_string(k_cell + k_bg));
    }
    Tape& tape = prototypes.tape();
    Var total = tape.constant(Tensor::scalar(0.0));
    if (k_cell >= 2) total = add(total, group_term(slice_rows(prototypes, 0, k_cell), tau_cell, raw_dot_product));
    if (k_bg >= 2)
        total = add(total, group_term(slice_rows(prototypes, k_cell, k_cell + k_bg), tau_bg,
                                      raw_dot_product));
    return scale(total, 0.5);
}

LossReport LossVars::report() const {
    return {density.value().item(), proto_feature.value().item(), diversity.value().item(),
            total.value().item()};
}

LossVars total_loss(Var pred, Var gt, Var distances, Var prototypes, std::size_t k_cell,
                    std::size_t k_bg, const LossConfig& config) {
    config.validate();
    LossVars v;
    v.density = density_loss(pred, gt);
    v.proto_feature = proto_feature_loss(distances, gt.value(), k_cell, k_bg);
    v.diversity = diversity_loss(prototypes, k_cell, k_bg, config.tau_cell, config.tau_bg,
                                 config.raw_dot_product);
    v.total = add(add(scale(v.density, config.lambda1), scale(v.proto_feature, config.lambda2)),
                  scale(v.diversity, config.lambda3));
    return v;
}

} // namespace ad

double density_loss(const Tensor& pred, const Tensor& gt) {
    ad::Tape tape;
    return ad::density_loss(tape.constant(pred), tape.constant(gt)).value().item();
}

double proto_feature_loss(const Tensor& distances, const Tensor& gt, std::size_t k_cell,
                          std::size_t k_bg) {
    ad::Tape tape;
    return ad::proto_feature_loss(tape.constant(distances), gt, k_cell, k_bg).value().item();
}

double diversity_loss(const Tensor& prototypes, std::size_t k_cell, std::size_t k_bg,
                      double tau_cell, double tau_bg, bool raw_dot_product) {
    ad::Tape tape;
    return ad::diversity_loss(tape.constant(prototypes), k_cell, k_bg, tau_cell, tau_bg,
                              raw_dot_product)
        .value()
        .item();
}

LossReport total_loss(double density, double proto_feature, double diversity,
                      const LossConfig& config) {
    config.validate();
    return {density, proto_feature, diversity,
            config.lambda1 * density + config.lambda2 * proto_feature + config.lambda3 * diversity};
}

} // namespace protodensity
