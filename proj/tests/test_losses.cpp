#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "protodensity/errors.hpp"
#include "protodensity/losses.hpp"
#include "protodensity/ops.hpp"
#include "test_util.hpp"

using namespace protodensity;
using testutil::random_tensor;

namespace {

// Pairwise-loop reference for one group's diversity term.
double group_oracle(const Tensor& p, std::size_t begin, std::size_t n, double tau) {
    if (n < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = begin; i < begin + n; ++i)
        for (std::size_t j = begin; j < begin + n; ++j) {
            if (i == j) continue;
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (std::size_t c = 0; c < p.dim(1); ++c) {
                dot += p.at(i, c) * p.at(j, c);
                ni += p.at(i, c) * p.at(i, c);
                nj += p.at(j, c) * p.at(j, c);
            }
            s += std::max(0.0, dot / std::sqrt(ni * nj) - tau);
        }
    return s / static_cast<double>(n * (n - 1));
}

double proto_feature_oracle(const Tensor& phi, const Tensor& gt, std::size_t kc, std::size_t kb) {
    const std::size_t B = gt.dim(0), hw = gt.dim(1) * gt.dim(2);
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t hi = 0, lo = 0;
        for (std::size_t p = 0; p < hw; ++p) {
            if (gt[b * hw + p] > gt[b * hw + hi]) hi = p;
            if (gt[b * hw + p] < gt[b * hw + lo]) lo = p;
        }
        double cell = 0.0, bg = 0.0;
        for (std::size_t i = 0; i < kc; ++i) cell += phi[(b * (kc + kb) + i) * hw + hi];
        for (std::size_t i = kc; i < kc + kb; ++i) bg += phi[(b * (kc + kb) + i) * hw + lo];
        total += cell / static_cast<double>(kc) + bg / static_cast<double>(kb);
    }
    return total / static_cast<double>(B);
}

} // namespace

TEST_CASE("density loss") {
    Rng rng(10);
    const Tensor gt = random_tensor({2, 3, 3}, rng);
    CHECK(density_loss(gt, gt) == 0.0);
    CHECK(density_loss(ops::add_scalar(gt, 1.0), gt) == doctest::Approx(1.0).epsilon(1e-14));
    const Tensor pred = random_tensor({2, 3, 3}, rng);
    double s = 0.0;
    for (std::size_t i = 0; i < 18; ++i) s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
    CHECK(std::abs(density_loss(pred, gt) - s / 18.0) < 1e-15);
    CHECK_THROWS_AS(density_loss(pred, Tensor({2, 3, 2})), DimensionError);
}

TEST_CASE("proto-feature loss examples") {
    // B=1, one cell and one background prototype, 2x2 map.
    Tensor gt({1, 2, 2}, std::vector<double>{0.1, 0.9, 0.0, 0.5});
    Tensor phi({1, 2, 2, 2});
    phi.at(0, 0, 0, 1) = 3.0;  // cell prototype at argmax (0,1)
    phi.at(0, 1, 1, 0) = 5.0;  // background prototype at argmin (1,0)
    CHECK(proto_feature_loss(phi, gt, 1, 1) == 8.0);

    Tensor zero({1, 2, 2, 2}, 7.0);
    zero.at(0, 0, 0, 1) = 0.0;
    zero.at(0, 1, 1, 0) = 0.0;
    CHECK(proto_feature_loss(zero, gt, 1, 1) == 0.0);
}

TEST_CASE("proto-feature loss matches a scalar oracle") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor gt = random_tensor({2, 3, 4}, rng, 0.0, 1.0);
        const Tensor phi = random_tensor({2, 5, 3, 4}, rng, 0.0, 3.0);
        CHECK(std::abs(proto_feature_loss(phi, gt, 2, 3) - proto_feature_oracle(phi, gt, 2, 3)) < 1e-13);
    }
}

TEST_CASE("proto-feature gradient touches only the selected entries") {
    Rng rng(12);
    const Tensor gt = random_tensor({2, 3, 3}, rng, 0.0, 1.0);
    ad::Tape tape;
    const ad::Var phi = tape.variable(random_tensor({2, 4, 3, 3}, rng, 0.0, 2.0));
    tape.backward(ad::proto_feature_loss(phi, gt, 2, 2));
    const auto idx = proto_feature_indices(gt, 2, 2);
    CHECK(idx.size() == 2 * 4);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < phi.grad().size(); ++i) {
        if (phi.grad()[i] != 0.0) {
            ++nonzero;
            CHECK(std::find(idx.begin(), idx.end(), i) != idx.end());
        }
    }
    CHECK(nonzero == idx.size());
    // One selected location per sample and group.
    std::set<std::size_t> locations;
    for (std::size_t i : idx) locations.insert((i / 36) * 9 + i % 9);
    CHECK(locations.size() <= 4);
}

TEST_CASE("diversity loss examples") {
    const Tensor same({4, 3}, 1.0);
    CHECK(std::abs(diversity_loss(same, 2, 2, 0.8, 0.8) - 0.2) < 1e-15);

    Tensor ortho({4, 3});
    ortho.at(0, 0) = 1.0;
    ortho.at(1, 1) = 2.0;
    ortho.at(2, 2) = 1.0;
    ortho.at(3, 0) = 3.0;
    CHECK(diversity_loss(ortho, 2, 2, 0.8, 0.8) == 0.0);

    // A single-prototype group contributes nothing.
    CHECK(diversity_loss(Tensor({2, 3}, 1.0), 1, 1, 0.8, 0.8) == 0.0);
    CHECK(std::abs(diversity_loss(Tensor({3, 3}, 1.0), 2, 1, 0.0, 0.0) - 0.5) < 1e-15);
}

TEST_CASE("diversity loss matches pairwise oracle") {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor p = random_tensor({3, 5}, rng);
        p = ops::row_l2_normalize(p);
        const double expect = 0.5 * group_oracle(p, 0, 3, 0.0);
        CHECK(std::abs(diversity_loss(p, 3, 0, 0.0, 0.0) - expect) < 1e-14);

        const Tensor q = random_tensor({7, 4}, rng);
        const double tc = rng.uniform(-0.5, 0.9), tb = rng.uniform(-0.5, 0.9);
        CHECK(std::abs(diversity_loss(q, 3, 4, tc, tb) -
                       0.5 * (group_oracle(q, 0, 3, tc) + group_oracle(q, 3, 4, tb))) < 1e-14);
    }
}

TEST_CASE("diversity loss is invariant to positive row scaling") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor p = random_tensor({6, 4}, rng);
        const double before = diversity_loss(p, 3, 3, 0.1, 0.2);
        const std::size_t row = rng.below(6);
        const double f = rng.uniform(0.1, 10.0);
        for (std::size_t c = 0; c < 4; ++c) p.at(row, c) *= f;
        CHECK(std::abs(diversity_loss(p, 3, 3, 0.1, 0.2) - before) < 1e-13);
    }
}

TEST_CASE("loss components are nonnegative") {
    Rng rng(15);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor gt = random_tensor({2, 3, 3}, rng, 0.0, 1.0);
        CHECK(density_loss(random_tensor({2, 3, 3}, rng), gt) >= 0.0);
        CHECK(proto_feature_loss(random_tensor({2, 4, 3, 3}, rng, 0.0, 5.0), gt, 2, 2) >= 0.0);
        CHECK(diversity_loss(random_tensor({4, 3}, rng), 2, 2, rng.uniform(-1, 1), rng.uniform(-1, 1)) >= 0.0);
    }
}

TEST_CASE("total loss weights and ablation settings") {
    LossConfig c;
    const LossReport r = total_loss(2.0, 3.0, 0.5, c);
    CHECK(r.total == 2.0 + 3.0 + 100.0 * 0.5);
    c.lambda3 = 0.0;
    CHECK(total_loss(2.0, 3.0, 0.5, c).total == 5.0);
    c.lambda2 = 0.0;
    CHECK(total_loss(2.0, 3.0, 0.5, c).total == 2.0);
    LossConfig bad;
    bad.tau_cell = 1.5;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("tau_cell"), ConfigError);
    bad = {};
    bad.lambda1 = -1;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("lambda1"), ConfigError);
}

TEST_CASE("tape losses agree with plain evaluation") {
    Rng rng(16);
    const Tensor pred = random_tensor({2, 3, 3}, rng), gt = random_tensor({2, 3, 3}, rng, 0.0, 1.0);
    const Tensor phi = random_tensor({2, 4, 3, 3}, rng, 0.0, 2.0), p = random_tensor({4, 5}, rng);
    ad::Tape tape;
    const LossConfig cfg;
    const ad::LossVars v = ad::total_loss(tape.variable(pred), tape.constant(gt), tape.variable(phi),
                                          tape.variable(p), 2, 2, cfg);
    const LossReport r = v.report();
    CHECK(r.density == doctest::Approx(density_loss(pred, gt)).epsilon(1e-14));
    CHECK(r.proto_feature == doctest::Approx(proto_feature_loss(phi, gt, 2, 2)).epsilon(1e-14));
    CHECK(r.diversity == doctest::Approx(diversity_loss(p, 2, 2, 0.8, 0.8)).epsilon(1e-14));
    CHECK(loss_csv_header() == "step,density,proto_feature,diversity,total");
}
