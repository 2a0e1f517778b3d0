#include "doctest.h"
#include "protodensity/autodiff.hpp"
#include "protodensity/errors.hpp"
#include "protodensity/gradcheck.hpp"
#include "test_util.hpp"

using namespace protodensity;

TEST_CASE("finite_diff_grad examples") {
    const Tensor x({2}, std::vector<double>{1, 2});
    const Tensor g = finite_diff_grad([](const Tensor& t) { return t[0] * t[0] + t[1] * t[1]; }, x);
    CHECK(std::abs(g[0] - 2.0) < 1e-8);
    CHECK(std::abs(g[1] - 4.0) < 1e-8);
    const Tensor z = finite_diff_grad([](const Tensor&) { return 3.0; }, x);
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 0.0);
    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return NAN; }, x), NumericError);
}

TEST_CASE("relative_error") {
    const Tensor a({2}, std::vector<double>{1, 2}), b({2}, std::vector<double>{1, 2.002});
    CHECK(relative_error(a, a) == 0.0);
    CHECK(relative_error(a, b) == doctest::Approx(0.002 / 2.002));
    CHECK(relative_error(Tensor({2}), Tensor({2})) == 0.0);
}

TEST_CASE("tape accumulates gradients through shared inputs") {
    ad::Tape tape;
    const ad::Var x = tape.variable(Tensor({2}, std::vector<double>{3, -1}));
    const ad::Var y = ad::sum(ad::add(ad::mul(x, x), x));  // sum(x^2 + x)
    tape.backward(y);
    CHECK(x.grad()[0] == 7.0);
    CHECK(x.grad()[1] == -1.0);
    CHECK_THROWS_AS(tape.backward(x), DimensionError);
}

TEST_CASE("non-trainable parameters receive no gradient") {
    Parameter frozen(Tensor({2}, 1.0), false);
    Parameter live(Tensor({2}, 2.0));
    ad::Tape tape;
    const ad::Var f = tape.parameter(frozen), l = tape.parameter(live);
    CHECK_FALSE(f.requires_grad());
    tape.backward(ad::sum(ad::mul(f, l)));
    CHECK(frozen.grad[0] == 0.0);
    CHECK(live.grad[0] == 1.0);
    CHECK(live.grad[1] == 1.0);
}

TEST_CASE("constants produce no backward work") {
    ad::Tape tape;
    const ad::Var c = tape.constant(Tensor({2}, 1.0));
    CHECK_FALSE(ad::relu(c).requires_grad());
}

TEST_CASE("every differentiable op passes the gradient check") {
    GradcheckOptions opts;
    for (const GradcheckResult& r : run_gradcheck_suite(opts)) {
        INFO(r.component);
        CHECK(r.instances == 20);
        CHECK(r.max_relative_error <= 1e-5);
    }
}

TEST_CASE("gradcheck suite rejects unknown components") {
    const std::vector<std::string> bad{"no_such_op"};
    CHECK_THROWS_AS(run_gradcheck_suite({}, bad), ConfigError);
    const std::vector<std::string> one{"relu"};
    CHECK(run_gradcheck_suite({}, one).size() == 1);
}

TEST_CASE("gather routes gradient to the gathered elements") {
    ad::Tape tape;
    const ad::Var x = tape.variable(Tensor({2, 3}, 1.0));
    tape.backward(ad::sum(ad::gather(x, {4, 4, 0})));
    CHECK(x.grad()[4] == 2.0);
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
}
