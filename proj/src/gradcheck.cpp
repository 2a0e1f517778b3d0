#include "protodensity/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "protodensity/autodiff.hpp"
#include "protodensity/errors.hpp"
#include "protodensity/losses.hpp"
#include "protodensity/model.hpp"
#include "protodensity/rng.hpp"

namespace protodensity {

Tensor finite_diff_grad(const ScalarFn& fn, const Tensor& at, double h) {
    if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step h must be positive");
    Tensor probe = at;
    Tensor grad(at.shape());
    for (std::size_t i = 0; i < at.size(); ++i) {
        const double x = at[i];
        probe[i] = x + h;
        const double up = fn(probe);
        probe[i] = x - h;
        const double down = fn(probe);
        probe[i] = x;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_diff_grad: non-finite evaluation at element " +
                               std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

double relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
    require_same_shape(analytic, numeric, "relative_error");
    double diff = 0.0, scale = floor;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
    }
    return diff / scale;
}

// ---------------------------------------------------------------------------
// Suite
// ---------------------------------------------------------------------------

namespace {

using Build = std::function<ad::Var(ad::Tape&, ad::Var)>;

double check(const Build& build, const Tensor& at, double h) {
    ad::Tape tape;
    ad::Var x = tape.variable(at);
    tape.backward(build(tape, x));
    const Tensor analytic = x.grad();
    const Tensor numeric = finite_diff_grad(
        [&](const Tensor& probe) {
            ad::Tape t;
            return build(t, t.constant(probe)).value().item();
        },
        at, h);
    return relative_error(analytic, numeric);
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// Scalarizes a tensor-valued op as sum(op(x) * R) so every output element
/// contributes with its own random weight.
ad::Var weighted(ad::Var y, const Tensor& r) { return ad::sum(ad::mul(y, y.tape().constant(r))); }

// Desk-scale instance shared by the loss and model checks.
constexpr std::size_t kB = 2, kKCell = 2, kKBg = 2, kK = kKCell + kKBg, kD = 8, kHf = 6, kWf = 6;

struct Instance {
    std::vector<Tensor> features;  // B x [d x Hf x Wf]
    Tensor gt;                     // [B x Hf x Wf]
    Tensor weight, bias, prototypes, theta;
    LossConfig loss;
};

Instance make_instance(Rng& rng) {
    Instance in;
    for (std::size_t b = 0; b < kB; ++b) in.features.push_back(random_tensor(rng, {kD, kHf, kWf}, 0.0, 1.0));
    in.gt = random_tensor(rng, {kB, kHf, kWf}, 0.0, 0.2);
    in.weight = random_tensor(rng, {kD, kD});
    in.bias = random_tensor(rng, {kD}, -0.5, 0.5);
    in.prototypes = random_tensor(rng, {kK, kD}, 0.0, 1.0);
    in.theta = random_tensor(rng, {kK});
    in.loss.tau_cell = rng.uniform(0.0, 0.7);
    in.loss.tau_bg = rng.uniform(0.0, 0.7);
    return in;
}

enum class Wrt { Weight, Bias, Prototypes, Theta };

struct Forward {
    ad::Var density, distances, prototypes;
};

/// Batch forward with the selected parameter replaced by `x`.
Forward batch_forward(ad::Tape& tape, const Instance& in, Wrt wrt, ad::Var x) {
    ad::ModelVars vars{wrt == Wrt::Weight ? x : tape.constant(in.weight),
                       wrt == Wrt::Bias ? x : tape.constant(in.bias),
                       wrt == Wrt::Prototypes ? x : tape.constant(in.prototypes),
                       wrt == Wrt::Theta ? x : tape.constant(in.theta)};
    std::vector<ad::Var> dens, dists;
    for (const Tensor& f : in.features) {
        const ad::TapeForward out = ad::forward_from_features(vars, tape.constant(f), 1e-4);
        dens.push_back(out.density);
        dists.push_back(out.distances);
    }
    return {ad::stack(dens), ad::stack(dists), vars.prototypes};
}

const Tensor& param(const Instance& in, Wrt wrt) {
    switch (wrt) {
    case Wrt::Weight: return in.weight;
    case Wrt::Bias: return in.bias;
    case Wrt::Prototypes: return in.prototypes;
    case Wrt::Theta: return in.theta;
    }
    return in.weight;
}

constexpr Wrt kAllParams[] = {Wrt::Weight, Wrt::Bias, Wrt::Prototypes, Wrt::Theta};

using Component = std::function<double(Rng&, double h)>;

const std::vector<std::pair<std::string, Component>>& registry() {
    static const std::vector<std::pair<std::string, Component>> table = {
        {"add", [](Rng& rng, double h) {
             const Tensor b = random_tensor(rng, {3, 4}), r = random_tensor(rng, {3, 4});
             return check([&](ad::Tape& t, ad::Var x) { return weighted(ad::add(x, t.constant(b)), r); },
                          random_tensor(rng, {3, 4}), h);
         }},
        {"sub", [](Rng& rng, double h) {
             const Tensor b = random_tensor(rng, {3, 4}), r = random_tensor(rng, {3, 4});
             return check([&](ad::Tape& t, ad::Var x) { return weighted(ad::sub(t.constant(b), x), r); },
                          random_tensor(rng, {3, 4}), h);
         }},
        {"mul", [](Rng& rng, double h) {
             const Tensor b = random_tensor(rng, {3, 4}), r = random_tensor(rng, {3, 4});
             return check([&](ad::Tape& t, ad::Var x) { return weighted(ad::mul(x, t.constant(b)), r); },
                          random_tensor(rng, {3, 4}), h);
         }},
        {"scale", [](Rng& rng, double h) {
             const double f = rng.uniform(-2.0, 2.0);
             const Tensor r = random_tensor(rng, {5});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::add_scalar(ad::scale(x, f), 0.3), r); },
                          random_tensor(rng, {5}), h);
         }},
        {"relu", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {4, 5});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::relu(x), r); },
                          random_tensor(rng, {4, 5}), h);
         }},
        {"sigmoid", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {4, 5});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::sigmoid(x), r); },
                          random_tensor(rng, {4, 5}, -4.0, 4.0), h);
         }},
        {"log", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {6});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::log(x), r); },
                          random_tensor(rng, {6}, 0.5, 2.0), h);
         }},
        {"matmul", [](Rng& rng, double h) {
             const Tensor b = random_tensor(rng, {4, 2}), r = random_tensor(rng, {3, 2});
             const double lhs = check([&](ad::Tape& t, ad::Var x) { return weighted(ad::matmul(x, t.constant(b)), r); },
                                      random_tensor(rng, {3, 4}), h);
             const Tensor a = random_tensor(rng, {3, 4});
             const double rhs = check([&](ad::Tape& t, ad::Var x) { return weighted(ad::matmul(t.constant(a), x), r); },
                                      b, h);
             return std::max(lhs, rhs);
         }},
        {"transpose", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {4, 3});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::transpose(x), r); },
                          random_tensor(rng, {3, 4}), h);
         }},
        {"sum_mean", [](Rng& rng, double h) {
             return check([&](ad::Tape&, ad::Var x) {
                 return ad::add(ad::scale(ad::sum(x), 0.7), ad::mean(ad::mul(x, x)));
             }, random_tensor(rng, {3, 4}), h);
         }},
        {"sum_axis", [](Rng& rng, double h) {
             const Tensor r0 = random_tensor(rng, {3, 4}), r1 = random_tensor(rng, {2, 4});
             return check([&](ad::Tape&, ad::Var x) {
                 return ad::add(weighted(ad::sum_axis(x, 0), r0), weighted(ad::mean_axis(x, 1), r1));
             }, random_tensor(rng, {2, 3, 4}), h);
         }},
        {"max_min", [](Rng& rng, double h) {
             return check([&](ad::Tape&, ad::Var x) {
                 return ad::sub(ad::scale(ad::max(x).value, 2.0), ad::min(x).value);
             }, random_tensor(rng, {3, 5}), h);
         }},
        {"row_l2_normalize", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {3, 5});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::row_l2_normalize(x), r); },
                          random_tensor(rng, {3, 5}), h);
         }},
        {"conv1x1", [](Rng& rng, double h) {
             const Tensor in = random_tensor(rng, {3, 4, 5}), w = random_tensor(rng, {2, 3}),
                          b = random_tensor(rng, {2}), r = random_tensor(rng, {2, 4, 5});
             auto f = [&](ad::Tape& t, int which, ad::Var x) {
                 return weighted(ad::conv1x1(which == 0 ? x : t.constant(in), which == 1 ? x : t.constant(w),
                                             which == 2 ? x : t.constant(b)), r);
             };
             double e = 0.0;
             const Tensor* at[] = {&in, &w, &b};
             for (int which = 0; which < 3; ++which)
                 e = std::max(e, check([&](ad::Tape& t, ad::Var x) { return f(t, which, x); }, *at[which], h));
             return e;
         }},
        {"conv3x3", [](Rng& rng, double h) {
             const Tensor in = random_tensor(rng, {2, 5, 6}), w = random_tensor(rng, {3, 2, 3, 3}),
                          b = random_tensor(rng, {3}), r = random_tensor(rng, {3, 5, 6});
             auto f = [&](ad::Tape& t, int which, ad::Var x) {
                 return weighted(ad::conv3x3(which == 0 ? x : t.constant(in), which == 1 ? x : t.constant(w),
                                             which == 2 ? x : t.constant(b)), r);
             };
             double e = 0.0;
             const Tensor* at[] = {&in, &w, &b};
             for (int which = 0; which < 3; ++which)
                 e = std::max(e, check([&](ad::Tape& t, ad::Var x) { return f(t, which, x); }, *at[which], h));
             return e;
         }},
        {"maxpool2", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {2, 2, 3});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::maxpool2(x), r); },
                          random_tensor(rng, {2, 4, 6}), h);
         }},
        {"distance_map", [](Rng& rng, double h) {
             const Tensor f = random_tensor(rng, {4, 2, 2}), p = random_tensor(rng, {3, 4}),
                          r = random_tensor(rng, {3, 2, 2});
             const double ef = check([&](ad::Tape& t, ad::Var x) { return weighted(ad::distance_map(x, t.constant(p)), r); }, f, h);
             const double ep = check([&](ad::Tape& t, ad::Var x) { return weighted(ad::distance_map(t.constant(f), x), r); }, p, h);
             return std::max(ef, ep);
         }},
        {"log_similarity", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {2, 3, 3});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::log_similarity(x, 1e-4), r); },
                          random_tensor(rng, {2, 3, 3}, 0.01, 3.0), h);
         }},
        {"stack_gather", [](Rng& rng, double h) {
             const Tensor other = random_tensor(rng, {2, 3}), r = random_tensor(rng, {2, 2, 3});
             return check([&](ad::Tape& t, ad::Var x) {
                 ad::Var s = ad::stack({x, t.constant(other)});
                 ad::Var g = ad::gather(ad::reshape(s, {12}), {0, 4, 4, 7, 11});
                 return ad::add(weighted(s, r), ad::sum(ad::mul(g, g)));
             }, random_tensor(rng, {2, 3}), h);
         }},
        {"slice_rows", [](Rng& rng, double h) {
             const Tensor r = random_tensor(rng, {2, 3});
             return check([&](ad::Tape&, ad::Var x) { return weighted(ad::slice_rows(x, 1, 3), r); },
                          random_tensor(rng, {4, 3}), h);
         }},
        {"density_loss", [](Rng& rng, double h) {
             const Tensor gt = random_tensor(rng, {kB, kHf, kWf}, 0.0, 0.2);
             return check([&](ad::Tape& t, ad::Var x) { return ad::density_loss(x, t.constant(gt)); },
                          random_tensor(rng, {kB, kHf, kWf}), h);
         }},
        {"proto_feature_loss", [](Rng& rng, double h) {
             const Tensor gt = random_tensor(rng, {kB, kHf, kWf}, 0.0, 0.2);
             return check([&](ad::Tape&, ad::Var x) { return ad::proto_feature_loss(x, gt, kKCell, kKBg); },
                          random_tensor(rng, {kB, kK, kHf, kWf}, 0.0, 4.0), h);
         }},
        {"diversity_loss", [](Rng& rng, double h) {
             const double tc = rng.uniform(0.0, 0.7), tb = rng.uniform(0.0, 0.7);
             return check([&](ad::Tape&, ad::Var x) { return ad::diversity_loss(x, kKCell, kKBg, tc, tb); },
                          random_tensor(rng, {kK, kD}, 0.0, 1.0), h);
         }},
        {"total_loss", [](Rng& rng, double h) {
             const Instance in = make_instance(rng);
             double e = 0.0;
             for (const Wrt wrt : kAllParams) {
                 e = std::max(e, check([&](ad::Tape& t, ad::Var x) {
                     const Forward f = batch_forward(t, in, wrt, x);
                     return ad::total_loss(f.density, t.constant(in.gt), f.distances, f.prototypes, kKCell,
                                           kKBg, in.loss).total;
                 }, param(in, wrt), h));
             }
             return e;
         }},
        {"model_count", [](Rng& rng, double h) {
             const Instance in = make_instance(rng);
             double e = 0.0;
             for (const Wrt wrt : kAllParams) {
                 e = std::max(e, check([&](ad::Tape& t, ad::Var x) {
                     return ad::sum(batch_forward(t, in, wrt, x).density);
                 }, param(in, wrt), h));
             }
             return e;
         }},
    };
    return table;
}

} // namespace

std::vector<std::string> gradcheck_components() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : registry()) names.push_back(name);
    return names;
}

std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& options,
                                                 std::span<const std::string> components) {
    if (options.instances == 0) throw ConfigError("gradcheck: instances must be at least 1");
    for (const std::string& c : components) {
        const auto& reg = registry();
        if (std::none_of(reg.begin(), reg.end(), [&](const auto& e) { return e.first == c; })) {
            throw ConfigError("gradcheck: unknown component '" + c + "'");
        }
    }
    std::vector<GradcheckResult> out;
    std::uint64_t stream = 0;
    for (const auto& [name, fn] : registry()) {
        ++stream;
        if (!components.empty() && std::find(components.begin(), components.end(), name) == components.end()) {
            continue;
        }
        Rng rng(options.seed, stream);
        GradcheckResult r{name, options.instances, 0.0};
        for (std::size_t i = 0; i < options.instances; ++i) {
            r.max_relative_error = std::max(r.max_relative_error, fn(rng, options.h));
        }
        out.push_back(r);
    }
    return out;
}

} // namespace protodensity
