#include "protodensity/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "protodensity/errors.hpp"

namespace protodensity::ops {

namespace {

// Four independent accumulators; keeps the dependency chain short.
double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

double plain_sum(const double* a, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i];
        s1 += a[i + 1];
        s2 += a[i + 2];
        s3 += a[i + 3];
    }
    for (; i < n; ++i) s0 += a[i];
    return (s0 + s1) + (s2 + s3);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

struct Span1d {
    std::size_t lo;
    std::size_t hi;
};

// Output rows/cols whose shifted input index stays in [0, n).
Span1d valid_range(std::size_t n, int shift) {
    const std::size_t lo = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
    const std::size_t hi = shift > 0 ? n - static_cast<std::size_t>(shift) : n;
    return {lo, std::max(lo, hi)};
}

std::size_t shifted(std::size_t i, int shift) {
    return static_cast<std::size_t>(static_cast<std::ptrdiff_t>(i) + shift);
}

void check_conv_bias(const Tensor* bias, std::size_t out_channels, const char* what) {
    if (bias && (bias->rank() != 1 || bias->dim(0) != out_channels)) {
        throw DimensionError(std::string(what) + ": bias shape " + shape_string(bias->shape()) +
                             " does not match output channels " + std::to_string(out_channels));
    }
}

template <typename F>
Tensor map(const Tensor& x, F f) {
    Tensor out(x.shape());
    auto src = x.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
    return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* what, F f) {
    require_same_shape(a, b, what);
    Tensor out(a.shape());
    auto pa = a.data();
    auto pb = b.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = f(pa[i], pb[i]);
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return zip(a, b, "mul", [](double x, double y) { return x * y; });
}
Tensor scale(const Tensor& a, double factor) {
    return map(a, [factor](double x) { return x * factor; });
}
Tensor add_scalar(const Tensor& a, double offset) {
    return map(a, [offset](double x) { return x + offset; });
}

Tensor relu(const Tensor& x) {
    return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
    return map(x, [](double v) { return sigmoid(v); });
}

Tensor log(const Tensor& x) {
    for (double v : x.data()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive input " + std::to_string(v));
    }
    return map(x, [](double v) { return std::log(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: lhs axis 1 (" + std::to_string(k) + ") != rhs axis 0 (" +
                             std::to_string(b.dim(0)) + ")");
    }
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* row = &out.at(i, 0);
        for (std::size_t p = 0; p < k; ++p) axpy(a.at(i, p), &b.at(p, 0), row, n);
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    return out;
}

double sum(const Tensor& x) { return plain_sum(x.data().data(), x.size()); }

double mean(const Tensor& x) { return sum(x) / static_cast<double>(x.size()); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("sum_axis: axis " + std::to_string(axis) + " out of range for " +
                             shape_string(x.shape()));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t n = x.dim(axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t a = 0; a < n; ++a)
            axpy(1.0, &x.data()[(o * n + a) * inner], &out.data()[o * inner], inner);
    return out;
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] > values[best]) best = i;
    return best;
}

std::size_t argmin(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (values[i] < values[best]) best = i;
    return best;
}

Tensor row_l2_normalize(const Tensor& x) {
    require_rank(x, 2, "row_l2_normalize");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double norm = std::sqrt(dot(&x.at(r, 0), &x.at(r, 0), cols));
        if (!(norm > 0.0)) {
            throw DomainError("row_l2_normalize: row " + std::to_string(r) + " has zero norm");
        }
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = x.at(r, c) / norm;
    }
    return out;
}

Tensor conv1x1(const Tensor& input, const Tensor& weight, const Tensor* bias) {
    require_rank(input, 3, "conv1x1 input");
    require_rank(weight, 2, "conv1x1 weight");
    const std::size_t cin = input.dim(0), cout = weight.dim(0);
    if (weight.dim(1) != cin) {
        throw DimensionError("conv1x1: weight axis 1 (" + std::to_string(weight.dim(1)) +
                             ") != input axis 0 (" + std::to_string(cin) + ")");
    }
    check_conv_bias(bias, cout, "conv1x1");
    const std::size_t hw = input.dim(1) * input.dim(2);
    Tensor out({cout, input.dim(1), input.dim(2)});
    const double* in = input.data().data();
    double* dst = out.data().data();
    for (std::size_t o = 0; o < cout; ++o) {
        double* row = dst + o * hw;
        if (bias) std::fill(row, row + hw, (*bias)[o]);
        for (std::size_t c = 0; c < cin; ++c) axpy(weight.at(o, c), in + c * hw, row, hw);
    }
    return out;
}

void conv1x1_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                      Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
    const std::size_t cin = input.dim(0), cout = weight.dim(0);
    const std::size_t hw = input.dim(1) * input.dim(2);
    const double* in = input.data().data();
    const double* g = grad_out.data().data();
    for (std::size_t o = 0; o < cout; ++o) {
        const double* grow = g + o * hw;
        if (grad_bias) (*grad_bias)[o] += plain_sum(grow, hw);
        for (std::size_t c = 0; c < cin; ++c) {
            if (grad_weight) grad_weight->at(o, c) += dot(grow, in + c * hw, hw);
            if (grad_input) axpy(weight.at(o, c), grow, grad_input->data().data() + c * hw, hw);
        }
    }
}

Tensor conv3x3(const Tensor& input, const Tensor& weight, const Tensor* bias) {
    require_rank(input, 3, "conv3x3 input");
    require_rank(weight, 4, "conv3x3 weight");
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = weight.dim(0);
    if (weight.dim(1) != cin || weight.dim(2) != 3 || weight.dim(3) != 3) {
        throw DimensionError("conv3x3: weight " + shape_string(weight.shape()) +
                             " incompatible with input channels " + std::to_string(cin));
    }
    check_conv_bias(bias, cout, "conv3x3");
    Tensor out({cout, h, w});
    const double* in = input.data().data();
    double* dst = out.data().data();
    for (std::size_t o = 0; o < cout; ++o) {
        double* plane = dst + o * h * w;
        if (bias) std::fill(plane, plane + h * w, (*bias)[o]);
        for (std::size_t c = 0; c < cin; ++c) {
            const double* src = in + c * h * w;
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const Span1d ys = valid_range(h, dy);
                for (int kx = 0; kx < 3; ++kx) {
                    const int dx = kx - 1;
                    const Span1d xs = valid_range(w, dx);
                    const double k = weight.at(o, c, static_cast<std::size_t>(ky),
                                               static_cast<std::size_t>(kx));
                    const std::size_t len = xs.hi - xs.lo;
                    for (std::size_t y = ys.lo; y < ys.hi; ++y) {
                        const double* s = src + shifted(y, dy) * w + shifted(xs.lo, dx);
                        double* d = plane + y * w + xs.lo;
                        for (std::size_t x = 0; x < len; ++x) d[x] += k * s[x];
                    }
                }
            }
        }
    }
    return out;
}

void conv3x3_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                      Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias) {
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = weight.dim(0);
    const double* in = input.data().data();
    const double* g = grad_out.data().data();
    for (std::size_t o = 0; o < cout; ++o) {
        const double* gplane = g + o * h * w;
        if (grad_bias) (*grad_bias)[o] += plain_sum(gplane, h * w);
        for (std::size_t c = 0; c < cin; ++c) {
            const double* src = in + c * h * w;
            double* gin = grad_input ? grad_input->data().data() + c * h * w : nullptr;
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const Span1d ys = valid_range(h, dy);
                for (int kx = 0; kx < 3; ++kx) {
                    const int dx = kx - 1;
                    const Span1d xs = valid_range(w, dx);
                    const std::size_t uky = static_cast<std::size_t>(ky);
                    const std::size_t ukx = static_cast<std::size_t>(kx);
                    const double k = weight.at(o, c, uky, ukx);
                    const std::size_t len = xs.hi - xs.lo;
                    double acc = 0.0;
                    for (std::size_t y = ys.lo; y < ys.hi; ++y) {
                        const double* grow = gplane + y * w + xs.lo;
                        const std::size_t base = shifted(y, dy) * w + shifted(xs.lo, dx);
                        if (grad_weight) acc += dot(grow, src + base, len);
                        if (gin) {
                            double* irow = gin + base;
                            for (std::size_t x = 0; x < len; ++x) irow[x] += k * grow[x];
                        }
                    }
                    if (grad_weight) grad_weight->at(o, c, uky, ukx) += acc;
                }
            }
        }
    }
}

Tensor maxpool2(const Tensor& input, std::vector<std::size_t>* argmax_out) {
    require_rank(input, 3, "maxpool2");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (h % 2 || w % 2) {
        throw DimensionError("maxpool2: spatial dims must be even, got " +
                             shape_string(input.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    if (argmax_out) argmax_out->assign(out.size(), 0);
    const double* in = input.data().data();
    std::size_t k = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x, ++k) {
                const std::size_t base = (ch * h + 2 * y) * w + 2 * x;
                const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = cand[0];
                for (int j = 1; j < 4; ++j)
                    if (in[cand[j]] > in[best]) best = cand[j];
                out[k] = in[best];
                if (argmax_out) (*argmax_out)[k] = best;
            }
        }
    }
    return out;
}

Tensor distance_map(const Tensor& features, const Tensor& prototypes) {
    require_rank(features, 3, "distance_map features");
    require_rank(prototypes, 2, "distance_map prototypes");
    const std::size_t d = features.dim(0), k = prototypes.dim(0);
    if (prototypes.dim(1) != d) {
        throw DimensionError("distance_map: prototype dim (" + std::to_string(prototypes.dim(1)) +
                             ") != feature channels (" + std::to_string(d) + ")");
    }
    const std::size_t hw = features.dim(1) * features.dim(2);
    Tensor out({k, features.dim(1), features.dim(2)});
    const double* f = features.data().data();
    double* dst = out.data().data();
    for (std::size_t i = 0; i < k; ++i) {
        double* row = dst + i * hw;
        for (std::size_t c = 0; c < d; ++c) {
            const double p = prototypes.at(i, c);
            const double* frow = f + c * hw;
            for (std::size_t j = 0; j < hw; ++j) {
                const double diff = frow[j] - p;
                row[j] += diff * diff;
            }
        }
    }
    return out;
}

void distance_map_backward(const Tensor& features, const Tensor& prototypes,
                           const Tensor& grad_out, Tensor* grad_features,
                           Tensor* grad_prototypes) {
    const std::size_t d = features.dim(0), k = prototypes.dim(0);
    const std::size_t hw = features.dim(1) * features.dim(2);
    const double* f = features.data().data();
    const double* g = grad_out.data().data();
    std::vector<double> diff(hw);
    for (std::size_t i = 0; i < k; ++i) {
        const double* grow = g + i * hw;
        for (std::size_t c = 0; c < d; ++c) {
            const double p = prototypes.at(i, c);
            const double* frow = f + c * hw;
            for (std::size_t j = 0; j < hw; ++j) diff[j] = 2.0 * (frow[j] - p);
            if (grad_prototypes) grad_prototypes->at(i, c) -= dot(diff.data(), grow, hw);
            if (grad_features) {
                double* gf = grad_features->data().data() + c * hw;
                for (std::size_t j = 0; j < hw; ++j) gf[j] += diff[j] * grow[j];
            }
        }
    }
}

Tensor log_similarity(const Tensor& distances, double epsilon) {
    if (!(epsilon > 0.0)) throw DomainError("similarity: epsilon must be positive");
    for (double v : distances.data()) {
        if (!(v >= 0.0)) throw DomainError("similarity: negative distance " + std::to_string(v));
    }
    const double gap = 1.0 - epsilon;
    return map(distances, [=](double phi) { return std::log1p(gap / (phi + epsilon)); });
}

} // namespace protodensity::ops
