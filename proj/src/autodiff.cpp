#include "protodensity/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "protodensity/errors.hpp"
#include "protodensity/ops.hpp"

namespace protodensity::ad {

namespace {

void accumulate(Tensor& dst, const Tensor& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void accumulate_scaled(Tensor& dst, const Tensor& src, double factor) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

void require_same_tape(Var a, Var b, const char* what) {
    if (&a.tape() != &b.tape()) {
        throw std::logic_error(std::string(what) + ": operands recorded on different tapes");
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Var / Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::variable(Tensor value) {
    Node n;
    n.grad = Tensor(value.shape());
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
}

Var Tape::parameter(Parameter& param) {
    if (!param.trainable) return constant(param.value);
    Node n;
    n.value = param.value;
    n.grad = Tensor(param.value.shape());
    n.requires_grad = true;
    n.param = &param;
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || v.requires_grad();
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    return push(std::move(n));
}

const Tensor& Tape::grad(std::size_t id) const {
    const Node& n = nodes_[id];
    if (!n.grad) throw std::logic_error("gradient requested for node without gradient");
    return *n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad) n.grad = Tensor(n.value.shape());
    return *n.grad;
}

void Tape::backward(Var root) {
    if (root.value().size() != 1) {
        throw DimensionError("backward: root must be a scalar, got " +
                             shape_string(root.value().shape()));
    }
    if (!root.requires_grad()) return;
    grad_buffer(root.id())[0] += 1.0;
    for (std::size_t id = root.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || !n.grad || !n.backward) continue;
        n.backward(*this, *n.grad);
    }
    for (Node& n : nodes_) {
        if (n.param && n.grad) accumulate(n.param->grad, *n.grad);
    }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    require_same_tape(a, b, "add");
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(ops::add(a.value(), b.value()), {a, b},
                           [ia, ib](Tape& t, const Tensor& g) {
                               if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
                               if (t.requires_grad(ib)) accumulate(t.grad_buffer(ib), g);
                           });
}

Var sub(Var a, Var b) {
    require_same_tape(a, b, "sub");
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(ops::sub(a.value(), b.value()), {a, b},
                           [ia, ib](Tape& t, const Tensor& g) {
                               if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
                               if (t.requires_grad(ib)) accumulate_scaled(t.grad_buffer(ib), g, -1.0);
                           });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b, "mul");
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(ops::mul(a.value(), b.value()), {a, b},
                           [ia, ib](Tape& t, const Tensor& g) {
                               if (t.requires_grad(ia))
                                   accumulate(t.grad_buffer(ia), ops::mul(g, t.value(ib)));
                               if (t.requires_grad(ib))
                                   accumulate(t.grad_buffer(ib), ops::mul(g, t.value(ia)));
                           });
}

Var scale(Var a, double factor) {
    const std::size_t ia = a.id();
    return a.tape().record(ops::scale(a.value(), factor), {a},
                           [ia, factor](Tape& t, const Tensor& g) {
                               accumulate_scaled(t.grad_buffer(ia), g, factor);
                           });
}

Var add_scalar(Var a, double offset) {
    const std::size_t ia = a.id();
    return a.tape().record(ops::add_scalar(a.value(), offset), {a},
                           [ia](Tape& t, const Tensor& g) { accumulate(t.grad_buffer(ia), g); });
}

Var relu(Var x) {
    const std::size_t ix = x.id();
    return x.tape().record(ops::relu(x.value()), {x}, [ix](Tape& t, const Tensor& g) {
        auto in = t.value(ix).data();
        auto dst = t.grad_buffer(ix).data();
        for (std::size_t i = 0; i < dst.size(); ++i)
            if (in[i] > 0.0) dst[i] += g[i];
    });
}

Var sigmoid(Var x) {
    const std::size_t ix = x.id();
    Tape& tape = x.tape();
    // record() appends exactly one node, so the output id is known up front.
    const std::size_t iy = tape.size();
    return tape.record(ops::sigmoid(x.value()), {x}, [ix, iy](Tape& t, const Tensor& g) {
        auto y = t.value(iy).data();
        auto dst = t.grad_buffer(ix).data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var log(Var x) {
    const std::size_t ix = x.id();
    return x.tape().record(ops::log(x.value()), {x}, [ix](Tape& t, const Tensor& g) {
        auto in = t.value(ix).data();
        auto dst = t.grad_buffer(ix).data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] / in[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and reductions
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
    require_same_tape(a, b, "matmul");
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(ops::matmul(a.value(), b.value()), {a, b},
                           [ia, ib](Tape& t, const Tensor& g) {
                               if (t.requires_grad(ia))
                                   accumulate(t.grad_buffer(ia),
                                              ops::matmul(g, ops::transpose(t.value(ib))));
                               if (t.requires_grad(ib))
                                   accumulate(t.grad_buffer(ib),
                                              ops::matmul(ops::transpose(t.value(ia)), g));
                           });
}

Var transpose(Var a) {
    const std::size_t ia = a.id();
    return a.tape().record(ops::transpose(a.value()), {a}, [ia](Tape& t, const Tensor& g) {
        accumulate(t.grad_buffer(ia), ops::transpose(g));
    });
}

Var sum(Var x) {
    const std::size_t ix = x.id();
    return x.tape().record(Tensor::scalar(ops::sum(x.value())), {x},
                           [ix](Tape& t, const Tensor& g) {
                               Tensor& dst = t.grad_buffer(ix);
                               const double gv = g[0];
                               for (double& v : dst.data()) v += gv;
                           });
}

Var mean(Var x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var sum_axis(Var x, std::size_t axis) {
    const std::size_t ix = x.id();
    Tensor out = ops::sum_axis(x.value(), axis);
    return x.tape().record(std::move(out), {x}, [ix, axis](Tape& t, const Tensor& g) {
        const Shape& shape = t.value(ix).shape();
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
        for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
        const std::size_t n = shape[axis];
        auto dst = t.grad_buffer(ix).data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t a = 0; a < n; ++a)
                for (std::size_t j = 0; j < inner; ++j)
                    dst[(o * n + a) * inner + j] += g[o * inner + j];
    });
}

Var mean_axis(Var x, std::size_t axis) {
    return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.value().dim(axis)));
}

namespace {

ExtremumResult pick(Var x, std::size_t index) {
    const std::size_t ix = x.id();
    Var v = x.tape().record(Tensor::scalar(x.value()[index]), {x},
                            [ix, index](Tape& t, const Tensor& g) {
                                t.grad_buffer(ix)[index] += g[0];
                            });
    return {v, index};
}

} // namespace

ExtremumResult max(Var x) { return pick(x, ops::argmax(x.value().data())); }
ExtremumResult min(Var x) { return pick(x, ops::argmin(x.value().data())); }

Var row_l2_normalize(Var x) {
    const std::size_t ix = x.id();
    Tensor y = ops::row_l2_normalize(x.value());
    return x.tape().record(std::move(y), {x}, [ix](Tape& t, const Tensor& g) {
        // y = x/|x|;  dx = (g - y (g.y)) / |x|
        const Tensor& in = t.value(ix);
        Tensor& dst = t.grad_buffer(ix);
        const std::size_t rows = in.dim(0), cols = in.dim(1);
        for (std::size_t r = 0; r < rows; ++r) {
            double sq = 0.0;
            for (std::size_t c = 0; c < cols; ++c) sq += in.at(r, c) * in.at(r, c);
            const double norm = std::sqrt(sq);
            double gy = 0.0;
            for (std::size_t c = 0; c < cols; ++c) gy += g.at(r, c) * in.at(r, c) / norm;
            for (std::size_t c = 0; c < cols; ++c)
                dst.at(r, c) += (g.at(r, c) - in.at(r, c) / norm * gy) / norm;
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions, pooling
// ---------------------------------------------------------------------------

Var conv1x1(Var input, Var weight, std::optional<Var> bias) {
    require_same_tape(input, weight, "conv1x1");
    const std::size_t ii = input.id(), iw = weight.id();
    const std::size_t ib = bias ? bias->id() : 0;
    const bool has_bias = bias.has_value();
    Tensor out = ops::conv1x1(input.value(), weight.value(), has_bias ? &bias->value() : nullptr);
    Tape& tape = input.tape();
    auto fn = [ii, iw, ib, has_bias](Tape& t, const Tensor& g) {
        Tensor* gi = t.requires_grad(ii) ? &t.grad_buffer(ii) : nullptr;
        Tensor* gw = t.requires_grad(iw) ? &t.grad_buffer(iw) : nullptr;
        Tensor* gb = has_bias && t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
        ops::conv1x1_backward(t.value(ii), t.value(iw), g, gi, gw, gb);
    };
    if (has_bias) return tape.record(std::move(out), {input, weight, *bias}, fn);
    return tape.record(std::move(out), {input, weight}, fn);
}

Var conv3x3(Var input, Var weight, std::optional<Var> bias) {
    require_same_tape(input, weight, "conv3x3");
    const std::size_t ii = input.id(), iw = weight.id();
    const std::size_t ib = bias ? bias->id() : 0;
    const bool has_bias = bias.has_value();
    Tensor out = ops::conv3x3(input.value(), weight.value(), has_bias ? &bias->value() : nullptr);
    Tape& tape = input.tape();
    auto fn = [ii, iw, ib, has_bias](Tape& t, const Tensor& g) {
        Tensor* gi = t.requires_grad(ii) ? &t.grad_buffer(ii) : nullptr;
        Tensor* gw = t.requires_grad(iw) ? &t.grad_buffer(iw) : nullptr;
        Tensor* gb = has_bias && t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
        ops::conv3x3_backward(t.value(ii), t.value(iw), g, gi, gw, gb);
    };
    if (has_bias) return tape.record(std::move(out), {input, weight, *bias}, fn);
    return tape.record(std::move(out), {input, weight}, fn);
}

Var maxpool2(Var input) {
    const std::size_t ii = input.id();
    std::vector<std::size_t> argmax;
    Tensor out = ops::maxpool2(input.value(), &argmax);
    return input.tape().record(std::move(out), {input},
                               [ii, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
                                   Tensor& dst = t.grad_buffer(ii);
                                   for (std::size_t k = 0; k < argmax.size(); ++k)
                                       dst[argmax[k]] += g[k];
                               });
}

// ---------------------------------------------------------------------------
// Prototype distances
// ---------------------------------------------------------------------------

Var distance_map(Var features, Var prototypes) {
    require_same_tape(features, prototypes, "distance_map");
    const std::size_t iff = features.id(), ip = prototypes.id();
    return features.tape().record(
        ops::distance_map(features.value(), prototypes.value()), {features, prototypes},
        [iff, ip](Tape& t, const Tensor& g) {
            Tensor* gf = t.requires_grad(iff) ? &t.grad_buffer(iff) : nullptr;
            Tensor* gp = t.requires_grad(ip) ? &t.grad_buffer(ip) : nullptr;
            ops::distance_map_backward(t.value(iff), t.value(ip), g, gf, gp);
        });
}

Var log_similarity(Var distances, double epsilon) {
    const std::size_t id = distances.id();
    return distances.tape().record(
        ops::log_similarity(distances.value(), epsilon), {distances},
        [id, epsilon](Tape& t, const Tensor& g) {
            auto phi = t.value(id).data();
            auto dst = t.grad_buffer(id).data();
            for (std::size_t i = 0; i < dst.size(); ++i)
                dst[i] += g[i] * (1.0 / (phi[i] + 1.0) - 1.0 / (phi[i] + epsilon));
        });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

Var stack(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("stack: no inputs");
    const Shape& shape = parts.front().value().shape();
    Shape out_shape{parts.size()};
    out_shape.insert(out_shape.end(), shape.begin(), shape.end());
    Tensor out(out_shape);
    const std::size_t n = parts.front().value().size();
    std::vector<std::size_t> ids;
    bool needs = false;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        require_same_tape(parts.front(), parts[p], "stack");
        require_same_shape(parts.front().value(), parts[p].value(), "stack");
        std::copy(parts[p].value().data().begin(), parts[p].value().data().end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(p * n));
        ids.push_back(parts[p].id());
        needs = needs || parts[p].requires_grad();
    }
    Tape& tape = parts.front().tape();
    if (!needs) return tape.constant(std::move(out));
    // Any one requiring input makes the record() call keep the closure.
    Var anchor;
    for (const Var& v : parts)
        if (v.requires_grad()) anchor = v;
    return tape.record(std::move(out), {anchor}, [ids = std::move(ids), n](Tape& t, const Tensor& g) {
        for (std::size_t p = 0; p < ids.size(); ++p) {
            if (!t.requires_grad(ids[p])) continue;
            auto dst = t.grad_buffer(ids[p]).data();
            for (std::size_t i = 0; i < n; ++i) dst[i] += g[p * n + i];
        }
    });
}

Var reshape(Var x, Shape shape) {
    const std::size_t ix = x.id();
    return x.tape().record(x.value().reshaped(std::move(shape)), {x},
                           [ix](Tape& t, const Tensor& g) {
                               auto dst = t.grad_buffer(ix).data();
                               for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
                           });
}

Var gather(Var x, std::vector<std::size_t> flat_indices) {
    if (flat_indices.empty()) throw DimensionError("gather: no indices");
    const Tensor& in = x.value();
    Tensor out({flat_indices.size()});
    for (std::size_t k = 0; k < flat_indices.size(); ++k) {
        if (flat_indices[k] >= in.size()) {
            throw DimensionError("gather: index " + std::to_string(flat_indices[k]) +
                                 " out of range for " + shape_string(in.shape()));
        }
        out[k] = in[flat_indices[k]];
    }
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x},
                           [ix, idx = std::move(flat_indices)](Tape& t, const Tensor& g) {
                               Tensor& dst = t.grad_buffer(ix);
                               for (std::size_t k = 0; k < idx.size(); ++k) dst[idx[k]] += g[k];
                           });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
    const Tensor& in = x.value();
    require_rank(in, 2, "slice_rows");
    if (begin >= end || end > in.dim(0)) {
        throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") for " + shape_string(in.shape()));
    }
    const std::size_t cols = in.dim(1);
    Tensor out({end - begin, cols});
    std::copy(in.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
              in.data().begin() + static_cast<std::ptrdiff_t>(end * cols), out.data().begin());
    const std::size_t ix = x.id();
    return x.tape().record(std::move(out), {x}, [ix, begin, cols](Tape& t, const Tensor& g) {
        auto dst = t.grad_buffer(ix).data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[begin * cols + i] += g[i];
    });
}

} // namespace protodensity::ad
