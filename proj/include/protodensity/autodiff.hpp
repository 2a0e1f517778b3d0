#pragma once

// Reverse-mode differentiation over an explicit tape. A Tape is rebuilt for
// every forward pass and is confined to one thread. Values and gradients are
// stored per node; backward() walks the nodes in reverse recording order.

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <vector>

#include "protodensity/tensor.hpp"

namespace protodensity {

/// Learnable state. Optimizers skip parameters with trainable == false, and
/// the tape treats them as constants so no gradient is ever produced.
struct Parameter {
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter() = default;
    explicit Parameter(Tensor v, bool is_trainable = true)
        : value(std::move(v)), grad(value.shape()), trainable(is_trainable) {}

    void zero_grad() { grad = Tensor(value.shape()); }
};

namespace ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    /// Called with the gradient flowing into the node; it must accumulate into
    /// the gradients of the node's inputs via grad_buffer().
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf whose gradient is kept on the tape after backward().
    Var variable(Tensor value);
    /// Leaf bound to a Parameter; backward() adds into param.grad when the
    /// parameter is trainable. Non-trainable parameters become constants.
    Var parameter(Parameter& param);

    /// Record an op result. If no input requires a gradient the node is a
    /// constant and `backward` is dropped.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

    /// Seeds d(root)/d(root) = 1; root must hold exactly one element.
    void backward(Var root);

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    const Tensor& grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Zero-initialised on first access.
    Tensor& grad_buffer(std::size_t id);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::optional<Tensor> grad;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    Var push(Node node);

    std::deque<Node> nodes_;
};

// Elementwise ops; shapes must match exactly.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var relu(Var x);
Var sigmoid(Var x);
Var log(Var x);

Var matmul(Var a, Var b);
Var transpose(Var a);

Var sum(Var x);
Var mean(Var x);
Var sum_axis(Var x, std::size_t axis);
Var mean_axis(Var x, std::size_t axis);

struct ExtremumResult {
    Var value;          // rank-0
    std::size_t index;  // flat row-major index, first on ties
};
/// Gradient flows to the selected element only.
ExtremumResult max(Var x);
ExtremumResult min(Var x);

Var row_l2_normalize(Var x);

Var conv1x1(Var input, Var weight, std::optional<Var> bias = std::nullopt);
Var conv3x3(Var input, Var weight, std::optional<Var> bias = std::nullopt);
Var maxpool2(Var input);

Var distance_map(Var features, Var prototypes);
Var log_similarity(Var distances, double epsilon);

/// New leading axis; all inputs must share one shape.
Var stack(const std::vector<Var>& parts);
Var reshape(Var x, Shape shape);
/// 1-D tensor of x's elements at the given flat indices.
Var gather(Var x, std::vector<std::size_t> flat_indices);
/// Rows [begin, end) of a 2-D tensor.
Var slice_rows(Var x, std::size_t begin, std::size_t end);

} // namespace ad
} // namespace protodensity
