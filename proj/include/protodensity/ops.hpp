#pragma once

// Plain tensor kernels. These are the forward (and, for the heavier ops,
// backward) building blocks used both by inference code and by the tape in
// autodiff.hpp. No broadcasting: every shape relation is checked explicitly.

#include <cstddef>
#include <vector>

#include "protodensity/tensor.hpp"

namespace protodensity::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor relu(const Tensor& x);
/// Numerically stable logistic function.
Tensor sigmoid(const Tensor& x);
double sigmoid(double x);
/// Natural log; throws DomainError on non-positive input.
Tensor log(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

double sum(const Tensor& x);
double mean(const Tensor& x);
/// Reduce over one axis; the axis is removed from the result shape.
Tensor sum_axis(const Tensor& x, std::size_t axis);

// First index in row-major order wins ties.
std::size_t argmax(std::span<const double> values);
std::size_t argmin(std::span<const double> values);

/// Each row of a 2-D tensor scaled to unit L2 norm. Zero rows throw DomainError.
Tensor row_l2_normalize(const Tensor& x);

/// out[o,h,w] = sum_c weight[o,c] * in[c,h,w] (+ bias[o]).
Tensor conv1x1(const Tensor& input, const Tensor& weight, const Tensor* bias = nullptr);
void conv1x1_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                      Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias);

/// 3x3 convolution, stride 1, zero padding 1. weight is [C_out x C_in x 3 x 3].
Tensor conv3x3(const Tensor& input, const Tensor& weight, const Tensor* bias = nullptr);
void conv3x3_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out,
                      Tensor* grad_input, Tensor* grad_weight, Tensor* grad_bias);

/// 2x2 max-pool with stride 2 over [C x H x W]; H and W must be even.
/// `argmax` (optional) receives the flat input index chosen for each output.
Tensor maxpool2(const Tensor& input, std::vector<std::size_t>* argmax = nullptr);

/// phi[i,h,w] = sum_c (features[c,h,w] - prototypes[i,c])^2.
Tensor distance_map(const Tensor& features, const Tensor& prototypes);
void distance_map_backward(const Tensor& features, const Tensor& prototypes,
                           const Tensor& grad_out, Tensor* grad_features,
                           Tensor* grad_prototypes);

/// log((phi + 1) / (phi + eps)), evaluated as log1p((1 - eps) / (phi + eps)).
Tensor log_similarity(const Tensor& distances, double epsilon);

} // namespace protodensity::ops
