#pragma once

#include "poro/diff/tape.hpp"

namespace poro::diff {

// elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);
Var scalar_sub(double c, Var a);  // c - a
Var relu(Var a);
Var clamp(Var a, double lo, double hi);
/// 1 / (1 + exp(-k x)); k = 1 gives the plain sigmoid.
Var steep_sigmoid(Var a, double k);
Var exp_op(Var a);
Var log_op(Var a);
Var square(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// reductions
Var sum(Var a);
Var mean(Var a);

// structure
Var reshape(Var a, Shape shape);
Var concat(Var a, Var b, int axis);
/// Columns [begin, begin+len) of a rank-2 tensor.
Var slice_cols(Var a, int begin, int len);

// linear algebra
Var matmul(Var a, Var b);
/// Broadcasts b over every axis except `axis` (channel/feature bias).
Var bias_add(Var a, Var b, int axis = 1);

// convolution, layouts (N,C,H,W) and (N,C,D,H,W), symmetric zero padding
Var conv2d(Var x, Var w, int stride, int pad);
Var conv3d(Var x, Var w, int stride, int pad);
/// Adjoint of conv2d/conv3d with the same kernel, stride and padding;
/// output spatial extent = (in - 1) * stride + k - 2 * pad.
Var conv_transpose2d(Var z, Var w, int stride, int pad);
Var conv_transpose3d(Var z, Var w, int stride, int pad);
Var maxpool2d(Var x, int k = 2, int stride = 2);
Var maxpool3d(Var x, int k = 2, int stride = 2);

// losses
/// Sum of elementwise binary cross-entropy against a fixed target in [0,1];
/// probabilities are clamped to [eps, 1-eps] inside the logs.
Var bce_sum(Var p, const Eigen::ArrayXd& target, double eps = 1e-12);

/// conv output extent: floor((n + 2p - k) / s) + 1
inline int conv_out_extent(int n, int k, int stride, int pad) {
    return (n + 2 * pad - k) / stride + 1;
}

}  // namespace poro::diff
