#pragma once

#include <cstddef>
#include <vector>

#include "ppg/tensor.hpp"

// Differentiable tensor operations. Every function records itself on the
// active tape (see TapeScope) when at least one input requires a gradient.
namespace ppg {

// Elementwise, with NumPy-style broadcasting aligned on trailing dims.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& x, double s) { return scale(x, s); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

// Reductions. A full reduction returns shape [1]; reducing the only axis of
// a rank-1 tensor without keepdim also returns [1].
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor max(const Tensor& x, std::size_t axis, bool keepdim = false);

// Layout. All of these copy; there are no strided views.
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor swap_axes(const Tensor& x, std::size_t a, std::size_t b);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor flip(const Tensor& x, std::size_t axis);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
// Picks entries of `axis` in the given order (repeats allowed).
Tensor index_select(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& index);

// Matrix product over the last two axes. Supported operand ranks:
// [m,k]x[k,n], [B,m,k]x[k,n], [m,k]x[B,k,n], [B,m,k]x[B,k,n]. Leading
// dims of a rank>3 left operand are flattened into the batch when the
// right operand is rank 2.
Tensor matmul(const Tensor& a, const Tensor& b);

// y = x W^T + b over the last axis of x. weight:[out,in], bias:[out] or
// undefined. Equivalent to matmul(x, transpose(W)) + b without the copy.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Softmax along `axis`, computed with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

// x:[B,Cin,H,W], weight:[Cout,Cin,kh,kw], bias:[Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride = 1,
              std::size_t padding = 0);

// x:[B,C,H,W] -> [B,C,out_h,out_w], half-pixel centres (align_corners=false).
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

// x:[B,C,H,W], no padding.
Tensor max_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw);
Tensor avg_pool2d(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t sh, std::size_t sw);

// Normalizes over the last axis, then applies gamma/beta ([C] each).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x:[B,C,H,W]; statistics per (batch, group of C/groups channels).
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Diagonal selective state-space recurrence, one independent SSM per
// channel d with state size S:
//   a_t[d,s] = exp(delta_t[d] * A[d,s])
//   h_t[d,s] = a_t[d,s] * h_{t-1}[d,s] + delta_t[d] * B_t[s] * x_t[d],  h_0 = 0
//   y_t[d]   = sum_s C_t[s] * h_t[d,s]
// x, delta: [Bt,T,D]; A: [D,S]; B, C: [Bt,T,S]. Returns y: [Bt,T,D].
Tensor selective_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B,
                      const Tensor& C);

// Copy without graph history.
Tensor detach(const Tensor& x);

Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace ppg
