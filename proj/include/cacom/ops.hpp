#pragma once

// Differentiable operations. Shapes are never broadcast implicitly: the only
// exception is a scalar (one-element) right operand for add/sub/mul.
// Row-wise bias addition and grouped products are explicit ops.

#include <cstdint>
#include <span>
#include <vector>

#include "cacom/tensor.hpp"

namespace cacom::ad {

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Independent products over `groups` equal row blocks.
// a: [G*p x k]; b: [G*k x n] (or [G*n x k] when transpose_b) -> [G*p x n].
Tensor batched_matmul(const Tensor& a, const Tensor& b, std::size_t groups, bool transpose_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float c);
// x: [n x d], bias: [d]
Tensor add_rowwise(const Tensor& x, const Tensor& bias);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor elu(const Tensor& x);
Tensor abs(const Tensor& x);

// Max-subtracted softmax along `axis` (rank 1 or 2).
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
// Rows of a rank-2 tensor, in `rows` order; repeats allowed.
Tensor gather_rows(const Tensor& x, std::span<const std::uint32_t> rows);
// out[r] = x[r, cols[r]] as [n x 1].
Tensor select_per_row(const Tensor& x, std::span<const std::uint32_t> cols);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// x: [G*S x d] -> [G x d], out[g] = sum_s weights[g*S+s] * x[g*S+s].
Tensor group_weighted_sum(const Tensor& x, std::span<const float> weights, std::size_t group_size);

// mean((a-b)^2)
Tensor mse(const Tensor& a, const Tensor& b);
// Mean binary cross-entropy; p clamped to [1e-7, 1-1e-7].
Tensor bce(const Tensor& p, const Tensor& y);
inline constexpr float kBceEpsilon = 1e-7f;

// Same values, cut from the tape.
Tensor detach(const Tensor& x);

struct GruParams {
  Tensor w_x;  // [d_in x 3*d_h], column blocks: reset | update | candidate
  Tensor w_h;  // [d_h x 3*d_h]
  Tensor b_x;  // [3*d_h]
  Tensor b_h;  // [3*d_h]
};

// x: [n x d_in], h: [n x d_h] -> [n x d_h]
//   r = sig(x Wr + h Ur + b), z = sig(x Wz + h Uz + b)
//   c = tanh(x Wc + b + r * (h Uc + b)),  h' = (1 - z) * c + z * h
Tensor gru_cell(const Tensor& x, const Tensor& h, const GruParams& p);

}  // namespace cacom::ad
