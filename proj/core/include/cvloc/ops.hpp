#pragma once

#include <vector>

#include "cvloc/tensor.hpp"

namespace cvloc {

// Elementwise (same shape unless noted). Every op is differentiable and
// shape-checked; outputs are verified finite.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor rsqrt(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor max_scalar(const Tensor& a, double c);

// Linear algebra / structure.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
// Stacks 1-D tensors of equal length into a matrix, one per row.
Tensor stack_rows(const std::vector<Tensor>& rows);
Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1);
Tensor select_cols(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor diag_part(const Tensor& a);
Tensor set_diag_one(const Tensor& a);

// Broadcast helpers.
// Scales slice i along the first axis by s[i].
Tensor scale_rows(const Tensor& a, const Tensor& s);
// Scales column j of a 2-D tensor by s[j].
Tensor scale_cols(const Tensor& a, const Tensor& s);
// Adds vector v to every row of a 2-D tensor.
Tensor add_rowvec(const Tensor& a, const Tensor& v);

// Normalization / reductions.
Tensor softmax_axis(const Tensor& a, std::size_t axis);
Tensor logsumexp_axis(const Tensor& a, std::size_t axis);
// Normalizes the trailing axis to zero mean / unit variance (eps 1e-5).
Tensor layer_norm(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor l2_norm(const Tensor& a);
Tensor frob_norm(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12);

// R_ij = ||x_i - x_j||_2 over rows of a 2-D tensor.
Tensor pairwise_distance_matrix(const Tensor& x);

// Rows (k*n_tiles + i) = s_k + p_i, for s: K x C and p: N x C.
Tensor tile_rows_add(const Tensor& s, const Tensor& p);
// out(i,c) = sum_k a(k,i) * f(k*N+i, c) for a: K x N and f: (K*N) x C.
// The slot sum is order-stable (sorted), so relabeling slots is exact.
Tensor mask_compose(const Tensor& a, const Tensor& f);

Tensor stop_grad(const Tensor& a);

// Convenience compositions.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor dot(const Tensor& a, const Tensor& b);

}  // namespace cvloc
