#pragma once

#include <utility>

#include "cvloc/tensor.hpp"

namespace cvloc {

// Symmetric eigendecomposition by cyclic Jacobi sweeps (matrices up to
// 64x64). Input is symmetrized as (M + M^T)/2. Returns (eigenvalues
// ascending, eigenvectors as columns). Eigenvector signs are fixed so the
// largest-magnitude entry (first on ties) is positive, which makes results
// deterministic. The backward pass uses the standard symmetric-eig adjoint
// with eigenvalue-gap denominators clamped to magnitude >= 1e-4.
std::pair<Tensor, Tensor> sym_eig(const Tensor& m);

struct SvdResult {
  Tensor u;   // left singular vectors, columns
  Tensor s;   // singular values, descending, non-negative
  Tensor vt;  // right singular vectors transposed
};

// One-sided Jacobi SVD for square matrices up to 16x16. Differentiable
// (same gap clamp as sym_eig, applied to sigma_j^2 - sigma_i^2).
SvdResult svd_small(const Tensor& m);

}  // namespace cvloc
