#include "cvloc/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "cvloc/ops.hpp"

namespace cvloc {

namespace {

constexpr double kGapClamp = 1e-4;
constexpr int kMaxSweeps = 100;

double clamp_gap(double g) {
  if (std::abs(g) >= kGapClamp) return g;
  return g >= 0.0 ? kGapClamp : -kGapClamp;
}

double off_diag_norm(std::size_t n, const std::vector<double>& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) acc += a[i * n + j] * a[i * n + j];
  return std::sqrt(2.0 * acc);
}

// Cyclic Jacobi on a symmetric matrix; V accumulates rotations so that
// A_in = V diag(vals) V^T on exit. a is overwritten.
void jacobi_eig(std::size_t n, std::vector<double>& a, std::vector<double>& v) {
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  double fro = 0.0;
  for (double x : a) fro += x * x;
  fro = std::sqrt(fro);
  const double tol = std::max(1e-300, 1e-13 * fro);
  int sweep = 0;
  while (off_diag_norm(n, a) > tol) {
    if (++sweep > kMaxSweeps) throw NumericError("sym_eig: Jacobi iteration did not converge");
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a[i * n + p], aiq = a[i * n + q];
          a[i * n + p] = c * aip - s * aiq;
          a[i * n + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p * n + i], aqi = a[q * n + i];
          a[p * n + i] = c * api - s * aqi;
          a[q * n + i] = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v[i * n + p], viq = v[i * n + q];
          v[i * n + p] = c * vip - s * viq;
          v[i * n + q] = s * vip + c * viq;
        }
      }
  }
}

// Flips column j of v (n x n, column-major access v[i*n+j]) so its
// largest-magnitude entry (first on ties) is positive.
bool fix_column_sign(std::size_t n, std::vector<double>& v, std::size_t j) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (std::abs(v[i * n + j]) > std::abs(v[best * n + j])) best = i;
  if (v[best * n + j] < 0.0) {
    for (std::size_t i = 0; i < n; ++i) v[i * n + j] = -v[i * n + j];
    return true;
  }
  return false;
}

}  // namespace

std::pair<Tensor, Tensor> sym_eig(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw ShapeError("sym_eig: expected a square matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.dim(0);
  if (n == 0 || n > 64) throw ShapeError("sym_eig: supported sizes are 1..64");

  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] = 0.5 * (m.data()[i * n + j] + m.data()[j * n + i]);

  std::vector<double> v;
  jacobi_eig(n, a, v);

  std::vector<double> vals(n);
  for (std::size_t i = 0; i < n; ++i) vals[i] = a[i * n + i];
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t x, std::size_t y) { return vals[x] < vals[y]; });

  // Packed layout: rows 0..n-1 hold V (sorted columns), row n holds vals.
  std::vector<double> packed((n + 1) * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < n; ++i) packed[i * n + j] = v[i * n + perm[j]];
    packed[n * n + j] = vals[perm[j]];
  }
  {
    std::vector<double> vcols(packed.begin(), packed.begin() + n * n);
    for (std::size_t j = 0; j < n; ++j) fix_column_sign(n, vcols, j);
    std::copy(vcols.begin(), vcols.end(), packed.begin());
  }

  auto pnode = detail::make_op_node("sym_eig", {n + 1, n}, std::move(packed), {m.node()});
  if (pnode->requires_grad) {
    Node* self = pnode.get();
    auto mn = m.node();
    pnode->backward_fn = [self, mn, n]() {
      if (!mn->requires_grad) return;
      mn->ensure_grad();
      const double* vv = self->value.data();          // V, n x n
      const double* lam = self->value.data() + n * n;  // eigenvalues
      const double* dv = self->grad.data();
      const double* dlam = self->grad.data() + n * n;
      // G = F o (V^T dV) off-diagonal, diag(dlam) on the diagonal, with
      // F_ij = 1/(lam_j - lam_i) clamped.
      std::vector<double> g(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j) {
            g[i * n + j] = dlam[i];
            continue;
          }
          double vtdv = 0.0;
          for (std::size_t r = 0; r < n; ++r) vtdv += vv[r * n + i] * dv[r * n + j];
          g[i * n + j] = vtdv / clamp_gap(lam[j] - lam[i]);
        }
      // dM = sym(V G V^T); symmetrized because the forward symmetrizes.
      std::vector<double> vg(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < n; ++p) {
          double acc = 0.0;
          for (std::size_t r = 0; r < n; ++r) acc += vv[i * n + r] * g[r * n + p];
          vg[i * n + p] = acc;
        }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t p = 0; p < n; ++p) acc += vg[i * n + p] * vv[j * n + p];
          mn->grad[i * n + j] += 0.5 * acc;
          mn->grad[j * n + i] += 0.5 * acc;
        }
    };
  }
  Tensor packed_t(pnode);
  Tensor vecs = slice_rows(packed_t, 0, n);
  Tensor eigenvalues = reshape(slice_rows(packed_t, n, n + 1), {n});
  return {eigenvalues, vecs};
}

SvdResult svd_small(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw ShapeError("svd_small: expected a square matrix, got " + shape_str(m.shape()));
  const std::size_t n = m.dim(0);
  if (n == 0 || n > 16) throw ShapeError("svd_small: supported sizes are 1..16");

  // One-sided Jacobi: orthogonalize the columns of W = M by plane
  // rotations accumulated into V.
  std::vector<double> w(m.data().begin(), m.data().end());
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  int sweep = 0;
  while (true) {
    bool converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          alpha += w[i * n + p] * w[i * n + p];
          beta += w[i * n + q] * w[i * n + q];
          gamma += w[i * n + p] * w[i * n + q];
        }
        if (std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < n; ++i) {
          const double wip = w[i * n + p], wiq = w[i * n + q];
          w[i * n + p] = c * wip - s * wiq;
          w[i * n + q] = s * wip + c * wiq;
          const double vip = v[i * n + p], viq = v[i * n + q];
          v[i * n + p] = c * vip - s * viq;
          v[i * n + q] = s * vip + c * viq;
        }
      }
    if (converged) break;
    if (++sweep > kMaxSweeps) throw NumericError("svd_small: Jacobi iteration did not converge");
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += w[i * n + j] * w[i * n + j];
    sigma[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  double smax = 0.0;
  for (double s : sigma) smax = std::max(smax, s);
  const double rank_tol = 1e-12 * (smax + 1e-300);

  std::vector<double> u(n * n, 0.0), vs(n * n, 0.0), svals(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = perm[j];
    svals[j] = sigma[src];
    for (std::size_t i = 0; i < n; ++i) vs[i * n + j] = v[i * n + src];
    if (sigma[src] > rank_tol) {
      for (std::size_t i = 0; i < n; ++i) u[i * n + j] = w[i * n + src] / sigma[src];
    }
  }
  // Complete U for (near-)zero singular values with Gram-Schmidt over the
  // canonical basis. Deterministic: first basis vector with residual > 1/2.
  for (std::size_t j = 0; j < n; ++j) {
    if (svals[j] > rank_tol) continue;
    for (std::size_t e = 0; e < n; ++e) {
      std::vector<double> cand(n, 0.0);
      cand[e] = 1.0;
      for (std::size_t jj = 0; jj < n; ++jj) {
        if (jj == j) continue;
        if (svals[jj] <= rank_tol && jj > j) continue;  // not yet filled
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += cand[i] * u[i * n + jj];
        for (std::size_t i = 0; i < n; ++i) cand[i] -= d * u[i * n + jj];
      }
      double norm = 0.0;
      for (double x : cand) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.5) {
        for (std::size_t i = 0; i < n; ++i) u[i * n + j] = cand[i] / norm;
        break;
      }
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(u[i * n + j]) > std::abs(u[best * n + j])) best = i;
    if (u[best * n + j] < 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        u[i * n + j] = -u[i * n + j];
        vs[i * n + j] = -vs[i * n + j];
      }
    }
  }

  // Packed layout: rows 0..n-1 U, rows n..2n-1 V, row 2n sigma.
  std::vector<double> packed((2 * n + 1) * n);
  std::copy(u.begin(), u.end(), packed.begin());
  std::copy(vs.begin(), vs.end(), packed.begin() + n * n);
  std::copy(svals.begin(), svals.end(), packed.begin() + 2 * n * n);

  auto pnode = detail::make_op_node("svd_small", {2 * n + 1, n}, std::move(packed), {m.node()});
  if (pnode->requires_grad) {
    Node* self = pnode.get();
    auto mn = m.node();
    pnode->backward_fn = [self, mn, n]() {
      if (!mn->requires_grad) return;
      mn->ensure_grad();
      const double* pu = self->value.data();
      const double* pv = self->value.data() + n * n;
      const double* ps = self->value.data() + 2 * n * n;
      const double* du = self->grad.data();
      const double* dvv = self->grad.data() + n * n;
      const double* ds = self->grad.data() + 2 * n * n;
      // Inner = J Sigma + Sigma K + diag(ds), with J = F o (U^T dU - dU^T U),
      // K = F o (V^T dV - dV^T V), F_ij = 1/(s_j^2 - s_i^2) clamped.
      std::vector<double> inner(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i == j) {
            inner[i * n + j] = ds[i];
            continue;
          }
          double utdu = 0.0, dutu = 0.0, vtdv = 0.0, dvtv = 0.0;
          for (std::size_t r = 0; r < n; ++r) {
            utdu += pu[r * n + i] * du[r * n + j];
            dutu += du[r * n + i] * pu[r * n + j];
            vtdv += pv[r * n + i] * dvv[r * n + j];
            dvtv += dvv[r * n + i] * pv[r * n + j];
          }
          const double f = 1.0 / clamp_gap(ps[j] * ps[j] - ps[i] * ps[i]);
          inner[i * n + j] = f * ((utdu - dutu) * ps[j] + ps[i] * (vtdv - dvtv));
        }
      std::vector<double> tmp(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < n; ++p) {
          double acc = 0.0;
          for (std::size_t r = 0; r < n; ++r) acc += pu[i * n + r] * inner[r * n + p];
          tmp[i * n + p] = acc;
        }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t p = 0; p < n; ++p) acc += tmp[i * n + p] * pv[j * n + p];
          mn->grad[i * n + j] += acc;
        }
    };
  }
  Tensor packed_t(pnode);
  SvdResult out;
  out.u = slice_rows(packed_t, 0, n);
  out.vt = transpose(slice_rows(packed_t, n, 2 * n));
  out.s = reshape(slice_rows(packed_t, 2 * n, 2 * n + 1), {n});
  return out;
}

}  // namespace cvloc
