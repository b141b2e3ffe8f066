#include "cvloc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cvloc {

using detail::make_op_node;
using detail::stable_sum;

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(a.shape()));
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const char* op, const Tensor& a, std::size_t axis) {
  if (axis >= a.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(a.shape()));
  AxisSplit s{1, a.shape()[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= a.shape()[i];
  for (std::size_t i = axis + 1; i < a.rank(); ++i) s.inner *= a.shape()[i];
  return s;
}

// Generic unary elementwise op with derivative computed from (x, y).
template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.size());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  auto n = make_op_node(name, a.shape(), std::move(out), {a.node()});
  if (n->requires_grad) {
    Node* self = n.get();
    auto an = a.node();
    n->backward_fn = [self, an, df]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < self->value.size(); ++i)
        an->grad[i] += self->grad[i] * df(an->value[i], self->value[i]);
    };
  }
  return Tensor(n);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto n = make_op_node("add", a.shape(), std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node* self = n.get();
    auto an = a.node(), bn = b.node();
    n->backward_fn = [self, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self->value.size(); ++i) an->grad[i] += self->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self->value.size(); ++i) bn->grad[i] += self->grad[i];
      }
    };
  }
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto n = make_op_node("sub", a.shape(), std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node* self = n.get();
    auto an = a.node(), bn = b.node();
    n->backward_fn = [self, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self->value.size(); ++i) an->grad[i] += self->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self->value.size(); ++i) bn->grad[i] -= self->grad[i];
      }
    };
  }
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto n = make_op_node("mul", a.shape(), std::move(out), {a.node(), b.node()});
  if (n->requires_grad) {
    Node* self = n.get();
    auto an = a.node(), bn = b.node();
    n->backward_fn = [self, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < self->value.size(); ++i) an->grad[i] += self->grad[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < self->value.size(); ++i) bn->grad[i] += self->grad[i] * an->value[i];
      }
    };
  }
  return Tensor(n);
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op("mul_scalar", a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op("tanh", a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary_op(
      "gelu", a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [=](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor exp(const Tensor& a) {
  return unary_op("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op("reciprocal", a, [](double x) { return 1.0 / x; },
                  [](double x, double) { return -1.0 / (x * x); });
}

Tensor rsqrt(const Tensor& a) {
  return unary_op("rsqrt", a, [](double x) { return 1.0 / std::sqrt(x); },
                  [](double x, double y) { return -0.5 * y / x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ConfigError("clamp: lo > hi");
  return unary_op(
      "clamp", a, [=](double x) { return std::min(std::max(x, lo), hi); },
      [=](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor max_scalar(const Tensor& a, double c) {
  return unary_op("max_scalar", a, [c](double x) { return std::max(x, c); },
                  [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = pa[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = pb + p * n;
        double* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
  }
  auto node = make_op_node("matmul", {m, n}, std::move(out), {a.node(), b.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node(), bn = b.node();
    node->backward_fn = [self, an, bn, m, k, n]() {
      const double* g = self->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        // dA(i,p) += sum_j g(i,j) B(p,j)
        const double* pb = bn->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double* grow = g + i * n;
            const double* brow = pb + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            an->grad[i * k + p] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // dB(p,j) += sum_i A(i,p) g(i,j)
        const double* pa = an->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            if (aip == 0.0) continue;
            const double* grow = g + i * n;
            double* brow = bn->grad.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
          }
      }
    };
  }
  return Tensor(node);
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.data()[i * c + j];
  auto node = make_op_node("transpose", {c, r}, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, r, c]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self->grad[j * r + i];
    };
  }
  return Tensor(node);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  auto node = make_op_node("reshape", shape, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < self->value.size(); ++i) an->grad[i] += self->grad[i];
    };
  }
  return Tensor(node);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2("concat_rows", p);
    if (p.dim(1) != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    ins.push_back(p.node());
  }
  auto node = make_op_node("concat_rows", {rows, cols}, std::move(out), std::move(ins));
  if (node->requires_grad) {
    Node* self = node.get();
    std::vector<std::shared_ptr<Node>> caps;
    for (const auto& p : parts) caps.push_back(p.node());
    node->backward_fn = [self, caps]() {
      std::size_t off = 0;
      for (const auto& in : caps) {
        const std::size_t len = in->value.size();
        if (in->requires_grad) {
          in->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) in->grad[i] += self->grad[off + i];
        }
        off += len;
      }
    };
  }
  return Tensor(node);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no inputs");
  const std::size_t cols = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& rt : rows) {
    if (rt.size() != cols) throw ShapeError("stack_rows: lengths differ");
    out.insert(out.end(), rt.data().begin(), rt.data().end());
    ins.push_back(rt.node());
  }
  auto node = make_op_node("stack_rows", {rows.size(), cols}, std::move(out), std::move(ins));
  if (node->requires_grad) {
    Node* self = node.get();
    std::vector<std::shared_ptr<Node>> caps;
    for (const auto& rt : rows) caps.push_back(rt.node());
    node->backward_fn = [self, caps, cols]() {
      for (std::size_t r = 0; r < caps.size(); ++r) {
        const auto& in = caps[r];
        if (!in->requires_grad) continue;
        in->ensure_grad();
        for (std::size_t i = 0; i < cols; ++i) in->grad[i] += self->grad[r * cols + i];
      }
    };
  }
  return Tensor(node);
}

Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  require_rank2("slice_rows", a);
  if (r0 > r1 || r1 > a.dim(0)) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t c = a.dim(1);
  std::vector<double> out(a.data().begin() + r0 * c, a.data().begin() + r1 * c);
  auto node = make_op_node("slice_rows", {r1 - r0, c}, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, r0, c]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < self->value.size(); ++i) an->grad[r0 * c + i] += self->grad[i];
    };
  }
  return Tensor(node);
}

Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  require_rank2("slice_cols", a);
  if (c0 > c1 || c1 > a.dim(1)) throw ShapeError("slice_cols: range out of bounds");
  const std::size_t r = a.dim(0), c = a.dim(1), w = c1 - c0;
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * c + c0 + j];
  auto node = make_op_node("slice_cols", {r, w}, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, r, c, c0, w]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) an->grad[i * c + c0 + j] += self->grad[i * w + j];
    };
  }
  return Tensor(node);
}

Tensor select_cols(const Tensor& a, const std::vector<std::size_t>& idx) {
  require_rank2("select_cols", a);
  const std::size_t r = a.dim(0), c = a.dim(1), w = idx.size();
  for (std::size_t j : idx)
    if (j >= c) throw ShapeError("select_cols: index out of range");
  std::vector<double> out(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = a.data()[i * c + idx[j]];
  auto node = make_op_node("select_cols", {r, w}, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    auto ids = idx;
    node->backward_fn = [self, an, r, c, ids]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const std::size_t w2 = ids.size();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w2; ++j) an->grad[i * c + ids[j]] += self->grad[i * w2 + j];
    };
  }
  return Tensor(node);
}

Tensor diag_part(const Tensor& a) {
  require_rank2("diag_part", a);
  if (a.dim(0) != a.dim(1)) throw ShapeError("diag_part: matrix not square");
  const std::size_t n = a.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i * n + i];
  auto node = make_op_node("diag_part", {n}, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, n]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) an->grad[i * n + i] += self->grad[i];
    };
  }
  return Tensor(node);
}

Tensor set_diag_one(const Tensor& a) {
  require_rank2("set_diag_one", a);
  if (a.dim(0) != a.dim(1)) throw ShapeError("set_diag_one: matrix not square");
  const std::size_t n = a.dim(0);
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i) out[i * n + i] = 1.0;
  auto node = make_op_node("set_diag_one", a.shape(), std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, n]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (i != j) an->grad[i * n + j] += self->grad[i * n + j];
    };
  }
  return Tensor(node);
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
  if (a.rank() < 1 || s.rank() != 1 || s.size() != a.dim(0))
    throw ShapeError("scale_rows: scale length " + shape_str(s.shape()) + " does not match first axis of " +
                     shape_str(a.shape()));
  const std::size_t r = a.dim(0), inner = a.size() / r;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double w = s.data()[i];
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = a.data()[i * inner + j] * w;
  }
  auto node = make_op_node("scale_rows", a.shape(), std::move(out), {a.node(), s.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node(), sn = s.node();
    node->backward_fn = [self, an, sn, r, inner]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const double w = sn->value[i];
          for (std::size_t j = 0; j < inner; ++j) an->grad[i * inner + j] += self->grad[i * inner + j] * w;
        }
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t j = 0; j < inner; ++j) acc += self->grad[i * inner + j] * an->value[i * inner + j];
          sn->grad[i] += acc;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor scale_cols(const Tensor& a, const Tensor& s) {
  require_rank2("scale_cols", a);
  if (s.rank() != 1 || s.size() != a.dim(1)) throw ShapeError("scale_cols: scale length mismatch");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] * s.data()[j];
  auto node = make_op_node("scale_cols", a.shape(), std::move(out), {a.node(), s.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node(), sn = s.node();
    node->backward_fn = [self, an, sn, r, c]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self->grad[i * c + j] * sn->value[j];
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < r; ++i) acc += self->grad[i * c + j] * an->value[i * c + j];
          sn->grad[j] += acc;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_rank2("add_rowvec", a);
  if (v.rank() != 1 || v.size() != a.dim(1)) throw ShapeError("add_rowvec: vector length mismatch");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] + v.data()[j];
  auto node = make_op_node("add_rowvec", a.shape(), std::move(out), {a.node(), v.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node(), vn = v.node();
    node->backward_fn = [self, an, vn, r, c]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < r * c; ++i) an->grad[i] += self->grad[i];
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < r; ++i) acc += self->grad[i * c + j];
          vn->grad[j] += acc;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor softmax_axis(const Tensor& a, std::size_t axis) {
  const AxisSplit sp = split_axis("softmax_axis", a, axis);
  std::vector<double> out(a.size());
  std::vector<double> buf(sp.len);
  const double* x = a.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -1e308;
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, x[(o * sp.len + l) * sp.inner + i]);
      for (std::size_t l = 0; l < sp.len; ++l) buf[l] = std::exp(x[(o * sp.len + l) * sp.inner + i] - mx);
      std::vector<double> terms = buf;
      const double denom = stable_sum(terms.data(), sp.len);
      for (std::size_t l = 0; l < sp.len; ++l) out[(o * sp.len + l) * sp.inner + i] = buf[l] / denom;
    }
  auto node = make_op_node("softmax_axis", a.shape(), std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, sp]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      std::vector<double> terms(sp.len);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t ix = (o * sp.len + l) * sp.inner + i;
            terms[l] = self->grad[ix] * self->value[ix];
          }
          std::vector<double> tcopy = terms;
          const double dotv = stable_sum(tcopy.data(), sp.len);
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t ix = (o * sp.len + l) * sp.inner + i;
            an->grad[ix] += self->value[ix] * (self->grad[ix] - dotv);
          }
        }
    };
  }
  return Tensor(node);
}

Tensor logsumexp_axis(const Tensor& a, std::size_t axis) {
  const AxisSplit sp = split_axis("logsumexp_axis", a, axis);
  Shape oshape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) oshape.push_back(a.shape()[i]);
  std::vector<double> out(sp.outer * sp.inner);
  const double* x = a.data().data();
  std::vector<double> buf(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double mx = -1e308;
      for (std::size_t l = 0; l < sp.len; ++l) mx = std::max(mx, x[(o * sp.len + l) * sp.inner + i]);
      for (std::size_t l = 0; l < sp.len; ++l) buf[l] = std::exp(x[(o * sp.len + l) * sp.inner + i] - mx);
      std::vector<double> terms = buf;
      out[o * sp.inner + i] = mx + std::log(stable_sum(terms.data(), sp.len));
    }
  auto node = make_op_node("logsumexp_axis", oshape, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, sp]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const double lse = self->value[o * sp.inner + i];
          const double g = self->grad[o * sp.inner + i];
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t ix = (o * sp.len + l) * sp.inner + i;
            an->grad[ix] += g * std::exp(an->value[ix] - lse);
          }
        }
    };
  }
  return Tensor(node);
}

Tensor layer_norm(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("layer_norm: rank-0 input");
  constexpr double kEps = 1e-5;
  const std::size_t c = a.shape().back(), r = a.size() / c;
  std::vector<double> out(a.size());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = a.data().data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double s = 1.0 / std::sqrt(var + kEps);
    inv_std[i] = s;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * s;
  }
  auto node = make_op_node("layer_norm", a.shape(), std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, r, c, inv_std]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const double* y = self->value.data() + i * c;
        const double* gy = self->grad.data() + i * c;
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          mean_g += gy[j];
          mean_gy += gy[j] * y[j];
        }
        mean_g /= static_cast<double>(c);
        mean_gy /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j)
          an->grad[i * c + j] += (gy[j] - mean_g - y[j] * mean_gy) * inv_std[i];
      }
    };
  }
  return Tensor(node);
}

Tensor sum_all(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  auto node = make_op_node("sum_all", {}, {acc}, {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const double g = self->grad[0];
      for (double& gi : an->grad) gi += g;
    };
  }
  return Tensor(node);
}

Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  auto node = make_op_node("mean_all", {}, {acc * inv}, {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, inv]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const double g = self->grad[0] * inv;
      for (double& gi : an->grad) gi += g;
    };
  }
  return Tensor(node);
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  require_rank2("sum_axis", a);
  if (axis > 1) throw ShapeError("sum_axis: axis out of range");
  const std::size_t r = a.dim(0), c = a.dim(1);
  const std::size_t n = axis == 0 ? c : r;
  std::vector<double> out(n, 0.0);
  if (axis == 0) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[j] += a.data()[i * c + j];
  } else {
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += a.data()[i * c + j];
      out[i] = acc;
    }
  }
  auto node = make_op_node("sum_axis", {n}, std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, r, c, axis]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self->grad[axis == 0 ? j : i];
    };
  }
  return Tensor(node);
}

Tensor l2_norm(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x * x;
  const double norm = std::sqrt(acc);
  auto node = make_op_node("l2_norm", {}, {norm}, {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      const double denom = std::max(self->value[0], 1e-12);
      const double g = self->grad[0] / denom;
      for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += g * an->value[i];
    };
  }
  return Tensor(node);
}

Tensor frob_norm(const Tensor& a) { return l2_norm(a); }

Tensor l2_normalize_rows(const Tensor& a, double eps) {
  require_rank2("l2_normalize_rows", a);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(a.size());
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += a.data()[i * c + j] * a.data()[i * c + j];
    const double n = std::sqrt(acc);
    norms[i] = n;
    const double m = std::max(n, eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.data()[i * c + j] / m;
  }
  auto node = make_op_node("l2_normalize_rows", a.shape(), std::move(out), {a.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node();
    node->backward_fn = [self, an, r, c, norms, eps]() {
      if (!an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < r; ++i) {
        const double n = norms[i];
        const double* x = an->value.data() + i * c;
        const double* gy = self->grad.data() + i * c;
        if (n > eps) {
          double xg = 0.0;
          for (std::size_t j = 0; j < c; ++j) xg += x[j] * gy[j];
          const double n3 = n * n * n;
          for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += gy[j] / n - x[j] * xg / n3;
        } else {
          for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += gy[j] / eps;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor pairwise_distance_matrix(const Tensor& x) {
  require_rank2("pairwise_distance_matrix", x);
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n < 2) throw ConfigError("pairwise_distance_matrix: need at least 2 rows");
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = x.data()[i * d + t] - x.data()[j * d + t];
        acc += diff * diff;
      }
      const double dist = std::sqrt(acc);
      out[i * n + j] = dist;
      out[j * n + i] = dist;
    }
  auto node = make_op_node("pairwise_distance_matrix", {n, n}, std::move(out), {x.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto xn = x.node();
    node->backward_fn = [self, xn, n, d]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          const double dist = self->value[i * n + j];
          if (dist <= 1e-300) continue;  // gradient of ||.|| undefined at 0
          const double g = (self->grad[i * n + j] + self->grad[j * n + i]) / dist;
          for (std::size_t t = 0; t < d; ++t) {
            const double diff = xn->value[i * d + t] - xn->value[j * d + t];
            xn->grad[i * d + t] += g * diff;
            xn->grad[j * d + t] -= g * diff;
          }
        }
    };
  }
  return Tensor(node);
}

Tensor tile_rows_add(const Tensor& s, const Tensor& p) {
  require_rank2("tile_rows_add", s);
  require_rank2("tile_rows_add", p);
  if (s.dim(1) != p.dim(1)) throw ShapeError("tile_rows_add: column counts differ");
  const std::size_t k = s.dim(0), n = p.dim(0), c = s.dim(1);
  std::vector<double> out(k * n * c);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[(a * n + i) * c + j] = s.data()[a * c + j] + p.data()[i * c + j];
  auto node = make_op_node("tile_rows_add", {k * n, c}, std::move(out), {s.node(), p.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto sn = s.node(), pn = p.node();
    node->backward_fn = [self, sn, pn, k, n, c]() {
      if (sn->requires_grad) {
        sn->ensure_grad();
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) sn->grad[a * c + j] += self->grad[(a * n + i) * c + j];
      }
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (std::size_t a = 0; a < k; ++a)
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) pn->grad[i * c + j] += self->grad[(a * n + i) * c + j];
      }
    };
  }
  return Tensor(node);
}

Tensor mask_compose(const Tensor& a, const Tensor& f) {
  require_rank2("mask_compose", a);
  require_rank2("mask_compose", f);
  const std::size_t k = a.dim(0), n = a.dim(1), c = f.dim(1);
  if (f.dim(0) != k * n) throw ShapeError("mask_compose: feature rows must be K*N");
  std::vector<double> out(n * c);
  std::vector<double> terms(k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t s = 0; s < k; ++s) terms[s] = a.data()[s * n + i] * f.data()[(s * n + i) * c + j];
      out[i * c + j] = stable_sum(terms.data(), k);
    }
  auto node = make_op_node("mask_compose", {n, c}, std::move(out), {a.node(), f.node()});
  if (node->requires_grad) {
    Node* self = node.get();
    auto an = a.node(), fn = f.node();
    node->backward_fn = [self, an, fn, k, n, c]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t s = 0; s < k; ++s)
          for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += self->grad[i * c + j] * fn->value[(s * n + i) * c + j];
            an->grad[s * n + i] += acc;
          }
      }
      if (fn->requires_grad) {
        fn->ensure_grad();
        for (std::size_t s = 0; s < k; ++s)
          for (std::size_t i = 0; i < n; ++i) {
            const double w = an->value[s * n + i];
            for (std::size_t j = 0; j < c; ++j) fn->grad[(s * n + i) * c + j] += w * self->grad[i * c + j];
          }
      }
    };
  }
  return Tensor(node);
}

Tensor stop_grad(const Tensor& a) {
  return Tensor(detail::make_leaf(a.shape(), std::vector<double>(a.data().begin(), a.data().end())));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same_shape("dot", a, b);
  return sum_all(mul(a, b));
}

}  // namespace cvloc
