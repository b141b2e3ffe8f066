#include "cvloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cvloc {

namespace {
thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_seq = 0;
}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

NoGradGuard::NoGradGuard() { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = true; }
bool grad_enabled() { return g_grad_enabled; }

namespace detail {

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> value) {
  if (shape_numel(shape) != value.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                     std::to_string(value.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = ++g_seq;
  return n;
}

std::shared_ptr<Node> make_op_node(const char* op, Shape shape, std::vector<double> value,
                                   std::vector<std::shared_ptr<Node>> inputs) {
  check_finite(op, value);
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = ++g_seq;
  n->op = op;
  n->is_leaf = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs)
      if (in->requires_grad) {
        n->requires_grad = true;
        break;
      }
    if (n->requires_grad) n->inputs = std::move(inputs);
  }
  return n;
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
}

double stable_sum(double* buf, std::size_t n) {
  std::sort(buf, buf + n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += buf[i];
  return acc;
}

}  // namespace detail

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(detail::make_leaf(shape, std::vector<double>(shape_numel(shape), 0.0)));
}

Tensor Tensor::full(const Shape& shape, double v) {
  return Tensor(detail::make_leaf(shape, std::vector<double>(shape_numel(shape), v)));
}

Tensor Tensor::scalar(double v) { return Tensor(detail::make_leaf({}, {v})); }

Tensor Tensor::from(const Shape& shape, std::vector<double> data) {
  return Tensor(detail::make_leaf(shape, std::move(data)));
}

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal() * stddev;
  return Tensor(detail::make_leaf(shape, std::move(v)));
}

Tensor Tensor::eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor(detail::make_leaf({n, n}, std::move(v)));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item(): tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw ShapeError("at(r,c): tensor rank is not 2");
  return node_->value.at(r * dim(1) + c);
}

void backward(const Tensor& root) {
  Node* rn = root.raw();
  if (rn == nullptr) throw ContractError("backward: undefined tensor");
  if (rn->numel() != 1) throw ContractError("backward: root must be a scalar");
  if (!rn->requires_grad) return;

  // Gather the reachable subgraph (iterative DFS; graphs can be deep). The
  // order vector holds owning references so the sweep cannot free a node
  // before its closure has run.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> visited;
  std::vector<std::shared_ptr<Node>> stack{root.node()};
  while (!stack.empty()) {
    std::shared_ptr<Node> n = std::move(stack.back());
    stack.pop_back();
    if (!visited.insert(n.get()).second) continue;
    if (n->consumed)
      throw ContractError(std::string("backward: graph through op '") + n->op +
                          "' was already consumed by a previous backward pass");
    for (const auto& in : n->inputs)
      if (in->requires_grad) stack.push_back(in);
    order.push_back(std::move(n));
  }
  // Creation order is a topological order; run it newest-first.
  std::sort(order.begin(), order.end(),
            [](const std::shared_ptr<Node>& a, const std::shared_ptr<Node>& b) { return a->seq > b->seq; });

  for (const auto& n : order) n->ensure_grad();
  rn->grad[0] = 1.0;
  for (const auto& n : order)
    if (n->backward_fn) n->backward_fn();
  // Release the one-shot graph.
  for (const auto& n : order) {
    if (!n->is_leaf) {
      n->consumed = true;
      n->backward_fn = nullptr;
      n->inputs.clear();
    }
  }
}

}  // namespace cvloc
