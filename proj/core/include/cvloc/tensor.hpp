#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cvloc/error.hpp"
#include "cvloc/rng.hpp"

namespace cvloc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One recorded value in a computation graph. Nodes are created in program
// order, so `seq` is a valid topological order for the backward sweep.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily by backward
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;  // set once backward has run through this node
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward_fn;

  std::size_t numel() const { return value.size(); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Lightweight handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double v);
  static Tensor scalar(double v);
  static Tensor from(const Shape& shape, std::vector<double> data);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);
  // Identity matrix.
  static Tensor eye(std::size_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> data_mut() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }

  double item() const;
  double at(std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  const std::shared_ptr<Node>& node() const { return node_; }
  Node* raw() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

// Runs reverse-mode accumulation from a scalar root. The graph is one-shot:
// a second backward through any part of it raises ContractError.
void backward(const Tensor& root);

// While alive, ops compute values but record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

namespace detail {
std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> value);
std::shared_ptr<Node> make_op_node(const char* op, Shape shape,
                                   std::vector<double> value,
                                   std::vector<std::shared_ptr<Node>> inputs);
void check_finite(const char* op, const std::vector<double>& v);
// Sums n values in ascending order; invariant to input permutation.
double stable_sum(double* buf, std::size_t n);
}  // namespace detail

}  // namespace cvloc
