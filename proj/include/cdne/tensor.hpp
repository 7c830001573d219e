#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cdne/error.hpp"

namespace cdne {

class Tape;

namespace detail {

struct TensorNode {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;        // same length as values iff requires_grad
  const Tape* producer = nullptr;  // tape that recorded this node as an output
};

}  // namespace detail

// Dense rank-2 tensor of 64-bit floats, row-major. A Tensor is a shared
// handle: copies alias the same storage, which is what lets the tape and the
// optimizer see one another's nodes. Values are immutable while a tape is
// live; only grad buffers mutate during a reverse sweep. Parameter values are
// rewritten by the optimizer between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<double>(rows * cols, 0.0), requires_grad);
  }

  static Tensor full(std::size_t rows, std::size_t cols, double value,
                     bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<double>(rows * cols, value), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor(rows, cols, std::move(values), requires_grad);
  }

  static Tensor row(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor(1, 1, std::vector<double>{value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->values.size(); }
  bool is_scalar() const { return size() == 1; }

  double operator()(std::size_t r, std::size_t c) const {
    return node_->values[r * node_->cols + c];
  }

  double item() const {
    if (!is_scalar()) throw ContractError("item() requires a scalar tensor");
    return node_->values[0];
  }

  const std::vector<double>& values() const { return node_->values; }
  std::vector<double>& mutable_values() { return node_->values; }

  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& grad() const {
    if (!node_->requires_grad) throw ContractError("grad() on a tensor without grad");
    return node_->grad;
  }

  std::vector<double>& mutable_grad() {
    if (!node_->requires_grad) throw ContractError("grad() on a tensor without grad");
    return node_->grad;
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  // Identity of the underlying node, used by the tape and the tests.
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const Tape* producer() const { return node_->producer; }

  // Detached value copy (fresh storage, no grad, no producer).
  Tensor clone_values() const {
    return Tensor(node_->rows, node_->cols, node_->values, false);
  }

 private:
  friend class Tape;

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad)
      : node_(std::make_shared<detail::TensorNode>()) {
    if (values.size() != rows * cols)
      throw DimensionError("tensor value count does not match shape " + std::to_string(rows) +
                           "x" + std::to_string(cols));
    node_->rows = rows;
    node_->cols = cols;
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->grad.assign(node_->values.size(), 0.0);
  }

  void set_producer(const Tape* tape) { node_->producer = tape; }

  std::shared_ptr<detail::TensorNode> node_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

}  // namespace cdne
