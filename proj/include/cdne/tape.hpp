#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdne/error.hpp"
#include "cdne/tensor.hpp"

namespace cdne {

// Differentiable op kinds. softmax_ce is the fused softmax cross-entropy used
// as the bag-level classification loss; transpose is structural (values move,
// nothing is computed).
enum class OpKind {
  matmul,
  add,
  sub,
  elementwise_mul,
  scalar_mul,
  relu,
  tanh,
  sigmoid,
  softmax_rows,
  mean_all,
  sqrt_elementwise,
  sum_axis,
  broadcast_row,
  transpose,
  softmax_ce,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::mean_all: return "mean_all";
    case OpKind::sqrt_elementwise: return "sqrt_elementwise";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::broadcast_row: return "broadcast_row";
    case OpKind::transpose: return "transpose";
    case OpKind::softmax_ce: return "softmax_ce";
  }
  return "unknown";
}

// Extra arguments for kinds that need more than tensor inputs.
struct OpAttr {
  double scalar = 0.0;     // scalar_mul factor
  std::size_t axis = 0;    // sum_axis: 0 sums rows away, 1 sums cols away
  std::size_t rows = 0;    // broadcast_row target row count
  std::size_t label = 0;   // softmax_ce target class
};

// Records ops executed on tensors that require grad and replays them once in
// reverse to accumulate exact gradients. One tape per training step, one
// logical worker per tape. A second backward on the same tape is rejected.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t num_recorded() const { return records_.size(); }

  // Testing hook: make one kind's reverse rule deliberately wrong so the
  // gradient checker can be shown to catch it.
  void inject_backward_fault(OpKind kind) { fault_ = kind; }

  Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttr& attr = {}) {
    Tensor out = eval(kind, inputs, attr);
    check_finite(out, kind);
    bool needs_grad = false;
    for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
    if (needs_grad) {
      out.node_->requires_grad = true;
      out.node_->grad.assign(out.size(), 0.0);
      out.set_producer(this);
      records_.push_back(Record{kind, attr, {inputs.begin(), inputs.end()}, out});
    }
    return out;
  }

  Tensor matmul(const Tensor& a, const Tensor& b) { return apply2(OpKind::matmul, a, b); }
  Tensor add(const Tensor& a, const Tensor& b) { return apply2(OpKind::add, a, b); }
  Tensor sub(const Tensor& a, const Tensor& b) { return apply2(OpKind::sub, a, b); }
  Tensor mul(const Tensor& a, const Tensor& b) { return apply2(OpKind::elementwise_mul, a, b); }

  Tensor scalar_mul(const Tensor& x, double c) {
    OpAttr attr;
    attr.scalar = c;
    return apply1(OpKind::scalar_mul, x, attr);
  }

  Tensor relu(const Tensor& x) { return apply1(OpKind::relu, x); }
  Tensor tanh(const Tensor& x) { return apply1(OpKind::tanh, x); }
  Tensor sigmoid(const Tensor& x) { return apply1(OpKind::sigmoid, x); }
  Tensor softmax_rows(const Tensor& x) { return apply1(OpKind::softmax_rows, x); }
  Tensor mean_all(const Tensor& x) { return apply1(OpKind::mean_all, x); }
  Tensor sqrt_elems(const Tensor& x) { return apply1(OpKind::sqrt_elementwise, x); }
  Tensor transpose(const Tensor& x) { return apply1(OpKind::transpose, x); }

  Tensor sum_axis(const Tensor& x, std::size_t axis) {
    OpAttr attr;
    attr.axis = axis;
    return apply1(OpKind::sum_axis, x, attr);
  }

  Tensor broadcast_row(const Tensor& x, std::size_t rows) {
    OpAttr attr;
    attr.rows = rows;
    return apply1(OpKind::broadcast_row, x, attr);
  }

  Tensor softmax_ce(const Tensor& logits, std::size_t label) {
    OpAttr attr;
    attr.label = label;
    return apply1(OpKind::softmax_ce, logits, attr);
  }

  // Reverse sweep from a scalar loss recorded on this tape. Gradients
  // accumulate additively into existing grad buffers, so callers zero
  // parameter grads before the forward pass of each step.
  void backward(const Tensor& loss) {
    if (!loss.defined() || !loss.is_scalar())
      throw ContractError("backward requires a scalar loss");
    if (records_.empty()) throw ContractError("backward on an empty tape");
    if (loss.producer() != this)
      throw ContractError("backward on a loss detached from this tape");
    if (swept_) throw ContractError("tape already swept; build a fresh tape per step");
    swept_ = true;

    Tensor seed = loss;
    seed.mutable_grad()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) propagate(*it);
  }

 private:
  struct Record {
    OpKind kind;
    OpAttr attr;
    std::vector<Tensor> inputs;
    Tensor output;
  };

  Tensor apply1(OpKind kind, const Tensor& x, const OpAttr& attr = {}) {
    const Tensor in[1] = {x};
    return apply(kind, in, attr);
  }

  Tensor apply2(OpKind kind, const Tensor& a, const Tensor& b) {
    const Tensor in[2] = {a, b};
    return apply(kind, in, {});
  }

  static void require_arity(OpKind kind, std::span<const Tensor> inputs, std::size_t n) {
    if (inputs.size() != n)
      throw ContractError(std::string(op_name(kind)) + " expects " + std::to_string(n) +
                          " input(s), got " + std::to_string(inputs.size()));
  }

  static void check_finite(const Tensor& t, OpKind kind) {
    for (double v : t.values())
      if (!std::isfinite(v))
        throw NumericError(std::string("non-finite value produced by ") + op_name(kind));
  }

  Tensor make(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(rows, cols, std::move(values), false);
  }

  Tensor eval(OpKind kind, std::span<const Tensor> inputs, const OpAttr& attr) {
    switch (kind) {
      case OpKind::matmul: {
        require_arity(kind, inputs, 2);
        const Tensor& a = inputs[0];
        const Tensor& b = inputs[1];
        if (a.cols() != b.rows())
          throw DimensionError("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                               std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                               "x" + std::to_string(b.cols()));
        const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
        std::vector<double> out(n * m, 0.0);
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < m; ++j) out[i * m + j] += aip * bv[p * m + j];
          }
        return make(n, m, std::move(out));
      }
      case OpKind::add:
      case OpKind::sub:
      case OpKind::elementwise_mul: {
        require_arity(kind, inputs, 2);
        const Tensor& a = inputs[0];
        const Tensor& b = inputs[1];
        if (!same_shape(a, b))
          throw DimensionError(std::string(op_name(kind)) + " shape mismatch");
        std::vector<double> out(a.size());
        const auto& av = a.values();
        const auto& bv = b.values();
        for (std::size_t i = 0; i < out.size(); ++i)
          out[i] = kind == OpKind::add   ? av[i] + bv[i]
                   : kind == OpKind::sub ? av[i] - bv[i]
                                         : av[i] * bv[i];
        return make(a.rows(), a.cols(), std::move(out));
      }
      case OpKind::scalar_mul: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = attr.scalar * x.values()[i];
        return make(x.rows(), x.cols(), std::move(out));
      }
      case OpKind::relu: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.values()[i]);
        return make(x.rows(), x.cols(), std::move(out));
      }
      case OpKind::tanh: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.values()[i]);
        return make(x.rows(), x.cols(), std::move(out));
      }
      case OpKind::sigmoid: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
          const double v = x.values()[i];
          out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                            : std::exp(v) / (1.0 + std::exp(v));
        }
        return make(x.rows(), x.cols(), std::move(out));
      }
      case OpKind::softmax_rows: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        const std::size_t r = x.rows(), c = x.cols();
        if (c == 0) throw DimensionError("softmax_rows on empty rows");
        for (std::size_t i = 0; i < r; ++i) {
          // max-subtraction keeps large attention logits stable
          double mx = x(i, 0);
          for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x(i, j));
          double sum = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(x(i, j) - mx);
            sum += out[i * c + j];
          }
          for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= sum;
        }
        return make(r, c, std::move(out));
      }
      case OpKind::mean_all: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        if (x.size() == 0) throw DimensionError("mean_all on an empty tensor");
        double sum = 0.0;
        for (double v : x.values()) sum += v;
        return make(1, 1, {sum / static_cast<double>(x.size())});
      }
      case OpKind::sqrt_elementwise: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
          const double v = x.values()[i];
          if (v < 0.0) throw DomainError("sqrt_elementwise of a negative value");
          out[i] = std::sqrt(v);
        }
        return make(x.rows(), x.cols(), std::move(out));
      }
      case OpKind::sum_axis: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        if (attr.axis > 1) throw ContractError("sum_axis: axis must be 0 or 1");
        if (attr.axis == 0) {
          std::vector<double> out(x.cols(), 0.0);
          for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
          return make(1, x.cols(), std::move(out));
        }
        std::vector<double> out(x.rows(), 0.0);
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) out[i] += x(i, j);
        return make(x.rows(), 1, std::move(out));
      }
      case OpKind::broadcast_row: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        if (x.rows() != 1) throw DimensionError("broadcast_row expects a 1xN input");
        if (attr.rows == 0) throw ContractError("broadcast_row: target rows must be >= 1");
        std::vector<double> out(attr.rows * x.cols());
        for (std::size_t i = 0; i < attr.rows; ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) out[i * x.cols() + j] = x(0, j);
        return make(attr.rows, x.cols(), std::move(out));
      }
      case OpKind::transpose: {
        require_arity(kind, inputs, 1);
        const Tensor& x = inputs[0];
        std::vector<double> out(x.size());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) out[j * x.rows() + i] = x(i, j);
        return make(x.cols(), x.rows(), std::move(out));
      }
      case OpKind::softmax_ce: {
        require_arity(kind, inputs, 1);
        const Tensor& z = inputs[0];
        if (z.rows() != 1) throw DimensionError("softmax_ce expects 1xC logits");
        if (attr.label >= z.cols())
          throw ContractError("softmax_ce label out of range");
        double mx = z(0, 0);
        for (std::size_t j = 1; j < z.cols(); ++j) mx = std::max(mx, z(0, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < z.cols(); ++j) lse += std::exp(z(0, j) - mx);
        return make(1, 1, {std::log(lse) + mx - z(0, attr.label)});
      }
    }
    throw ContractError("unknown op kind");
  }

  static std::vector<double>* grad_of(Tensor& t) {
    return t.requires_grad() ? &t.mutable_grad() : nullptr;
  }

  void propagate(Record& rec) {
    const auto& dy = rec.output.grad();
    const bool faulted = fault_ && *fault_ == rec.kind;
    switch (rec.kind) {
      case OpKind::matmul: {
        Tensor& a = rec.inputs[0];
        Tensor& b = rec.inputs[1];
        const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
        if (auto* da = grad_of(a)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j) acc += dy[i * m + j] * b(p, j);
              (*da)[i * k + p] += acc;
            }
        }
        if (auto* db = grad_of(b)) {
          for (std::size_t p = 0; p < k; ++p)
            for (std::size_t j = 0; j < m; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < n; ++i) acc += a(i, p) * dy[i * m + j];
              (*db)[p * m + j] += acc;
            }
        }
        break;
      }
      case OpKind::add: {
        for (int s = 0; s < 2; ++s)
          if (auto* d = grad_of(rec.inputs[s]))
            for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i];
        break;
      }
      case OpKind::sub: {
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i];
        if (auto* d = grad_of(rec.inputs[1]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] -= dy[i];
        break;
      }
      case OpKind::elementwise_mul: {
        const auto& av = rec.inputs[0].values();
        const auto& bv = rec.inputs[1].values();
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i] * bv[i];
        if (auto* d = grad_of(rec.inputs[1]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i] * av[i];
        break;
      }
      case OpKind::scalar_mul: {
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += rec.attr.scalar * dy[i];
        break;
      }
      case OpKind::relu: {
        const auto& xv = rec.inputs[0].values();
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i)
            if (xv[i] > 0.0) (*d)[i] += dy[i];
        break;
      }
      case OpKind::tanh: {
        const auto& yv = rec.output.values();
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i] * (1.0 - yv[i] * yv[i]);
        break;
      }
      case OpKind::sigmoid: {
        const auto& yv = rec.output.values();
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i] * yv[i] * (1.0 - yv[i]);
        break;
      }
      case OpKind::softmax_rows: {
        const auto& yv = rec.output.values();
        const std::size_t r = rec.output.rows(), c = rec.output.cols();
        if (auto* d = grad_of(rec.inputs[0])) {
          for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += dy[i * c + j] * yv[i * c + j];
            for (std::size_t j = 0; j < c; ++j)
              (*d)[i * c + j] += yv[i * c + j] * (dy[i * c + j] - dot);
          }
        }
        break;
      }
      case OpKind::mean_all: {
        if (auto* d = grad_of(rec.inputs[0])) {
          const double g = dy[0] / static_cast<double>(d->size());
          for (double& v : *d) v += g;
        }
        break;
      }
      case OpKind::sqrt_elementwise: {
        const auto& yv = rec.output.values();
        // subgradient 0 at y == 0 so a zero-deviation dimension stays finite
        const double half = faulted ? 0.45 : 0.5;
        if (auto* d = grad_of(rec.inputs[0]))
          for (std::size_t i = 0; i < dy.size(); ++i)
            if (yv[i] > 0.0) (*d)[i] += dy[i] * half / yv[i];
        break;
      }
      case OpKind::sum_axis: {
        Tensor& x = rec.inputs[0];
        if (auto* d = grad_of(x)) {
          const std::size_t r = x.rows(), c = x.cols();
          if (rec.attr.axis == 0) {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) (*d)[i * c + j] += dy[j];
          } else {
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) (*d)[i * c + j] += dy[i];
          }
        }
        break;
      }
      case OpKind::broadcast_row: {
        if (auto* d = grad_of(rec.inputs[0])) {
          const std::size_t r = rec.output.rows(), c = rec.output.cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*d)[j] += dy[i * c + j];
        }
        break;
      }
      case OpKind::transpose: {
        Tensor& x = rec.inputs[0];
        if (auto* d = grad_of(x)) {
          const std::size_t r = x.rows(), c = x.cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*d)[i * c + j] += dy[j * r + i];
        }
        break;
      }
      case OpKind::softmax_ce: {
        Tensor& z = rec.inputs[0];
        if (auto* d = grad_of(z)) {
          const std::size_t c = z.cols();
          double mx = z(0, 0);
          for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z(0, j));
          double sum = 0.0;
          std::vector<double> p(c);
          for (std::size_t j = 0; j < c; ++j) {
            p[j] = std::exp(z(0, j) - mx);
            sum += p[j];
          }
          for (std::size_t j = 0; j < c; ++j)
            (*d)[j] += dy[0] * (p[j] / sum - (j == rec.attr.label ? 1.0 : 0.0));
        }
        break;
      }
    }
  }

  std::vector<Record> records_;
  bool swept_ = false;
  std::optional<OpKind> fault_;
};

}  // namespace cdne
