#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cdne/error.hpp"
#include "cdne/tensor.hpp"

namespace cdne {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + s + "'");
}

struct OptimizerHyper {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;  // L2, folded into the gradient before moments
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// SGD: theta <- theta - lr * (grad + wd * theta)
// Adam: bias-corrected first/second moments on the same decayed gradient.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, OptimizerHyper hyper, const std::vector<Tensor>& params)
      : kind_(kind), hyper_(hyper), params_(params) {
    // lr = 0 is a legal null update (useful for frozen-parameter checks);
    // negative or NaN rates are rejected.
    if (!(hyper.learning_rate >= 0.0)) throw ValidationError("learning_rate must be >= 0");
    if (kind_ == OptimizerKind::adam) {
      m_.reserve(params_.size());
      v_.reserve(params_.size());
      for (const Tensor& p : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
  }

  std::size_t step_count() const { return t_; }

  void step() {
    ++t_;
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor& p = params_[pi];
      auto& vals = p.mutable_values();
      const auto& grad = p.grad();
      if (grad.size() != vals.size()) throw ContractError("grad/param shape mismatch");
      if (kind_ == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < vals.size(); ++i)
          vals[i] -= hyper_.learning_rate * (grad[i] + hyper_.weight_decay * vals[i]);
      } else {
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < vals.size(); ++i) {
          const double g = grad[i] + hyper_.weight_decay * vals[i];
          m_[pi][i] = hyper_.beta1 * m_[pi][i] + (1.0 - hyper_.beta1) * g;
          v_[pi][i] = hyper_.beta2 * v_[pi][i] + (1.0 - hyper_.beta2) * g * g;
          const double m_hat = m_[pi][i] / bc1;
          const double v_hat = v_[pi][i] / bc2;
          vals[i] -= hyper_.learning_rate * m_hat / (std::sqrt(v_hat) + hyper_.eps);
        }
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

 private:
  OptimizerKind kind_;
  OptimizerHyper hyper_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace cdne
