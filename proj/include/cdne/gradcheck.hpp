#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdne/error.hpp"
#include "cdne/tape.hpp"
#include "cdne/tensor.hpp"

namespace cdne {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  bool all_passed() const {
    for (const auto& e : entries)
      if (!e.passed) return false;
    return true;
  }
};

struct GradCheckOptions {
  double h = 1e-6;
  double tol = 1e-4;
  // Relative error denominator is floored so near-zero true gradients are
  // judged against finite-difference noise rather than against themselves.
  double denom_floor = 1e-3;
  std::optional<OpKind> inject_fault;  // testing hook, forwarded to the tape
};

// Compares the reverse-mode gradient of a scalar program against central
// finite differences, one entry per named parameter. The program must build
// its graph on the tape it is handed and be deterministic in its parameters.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& program,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  const GradCheckOptions& opts = {}) {
  if (!(opts.h > 0.0)) throw ContractError("grad_check requires h > 0");

  auto eval = [&](void) -> double {
    Tape scratch;
    return program(scratch).item();
  };

  const double v0 = eval();
  const double v1 = eval();
  if (v0 != v1) throw ContractError("grad_check: program is not deterministic");

  for (auto& [name, p] : params) {
    if (!p.requires_grad())
      throw ContractError("grad_check: parameter '" + name + "' does not require grad");
  }

  // One reverse sweep for the analytic side.
  for (const auto& [name, p] : params) {
    Tensor handle = p;  // shared storage
    handle.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    if (opts.inject_fault) tape.inject_backward_fault(*opts.inject_fault);
    Tensor loss = program(tape);
    tape.backward(loss);
    for (const auto& [name, p] : params) analytic.push_back(p.grad());
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor param = params[pi].second;
    GradCheckEntry entry;
    entry.name = params[pi].first;
    auto& vals = param.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + opts.h;
      const double fp = eval();
      vals[i] = saved - opts.h;
      const double fm = eval();
      vals[i] = saved;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), opts.denom_floor});
      const double rel = std::fabs(a - numeric) / denom;
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    entry.passed = entry.max_rel_err < opts.tol;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cdne
