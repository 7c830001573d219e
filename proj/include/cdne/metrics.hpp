#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <vector>

#include "cdne/error.hpp"

namespace cdne {

// Mann-Whitney AUROC with half credit for ties: P(s+ > s-) + 0.5 P(s+ = s-),
// computed from tie-averaged ranks. Equals the trapezoidal ROC area.
inline double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ContractError("auroc: length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError("auroc: labels must be 0/1");
    n_pos += static_cast<std::size_t>(y);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ValidationError("auroc undefined: both classes must be present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based tie average
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += avg_rank;
    i = j;
  }
  const double u = pos_rank_sum - 0.5 * static_cast<double>(n_pos) *
                                      static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

inline double accuracy(const std::vector<std::size_t>& predictions,
                       const std::vector<std::size_t>& labels) {
  if (predictions.size() != labels.size()) throw ContractError("accuracy: length mismatch");
  if (predictions.empty()) throw ContractError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Spearman rank correlation (tie-averaged ranks), used for trend diagnostics
// on per-epoch series.
inline double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw ContractError("spearman: length mismatch");
  const std::size_t n = xs.size();
  if (n < 3) throw ContractError("spearman: need at least 3 points");

  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j < n && v[order[j]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) r[order[k]] = avg;
      i = j;
    }
    return r;
  };

  const std::vector<double> rx = ranks(xs), ry = ranks(ys);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double num = 0.0, dx = 0.0, dy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (rx[i] - mx) * (ry[i] - my);
    dx += (rx[i] - mx) * (rx[i] - mx);
    dy += (ry[i] - my) * (ry[i] - my);
  }
  if (dx == 0.0 || dy == 0.0) return 0.0;  // a constant series carries no trend
  return num / std::sqrt(dx * dy);
}

// One-sided Monte-Carlo permutation p-value for "rho is this negative by
// chance": the fraction of label permutations whose rho is <= the observed.
inline double spearman_perm_pvalue_less(const std::vector<double>& xs,
                                        const std::vector<double>& ys,
                                        std::size_t permutations = 2000,
                                        std::uint64_t seed = 12345) {
  const double observed = spearman_rho(xs, ys);
  std::mt19937_64 rng(seed);
  std::vector<double> shuffled = ys;
  std::size_t at_most = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    if (spearman_rho(xs, shuffled) <= observed) ++at_most;
  }
  return (static_cast<double>(at_most) + 1.0) / (static_cast<double>(permutations) + 1.0);
}

}  // namespace cdne
