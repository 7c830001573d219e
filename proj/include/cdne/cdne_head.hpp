#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdne/data.hpp"
#include "cdne/error.hpp"
#include "cdne/mil.hpp"
#include "cdne/tape.hpp"
#include "cdne/tensor.hpp"

namespace cdne {

// Compact and debiased negative embedding head: per-head linear projection
// l: E -> M plus a learnable center shared by all bags of that head's class.
// Binary tasks use a single head tied to the negative class; multi-class
// tasks use one head per class.
struct CdneHead {
  std::size_t embed_dim = 0;  // E
  std::size_t proj_dim = 0;   // M
  double thr = 1.0;
  double lambda_neg = 10.0;
  double lambda_pos = 3.0;

  std::vector<Tensor> proj_w;  // per head, E x M
  std::vector<Tensor> proj_b;  // per head, 1 x M
  std::vector<Tensor> centers; // per head, 1 x M, trainable

  std::size_t num_heads() const { return centers.size(); }

  static CdneHead init(std::size_t num_heads, std::size_t embed_dim, std::size_t proj_dim,
                       double thr, double lambda_neg, double lambda_pos,
                       std::mt19937_64& rng) {
    if (num_heads == 0 || embed_dim == 0 || proj_dim == 0)
      throw ValidationError("head dimensions must be positive");
    if (thr < 0.0 || lambda_neg < 0.0 || lambda_pos < 0.0)
      throw ValidationError("thr and lambda weights must be >= 0");
    CdneHead head;
    head.embed_dim = embed_dim;
    head.proj_dim = proj_dim;
    head.thr = thr;
    head.lambda_neg = lambda_neg;
    head.lambda_pos = lambda_pos;
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / double(embed_dim)));
    for (std::size_t h = 0; h < num_heads; ++h) {
      std::vector<double> w(embed_dim * proj_dim);
      for (double& v : w) v = dist(rng);
      head.proj_w.push_back(Tensor::matrix(embed_dim, proj_dim, std::move(w), true));
      head.proj_b.push_back(Tensor::zeros(1, proj_dim, true));
      head.centers.push_back(Tensor::zeros(1, proj_dim, true));
    }
    return head;
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (std::size_t h = 0; h < num_heads(); ++h) {
      out.push_back(proj_w[h]);
      out.push_back(proj_b[h]);
      out.push_back(centers[h]);
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t h = 0; h < num_heads(); ++h) {
      const std::string tag = "head" + std::to_string(h);
      out.emplace_back(tag + ".proj_w", proj_w[h]);
      out.emplace_back(tag + ".proj_b", proj_b[h]);
      out.emplace_back(tag + ".center", centers[h]);
    }
    return out;
  }

  void check_head(std::size_t index) const {
    if (index >= num_heads()) throw ContractError("head index out of range");
  }
};

// l(g(x)): row-wise affine projection into the M-dimensional space.
inline Tensor project(Tape& tape, const CdneHead& head, std::size_t head_index,
                      const Tensor& embeddings) {
  head.check_head(head_index);
  if (embeddings.cols() != head.embed_dim)
    throw DimensionError("projection input width mismatch");
  return tape.add(tape.matmul(embeddings, head.proj_w[head_index]),
                  tape.broadcast_row(head.proj_b[head_index], embeddings.rows()));
}

namespace detail {

// Per-dimension deviation around the learnable center (not the sample mean):
// std_m = sqrt( 1/(K-1) * sum_k (z_km - mu_m)^2 ), returned as a 1 x M row.
inline Tensor center_std_row(Tape& tape, const Tensor& projected, const Tensor& center) {
  const std::size_t k = projected.rows();
  Tensor dev = tape.sub(projected, tape.broadcast_row(center, k));
  Tensor var = tape.scalar_mul(tape.sum_axis(tape.mul(dev, dev), 0),
                               1.0 / static_cast<double>(k - 1));
  return tape.sqrt_elems(var);
}

}  // namespace detail

// Compaction loss: mean over dimensions of the center-deviation. Returns
// nullopt for K < 2 bags, where the K-1 denominator is undefined; the caller
// logs the skip.
inline std::optional<Tensor> loss_neg(Tape& tape, const CdneHead& head, std::size_t head_index,
                                      const Tensor& projected) {
  head.check_head(head_index);
  if (projected.rows() < 2) return std::nullopt;
  return tape.mean_all(detail::center_std_row(tape, projected, head.centers[head_index]));
}

// Anti-collapse push: mean over dimensions of ReLU(thr - std_m). Bounded by
// [0, thr]; zero once every dimension spreads past the threshold.
inline std::optional<Tensor> loss_pos(Tape& tape, const CdneHead& head, std::size_t head_index,
                                      const Tensor& projected) {
  head.check_head(head_index);
  if (projected.rows() < 2) return std::nullopt;
  Tensor std_row = detail::center_std_row(tape, projected, head.centers[head_index]);
  Tensor thr_row = Tensor::full(1, head.proj_dim, head.thr);
  return tape.mean_all(tape.relu(tape.sub(thr_row, std_row)));
}

// Weighted auxiliary loss for one bag plus unweighted components for logging.
struct CdneResult {
  std::optional<Tensor> total;  // weighted; nullopt when the bag was skipped
  double neg_component = 0.0;   // unweighted L_neg contribution
  double pos_component = 0.0;   // unweighted L_pos contribution

  bool skipped() const { return !total.has_value(); }
};

// Binary dispatch: negative bags are pulled onto the single head's center,
// positive bags only receive the push term.
inline CdneResult loss_cdne_binary(Tape& tape, const CdneHead& head, std::size_t bag_label,
                                   const Tensor& projected, std::size_t negative_class) {
  if (head.num_heads() != 1)
    throw ContractError("loss_cdne_binary requires a single-head configuration");
  CdneResult result;
  if (bag_label == negative_class) {
    auto neg = loss_neg(tape, head, 0, projected);
    if (!neg) return result;
    result.neg_component = neg->item();
    result.total = tape.scalar_mul(*neg, head.lambda_neg);
  } else {
    auto pos = loss_pos(tape, head, 0, projected);
    if (!pos) return result;
    result.pos_component = pos->item();
    result.total = tape.scalar_mul(*pos, head.lambda_pos);
  }
  return result;
}

// Multi-class extension: the head matching the bag label pulls toward its own
// center, every other head pushes its per-dimension stds above thr.
inline CdneResult loss_cdne_multiclass(Tape& tape, const CdneHead& head, std::size_t bag_label,
                                       const Tensor& embeddings) {
  if (head.num_heads() < 2)
    throw ContractError("loss_cdne_multiclass requires >= 2 heads; use the binary op");
  if (bag_label >= head.num_heads()) throw ContractError("bag label outside head range");
  CdneResult result;
  if (embeddings.rows() < 2) return result;
  Tensor total;
  for (std::size_t h = 0; h < head.num_heads(); ++h) {
    Tensor projected = project(tape, head, h, embeddings);
    Tensor term;
    if (h == bag_label) {
      auto neg = loss_neg(tape, head, h, projected);
      result.neg_component += neg->item();
      term = tape.scalar_mul(*neg, head.lambda_neg);
    } else {
      auto pos = loss_pos(tape, head, h, projected);
      result.pos_component += pos->item();
      term = tape.scalar_mul(*pos, head.lambda_pos);
    }
    total = total.defined() ? tape.add(total, term) : term;
  }
  result.total = total;
  return result;
}

// L_overall = L_MIL + weighted CDNE terms; both live on the same tape.
inline Tensor loss_overall(Tape& tape, const Tensor& mil, const Tensor& cdne_weighted) {
  if (!mil.is_scalar() || !cdne_weighted.is_scalar())
    throw ContractError("loss_overall expects scalar inputs");
  return tape.add(mil, cdne_weighted);
}

// Sets each center to the mean projected embedding of its class's training
// bags, computed in one forward pass through the frozen initial parameters.
// Classes with no bags fall back to small Gaussian noise from the dedicated
// rng so the main random stream stays untouched.
inline void init_centers(CdneHead& head, const MilModel& model, const Dataset& data,
                         std::span<const std::size_t> bag_indices, std::size_t negative_class,
                         std::mt19937_64& fallback_rng) {
  for (std::size_t h = 0; h < head.num_heads(); ++h) {
    const std::size_t head_class = head.num_heads() == 1 ? negative_class : h;
    std::vector<double> mean(head.proj_dim, 0.0);
    std::size_t count = 0;
    for (std::size_t idx : bag_indices) {
      const Bag& bag = data.bags[idx];
      if (bag.label != head_class) continue;
      Tape tape;
      Tensor projected = project(tape, head, h, map_instances(tape, model, bag.instances));
      for (std::size_t i = 0; i < projected.rows(); ++i)
        for (std::size_t m = 0; m < head.proj_dim; ++m) mean[m] += projected(i, m);
      count += projected.rows();
    }
    auto& center_values = head.centers[h].mutable_values();
    if (count == 0) {
      std::normal_distribution<double> dist(0.0, 0.01);
      for (double& v : center_values) v = dist(fallback_rng);
    } else {
      for (std::size_t m = 0; m < head.proj_dim; ++m)
        center_values[m] = mean[m] / static_cast<double>(count);
    }
  }
}

}  // namespace cdne
