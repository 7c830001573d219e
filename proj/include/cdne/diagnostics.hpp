#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdne/cdne_head.hpp"
#include "cdne/data.hpp"
#include "cdne/error.hpp"
#include "cdne/metrics.hpp"
#include "cdne/mil.hpp"
#include "cdne/train.hpp"

namespace cdne {

// Per-bag inspection record: where the bag's instances sit in the projected
// space, how spread out they are around the learnable center, and how the
// attention layer weighted them.
struct BagDiagnostics {
  std::string id;
  std::size_t label = 0;
  std::vector<double> center;     // mean projected instance embedding
  double mean_std = 0.0;          // mean over dims of per-dim std around the center target
  std::vector<double> attention;  // K weights, sum to 1
  std::optional<std::vector<std::array<std::int32_t, 2>>> coords;
  double score = 0.0;             // positive-class probability (binary), own-class otherwise
  std::size_t predicted = 0;
};

struct DiagnosticsSummary {
  std::vector<double> per_class_mean_std;
  double negative_center_dispersion = 0.0;  // mean pairwise distance, negative-bag centers
  double auroc = 0.0;
  double accuracy = 0.0;
};

struct DiagnosticsReport {
  std::vector<BagDiagnostics> bags;
  DiagnosticsSummary summary;
  // Top-2 principal directions of the bag centers, for 2-D scatter exports.
  // Zero vectors when the centers are degenerate (fewer than 2 bags or no
  // variance to speak of).
  std::array<std::vector<double>, 2> principal_axes;
};

namespace detail {

inline double pairwise_mean_distance(const std::vector<const std::vector<double>*>& points) {
  if (points.size() < 2) return 0.0;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = i + 1; j < points.size(); ++j) {
      double ss = 0.0;
      for (std::size_t d = 0; d < points[i]->size(); ++d) {
        const double diff = (*points[i])[d] - (*points[j])[d];
        ss += diff * diff;
      }
      sum += std::sqrt(ss);
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

// Dominant eigenvector of a symmetric matrix by power iteration, then the
// runner-up after deflation. Deterministic start vector; converged when the
// sign-aligned iterate moves less than tol.
inline std::vector<double> power_iteration(const std::vector<double>& mat, std::size_t n,
                                           double tol, double* eigenvalue) {
  std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
  // Deterministic perturbation so a start vector orthogonal to the dominant
  // direction cannot stall the iteration.
  for (std::size_t i = 0; i < n; ++i) v[i] += 1e-3 * std::sin(static_cast<double>(i + 1));
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;

  std::vector<double> next(n);
  double lambda = 0.0;
  for (std::size_t iter = 0; iter < 10000; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += mat[i * n + j] * v[j];
      next[i] = acc;
    }
    double next_norm = 0.0;
    for (double x : next) next_norm += x * x;
    next_norm = std::sqrt(next_norm);
    if (next_norm < tol) {
      if (eigenvalue) *eigenvalue = 0.0;
      return std::vector<double>(n, 0.0);
    }
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += next[i] * v[i];
    const double sign = dot < 0.0 ? -1.0 : 1.0;
    double delta = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double aligned = sign * next[i] / next_norm;
      delta += (aligned - v[i]) * (aligned - v[i]);
      v[i] = aligned;
    }
    lambda = sign * next_norm;
    if (std::sqrt(delta) < tol) break;
  }
  if (eigenvalue) *eigenvalue = lambda;
  return v;
}

inline std::array<std::vector<double>, 2> principal_axes_of(
    const std::vector<BagDiagnostics>& bags) {
  std::array<std::vector<double>, 2> axes;
  if (bags.empty()) return axes;
  const std::size_t n = bags[0].center.size();
  axes[0].assign(n, 0.0);
  axes[1].assign(n, 0.0);
  if (bags.size() < 2 || n == 0) return axes;

  std::vector<double> mean(n, 0.0);
  for (const BagDiagnostics& b : bags)
    for (std::size_t d = 0; d < n; ++d) mean[d] += b.center[d];
  for (double& m : mean) m /= static_cast<double>(bags.size());

  std::vector<double> cov(n * n, 0.0);
  for (const BagDiagnostics& b : bags)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        cov[i * n + j] += (b.center[i] - mean[i]) * (b.center[j] - mean[j]);
  for (double& c : cov) c /= static_cast<double>(bags.size());

  double lambda1 = 0.0;
  axes[0] = power_iteration(cov, n, 1e-9, &lambda1);
  if (lambda1 > 0.0) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) cov[i * n + j] -= lambda1 * axes[0][i] * axes[0][j];
    axes[1] = power_iteration(cov, n, 1e-9, nullptr);
  }
  return axes;
}

}  // namespace detail

// Full-dataset diagnostic pass. With an auxiliary head, each bag is projected
// through the head matching its class (the single head for binary tasks) and
// mean_std is measured around that head's learnable center; without one, the
// raw embeddings and the bag's own mean are used.
inline DiagnosticsReport bag_diagnostics(const MilModel& model, const CdneHead* head,
                                         const Dataset& data) {
  if (data.bags.empty()) throw ContractError("diagnostics need a non-empty dataset");
  DiagnosticsReport report;
  std::vector<std::vector<double>> probs;

  for (const Bag& bag : data.bags) {
    Tape tape;
    Tensor emb = map_instances(tape, model, bag.instances);
    PooledBag pooled = attention_pool(tape, model, emb);
    Tensor logits = classify(tape, model, pooled.embedding);

    BagDiagnostics diag;
    diag.id = bag.id;
    diag.label = bag.label;
    diag.attention = pooled.weights.values();
    diag.coords = bag.coords;

    Tensor points = emb;
    const std::vector<double>* around = nullptr;
    std::vector<double> own_mean;
    if (head) {
      const std::size_t h = head->num_heads() == 1 ? 0 : bag.label;
      points = project(tape, *head, h, emb);
      around = &head->centers[h].values();
    }
    own_mean = detail::column_means(points);
    diag.center = own_mean;
    if (points.rows() >= 2)
      diag.mean_std = detail::mean_std_around(points, head ? *around : own_mean);

    std::vector<double> p = detail::softmax_row(logits);
    diag.predicted = static_cast<std::size_t>(
        std::max_element(p.begin(), p.end()) - p.begin());
    const std::size_t score_class =
        data.num_classes == 2 ? (data.negative_class == 0 ? 1 : 0) : bag.label;
    diag.score = p[score_class];
    probs.push_back(std::move(p));
    report.bags.push_back(std::move(diag));
  }

  DiagnosticsSummary& s = report.summary;
  s.per_class_mean_std.assign(data.num_classes, 0.0);
  std::vector<std::size_t> counted(data.num_classes, 0);
  std::vector<const std::vector<double>*> negative_centers;
  std::size_t correct = 0;
  for (const BagDiagnostics& d : report.bags) {
    // K=1 bags report mean_std 0 and still count toward the class mean.
    s.per_class_mean_std[d.label] += d.mean_std;
    ++counted[d.label];
    if (d.label == data.negative_class) negative_centers.push_back(&d.center);
    if (d.predicted == d.label) ++correct;
  }
  for (std::size_t c = 0; c < data.num_classes; ++c)
    if (counted[c] > 0) s.per_class_mean_std[c] /= static_cast<double>(counted[c]);
  s.negative_center_dispersion = detail::pairwise_mean_distance(negative_centers);
  s.accuracy = static_cast<double>(correct) / static_cast<double>(report.bags.size());

  std::vector<std::size_t> labels;
  for (const Bag& b : data.bags) labels.push_back(b.label);
  if (data.num_classes == 2) {
    const std::size_t positive = data.negative_class == 0 ? 1 : 0;
    std::vector<double> scores(report.bags.size());
    std::vector<int> bin(report.bags.size());
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < report.bags.size(); ++i) {
      scores[i] = probs[i][positive];
      bin[i] = labels[i] == positive ? 1 : 0;
      (bin[i] ? has_pos : has_neg) = true;
    }
    s.auroc = (has_pos && has_neg) ? auroc(scores, bin) : 0.5;
  } else {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t c = 0; c < data.num_classes; ++c) {
      std::vector<double> scores(report.bags.size());
      std::vector<int> bin(report.bags.size());
      bool has_pos = false, has_neg = false;
      for (std::size_t i = 0; i < report.bags.size(); ++i) {
        scores[i] = probs[i][c];
        bin[i] = labels[i] == c ? 1 : 0;
        (bin[i] ? has_pos : has_neg) = true;
      }
      if (!has_pos || !has_neg) continue;
      sum += auroc(scores, bin);
      ++pairs;
    }
    s.auroc = pairs > 0 ? sum / static_cast<double>(pairs) : 0.5;
  }

  report.principal_axes = detail::principal_axes_of(report.bags);
  return report;
}

inline nlohmann::json summary_to_json(const DiagnosticsSummary& s) {
  return nlohmann::json{{"per_class_mean_std", s.per_class_mean_std},
                        {"negative_center_dispersion", s.negative_center_dispersion},
                        {"auroc", s.auroc},
                        {"accuracy", s.accuracy}};
}

// One CSV per bag (k,x,y,attention_weight) under dir. Bags without coords are
// skipped; their ids are returned so the caller can warn. Values are written
// with shortest-round-trip formatting.
inline std::vector<std::string> export_attention(const std::vector<BagDiagnostics>& diags,
                                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> skipped;
  for (const BagDiagnostics& d : diags) {
    if (!d.coords) {
      skipped.push_back(d.id);
      continue;
    }
    if (d.coords->size() != d.attention.size())
      throw ContractError("bag '" + d.id + "': coords/attention length mismatch");
    const std::filesystem::path path = dir / (d.id + ".csv");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "k,x,y,attention_weight\n";
    for (std::size_t k = 0; k < d.attention.size(); ++k)
      out << k << ',' << (*d.coords)[k][0] << ',' << (*d.coords)[k][1] << ','
          << detail::format_double(d.attention[k]) << '\n';
    if (!out) throw IoError("failed while writing " + path.string());
  }
  return skipped;
}

struct AttentionRow {
  std::size_t k = 0;
  std::int32_t x = 0;
  std::int32_t y = 0;
  double weight = 0.0;
};

inline std::vector<AttentionRow> read_attention_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "k,x,y,attention_weight")
    throw SchemaError(path.string() + ": missing attention header");
  std::vector<AttentionRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    AttentionRow row;
    try {
      std::getline(ss, field, ',');
      row.k = std::stoul(field);
      std::getline(ss, field, ',');
      row.x = std::stoi(field);
      std::getline(ss, field, ',');
      row.y = std::stoi(field);
      std::getline(ss, field, ',');
      row.weight = std::stod(field);
    } catch (const std::exception&) {
      throw SchemaError(path.string() + ": malformed attention row '" + line + "'");
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace cdne
