#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "cdne/cdne_head.hpp"
#include "cdne/config.hpp"
#include "cdne/data.hpp"
#include "cdne/error.hpp"
#include "cdne/metrics.hpp"
#include "cdne/mil.hpp"
#include "cdne/optimizer.hpp"
#include "cdne/tape.hpp"

namespace cdne {

// Stateless mix of a base seed with a stream index. Every consumer of
// randomness (model init, head init, epoch shuffle, center fallback, folds)
// gets its own engine so that enabling or disabling one consumer cannot shift
// the draws seen by the others.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace stream {
inline constexpr std::uint64_t model_init = 0;
inline constexpr std::uint64_t head_init = 1;
inline constexpr std::uint64_t shuffle = 2;
inline constexpr std::uint64_t center_fallback = 3;
inline constexpr std::uint64_t fold_base = 16;
}  // namespace stream

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  double mil_loss = 0.0;
  double neg_loss = 0.0;
  double pos_loss = 0.0;
  double overall_loss = 0.0;
  double val_auroc = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> mean_std;  // per class, on the validation split
  std::size_t skipped_bags = 0;  // bags with K < 2, no auxiliary term
};

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw NumericError("failed to format double");
  return std::string(buf, ptr);
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

// Per-epoch training record. The CSV starts with a single commented
// generation timestamp; everything below it is deterministic for a given
// dataset, config, and seed, so two runs diff clean after dropping that line.
struct TrainLog {
  std::size_t num_classes = 0;
  std::vector<EpochRow> rows;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "# generated_at " << detail::utc_timestamp() << "\n";
    out << "epoch,mil_loss,neg_loss,pos_loss,overall_loss,val_auroc,val_accuracy";
    for (std::size_t c = 0; c < num_classes; ++c) out << ",mean_std_class" << c;
    out << ",skipped_bags\n";
    for (const EpochRow& r : rows) {
      out << r.epoch << ',' << detail::format_double(r.mil_loss) << ','
          << detail::format_double(r.neg_loss) << ',' << detail::format_double(r.pos_loss)
          << ',' << detail::format_double(r.overall_loss) << ','
          << detail::format_double(r.val_auroc) << ',' << detail::format_double(r.val_accuracy);
      for (double s : r.mean_std) out << ',' << detail::format_double(s);
      out << ',' << r.skipped_bags << '\n';
    }
    if (!out) throw IoError("failed while writing " + path.string());
  }
};

struct EvalMetrics {
  double auroc = 0.0;
  double accuracy = 0.0;
  std::vector<double> mean_std;      // per class
  std::vector<double> scores;        // per bag: positive-class probability (binary)
  std::vector<std::size_t> predicted;
};

namespace detail {

inline std::vector<double> softmax_row(const Tensor& logits) {
  std::vector<double> p(logits.values());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

// Mean over dimensions of the per-dimension sample-style deviation around an
// explicit center row (the K-1 denominator matches the training objective).
inline double mean_std_around(const Tensor& points, const std::vector<double>& center) {
  const std::size_t k = points.rows(), m = points.cols();
  double acc = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double d = points(i, j) - center[j];
      ss += d * d;
    }
    acc += std::sqrt(ss / static_cast<double>(k - 1));
  }
  return acc / static_cast<double>(m);
}

inline std::vector<double> column_means(const Tensor& points) {
  std::vector<double> mean(points.cols(), 0.0);
  for (std::size_t i = 0; i < points.rows(); ++i)
    for (std::size_t j = 0; j < points.cols(); ++j) mean[j] += points(i, j);
  for (double& v : mean) v /= static_cast<double>(points.rows());
  return mean;
}

}  // namespace detail

// Forward-only pass over a set of bags. AUROC is the positive-class
// probability ranking for binary tasks and the macro one-vs-rest average
// otherwise. mean_std_class[c] averages, over bags of class c, the per-bag
// spread: around the matching head center when the auxiliary head is present,
// around the bag's own embedding mean when it is not.
inline EvalMetrics evaluate(const MilModel& model, const CdneHead* head, const Dataset& data,
                            std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("evaluate needs at least one bag");
  const std::size_t classes = data.num_classes;
  EvalMetrics out;
  std::vector<std::vector<double>> probs;
  std::vector<std::size_t> labels;
  std::vector<double> std_sum(classes, 0.0);
  std::vector<std::size_t> std_count(classes, 0);

  for (std::size_t idx : indices) {
    const Bag& bag = data.bags[idx];
    Tape tape;
    Tensor emb = map_instances(tape, model, bag.instances);
    PooledBag pooled = attention_pool(tape, model, emb);
    Tensor logits = classify(tape, model, pooled.embedding);
    probs.push_back(detail::softmax_row(logits));
    labels.push_back(bag.label);
    out.predicted.push_back(static_cast<std::size_t>(
        std::max_element(probs.back().begin(), probs.back().end()) - probs.back().begin()));

    if (bag.instances.rows() >= 2) {
      if (head) {
        const std::size_t h = head->num_heads() == 1 ? 0 : bag.label;
        Tensor projected = project(tape, *head, h, emb);
        std_sum[bag.label] +=
            detail::mean_std_around(projected, head->centers[h].values());
      } else {
        std_sum[bag.label] += detail::mean_std_around(emb, detail::column_means(emb));
      }
      ++std_count[bag.label];
    }
  }

  out.mean_std.resize(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c)
    if (std_count[c] > 0) out.mean_std[c] = std_sum[c] / static_cast<double>(std_count[c]);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (out.predicted[i] == labels[i]) ++correct;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());

  if (classes == 2) {
    const std::size_t positive = data.negative_class == 0 ? 1 : 0;
    std::vector<int> bin(labels.size());
    out.scores.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      out.scores[i] = probs[i][positive];
      bin[i] = labels[i] == positive ? 1 : 0;
    }
    out.auroc = auroc(out.scores, bin);
  } else {
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<double> sc(labels.size());
      std::vector<int> bin(labels.size());
      bool has_pos = false, has_neg = false;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        sc[i] = probs[i][c];
        bin[i] = labels[i] == c ? 1 : 0;
        (bin[i] ? has_pos : has_neg) = true;
      }
      if (!has_pos || !has_neg) continue;
      sum += auroc(sc, bin);
      ++counted;
    }
    if (counted == 0) throw ValidationError("auroc undefined: no class present in evaluation");
    out.auroc = sum / static_cast<double>(counted);
  }
  return out;
}

struct FoldResult {
  TrainLog log;
  MilModel model;
  std::optional<CdneHead> head;
  double val_auroc = 0.0;
  double val_accuracy = 0.0;
  std::size_t reported_epoch = 0;  // epoch whose weights/metrics are reported
};

namespace detail {

inline std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> snap;
  snap.reserve(params.size());
  for (const Tensor& t : params) snap.push_back(t.values());
  return snap;
}

inline void restore_values(std::vector<Tensor>& params,
                           const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_values() = snap[i];
}

}  // namespace detail

// Trains one fold: per-bag steps in a fresh shuffled order each epoch, one
// validation pass per epoch. Non-finite values abort with the offending epoch
// and bag in the message. With select_best_epoch the weights of the highest
// validation AUROC epoch (first such epoch on ties) are restored at the end.
inline FoldResult train_fold(const Dataset& data, const FoldSplit& split, const RunConfig& cfg,
                             std::uint64_t fold_seed) {
  if (split.train.empty() || split.validation.empty())
    throw ContractError("fold needs non-empty train and validation sets");

  FoldResult result;
  std::mt19937_64 model_rng(derive_seed(fold_seed, stream::model_init));
  result.model = MilModel::init(cfg.model.variant, data.feature_dim, cfg.model.hidden_dim,
                                cfg.model.embed_dim, cfg.model.attention_dim, data.num_classes,
                                model_rng);
  if (cfg.cdne.enabled) {
    std::mt19937_64 head_rng(derive_seed(fold_seed, stream::head_init));
    const std::size_t heads = data.num_classes == 2 ? 1 : data.num_classes;
    result.head = CdneHead::init(heads, cfg.model.embed_dim, cfg.model.projection_dim,
                                 cfg.cdne.thr, cfg.cdne.lambda_neg, cfg.cdne.lambda_pos,
                                 head_rng);
    std::mt19937_64 center_rng(derive_seed(fold_seed, stream::center_fallback));
    init_centers(*result.head, result.model, data, split.train, data.negative_class,
                 center_rng);
  }

  std::vector<Tensor> params = result.model.params();
  if (result.head)
    for (const Tensor& t : result.head->params()) params.push_back(t);
  Optimizer opt(cfg.optimizer, cfg.hyper, params);

  std::mt19937_64 shuffle_rng(derive_seed(fold_seed, stream::shuffle));
  std::vector<std::size_t> order = split.train;

  result.log.num_classes = data.num_classes;
  double best_auroc = -1.0;
  std::vector<std::vector<double>> best_snapshot;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRow row;
    row.epoch = epoch;
    double neg_sum = 0.0, pos_sum = 0.0;
    std::size_t neg_count = 0, pos_count = 0;

    for (std::size_t idx : order) {
      const Bag& bag = data.bags[idx];
      try {
        Tape tape;
        Tensor emb = map_instances(tape, result.model, bag.instances);
        PooledBag pooled = attention_pool(tape, result.model, emb);
        Tensor logits = classify(tape, result.model, pooled.embedding);
        Tensor mil = mil_loss(tape, logits, bag.label);
        Tensor loss = mil;
        if (result.head) {
          CdneResult cd = result.head->num_heads() == 1
                              ? loss_cdne_binary(tape, *result.head, bag.label,
                                                 project(tape, *result.head, 0, emb),
                                                 data.negative_class)
                              : loss_cdne_multiclass(tape, *result.head, bag.label, emb);
          if (cd.skipped()) {
            ++row.skipped_bags;
          } else {
            loss = loss_overall(tape, mil, *cd.total);
            if (bag.label == data.negative_class || result.head->num_heads() > 1) {
              neg_sum += cd.neg_component;
              ++neg_count;
            }
            if (bag.label != data.negative_class || result.head->num_heads() > 1) {
              pos_sum += cd.pos_component;
              ++pos_count;
            }
          }
        }
        row.mil_loss += mil.item();
        row.overall_loss += loss.item();
        tape.backward(loss);
        opt.step();
        opt.zero_grad();
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " bag '" + bag.id +
                           "': " + e.what());
      }
    }

    const double n = static_cast<double>(order.size());
    row.mil_loss /= n;
    row.overall_loss /= n;
    if (neg_count > 0) row.neg_loss = neg_sum / static_cast<double>(neg_count);
    if (pos_count > 0) row.pos_loss = pos_sum / static_cast<double>(pos_count);

    EvalMetrics val = evaluate(result.model, result.head ? &*result.head : nullptr, data,
                               split.validation);
    row.val_auroc = val.auroc;
    row.val_accuracy = val.accuracy;
    row.mean_std = val.mean_std;
    result.log.rows.push_back(std::move(row));

    if (cfg.select_best_epoch && val.auroc > best_auroc) {
      best_auroc = val.auroc;
      best_snapshot = detail::snapshot_values(params);
      result.reported_epoch = epoch;
    }
  }

  if (cfg.select_best_epoch) {
    detail::restore_values(params, best_snapshot);
    const EpochRow& best = result.log.rows[result.reported_epoch - 1];
    result.val_auroc = best.val_auroc;
    result.val_accuracy = best.val_accuracy;
  } else {
    result.reported_epoch = cfg.epochs;
    const EpochRow& last = result.log.rows.back();
    result.val_auroc = last.val_auroc;
    result.val_accuracy = last.val_accuracy;
  }
  return result;
}

struct CvResult {
  std::vector<FoldResult> folds;
  double mean_auroc = 0.0;
  double std_auroc = 0.0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_and_std(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0};
}

}  // namespace detail

// Stratified k-fold cross-validation. Folds are independent (fresh model,
// fresh derived seed) so they can run on worker threads; results land in fold
// order regardless of completion order.
inline CvResult run_cv(const Dataset& data, const RunConfig& cfg, std::size_t jobs = 1) {
  const std::vector<FoldSplit> splits = kfold_split(data, cfg.folds, cfg.seed);
  CvResult cv;
  cv.folds.resize(splits.size());

  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, splits.size()));
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t f = next.fetch_add(1);
      if (f >= splits.size()) return;
      try {
        cv.folds[f] =
            train_fold(data, splits[f], cfg, derive_seed(cfg.seed, stream::fold_base + f));
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<double> aurocs, accs;
  for (const FoldResult& f : cv.folds) {
    aurocs.push_back(f.val_auroc);
    accs.push_back(f.val_accuracy);
  }
  std::tie(cv.mean_auroc, cv.std_auroc) = detail::mean_and_std(aurocs);
  std::tie(cv.mean_accuracy, cv.std_accuracy) = detail::mean_and_std(accs);
  return cv;
}

}  // namespace cdne
