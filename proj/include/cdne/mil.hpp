#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cdne/data.hpp"
#include "cdne/error.hpp"
#include "cdne/tape.hpp"
#include "cdne/tensor.hpp"

namespace cdne {

enum class AttentionVariant { attention, gated_attention };

inline const char* variant_name(AttentionVariant v) {
  return v == AttentionVariant::attention ? "attention" : "gated_attention";
}

inline AttentionVariant parse_variant(const std::string& s) {
  if (s == "attention") return AttentionVariant::attention;
  if (s == "gated_attention") return AttentionVariant::gated_attention;
  throw ValidationError("unknown attention variant '" + s + "'");
}

// Instance mapper (two-layer MLP, ReLU between the layers), attention pooler
// and bag-level linear classifier.
struct MilModel {
  AttentionVariant variant = AttentionVariant::attention;
  std::size_t input_dim = 0;      // D
  std::size_t hidden_dim = 0;     // H
  std::size_t embed_dim = 0;      // E
  std::size_t attention_dim = 0;  // A
  std::size_t num_classes = 0;    // C

  Tensor w1, b1;      // D x H, 1 x H
  Tensor w2, b2;      // H x E, 1 x E
  Tensor attn_v;      // E x A
  Tensor attn_u;      // E x A, gated variant only
  Tensor attn_w;      // A x 1
  Tensor clf_w, clf_b;  // E x C, 1 x C

  static MilModel init(AttentionVariant variant, std::size_t input_dim, std::size_t hidden_dim,
                       std::size_t embed_dim, std::size_t attention_dim,
                       std::size_t num_classes, std::mt19937_64& rng) {
    if (input_dim == 0 || hidden_dim == 0 || embed_dim == 0 || attention_dim == 0 ||
        num_classes < 2)
      throw ValidationError("model dimensions must be positive and num_classes >= 2");
    MilModel m;
    m.variant = variant;
    m.input_dim = input_dim;
    m.hidden_dim = hidden_dim;
    m.embed_dim = embed_dim;
    m.attention_dim = attention_dim;
    m.num_classes = num_classes;
    m.w1 = gaussian(input_dim, hidden_dim, std::sqrt(2.0 / double(input_dim)), rng);
    m.b1 = Tensor::zeros(1, hidden_dim, true);
    m.w2 = gaussian(hidden_dim, embed_dim, std::sqrt(2.0 / double(hidden_dim)), rng);
    m.b2 = Tensor::zeros(1, embed_dim, true);
    m.attn_v = gaussian(embed_dim, attention_dim, std::sqrt(1.0 / double(embed_dim)), rng);
    if (variant == AttentionVariant::gated_attention)
      m.attn_u = gaussian(embed_dim, attention_dim, std::sqrt(1.0 / double(embed_dim)), rng);
    m.attn_w = gaussian(attention_dim, 1, std::sqrt(1.0 / double(attention_dim)), rng);
    m.clf_w = gaussian(embed_dim, num_classes, std::sqrt(1.0 / double(embed_dim)), rng);
    m.clf_b = Tensor::zeros(1, num_classes, true);
    return m;
  }

  // Trainable tensors in checkpoint order.
  std::vector<Tensor> params() const {
    std::vector<Tensor> out{w1, b1, w2, b2, attn_v};
    if (variant == AttentionVariant::gated_attention) out.push_back(attn_u);
    out.push_back(attn_w);
    out.push_back(clf_w);
    out.push_back(clf_b);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out{
        {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"attn_v", attn_v}};
    if (variant == AttentionVariant::gated_attention) out.emplace_back("attn_u", attn_u);
    out.emplace_back("attn_w", attn_w);
    out.emplace_back("clf_w", clf_w);
    out.emplace_back("clf_b", clf_b);
    return out;
  }

 private:
  static Tensor gaussian(std::size_t rows, std::size_t cols, double stddev,
                         std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(rows * cols);
    for (double& x : v) x = dist(rng);
    return Tensor::matrix(rows, cols, std::move(v), true);
  }
};

// g(x): K x D -> K x E instance embeddings.
inline Tensor map_instances(Tape& tape, const MilModel& model, const Tensor& instances) {
  if (instances.cols() != model.input_dim)
    throw DimensionError("bag instance width " + std::to_string(instances.cols()) +
                         " != model input width " + std::to_string(model.input_dim));
  const std::size_t k = instances.rows();
  Tensor h = tape.relu(
      tape.add(tape.matmul(instances, model.w1), tape.broadcast_row(model.b1, k)));
  return tape.add(tape.matmul(h, model.w2), tape.broadcast_row(model.b2, k));
}

struct PooledBag {
  Tensor embedding;  // 1 x E
  Tensor weights;    // 1 x K, softmax-normalized
};

// h(e): attention-weighted sum of instance embeddings.
//   attention:       a_k = w^T tanh(V e_k)
//   gated attention: a_k = w^T (tanh(V e_k) . sigmoid(U e_k))
inline PooledBag attention_pool(Tape& tape, const MilModel& model, const Tensor& embeddings) {
  if (embeddings.cols() != model.embed_dim)
    throw DimensionError("embedding width mismatch in attention_pool");
  Tensor scores = tape.tanh(tape.matmul(embeddings, model.attn_v));
  if (model.variant == AttentionVariant::gated_attention)
    scores = tape.mul(scores, tape.sigmoid(tape.matmul(embeddings, model.attn_u)));
  Tensor logits = tape.transpose(tape.matmul(scores, model.attn_w));  // 1 x K
  Tensor weights = tape.softmax_rows(logits);
  return PooledBag{tape.matmul(weights, embeddings), weights};
}

inline Tensor classify(Tape& tape, const MilModel& model, const Tensor& bag_embedding) {
  if (bag_embedding.rows() != 1 || bag_embedding.cols() != model.embed_dim)
    throw DimensionError("classify expects a 1 x E bag embedding");
  return tape.add(tape.matmul(bag_embedding, model.clf_w), model.clf_b);
}

inline Tensor mil_loss(Tape& tape, const Tensor& logits, std::size_t label) {
  if (label >= logits.cols()) throw ContractError("label outside [0, C)");
  return tape.softmax_ce(logits, label);
}

}  // namespace cdne
