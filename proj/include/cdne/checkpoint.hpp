#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <vector>

#include "cdne/cdne_head.hpp"
#include "cdne/data.hpp"
#include "cdne/error.hpp"
#include "cdne/mil.hpp"

namespace cdne {

// Checkpoint layout, all little-endian:
//   u32 variant (0 = attention, 1 = gated_attention)
//   u32 D, H, E, A, C
//   u32 cdne_present (0/1)
//   if present: u32 num_heads, u32 M, f64 thr, f64 lambda_neg, f64 lambda_pos
//   MilModel tensors as f64 in params() order:
//     w1 (D*H), b1 (H), w2 (H*E), b2 (E), attn_v (E*A), [attn_u (E*A)],
//     attn_w (A), clf_w (E*C), clf_b (C)
//   per head: proj_w (E*M), proj_b (M), center (M)
struct Checkpoint {
  MilModel model;
  std::optional<CdneHead> head;
};

namespace detail {

inline void write_u32(std::ofstream& out, std::uint32_t v, const std::string& path) {
  write_bytes(out, &v, sizeof(v), path);
}

inline std::uint32_t read_u32(std::ifstream& in, const std::string& what) {
  std::uint32_t v = 0;
  read_bytes(in, &v, sizeof(v), what);
  return v;
}

inline void write_f64(std::ofstream& out, double v, const std::string& path) {
  write_bytes(out, &v, sizeof(v), path);
}

inline double read_f64(std::ifstream& in, const std::string& what) {
  double v = 0.0;
  read_bytes(in, &v, sizeof(v), what);
  return v;
}

inline void write_tensor(std::ofstream& out, const Tensor& t, const std::string& path) {
  write_bytes(out, t.values().data(), t.size() * sizeof(double), path);
}

inline Tensor read_tensor(std::ifstream& in, std::size_t rows, std::size_t cols,
                          bool requires_grad, const std::string& what) {
  std::vector<double> v(rows * cols);
  read_bytes(in, v.data(), v.size() * sizeof(double), what);
  return Tensor::matrix(rows, cols, std::move(v), requires_grad);
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string p = path.string();
  const MilModel& m = ckpt.model;
  detail::write_u32(out, m.variant == AttentionVariant::attention ? 0u : 1u, p);
  detail::write_u32(out, static_cast<std::uint32_t>(m.input_dim), p);
  detail::write_u32(out, static_cast<std::uint32_t>(m.hidden_dim), p);
  detail::write_u32(out, static_cast<std::uint32_t>(m.embed_dim), p);
  detail::write_u32(out, static_cast<std::uint32_t>(m.attention_dim), p);
  detail::write_u32(out, static_cast<std::uint32_t>(m.num_classes), p);
  detail::write_u32(out, ckpt.head ? 1u : 0u, p);
  if (ckpt.head) {
    detail::write_u32(out, static_cast<std::uint32_t>(ckpt.head->num_heads()), p);
    detail::write_u32(out, static_cast<std::uint32_t>(ckpt.head->proj_dim), p);
    detail::write_f64(out, ckpt.head->thr, p);
    detail::write_f64(out, ckpt.head->lambda_neg, p);
    detail::write_f64(out, ckpt.head->lambda_pos, p);
  }
  for (const Tensor& t : m.params()) detail::write_tensor(out, t, p);
  if (ckpt.head)
    for (const Tensor& t : ckpt.head->params()) detail::write_tensor(out, t, p);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string what = "checkpoint " + path.string();

  const std::uint32_t variant_tag = detail::read_u32(in, what);
  if (variant_tag > 1) throw SchemaError(what + ": unknown variant tag");
  Checkpoint ckpt;
  MilModel& m = ckpt.model;
  m.variant = variant_tag == 0 ? AttentionVariant::attention : AttentionVariant::gated_attention;
  m.input_dim = detail::read_u32(in, what);
  m.hidden_dim = detail::read_u32(in, what);
  m.embed_dim = detail::read_u32(in, what);
  m.attention_dim = detail::read_u32(in, what);
  m.num_classes = detail::read_u32(in, what);
  if (m.input_dim == 0 || m.hidden_dim == 0 || m.embed_dim == 0 || m.attention_dim == 0 ||
      m.num_classes < 2)
    throw SchemaError(what + ": invalid header dimensions");

  const std::uint32_t has_head = detail::read_u32(in, what);
  if (has_head > 1) throw SchemaError(what + ": invalid cdne presence flag");
  std::size_t num_heads = 0, proj_dim = 0;
  double thr = 0.0, lambda_neg = 0.0, lambda_pos = 0.0;
  if (has_head) {
    num_heads = detail::read_u32(in, what);
    proj_dim = detail::read_u32(in, what);
    if (num_heads == 0 || proj_dim == 0) throw SchemaError(what + ": invalid head header");
    thr = detail::read_f64(in, what);
    lambda_neg = detail::read_f64(in, what);
    lambda_pos = detail::read_f64(in, what);
  }

  m.w1 = detail::read_tensor(in, m.input_dim, m.hidden_dim, true, what);
  m.b1 = detail::read_tensor(in, 1, m.hidden_dim, true, what);
  m.w2 = detail::read_tensor(in, m.hidden_dim, m.embed_dim, true, what);
  m.b2 = detail::read_tensor(in, 1, m.embed_dim, true, what);
  m.attn_v = detail::read_tensor(in, m.embed_dim, m.attention_dim, true, what);
  if (m.variant == AttentionVariant::gated_attention)
    m.attn_u = detail::read_tensor(in, m.embed_dim, m.attention_dim, true, what);
  m.attn_w = detail::read_tensor(in, m.attention_dim, 1, true, what);
  m.clf_w = detail::read_tensor(in, m.embed_dim, m.num_classes, true, what);
  m.clf_b = detail::read_tensor(in, 1, m.num_classes, true, what);

  if (has_head) {
    CdneHead head;
    head.embed_dim = m.embed_dim;
    head.proj_dim = proj_dim;
    head.thr = thr;
    head.lambda_neg = lambda_neg;
    head.lambda_pos = lambda_pos;
    for (std::size_t h = 0; h < num_heads; ++h) {
      head.proj_w.push_back(detail::read_tensor(in, m.embed_dim, proj_dim, true, what));
      head.proj_b.push_back(detail::read_tensor(in, 1, proj_dim, true, what));
      head.centers.push_back(detail::read_tensor(in, 1, proj_dim, true, what));
    }
    ckpt.head = std::move(head);
  }

  char extra = 0;
  if (in.read(&extra, 1); in.gcount() != 0)
    throw SchemaError(what + ": trailing bytes after parameters");
  return ckpt;
}

}  // namespace cdne
