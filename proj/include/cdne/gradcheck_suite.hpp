#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cdne/cdne_head.hpp"
#include "cdne/gradcheck.hpp"
#include "cdne/mil.hpp"
#include "cdne/tape.hpp"

namespace cdne {

// One named finite-difference check: a scalar program plus the parameters it
// is differentiated against. The standard suite below covers every op kind
// and both attention variants composed with the auxiliary losses; it backs
// the gradcheck command and the release gate.
struct GradCheckProgram {
  std::string name;
  std::function<Tensor(Tape&)> program;
  std::vector<std::pair<std::string, Tensor>> params;
};

inline std::vector<GradCheckProgram> op_grad_checks() {
  std::vector<GradCheckProgram> checks;
  // mean of squares around each op keeps gradients value-dependent.
  auto square_mean = [](Tape& t, const Tensor& x) { return t.mean_all(t.mul(x, x)); };

  Tensor a = Tensor::matrix(2, 3, {0.4, -1.2, 0.7, 1.5, -0.3, 0.9}, true);
  Tensor b = Tensor::matrix(3, 2, {0.8, -0.5, 1.1, 0.2, -0.9, 0.6}, true);
  Tensor c = Tensor::matrix(2, 3, {-0.6, 0.3, 1.4, 0.1, 0.8, -1.0}, true);
  Tensor positive = Tensor::matrix(2, 3, {0.3, 1.7, 0.9, 2.1, 0.5, 1.2}, true);
  Tensor row = Tensor::row({0.7, -0.4, 1.3}, true);
  Tensor logits = Tensor::row({0.2, -1.1, 0.8, 0.4}, true);

  checks.push_back({"op matmul",
                    [=](Tape& t) { return square_mean(t, t.matmul(a, b)); },
                    {{"a", a}, {"b", b}}});
  checks.push_back({"op add",
                    [=](Tape& t) { return square_mean(t, t.add(a, c)); },
                    {{"a", a}, {"c", c}}});
  checks.push_back({"op sub",
                    [=](Tape& t) { return square_mean(t, t.sub(a, c)); },
                    {{"a", a}, {"c", c}}});
  checks.push_back({"op elementwise_mul",
                    [=](Tape& t) { return square_mean(t, t.mul(a, c)); },
                    {{"a", a}, {"c", c}}});
  checks.push_back({"op scalar_mul",
                    [=](Tape& t) { return square_mean(t, t.scalar_mul(a, 1.7)); },
                    {{"a", a}}});
  checks.push_back({"op relu",
                    [=](Tape& t) { return square_mean(t, t.relu(a)); },
                    {{"a", a}}});
  checks.push_back({"op tanh",
                    [=](Tape& t) { return square_mean(t, t.tanh(a)); },
                    {{"a", a}}});
  checks.push_back({"op sigmoid",
                    [=](Tape& t) { return square_mean(t, t.sigmoid(a)); },
                    {{"a", a}}});
  checks.push_back({"op softmax_rows",
                    [=](Tape& t) { return square_mean(t, t.softmax_rows(a)); },
                    {{"a", a}}});
  checks.push_back({"op mean_all",
                    [=](Tape& t) {
                      Tensor m = t.mean_all(a);
                      return t.mul(m, m);
                    },
                    {{"a", a}}});
  checks.push_back({"op sqrt_elementwise",
                    [=](Tape& t) { return square_mean(t, t.sqrt_elems(positive)); },
                    {{"positive", positive}}});
  checks.push_back({"op sum_axis_rows",
                    [=](Tape& t) { return square_mean(t, t.sum_axis(a, 0)); },
                    {{"a", a}}});
  checks.push_back({"op sum_axis_cols",
                    [=](Tape& t) { return square_mean(t, t.sum_axis(a, 1)); },
                    {{"a", a}}});
  checks.push_back({"op broadcast_row",
                    [=](Tape& t) { return square_mean(t, t.broadcast_row(row, 4)); },
                    {{"row", row}}});
  checks.push_back({"op transpose",
                    [=](Tape& t) { return square_mean(t, t.transpose(a)); },
                    {{"a", a}}});
  checks.push_back({"op softmax_ce",
                    [=](Tape& t) { return t.softmax_ce(logits, 1); },
                    {{"logits", logits}}});
  return checks;
}

inline GradCheckProgram model_grad_check(AttentionVariant variant) {
  std::mt19937_64 rng(2024);
  MilModel model = MilModel::init(variant, 6, 8, 5, 4, 2, rng);
  // thr above the data scale keeps every hinge active, so the finite
  // differences never straddle a kink.
  CdneHead head = CdneHead::init(1, 5, 4, 2.5, 10.0, 3.0, rng);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> vals(4 * 6);
  for (double& v : vals) v = unit(rng);
  Tensor bag = Tensor::matrix(4, 6, std::move(vals));

  GradCheckProgram check;
  check.name = std::string("model ") + variant_name(variant) + " + auxiliary losses";
  check.program = [=](Tape& t) {
    Tensor emb = map_instances(t, model, bag);
    PooledBag pooled = attention_pool(t, model, emb);
    Tensor mil = mil_loss(t, classify(t, model, pooled.embedding), 1);
    CdneResult pull = loss_cdne_binary(t, head, 0, project(t, head, 0, emb), 0);
    CdneResult push = loss_cdne_binary(t, head, 1, project(t, head, 0, emb), 0);
    return t.add(mil, t.add(*pull.total, *push.total));
  };
  for (const auto& [name, p] : model.named_params()) check.params.emplace_back(name, p);
  for (const auto& [name, p] : head.named_params()) check.params.emplace_back(name, p);
  return check;
}

inline std::vector<GradCheckProgram> standard_grad_checks() {
  std::vector<GradCheckProgram> checks = op_grad_checks();
  checks.push_back(model_grad_check(AttentionVariant::attention));
  checks.push_back(model_grad_check(AttentionVariant::gated_attention));
  return checks;
}

}  // namespace cdne
