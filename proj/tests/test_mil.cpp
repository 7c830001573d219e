#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "cdne/gradcheck.hpp"
#include "cdne/mil.hpp"

using namespace cdne;

namespace {

MilModel random_model(AttentionVariant variant, std::size_t d, std::size_t h, std::size_t e,
                      std::size_t a, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return MilModel::init(variant, d, h, e, a, c, rng);
}

Tensor random_bag(std::size_t k, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(k * d);
  for (double& x : v) x = dist(rng);
  return Tensor::matrix(k, d, std::move(v));
}

// Scalar-loop forward pass, written without the tensor layer on purpose.
std::vector<std::vector<double>> oracle_embeddings(const MilModel& m, const Tensor& bag) {
  const std::size_t k = bag.rows(), d = bag.cols();
  std::vector<std::vector<double>> emb(k, std::vector<double>(m.embed_dim, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<double> hidden(m.hidden_dim);
    for (std::size_t j = 0; j < m.hidden_dim; ++j) {
      double acc = m.b1(0, j);
      for (std::size_t p = 0; p < d; ++p) acc += bag(i, p) * m.w1(p, j);
      hidden[j] = std::max(0.0, acc);
    }
    for (std::size_t j = 0; j < m.embed_dim; ++j) {
      double acc = m.b2(0, j);
      for (std::size_t p = 0; p < m.hidden_dim; ++p) acc += hidden[p] * m.w2(p, j);
      emb[i][j] = acc;
    }
  }
  return emb;
}

std::vector<double> oracle_attention(const MilModel& m,
                                     const std::vector<std::vector<double>>& emb) {
  const std::size_t k = emb.size();
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < k; ++i) {
    double a = 0.0;
    for (std::size_t j = 0; j < m.attention_dim; ++j) {
      double vt = 0.0;
      for (std::size_t p = 0; p < m.embed_dim; ++p) vt += emb[i][p] * m.attn_v(p, j);
      double score = std::tanh(vt);
      if (m.variant == AttentionVariant::gated_attention) {
        double ut = 0.0;
        for (std::size_t p = 0; p < m.embed_dim; ++p) ut += emb[i][p] * m.attn_u(p, j);
        score *= 1.0 / (1.0 + std::exp(-ut));
      }
      a += score * m.attn_w(j, 0);
    }
    logits[i] = a;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : logits) v /= sum;
  return logits;
}

}  // namespace

TEST_CASE("variant names parse both ways") {
  CHECK(parse_variant("attention") == AttentionVariant::attention);
  CHECK(parse_variant("gated_attention") == AttentionVariant::gated_attention);
  CHECK_THROWS_AS(parse_variant("self_attention"), ValidationError);
  CHECK(std::string(variant_name(AttentionVariant::gated_attention)) == "gated_attention");
}

TEST_CASE("zeroed mapping weights produce all-zero embeddings") {
  MilModel m = random_model(AttentionVariant::attention, 4, 6, 5, 3, 2, 1);
  for (Tensor t : {m.w1, m.b1, m.w2, m.b2})
    std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
  Tape tape;
  Tensor emb = map_instances(tape, m, random_bag(3, 4, 2));
  REQUIRE(emb.rows() == 3);
  REQUIRE(emb.cols() == 5);
  for (double v : emb.values()) CHECK(v == 0.0);
}

TEST_CASE("single-instance bags map to a 1xE embedding and weight 1") {
  MilModel m = random_model(AttentionVariant::attention, 4, 6, 5, 3, 2, 3);
  Tape tape;
  Tensor emb = map_instances(tape, m, random_bag(1, 4, 4));
  REQUIRE(emb.rows() == 1);
  REQUIRE(emb.cols() == 5);
  PooledBag pooled = attention_pool(tape, m, emb);
  REQUIRE(pooled.weights.size() == 1);
  CHECK(pooled.weights.values()[0] == 1.0);
  for (std::size_t j = 0; j < emb.cols(); ++j)
    CHECK(pooled.embedding(0, j) == Catch::Approx(emb(0, j)).margin(1e-15));
}

TEST_CASE("map_instances matches the scalar-loop oracle within 1e-10") {
  for (auto variant : {AttentionVariant::attention, AttentionVariant::gated_attention}) {
    MilModel m = random_model(variant, 7, 9, 6, 4, 2, 11);
    Tensor bag = random_bag(3, 7, 12);
    Tape tape;
    Tensor emb = map_instances(tape, m, bag);
    auto oracle = oracle_embeddings(m, bag);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < m.embed_dim; ++j)
        CHECK(emb(i, j) == Catch::Approx(oracle[i][j]).margin(1e-10));
  }
}

TEST_CASE("attention weights match the scalar formula for both variants") {
  for (auto variant : {AttentionVariant::attention, AttentionVariant::gated_attention}) {
    MilModel m = random_model(variant, 5, 8, 6, 4, 2, 21);
    Tensor bag = random_bag(4, 5, 22);
    Tape tape;
    Tensor emb = map_instances(tape, m, bag);
    PooledBag pooled = attention_pool(tape, m, emb);

    auto oracle_emb = oracle_embeddings(m, bag);
    auto oracle_w = oracle_attention(m, oracle_emb);
    REQUIRE(pooled.weights.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(pooled.weights.values()[i] == Catch::Approx(oracle_w[i]).margin(1e-10));

    // bag embedding is the weighted sum of instance embeddings
    for (std::size_t j = 0; j < m.embed_dim; ++j) {
      double expect = 0.0;
      for (std::size_t i = 0; i < 4; ++i) expect += oracle_w[i] * oracle_emb[i][j];
      CHECK(pooled.embedding(0, j) == Catch::Approx(expect).margin(1e-10));
    }
  }
}

TEST_CASE("attention weights are a distribution for every K") {
  for (auto variant : {AttentionVariant::attention, AttentionVariant::gated_attention}) {
    MilModel m = random_model(variant, 5, 8, 6, 4, 2, 31);
    for (std::size_t k : {1u, 2u, 7u}) {
      Tape tape;
      PooledBag pooled =
          attention_pool(tape, m, map_instances(tape, m, random_bag(k, 5, 100 + k)));
      double sum = 0.0;
      for (double w : pooled.weights.values()) {
        CHECK(w > 0.0);
        CHECK(w <= 1.0);
        sum += w;
      }
      CHECK(sum == Catch::Approx(1.0).margin(1e-12));
    }
  }
}

TEST_CASE("identical instances share the weight and fix the bag embedding") {
  MilModel m = random_model(AttentionVariant::gated_attention, 5, 8, 6, 4, 2, 41);
  Tensor one = random_bag(1, 5, 42);
  std::vector<double> doubled(one.values());
  doubled.insert(doubled.end(), one.values().begin(), one.values().end());
  Tensor two = Tensor::matrix(2, 5, doubled);

  Tape tape;
  Tensor emb1 = map_instances(tape, m, one);
  PooledBag pooled = attention_pool(tape, m, map_instances(tape, m, two));
  CHECK(pooled.weights.values()[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(pooled.weights.values()[1] == Catch::Approx(0.5).margin(1e-15));
  for (std::size_t j = 0; j < m.embed_dim; ++j)
    CHECK(pooled.embedding(0, j) == Catch::Approx(emb1(0, j)).margin(1e-12));
}

TEST_CASE("permuting instances permutes weights and keeps the bag embedding") {
  MilModel m = random_model(AttentionVariant::attention, 5, 8, 6, 4, 2, 51);
  Tensor bag = random_bag(5, 5, 52);

  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<double> permuted(bag.size());
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t d = 0; d < 5; ++d) permuted[i * 5 + d] = bag(perm[i], d);
  Tensor shuffled = Tensor::matrix(5, 5, permuted);

  Tape t1, t2;
  PooledBag a = attention_pool(t1, m, map_instances(t1, m, bag));
  PooledBag b = attention_pool(t2, m, map_instances(t2, m, shuffled));
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(b.weights.values()[i] == Catch::Approx(a.weights.values()[perm[i]]).margin(1e-12));
  for (std::size_t j = 0; j < m.embed_dim; ++j)
    CHECK(b.embedding(0, j) == Catch::Approx(a.embedding(0, j)).margin(1e-12));
}

TEST_CASE("classifier is affine and matches a scalar oracle") {
  MilModel m = random_model(AttentionVariant::attention, 5, 8, 6, 4, 3, 61);
  SECTION("zero weights give uniform logits") {
    for (Tensor t : {m.clf_w, m.clf_b})
      std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
    Tape tape;
    Tensor logits = classify(tape, m, Tensor::row({1.0, -2.0, 0.5, 3.0, 1.1, -0.7}));
    for (double v : logits.values()) CHECK(v == 0.0);
  }
  SECTION("random case") {
    Tensor e = random_bag(1, 6, 62);
    Tape tape;
    Tensor logits = classify(tape, m, e);
    REQUIRE(logits.cols() == 3);
    for (std::size_t c = 0; c < 3; ++c) {
      double expect = m.clf_b(0, c);
      for (std::size_t j = 0; j < 6; ++j) expect += e(0, j) * m.clf_w(j, c);
      CHECK(logits(0, c) == Catch::Approx(expect).margin(1e-10));
    }
  }
  SECTION("width mismatch") {
    Tape tape;
    CHECK_THROWS_AS(classify(tape, m, Tensor::row({1.0, 2.0})), DimensionError);
    CHECK_THROWS_AS(map_instances(tape, m, Tensor::zeros(2, 9)), DimensionError);
  }
}

TEST_CASE("bag classification loss hits its worked values") {
  Tape tape;
  CHECK(mil_loss(tape, Tensor::row({0.0, 0.0}), 0).item() ==
        Catch::Approx(std::log(2.0)).margin(1e-12));
  // near-certain correct prediction: loss collapses to ~2.06e-9
  CHECK(mil_loss(tape, Tensor::row({10.0, -10.0}), 0).item() ==
        Catch::Approx(2.061153622438558e-9).epsilon(1e-6));
  CHECK_THROWS_AS(mil_loss(tape, Tensor::row({0.0, 0.0}), 2), ContractError);
}

TEST_CASE("bag classification loss is shift invariant") {
  Tape t1, t2;
  Tensor a = Tensor::row({0.3, -1.2, 0.8});
  Tensor b = Tensor::row({0.3 + 7.5, -1.2 + 7.5, 0.8 + 7.5});
  CHECK(mil_loss(t1, a, 1).item() == Catch::Approx(mil_loss(t2, b, 1).item()).margin(1e-12));
}

TEST_CASE("full forward pass gradients check out for both variants") {
  for (auto variant : {AttentionVariant::attention, AttentionVariant::gated_attention}) {
    MilModel m = random_model(variant, 4, 5, 4, 3, 2, 71);
    Tensor bag = random_bag(3, 4, 72);
    auto program = [&](Tape& t) {
      Tensor emb = map_instances(t, m, bag);
      PooledBag pooled = attention_pool(t, m, emb);
      return mil_loss(t, classify(t, m, pooled.embedding), 1);
    };
    GradCheckReport report = grad_check(program, m.named_params());
    INFO(variant_name(variant));
    CHECK(report.all_passed());
  }
}
