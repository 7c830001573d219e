#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "cdne/tape.hpp"
#include "cdne/tensor.hpp"

using namespace cdne;

TEST_CASE("tensor construction checks value count against shape") {
  CHECK_NOTHROW(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  CHECK_THROWS_AS(Tensor::matrix(2, 3, {1, 2, 3}), DimensionError);
  Tensor z = Tensor::zeros(2, 2, true);
  CHECK(z.requires_grad());
  CHECK(z.grad().size() == 4);
  Tensor s = Tensor::scalar(7.0);
  CHECK(s.is_scalar());
  CHECK(s.item() == 7.0);
  CHECK_THROWS_AS(Tensor::row({1, 2}).item(), ContractError);
}

TEST_CASE("tensor copies alias the same node, clone_values detaches") {
  Tensor a = Tensor::row({1.0, 2.0}, true);
  Tensor b = a;
  CHECK(a.same_node(b));
  b.mutable_values()[0] = 5.0;
  CHECK(a(0, 0) == 5.0);
  Tensor c = a.clone_values();
  CHECK_FALSE(c.same_node(a));
  CHECK_FALSE(c.requires_grad());
  c.mutable_values()[0] = -1.0;
  CHECK(a(0, 0) == 5.0);
}

TEST_CASE("matmul matches a scalar triple-loop oracle") {
  Tape tape;
  SECTION("ones case") {
    Tensor a = Tensor::full(2, 3, 1.0);
    Tensor b = Tensor::full(3, 1, 1.0);
    Tensor c = tape.matmul(a, b);
    REQUIRE(c.rows() == 2);
    REQUIRE(c.cols() == 1);
    CHECK(c(0, 0) == 3.0);
    CHECK(c(1, 0) == 3.0);
  }
  SECTION("random case against explicit loops") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dist(-2.0, 2.0);
    const std::size_t n = 4, k = 5, m = 3;
    std::vector<double> av(n * k), bv(k * m);
    for (double& v : av) v = dist(rng);
    for (double& v : bv) v = dist(rng);
    Tensor a = Tensor::matrix(n, k, av);
    Tensor b = Tensor::matrix(k, m, bv);
    Tensor c = tape.matmul(a, b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        double expect = 0.0;
        for (std::size_t p = 0; p < k; ++p) expect += av[i * k + p] * bv[p * m + j];
        CHECK(c(i, j) == Catch::Approx(expect).margin(1e-12));
      }
  }
  SECTION("inner dimension mismatch") {
    CHECK_THROWS_AS(tape.matmul(Tensor::zeros(2, 3), Tensor::zeros(2, 3)), DimensionError);
  }
}

TEST_CASE("elementwise binary ops require matching shapes") {
  Tape tape;
  Tensor a = Tensor::row({1.0, -2.0, 3.0});
  Tensor b = Tensor::row({0.5, 4.0, -1.0});
  Tensor sum = tape.add(a, b);
  Tensor diff = tape.sub(a, b);
  Tensor prod = tape.mul(a, b);
  CHECK(sum.values() == std::vector<double>{1.5, 2.0, 2.0});
  CHECK(diff.values() == std::vector<double>{0.5, -6.0, 4.0});
  CHECK(prod.values() == std::vector<double>{0.5, -8.0, -3.0});
  CHECK_THROWS_AS(tape.add(a, Tensor::zeros(2, 2)), DimensionError);
  CHECK_THROWS_AS(tape.mul(a, Tensor::zeros(1, 2)), DimensionError);
}

TEST_CASE("relu clamps negatives") {
  Tape tape;
  Tensor y = tape.relu(Tensor::row({-1.0, 0.0, 2.0}));
  CHECK(y.values() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("scalar_mul scales every element") {
  Tape tape;
  Tensor y = tape.scalar_mul(Tensor::row({1.0, -2.0}), -3.0);
  CHECK(y.values() == std::vector<double>{-3.0, 6.0});
}

TEST_CASE("tanh and sigmoid match std::tanh and the logistic function") {
  Tape tape;
  Tensor x = Tensor::row({-2.0, -0.5, 0.0, 1.5});
  Tensor t = tape.tanh(x);
  Tensor s = tape.sigmoid(x);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    CHECK(t(0, j) == Catch::Approx(std::tanh(x(0, j))).epsilon(1e-14));
    CHECK(s(0, j) == Catch::Approx(1.0 / (1.0 + std::exp(-x(0, j)))).epsilon(1e-14));
  }
}

TEST_CASE("sigmoid stays finite for extreme inputs") {
  Tape tape;
  Tensor s = tape.sigmoid(Tensor::row({-800.0, 800.0}));
  CHECK(s(0, 0) >= 0.0);
  CHECK(s(0, 1) <= 1.0);
  CHECK(std::isfinite(s(0, 0)));
  CHECK(std::isfinite(s(0, 1)));
}

TEST_CASE("softmax_rows is symmetric, normalized, and shift-stable") {
  Tape tape;
  Tensor y = tape.softmax_rows(Tensor::row({0.0, 0.0}));
  CHECK(y(0, 0) == Catch::Approx(0.5).margin(1e-15));
  CHECK(y(0, 1) == Catch::Approx(0.5).margin(1e-15));

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  std::vector<double> v(4 * 5);
  for (double& x : v) x = dist(rng);
  Tensor big = tape.softmax_rows(Tensor::matrix(4, 5, v));
  for (std::size_t i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      CHECK(big(i, j) > 0.0);
      CHECK(big(i, j) < 1.0);
      sum += big(i, j);
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-12));
  }

  // max-subtraction: huge logits must not overflow
  Tensor huge = tape.softmax_rows(Tensor::row({1000.0, 1000.0}));
  CHECK(huge(0, 0) == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("mean_all averages every element") {
  Tape tape;
  Tensor y = tape.mean_all(Tensor::matrix(2, 2, {1.0, 2.0, 3.0, 6.0}));
  CHECK(y.item() == 3.0);
}

TEST_CASE("sqrt_elementwise rejects negative input") {
  Tape tape;
  Tensor y = tape.sqrt_elems(Tensor::row({0.0, 4.0, 2.25}));
  CHECK(y.values() == std::vector<double>{0.0, 2.0, 1.5});
  CHECK_THROWS_AS(tape.sqrt_elems(Tensor::row({-1e-9})), DomainError);
}

TEST_CASE("sum_axis collapses the named axis") {
  Tape tape;
  Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  Tensor cols = tape.sum_axis(x, 0);
  REQUIRE(cols.rows() == 1);
  REQUIRE(cols.cols() == 3);
  CHECK(cols.values() == std::vector<double>{5, 7, 9});
  Tensor rows = tape.sum_axis(x, 1);
  REQUIRE(rows.rows() == 2);
  REQUIRE(rows.cols() == 1);
  CHECK(rows.values() == std::vector<double>{6, 15});
  CHECK_THROWS_AS(tape.sum_axis(x, 2), ContractError);
}

TEST_CASE("broadcast_row replicates a single row") {
  Tape tape;
  Tensor y = tape.broadcast_row(Tensor::row({1.0, 2.0}), 3);
  REQUIRE(y.rows() == 3);
  CHECK(y.values() == std::vector<double>{1, 2, 1, 2, 1, 2});
  CHECK_THROWS_AS(tape.broadcast_row(Tensor::zeros(2, 2), 3), DimensionError);
}

TEST_CASE("transpose swaps axes") {
  Tape tape;
  Tensor y = tape.transpose(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  REQUIRE(y.rows() == 3);
  REQUIRE(y.cols() == 2);
  CHECK(y.values() == std::vector<double>{1, 4, 2, 5, 3, 6});
}

TEST_CASE("softmax_ce equals negative log softmax probability of the label") {
  Tape tape;
  Tensor z = Tensor::row({0.0, 0.0});
  CHECK(tape.softmax_ce(z, 0).item() == Catch::Approx(std::log(2.0)).margin(1e-15));
  Tensor skew = Tensor::row({10.0, -10.0});
  const double p0 = 1.0 / (1.0 + std::exp(-20.0));
  CHECK(tape.softmax_ce(skew, 0).item() == Catch::Approx(-std::log(p0)).margin(1e-12));
  CHECK_THROWS_AS(tape.softmax_ce(z, 2), ContractError);
  CHECK_THROWS_AS(tape.softmax_ce(Tensor::zeros(2, 2), 0), DimensionError);
}

TEST_CASE("non-finite forward results raise a numeric error") {
  Tape tape;
  Tensor big = Tensor::row({1e308});
  CHECK_THROWS_AS(tape.mul(big, big), NumericError);
}

TEST_CASE("ops record on the tape only when an input requires grad") {
  Tape tape;
  Tensor plain = tape.add(Tensor::row({1.0}), Tensor::row({2.0}));
  CHECK(tape.num_recorded() == 0);
  CHECK_FALSE(plain.requires_grad());
  Tensor tracked = tape.add(Tensor::row({1.0}, true), Tensor::row({2.0}));
  CHECK(tape.num_recorded() == 1);
  CHECK(tracked.requires_grad());
  CHECK(tracked.producer() == &tape);
}
