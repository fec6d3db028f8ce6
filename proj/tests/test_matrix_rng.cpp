#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fedlora/finite_diff.hpp"
#include "fedlora/matrix.hpp"
#include "fedlora/rng.hpp"

using namespace fedlora;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, RngStream& rng) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
  return d;
}

}  // namespace

TEST_CASE("matmul identity and hand example") {
  RngStream rng(7, "test");
  Matrix m = random_matrix(2, 2, rng);
  CHECK(matmul(Matrix::identity(2), m) == m);

  Matrix a(2, 2);
  a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
  Matrix b(2, 1);
  b(0, 0) = 5; b(1, 0) = 6;
  Matrix c = matmul(a, b);
  CHECK(c(0, 0) == doctest::Approx(17.0));
  CHECK(c(1, 0) == doctest::Approx(39.0));
}

TEST_CASE("matmul rejects mismatched inner dims") {
  Matrix a(2, 3), b(2, 2);
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul associativity and transpose identity on random matrices") {
  RngStream rng(11, "assoc");
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_matrix(3, 4, rng);
    Matrix b = random_matrix(4, 5, rng);
    Matrix c = random_matrix(5, 2, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-10);
    CHECK(max_abs_diff(transpose(matmul(a, b)), matmul(transpose(b), transpose(a))) < 1e-12);
    CHECK(matmul(a, b).is_finite());
  }
}

TEST_CASE("rng determinism and stream separation") {
  RngStream a(42, "alloc-sample");
  RngStream b(42, "alloc-sample");
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  RngStream c(42, "partition");
  RngStream d(42, "alloc-sample");
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff |= (c.next_u64() != d.next_u64());
  CHECK(any_diff);
}

TEST_CASE("gaussian zero std is exact and uniform respects bounds") {
  RngStream rng(1, "dist");
  CHECK(rng.gaussian(3.5, 0.0) == 3.5);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform(-2.0, 5.0);
    CHECK(u >= -2.0);
    CHECK(u < 5.0);
  }
  CHECK_THROWS_AS(rng.uniform(1.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(rng.gaussian(0.0, -1.0), std::invalid_argument);
}

TEST_CASE("gaussian moments are sane") {
  RngStream rng(9, "moments");
  double sum = 0.0, sq = 0.0;
  const int n = 50000;
  for (int i = 0; i < n; ++i) {
    double z = rng.gaussian(1.0, 2.0);
    sum += z;
    sq += z * z;
  }
  double mean = sum / n;
  double var = sq / n - mean * mean;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  CHECK(var == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("shuffle is deterministic under a fixed stream") {
  std::vector<int> v1{1, 2, 3, 4, 5}, v2{1, 2, 3, 4, 5};
  RngStream a(3, "shuffle");
  RngStream b(3, "shuffle");
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
}

TEST_CASE("finite_diff_grad matches analytic derivatives") {
  auto square = [](std::span<const double> x) { return x[0] * x[0]; };
  auto g = finite_diff_grad(square, {3.0}, 1e-5);
  CHECK(std::abs(g[0] - 6.0) < 1e-8);

  auto constant = [](std::span<const double>) { return 4.2; };
  auto gc = finite_diff_grad(constant, {1.0, 2.0, 3.0}, 1e-5);
  for (double v : gc) CHECK(v == doctest::Approx(0.0));

  auto prod = [](std::span<const double> x) { return x[0] * x[1]; };
  auto gp = finite_diff_grad(prod, {2.0, 5.0}, 1e-5);
  CHECK(std::abs(gp[0] - 5.0) < 1e-8);
  CHECK(std::abs(gp[1] - 2.0) < 1e-8);
}
