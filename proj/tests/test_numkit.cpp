#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "mmlab/numkit.hpp"
#include "support.hpp"

using namespace mmlab;
using testing::random_matrix;
using testing::random_vector;

namespace {

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += static_cast<long double>(a(i, k)) * b(k, j);
      c(i, j) = static_cast<double>(s);
    }
  return c;
}

Matrix rotation2(double theta) {
  Matrix r(2, 2);
  r << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  return r;
}

}  // namespace

TEST_CASE("matmul hand examples") {
  Matrix i2 = Matrix::Identity(2, 2);
  Matrix b(2, 2);
  b << 2, -1, 0, 3;
  CHECK(matmul(i2, b) == b);

  Matrix row(1, 2);
  row << 1, 0;
  Matrix expect_row(1, 2);
  expect_row << 2, -1;
  CHECK(matmul(row, b) == expect_row);

  Matrix x(2, 2), y(2, 2), xy(2, 2);
  x << 1, 2, 3, 4;
  y << 5, 6, 7, 8;
  xy << 19, 22, 43, 50;
  CHECK(matmul(x, y) == xy);
}

TEST_CASE("matmul agrees with a naive long-double product and transposed variants") {
  Rng rng(11);
  const Matrix a = random_matrix(5, 7, rng);
  const Matrix b = random_matrix(7, 3, rng);
  const Matrix ref = naive_product(a, b);
  CHECK((matmul(a, b) - ref).cwiseAbs().maxCoeff() < 1e-12);
  const Matrix at = a.transpose();
  CHECK((matmul_tn(at, b) - ref).cwiseAbs().maxCoeff() < 1e-12);
  const Matrix bt = b.transpose();
  CHECK((matmul_nt(a, bt) - ref).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("matmul is associative on random 8x8 triples") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(8, 8, rng), b = random_matrix(8, 8, rng), c = random_matrix(8, 8, rng);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    CHECK((left - right).norm() / left.norm() < 1e-9);
  }
}

TEST_CASE("matmul is deterministic") {
  Rng rng(5);
  const Matrix a = random_matrix(9, 9, rng), b = random_matrix(9, 9, rng);
  const Matrix first = matmul(a, b);
  for (int i = 0; i < 5; ++i) CHECK(matmul(a, b) == first);
}

TEST_CASE("softmax examples") {
  Vector z(2);
  z << 0, 0;
  const Vector p = softmax(z);
  CHECK(p(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p(1) == doctest::Approx(0.5).epsilon(1e-15));

  for (double c : {-50.0, 0.0, 3.7, 800.0}) {
    const Vector q = softmax(Vector::Constant(3, c));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(q(i) - 1.0 / 3.0) < 1e-15);
  }

  Vector logs(3);
  logs << std::log(1.0), std::log(2.0), std::log(3.0);
  const Vector r = softmax(logs);
  CHECK(std::abs(r(0) - 1.0 / 6.0) < 1e-15);
  CHECK(std::abs(r(1) - 2.0 / 6.0) < 1e-15);
  CHECK(std::abs(r(2) - 3.0 / 6.0) < 1e-15);

  CHECK_THROWS_AS(softmax(Vector(0)), ShapeError);
}

TEST_CASE("softmax is shift invariant and sums to one") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector x = random_vector(6, rng, 5.0);
    const double c = rng.uniform(-100, 100);
    const Vector a = softmax(x);
    const Vector b = softmax((x.array() + c).matrix());
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(a.sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("kl_divergence examples") {
  Rng rng(2);
  for (int i = 0; i < 10; ++i) {
    const Vector q = softmax(random_vector(5, rng));
    CHECK(kl_divergence(q, q) == doctest::Approx(0.0));
  }
  Vector t(2), p(2);
  t << 1, 0;
  p << 0.5, 0.5;
  CHECK(kl_divergence(t, p) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  Vector half(2), spike(2);
  half << 0.5, 0.5;
  spike << 0.0, 1.0;
  const double expect = 0.5 * std::log(0.5 / 1e-12) + 0.5 * std::log(0.5);
  const double got = kl_divergence(half, spike);
  CHECK(std::isfinite(got));
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));

  Vector three(3);
  three << 0.2, 0.3, 0.5;
  CHECK_THROWS_AS(kl_divergence(t, three), ShapeError);
}

TEST_CASE("kl_divergence is non-negative and zero only at equality") {
  Rng rng(23);
  for (int trial = 0; trial < 500; ++trial) {
    const Vector t = softmax(random_vector(4, rng, 2.0));
    const Vector p = softmax(random_vector(4, rng, 2.0));
    const double kl = kl_divergence(t, p);
    CHECK(kl >= 0.0);
    if ((t - p).cwiseAbs().maxCoeff() > 1e-3) CHECK(kl > 0.0);
  }
}

TEST_CASE("euclidean_distance examples and properties") {
  Vector o(2), x(2);
  o << 0, 0;
  x << 3, 4;
  CHECK(euclidean_distance(o, x) == 5.0);
  CHECK(euclidean_distance(x, x) == 0.0);

  Rng rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    const Vector a = random_vector(7, rng), b = random_vector(7, rng), c = random_vector(7, rng);
    CHECK(euclidean_distance(a, c) <= euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-9);
    const Matrix r = random_orthogonal(7, rng);
    const Vector ra = r * a, rb = r * b;
    CHECK(std::abs(euclidean_distance(ra, rb) - euclidean_distance(a, b)) < 1e-9);
  }
  Vector three(3);
  three << 1, 2, 3;
  CHECK_THROWS_AS(euclidean_distance(x, three), ShapeError);
}

TEST_CASE("orth_penalty examples") {
  CHECK(orth_penalty(Matrix(Matrix::Identity(4, 4))) == 0.0);
  CHECK(orth_penalty(rotation2(0.73)) < 1e-12);
  const Matrix two = 2.0 * Matrix::Identity(2, 2);
  CHECK(orth_penalty(two) == 6.0);
  CHECK_THROWS_AS(orth_penalty(Matrix(Matrix::Zero(2, 3))), ShapeError);
}

TEST_CASE("orth_penalty_grad matches central differences away from kinks") {
  Rng rng(31);
  const Matrix m = random_matrix(4, 4, rng, 0.8);
  const Matrix g = orth_penalty_grad(m);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j) {
      Matrix up = m, down = m;
      up(i, j) += h;
      down(i, j) -= h;
      const double numeric = (orth_penalty(up) - orth_penalty(down)) / (2 * h);
      CHECK(std::abs(numeric - g(i, j)) < 1e-6);
    }
  // sign(0) = 0: the subgradient vanishes at any orthogonal matrix.
  CHECK(orth_penalty_grad(Matrix(Matrix::Identity(3, 3))).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("random_orthogonal") {
  Rng rng(37);
  const Matrix one = random_orthogonal(1, rng);
  CHECK(std::abs(std::abs(one(0, 0)) - 1.0) < 1e-15);
  for (int d : {2, 5, 16, 32}) {
    const Matrix m = random_orthogonal(d, rng);
    CHECK(orth_penalty(m) < 1e-9);
    const Vector x = random_vector(d, rng, 3.0);
    CHECK(std::abs((m * x).norm() - x.norm()) < 1e-9);
  }
}

TEST_CASE("Rng is reproducible and derive_seed separates names") {
  Rng a(42), b(42);
  for (int i = 0; i < 10000; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Rng c(42), d(42);
  for (int i = 0; i < 1000; ++i) REQUIRE(c.normal() == d.normal());

  std::set<std::uint64_t> seeds;
  for (const char* name : {"pretrain", "task:0", "task:1", "mtl", "data:0", "align:0:knn"}) seeds.insert(derive_seed(7, name));
  CHECK(seeds.size() == 6);
  CHECK(derive_seed(7, "task:0") == derive_seed(7, "task:0"));
  CHECK(derive_seed(7, "task:0") != derive_seed(8, "task:0"));
}

TEST_CASE("Rng distributions are sane") {
  Rng rng(99);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.02);

  std::vector<int> counts(5, 0);
  for (int i = 0; i < 50000; ++i) {
    const auto k = rng.uniform_index(5);
    REQUIRE(k < 5);
    ++counts[k];
  }
  for (int c : counts) CHECK(std::abs(c - 10000) < 500);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
}

TEST_CASE("argmax breaks ties toward the lowest index") {
  Vector v(4);
  v << 1, 3, 3, 2;
  CHECK(argmax(v) == 1);
  CHECK(argmax(Vector(Vector::Zero(5))) == 0);
}

TEST_CASE("make_matrix rejects non-finite input and wrong sizes") {
  const std::vector<double> ok{1, 2, 3, 4};
  const Matrix m = make_matrix(2, 2, ok);
  CHECK(m(1, 0) == 3);
  const std::vector<double> bad{1, std::numeric_limits<double>::quiet_NaN(), 3, 4};
  CHECK_THROWS_AS((void)make_matrix(2, 2, bad), NumericError);
  CHECK_THROWS_AS((void)make_matrix(3, 2, ok), ShapeError);
}
