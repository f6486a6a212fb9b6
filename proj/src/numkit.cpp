#include "mmlab/numkit.hpp"

#include <numbers>

namespace mmlab {

std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

Matrix make_matrix(Eigen::Index rows, Eigen::Index cols, std::span<const double> data) {
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw ShapeError("make_matrix: " + std::to_string(data.size()) + " values for " +
                     shape_str(rows, cols));
  }
  Matrix m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  require_finite(m, "make_matrix");
  return m;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t parent, std::string_view name) {
  // FNV-1a over the name, folded into the parent through splitmix64.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t state = parent ^ h;
  splitmix64(state);
  return splitmix64(state);
}

namespace {
constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) {
  std::uint64_t sm = seed;
  for (auto& w : s_) w = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  cached_normal_ = radius * std::sin(angle);
  has_cached_ = true;
  return radius * std::cos(angle);
}

Matrix random_orthogonal(Eigen::Index d, Rng& rng) {
  if (d < 1) throw ShapeError("random_orthogonal: dimension must be >= 1");
  for (;;) {
    Matrix g(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
      for (Eigen::Index j = 0; j < d; ++j) g(i, j) = rng.normal();

    // Modified Gram-Schmidt over columns, two passes for numerical orthogonality.
    bool degenerate = false;
    for (Eigen::Index j = 0; j < d && !degenerate; ++j) {
      for (int pass = 0; pass < 2; ++pass) {
        for (Eigen::Index p = 0; p < j; ++p) {
          const double proj = g.col(p).dot(g.col(j));
          g.col(j) -= proj * g.col(p);
        }
      }
      const double norm = g.col(j).norm();
      if (norm < 1e-10) {
        degenerate = true;
      } else {
        g.col(j) /= norm;
      }
    }
    if (!degenerate) return g;
  }
}

}  // namespace mmlab
