#include "lsa/random.hpp"

#include <cmath>
#include <numbers>

namespace lsa {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view label, std::uint64_t index) {
  std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return splitmix64(splitmix64(master ^ h) + splitmix64(index + 0x632BE59BD9B4E019ULL));
}

double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

double gamma_draw(Rng& rng, double shape) { return std::gamma_distribution<double>(shape, 1.0)(rng); }

double beta_draw(Rng& rng, double a, double b) {
  const double x = gamma_draw(rng, a);
  const double y = gamma_draw(rng, b);
  return x / (x + y);
}

double half_cauchy_draw(Rng& rng, double scale) {
  return std::abs(scale * std::tan(std::numbers::pi * (uniform01(rng) - 0.5)));
}

Eigen::RowVectorXd dirichlet_draw(Rng& rng, int K, double alpha) {
  Eigen::RowVectorXd p(K);
  for (int k = 0; k < K; ++k) p(k) = gamma_draw(rng, alpha);
  const double total = p.sum();
  if (!(total > 0.0)) {
    // All gammas underflowed (tiny alpha): fall back to a vertex.
    p.setZero();
    p(std::uniform_int_distribution<int>(0, K - 1)(rng)) = 1.0;
    return p;
  }
  return p / total;
}

int categorical_draw(Rng& rng, const Eigen::Ref<const Eigen::RowVectorXd>& p) {
  const double u = uniform01(rng) * p.sum();
  double acc = 0.0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    acc += p(k);
    if (u < acc) return static_cast<int>(k);
  }
  for (Eigen::Index k = p.size() - 1; k >= 0; --k)
    if (p(k) > 0.0) return static_cast<int>(k);
  return static_cast<int>(p.size()) - 1;
}

}  // namespace lsa
