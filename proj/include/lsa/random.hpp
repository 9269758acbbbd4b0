#pragma once

// Seeded random streams. Every consumer derives its own mt19937_64 from the
// master seed, a label and an index, so results never depend on the order in
// which parallel tasks run.

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Core>

namespace lsa {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

/// Seed for substream (label, index) of `master`.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label, std::uint64_t index = 0);

inline Rng make_stream(std::uint64_t master, std::string_view label, std::uint64_t index = 0) {
  return Rng(derive_seed(master, label, index));
}

double standard_normal(Rng& rng);
double uniform01(Rng& rng);
double gamma_draw(Rng& rng, double shape);
double beta_draw(Rng& rng, double a, double b);
double half_cauchy_draw(Rng& rng, double scale);
Eigen::RowVectorXd dirichlet_draw(Rng& rng, int K, double alpha);

/// Index drawn with probabilities p (need not be exactly normalised).
int categorical_draw(Rng& rng, const Eigen::Ref<const Eigen::RowVectorXd>& p);

}  // namespace lsa
