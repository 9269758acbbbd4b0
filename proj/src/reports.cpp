#include "lsa/reports.hpp"

#include <cmath>

#include "lsa/model_file.hpp"

namespace lsa::io {

std::string elpd_table_csv(const std::vector<ElpdReport>& rows) {
  std::string out = "model,elpd,se,elpd_diff,se_diff,n\n";
  if (rows.empty()) return out;
  std::size_t best = 0;
  for (std::size_t j = 1; j < rows.size(); ++j)
    if (rows[j].elpd_estimate > rows[best].elpd_estimate) best = j;
  for (const auto& r : rows) {
    double se_diff = 0.0;
    const auto n = r.pointwise.size();
    if (n > 1 && n == rows[best].pointwise.size()) {
      const Eigen::ArrayXd d = (r.pointwise - rows[best].pointwise).array();
      const double var = (d - d.mean()).square().sum() / static_cast<double>(n - 1);
      se_diff = std::sqrt(static_cast<double>(n) * var);
    }
    out += r.model_label + ',' + format_double(r.elpd_estimate) + ',' + format_double(r.se) + ',' +
           format_double(r.elpd_estimate - rows[best].elpd_estimate) + ',' + format_double(se_diff) + ',' +
           std::to_string(n) + '\n';
  }
  return out;
}

std::string grid_table_csv(const GridResult& grid) {
  std::string out = "K,M,elpd,se,best\n";
  for (const auto& [key, r] : grid.entries)
    out += std::to_string(key.first) + ',' + std::to_string(key.second) + ',' + format_double(r.elpd_estimate) + ',' +
           format_double(r.se) + ',' + (key == grid.best ? "1" : "0") + '\n';
  return out;
}

Eigen::VectorXi max_style_counts(const StyleSimplex& pi) {
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(pi.pi.cols());
  for (Eigen::Index i = 0; i < pi.pi.rows(); ++i) {
    Eigen::Index k = 0;
    for (Eigen::Index j = 1; j < pi.pi.cols(); ++j)
      if (pi.pi(i, j) > pi.pi(i, k)) k = j;
    ++counts(k);
  }
  return counts;
}

std::string max_style_csv(const std::string& label, const StyleSimplex& pi) {
  const Eigen::VectorXi counts = max_style_counts(pi);
  const auto K = counts.size();
  const auto R = pi.pi.rows();
  std::string out = "label,n_players";
  for (Eigen::Index k = 0; k < K; ++k) out += ",style_" + std::to_string(k + 1) + "_n";
  for (Eigen::Index k = 0; k < K; ++k) out += ",style_" + std::to_string(k + 1) + "_pct";
  out += '\n' + label + ',' + std::to_string(R);
  for (Eigen::Index k = 0; k < K; ++k) out += ',' + std::to_string(counts(k));
  for (Eigen::Index k = 0; k < K; ++k)
    out += ',' + format_double(R > 0 ? 100.0 * counts(k) / static_cast<double>(R) : 0.0);
  return out + '\n';
}

std::string player_weights_csv(const StyleSimplex& pi, const std::vector<std::string>& roster) {
  std::string out = "receiver";
  for (Eigen::Index k = 0; k < pi.pi.cols(); ++k) out += ",style_" + std::to_string(k + 1);
  out += '\n';
  for (Eigen::Index i = 0; i < pi.pi.rows(); ++i) {
    out += static_cast<std::size_t>(i) < roster.size() ? roster[static_cast<std::size_t>(i)] : std::to_string(i);
    for (Eigen::Index k = 0; k < pi.pi.cols(); ++k) out += ',' + format_double(pi.pi(i, k));
    out += '\n';
  }
  return out;
}

std::string style_patterns_csv(const PatternSimplex& theta) {
  std::string out = "style";
  for (Eigen::Index m = 0; m < theta.theta.cols(); ++m) out += ",pattern_" + std::to_string(m + 1);
  out += '\n';
  for (Eigen::Index k = 0; k < theta.theta.rows(); ++k) {
    out += std::to_string(k + 1);
    for (Eigen::Index m = 0; m < theta.theta.cols(); ++m) out += ',' + format_double(theta.theta(k, m));
    out += '\n';
  }
  return out;
}

}  // namespace lsa::io
