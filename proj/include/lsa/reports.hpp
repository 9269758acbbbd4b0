#pragma once

// Report CSVs: model comparison, (K, M) grid, style summaries.

#include <string>
#include <vector>

#include <Eigen/Core>

#include "lsa/core_model.hpp"
#include "lsa/selection.hpp"

namespace lsa::io {

/// model,elpd,se,elpd_diff,se_diff,n. Differences are relative to the best
/// row; se_diff is sqrt(N) times the sd of the pointwise differences.
std::string elpd_table_csv(const std::vector<ElpdReport>& rows);

/// K,M,elpd,se,best
std::string grid_table_csv(const GridResult& grid);

/// Players by their highest-weight style:
/// label,n_players,style_1_n..style_K_n,style_1_pct..style_K_pct.
/// Ties go to the lower style index.
std::string max_style_csv(const std::string& label, const StyleSimplex& pi);

/// Style count per style index (ties to the lower index).
Eigen::VectorXi max_style_counts(const StyleSimplex& pi);

/// receiver,style_1..style_K
std::string player_weights_csv(const StyleSimplex& pi, const std::vector<std::string>& roster);

/// style,pattern_1..pattern_M from the stick-breaking weights.
std::string style_patterns_csv(const PatternSimplex& theta);

}  // namespace lsa::io
