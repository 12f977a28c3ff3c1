#pragma once

// Friedman omnibus test over models x targets scores, Conover pairwise
// post-hoc with Holm step-down correction, and critical-difference cliques.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "json.hpp"
#include "plinf/error.hpp"

namespace plinf {

struct StatsReport {
  std::vector<std::string> models;
  std::vector<std::string> targets;
  std::vector<std::vector<double>> ranks;  // models x targets, 1 = best
  std::vector<double> average_ranks;
  double friedman_statistic = 0.0;
  double friedman_p = 1.0;
  int friedman_df = 0;
  std::vector<std::vector<double>> conover_p;   // unadjusted, symmetric, diagonal 1
  std::vector<std::vector<double>> holm_p;      // Holm-adjusted
  std::vector<std::vector<bool>> significant;   // Holm rejections at alpha
  double alpha = 0.05;
  std::vector<std::vector<int>> cliques;        // model indices, ascending average rank
};

/// Midranks of `v` with the largest value ranked 1.
inline std::vector<double> descending_midranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[order[t]] = mid;
    i = j + 1;
  }
  return r;
}

/// Holm step-down adjusted p-values (order of the input is preserved).
inline std::vector<double> holm_adjust(const std::vector<double>& p) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<double> adj(m);
  double running = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    running = std::max(running, std::min(1.0, static_cast<double>(m - i) * p[order[i]]));
    adj[order[i]] = running;
  }
  return adj;
}

/// Holm step-down decisions: walk sorted p-values and reject while
/// p_(i) <= alpha / (m - i).
inline std::vector<bool> holm_reject(const std::vector<double>& p, double alpha) {
  const std::size_t m = p.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  std::vector<bool> reject(m, false);
  for (std::size_t i = 0; i < m; ++i) {
    if (!(p[order[i]] <= alpha / static_cast<double>(m - i))) break;
    reject[order[i]] = true;
  }
  return reject;
}

/// `scores[m][t]` is model m's score on target t (higher is better).
inline StatsReport compare_models(const std::vector<std::vector<double>>& scores, std::vector<std::string> models = {},
                                  std::vector<std::string> targets = {}, double alpha = 0.05) {
  const std::size_t k = scores.size();
  if (k < 2) throw DataError("compare_models needs at least two models");
  const std::size_t n = scores[0].size();
  if (n < 2) throw DataError("compare_models needs at least two targets");
  for (const auto& row : scores) {
    if (row.size() != n) throw DataError("compare_models: score matrix is ragged");
    for (double v : row)
      if (!std::isfinite(v)) throw DataError("compare_models: missing or non-finite score");
  }
  if (models.empty())
    for (std::size_t m = 0; m < k; ++m) models.push_back("model" + std::to_string(m));
  if (targets.empty())
    for (std::size_t t = 0; t < n; ++t) targets.push_back("target" + std::to_string(t));
  if (models.size() != k || targets.size() != n) throw DataError("compare_models: name count mismatch");

  StatsReport r;
  r.models = std::move(models);
  r.targets = std::move(targets);
  r.alpha = alpha;
  r.ranks.assign(k, std::vector<double>(n));
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> col(k);
    for (std::size_t m = 0; m < k; ++m) col[m] = scores[m][t];
    const auto rk = descending_midranks(col);
    for (std::size_t m = 0; m < k; ++m) r.ranks[m][t] = rk[m];
  }
  const double kd = static_cast<double>(k), nd = static_cast<double>(n);
  std::vector<double> rank_sum(k, 0.0);
  double a1 = 0.0;
  for (std::size_t m = 0; m < k; ++m)
    for (double v : r.ranks[m]) {
      rank_sum[m] += v;
      a1 += v * v;
    }
  for (std::size_t m = 0; m < k; ++m) r.average_ranks.push_back(rank_sum[m] / nd);

  // Tie-corrected Friedman statistic.
  const double c1 = nd * kd * (kd + 1.0) * (kd + 1.0) / 4.0;
  double spread = 0.0, sum_sq = 0.0;
  for (double s : rank_sum) {
    spread += (s - nd * (kd + 1.0) / 2.0) * (s - nd * (kd + 1.0) / 2.0);
    sum_sq += s * s;
  }
  r.friedman_df = static_cast<int>(k) - 1;
  const double denom = a1 - c1;
  if (denom > 1e-12 * c1) {
    r.friedman_statistic = (kd - 1.0) * spread / denom;
    r.friedman_p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(kd - 1.0), r.friedman_statistic));
  }

  // Conover: t = |R_i - R_j| / sqrt(2 (n A1 - sum R^2) / ((n-1)(k-1))), df (n-1)(k-1).
  const double df = (nd - 1.0) * (kd - 1.0);
  const double var = 2.0 * (nd * a1 - sum_sq) / df;
  r.conover_p.assign(k, std::vector<double>(k, 1.0));
  std::vector<double> flat;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      double p = 1.0;
      const double diff = std::abs(rank_sum[i] - rank_sum[j]);
      if (var > 1e-12 * std::max(1.0, nd * a1) && diff > 0.0) {
        const double tval = diff / std::sqrt(var);
        p = 2.0 * boost::math::cdf(boost::math::complement(boost::math::students_t(df), tval));
      } else if (diff > 0.0) {
        p = 0.0;  // no within-target noise at all: any rank difference is exact
      }
      r.conover_p[i][j] = r.conover_p[j][i] = std::min(1.0, p);
      flat.push_back(r.conover_p[i][j]);
    }
  const auto adj = holm_adjust(flat);
  const auto rej = holm_reject(flat, alpha);
  r.holm_p.assign(k, std::vector<double>(k, 1.0));
  r.significant.assign(k, std::vector<bool>(k, false));
  std::size_t idx = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j, ++idx) {
      r.holm_p[i][j] = r.holm_p[j][i] = adj[idx];
      r.significant[i][j] = r.significant[j][i] = rej[idx];
    }

  // Cliques: maximal runs in average-rank order whose members are pairwise
  // not significantly different. Models outside every run form singletons.
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return r.average_ranks[static_cast<std::size_t>(a)] < r.average_ranks[static_cast<std::size_t>(b)]; });
  std::size_t last_end = 0;
  bool any = false;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i;
    while (j + 1 < k) {
      bool ok = true;
      for (std::size_t a = i; a <= j && ok; ++a) ok = !r.significant[static_cast<std::size_t>(order[a])][static_cast<std::size_t>(order[j + 1])];
      if (!ok) break;
      ++j;
    }
    if (any && j <= last_end) continue;  // contained in the previous run
    r.cliques.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(j) + 1);
    last_end = j;
    any = true;
  }
  return r;
}

inline nlohmann::json stats_to_json(const StatsReport& r) {
  nlohmann::json sig = nlohmann::json::array();
  for (const auto& row : r.significant) sig.push_back(std::vector<bool>(row.begin(), row.end()));
  return {{"models", r.models},
          {"targets", r.targets},
          {"ranks", r.ranks},
          {"average_ranks", r.average_ranks},
          {"friedman", {{"statistic", r.friedman_statistic}, {"p_value", r.friedman_p}, {"df", r.friedman_df}}},
          {"conover_p", r.conover_p},
          {"holm_p", r.holm_p},
          {"alpha", r.alpha},
          {"significant", sig},
          {"cliques", r.cliques}};
}

/// CSV rows "model,avg_rank,clique_id", one row per clique membership.
inline std::string cd_csv(const StatsReport& r) {
  std::string out = "model,avg_rank,clique_id\n";
  char buf[64];
  for (std::size_t c = 0; c < r.cliques.size(); ++c)
    for (int m : r.cliques[c]) {
      std::snprintf(buf, sizeof buf, "%.6f", r.average_ranks[static_cast<std::size_t>(m)]);
      out += r.models[static_cast<std::size_t>(m)] + "," + buf + "," + std::to_string(c) + "\n";
    }
  return out;
}

}  // namespace plinf
