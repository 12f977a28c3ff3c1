"""Freezes Friedman / Conover / Holm reference values into stats_oracle.inc.

Reference: scipy.stats.friedmanchisquare and
scikit_posthocs.posthoc_conover_friedman (raw and Holm-adjusted).
Run from this directory; the output is committed.
"""
import numpy as np
import scipy.stats as st
import scikit_posthocs as sp

rng = np.random.default_rng(20240501)
cases = []  # (name, scores[model][target])

cases.append(("all_tied", np.full((4, 5), 0.5)))
cases.append(("three_by_four_hand", np.array([[0.9, 0.8, 0.7, 0.95],
                                              [0.6, 0.7, 0.5, 0.65],
                                              [0.3, 0.4, 0.45, 0.2]])))
cases.append(("two_by_three", np.array([[0.5, 0.6, 0.4], [0.4, 0.7, 0.3]])))
cases.append(("ties_within_targets", np.array([[0.5, 0.5, 0.7, 0.2, 0.9],
                                               [0.5, 0.6, 0.7, 0.2, 0.8],
                                               [0.4, 0.6, 0.1, 0.2, 0.8],
                                               [0.3, 0.1, 0.7, 0.3, 0.1]])))
cases.append(("nine_by_fifteen", np.round(rng.uniform(0.05, 0.9, (9, 15)) + np.linspace(0.2, 0, 9)[:, None], 3)))
cases.append(("five_by_six_coarse", np.round(rng.uniform(0, 1, (5, 6)), 1)))
cases.append(("four_by_ten", rng.uniform(0, 1, (4, 10)) + np.array([0.3, 0.2, 0.0, -0.1])[:, None]))
cases.append(("strong_order", np.array([[0.9 - 0.01 * t for t in range(8)],
                                        [0.8 - 0.01 * t for t in range(8)],
                                        [0.7 + 0.005 * t for t in range(8)],
                                        [0.5 + 0.02 * (t % 3) for t in range(8)]])))
cases.append(("six_by_five_random", rng.uniform(0.2, 0.6, (6, 5))))
cases.append(("three_by_seven_partial_ties", np.array([[1, 2, 2, 3, 1, 2, 3],
                                                       [1, 1, 2, 1, 2, 2, 3],
                                                       [0, 2, 1, 3, 0, 1, 1]], dtype=float)))


def fmt(x):
    return repr(float(x))


def mat(m):
    return "{" + ", ".join("{" + ", ".join(fmt(v) for v in row) + "}" for row in m) + "}"


out = ["// Generated by make_stats_oracle.py. Do not edit.", "#pragma once", "#include <limits>", "#include <string>",
       "#include <vector>", "", "struct StatsOracleCase {", "  std::string name;",
       "  std::vector<std::vector<double>> scores;  // models x targets", "  double friedman_statistic;",
       "  double friedman_p;", "  std::vector<std::vector<double>> conover_p;", "  std::vector<std::vector<double>> holm_p;",
       "};", "", "inline const std::vector<StatsOracleCase>& stats_oracle_cases() {",
       "  static const std::vector<StatsOracleCase> cases = {"]
for name, s in cases:
    k, n = s.shape
    blocks = s.T  # targets x models
    if np.all(blocks == blocks[:, :1]):
        stat, p = 0.0, 1.0
        con = np.ones((k, k))
        holm = np.ones((k, k))
    else:
        if k >= 3:
            stat, p = st.friedmanchisquare(*[s[m] for m in range(k)])
        else:
            # scipy requires three groups; same tie-corrected formula by hand.
            r = np.apply_along_axis(st.rankdata, 1, blocks)
            rs = r.sum(0)
            ties = sum((c ** 3 - c).sum() for c in (np.unique(row, return_counts=True)[1] for row in blocks))
            stat = (12.0 / (n * k * (k + 1)) * (rs ** 2).sum() - 3 * n * (k + 1)) / (1 - ties / (k ** 3 - k) / n)
            p = st.chi2.sf(stat, k - 1)
        con = sp.posthoc_conover_friedman(blocks, p_adjust=None).to_numpy()
        holm = sp.posthoc_conover_friedman(blocks, p_adjust="holm").to_numpy()
        np.fill_diagonal(con, 1.0)
        np.fill_diagonal(holm, 1.0)
    out.append(f'      {{"{name}", {mat(s)}, {fmt(stat)}, {fmt(p)}, {mat(con)}, {mat(holm)}}},')
out += ["  };", "  return cases;", "}", ""]
open("../stats_oracle.inc", "w").write("\n".join(out))
print("wrote", len(cases), "cases")
