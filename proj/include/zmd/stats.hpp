#pragma once

// Evaluation statistics: detection/ground-truth matching, sensitivity and
// precision, bootstrap means, one-way ANOVA and Tukey HSD on top of a
// numerically integrated studentized-range distribution.
//
// Matching is maximum-cardinality with minimum total distance among maximum
// matchings, solved as a padded square assignment problem (Hungarian with
// potentials). Leaving a pair unmatched costs M per side with
// M > cutoff * max matchable pairs, so cardinality strictly dominates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "zmd/errors.hpp"
#include "zmd/geometry.hpp"
#include "zmd/rng.hpp"

namespace zmd {

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

namespace statfn {

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

inline double incomplete_beta_cf(double a, double b, double x) {
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  const double tiny = 1e-300;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 3e-15) return h;
  }
  throw Error(ErrorCode::numeric, "incomplete beta continued fraction did not converge");
}

inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error(ErrorCode::numeric, "beta parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * incomplete_beta_cf(a, b, x) / a;
  return 1.0 - front * incomplete_beta_cf(b, a, 1.0 - x) / b;
}

// Survival function of the F distribution.
inline double f_sf(double f, double df1, double df2) {
  if (f <= 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  return regularized_incomplete_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f));
}

// Gauss-Legendre nodes and weights on [-1, 1], cached per order.
inline const std::pair<std::vector<double>, std::vector<double>>& gauss_legendre(int n) {
  static std::pair<std::vector<double>, std::vector<double>> cache[2];
  static int cached_n[2] = {-1, -1};
  const int slot = n >= 160 ? 1 : 0;
  if (cached_n[slot] != n) {
    std::vector<double> x(static_cast<std::size_t>(n)), w(static_cast<std::size_t>(n));
    const int m = (n + 1) / 2;
    for (int i = 0; i < m; ++i) {
      double z = std::cos(3.141592653589793238 * (i + 0.75) / (n + 0.5));
      double pp = 0.0;
      for (int iter = 0; iter < 100; ++iter) {
        double p1 = 1.0, p2 = 0.0;
        for (int j = 0; j < n; ++j) {
          const double p3 = p2;
          p2 = p1;
          p1 = ((2.0 * j + 1.0) * z * p2 - j * p3) / (j + 1.0);
        }
        pp = n * (z * p1 - p2) / (z * z - 1.0);
        const double z1 = z;
        z = z1 - p1 / pp;
        if (std::fabs(z - z1) < 1e-15) break;
      }
      x[static_cast<std::size_t>(i)] = -z;
      x[static_cast<std::size_t>(n - 1 - i)] = z;
      w[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - z * z) * pp * pp);
      w[static_cast<std::size_t>(n - 1 - i)] = w[static_cast<std::size_t>(i)];
    }
    cache[slot] = {std::move(x), std::move(w)};
    cached_n[slot] = n;
  }
  return cache[slot];
}

// P(range of k iid standard normals <= w) = k Int phi(z) [Phi(z+w)-Phi(z)]^(k-1) dz
inline double normal_range_cdf(double w, int k) {
  if (w <= 0.0) return 0.0;
  const auto& [xs, ws] = gauss_legendre(128);
  const double lo = -9.0, hi = 9.0;
  const double half = 0.5 * (hi - lo), mid = 0.5 * (hi + lo);
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double z = mid + half * xs[i];
    const double span = normal_cdf(z + w) - normal_cdf(z);
    acc += ws[i] * normal_pdf(z) * std::pow(span, k - 1);
  }
  return std::min(1.0, k * half * acc);
}

}  // namespace statfn

// CDF of the studentized range statistic: the normal-range CDF mixed over the
// chi distribution of the pooled scale estimate. Absolute error < 1e-5.
inline double studentized_range_cdf(double q, int k, double df) {
  if (k < 2) throw Error(ErrorCode::numeric, "studentized range needs k >= 2");
  if (!(df >= 1.0)) throw Error(ErrorCode::numeric, "studentized range needs df >= 1");
  if (q <= 0.0) return 0.0;
  if (std::isinf(df) || df > 1e7) return statfn::normal_range_cdf(q, k);

  // S = chi_df / sqrt(df); ln pdf avoids overflow for large df
  const double half_df = df / 2.0;
  const double ln_norm = std::log(2.0) + half_df * std::log(half_df) - std::lgamma(half_df);
  const double sd_s = 1.0 / std::sqrt(2.0 * df);
  const double lo = std::max(0.0, 1.0 - 12.0 * sd_s);
  const double hi = 1.0 + 12.0 * sd_s;

  const auto& [xs, ws] = statfn::gauss_legendre(160);
  const double half = 0.5 * (hi - lo), mid = 0.5 * (hi + lo);
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double s = mid + half * xs[i];
    if (s <= 0.0) continue;
    const double ln_pdf = ln_norm + (df - 1.0) * std::log(s) - half_df * s * s;
    acc += ws[i] * std::exp(ln_pdf) * statfn::normal_range_cdf(q * s, k);
  }
  const double p = half * acc;
  if (!std::isfinite(p)) throw Error(ErrorCode::numeric, "studentized range integration failed");
  return std::clamp(p, 0.0, 1.0);
}

// Critical value q with P(Q <= q) = 1 - alpha, by bisection.
inline double studentized_range_critical(double alpha, int k, double df) {
  if (!(alpha > 0.0) || !(alpha < 1.0)) throw Error(ErrorCode::numeric, "alpha must be in (0,1)");
  double lo = 0.0, hi = 2.0;
  while (studentized_range_cdf(hi, k, df) < 1.0 - alpha) {
    hi *= 2.0;
    if (hi > 1e4) throw Error(ErrorCode::numeric, "studentized range critical value diverged");
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (studentized_range_cdf(mid, k, df) < 1.0 - alpha ? lo : hi) = mid;
    if (hi - lo < 1e-10) break;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Detection matching
// ---------------------------------------------------------------------------

struct IdPoint {
  std::string id;
  PointUm pos;
};

struct MatchPair {
  std::string det_id;
  std::string gt_id;
  double distance_um = 0.0;
};

struct MatchResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<MatchPair> pairs;
  double cutoff_um = 0.0;
  double total_distance_um = 0.0;
};

namespace detail {

// Hungarian algorithm with potentials on an n x n implicit cost matrix.
// Returns the matched column of every row. O(n^3), deterministic.
inline std::vector<int> hungarian_square(int n, const std::function<double(int, int)>& cost) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> match(static_cast<std::size_t>(n) + 1, 0);  // column -> row
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);

  for (int i = 1; i <= n; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = match[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (match[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (match[static_cast<std::size_t>(j)] > 0)
      row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

}  // namespace detail

inline MatchResult match_detections(std::vector<IdPoint> dets, std::vector<IdPoint> gts,
                                    double cutoff_um) {
  if (!(cutoff_um > 0.0)) throw Error(ErrorCode::numeric, "match cutoff must be positive");
  std::sort(dets.begin(), dets.end(), [](const IdPoint& a, const IdPoint& b) { return a.id < b.id; });
  std::sort(gts.begin(), gts.end(), [](const IdPoint& a, const IdPoint& b) { return a.id < b.id; });

  MatchResult result;
  result.cutoff_um = cutoff_um;
  const int nd = static_cast<int>(dets.size());
  const int ng = static_cast<int>(gts.size());
  result.fp = nd;
  result.fn = ng;
  if (nd == 0 || ng == 0) return result;

  const int n = nd + ng;
  const double unmatched = cutoff_um * (std::min(nd, ng) + 1) + 1.0;
  const double forbidden = 2.0 * unmatched + 1.0;
  auto cost = [&](int i, int j) -> double {
    const bool real_det = i < nd, real_gt = j < ng;
    if (real_det && real_gt) {
      const double d = distance_um(dets[static_cast<std::size_t>(i)].pos,
                                   gts[static_cast<std::size_t>(j)].pos);
      return d <= cutoff_um ? d : forbidden;
    }
    if (!real_det && !real_gt) return 0.0;
    return unmatched;
  };

  const auto assignment = detail::hungarian_square(n, cost);
  for (int i = 0; i < nd; ++i) {
    const int j = assignment[static_cast<std::size_t>(i)];
    if (j < 0 || j >= ng) continue;
    const double d = distance_um(dets[static_cast<std::size_t>(i)].pos,
                                 gts[static_cast<std::size_t>(j)].pos);
    if (d > cutoff_um) continue;
    result.pairs.push_back({dets[static_cast<std::size_t>(i)].id,
                            gts[static_cast<std::size_t>(j)].id, d});
    result.total_distance_um += d;
  }
  std::sort(result.pairs.begin(), result.pairs.end(), [](const MatchPair& a, const MatchPair& b) {
    return a.gt_id != b.gt_id ? a.gt_id < b.gt_id : a.det_id < b.det_id;
  });
  result.tp = static_cast<int>(result.pairs.size());
  result.fp = nd - result.tp;
  result.fn = ng - result.tp;
  return result;
}

// Undefined metrics (zero denominator) are reported as nullopt and excluded
// from aggregation by callers.
inline std::optional<double> sensitivity(const MatchResult& m) {
  if (m.tp + m.fn == 0) return std::nullopt;
  return static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
}

inline std::optional<double> precision(const MatchResult& m) {
  if (m.tp + m.fp == 0) return std::nullopt;
  return static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

struct BootstrapSummary {
  double mean = 0.0;
  double ci95_lo = 0.0;
  double ci95_hi = 0.0;
};

inline BootstrapSummary bootstrap_mean(const std::vector<double>& values, int n_boot,
                                       uint64_t seed) {
  if (values.empty()) throw Error(ErrorCode::numeric, "bootstrap needs a non-empty sample");
  if (n_boot < 1) throw Error(ErrorCode::numeric, "n_boot must be >= 1");
  Rng rng(seed);
  const std::size_t n = values.size();
  double center = 0.0;
  for (double v : values) center += v;
  center /= static_cast<double>(n);

  // accumulate deviations from the sample mean: degenerate samples stay exact
  std::vector<double> means;
  means.reserve(static_cast<std::size_t>(n_boot));
  double dev_sum = 0.0;
  for (int b = 0; b < n_boot; ++b) {
    double dev = 0.0;
    for (std::size_t i = 0; i < n; ++i) dev += values[rng.uniform_index(n)] - center;
    means.push_back(center + dev / static_cast<double>(n));
    dev_sum += dev / static_cast<double>(n);
  }
  BootstrapSummary out;
  out.mean = center + dev_sum / static_cast<double>(n_boot);

  std::sort(means.begin(), means.end());
  auto quantile = [&](double p) {
    const double idx = p * static_cast<double>(means.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(idx);
    const std::size_t hi = std::min(lo + 1, means.size() - 1);
    const double frac = idx - static_cast<double>(lo);
    return means[lo] + frac * (means[hi] - means[lo]);
  };
  out.ci95_lo = quantile(0.025);
  out.ci95_hi = quantile(0.975);
  return out;
}

// ---------------------------------------------------------------------------
// One-way ANOVA and Tukey HSD
// ---------------------------------------------------------------------------

struct AnovaResult {
  double F = 0.0;
  int df_between = 0;
  int df_within = 0;
  double p = 1.0;
  double ms_within = 0.0;
  std::vector<double> group_means;
  std::vector<std::size_t> group_sizes;
};

namespace detail {

inline void validate_groups(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw Error(ErrorCode::numeric, "ANOVA needs at least 2 groups");
  for (const auto& g : groups)
    if (g.size() < 2) throw Error(ErrorCode::numeric, "each group needs at least 2 values");
}

}  // namespace detail

inline AnovaResult one_way_anova(const std::vector<std::vector<double>>& groups) {
  detail::validate_groups(groups);
  AnovaResult r;
  std::size_t total_n = 0;
  double grand = 0.0;
  for (const auto& g : groups) {
    double m = 0.0;
    for (double x : g) m += x;
    grand += m;
    m /= static_cast<double>(g.size());
    r.group_means.push_back(m);
    r.group_sizes.push_back(g.size());
    total_n += g.size();
  }
  grand /= static_cast<double>(total_n);

  double ssb = 0.0, ssw = 0.0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const double dm = r.group_means[i] - grand;
    ssb += static_cast<double>(groups[i].size()) * dm * dm;
    for (double x : groups[i]) {
      const double d = x - r.group_means[i];
      ssw += d * d;
    }
  }
  r.df_between = static_cast<int>(groups.size()) - 1;
  r.df_within = static_cast<int>(total_n) - static_cast<int>(groups.size());

  const double sst = ssb + ssw;
  const double tol = 1e-12 * std::max(sst, 1e-300);
  if (ssw <= tol) {
    // zero within-variance conventions
    if (ssb <= tol) {
      r.F = 0.0;
      r.p = 1.0;
    } else {
      r.F = std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    r.ms_within = 0.0;
    return r;
  }
  r.ms_within = ssw / r.df_within;
  r.F = (ssb / r.df_between) / r.ms_within;
  r.p = statfn::f_sf(r.F, r.df_between, r.df_within);
  return r;
}

struct TukeyComparison {
  std::size_t group_i = 0;
  std::size_t group_j = 0;
  double mean_i = 0.0;
  double mean_j = 0.0;
  double q = 0.0;
  double p = 1.0;
  bool significant = false;
};

// Tukey-Kramer pairwise comparisons after a one-way ANOVA.
inline std::vector<TukeyComparison> tukey_hsd(const std::vector<std::vector<double>>& groups,
                                              double alpha = 0.05) {
  const AnovaResult anova = one_way_anova(groups);
  const int k = static_cast<int>(groups.size());
  std::vector<TukeyComparison> out;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (std::size_t j = i + 1; j < groups.size(); ++j) {
      TukeyComparison c;
      c.group_i = i;
      c.group_j = j;
      c.mean_i = anova.group_means[i];
      c.mean_j = anova.group_means[j];
      const double gap = std::fabs(c.mean_i - c.mean_j);
      if (anova.ms_within <= 0.0) {
        c.q = gap > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
        c.p = gap > 0.0 ? 0.0 : 1.0;
      } else {
        const double se = std::sqrt(anova.ms_within / 2.0 *
                                    (1.0 / static_cast<double>(anova.group_sizes[i]) +
                                     1.0 / static_cast<double>(anova.group_sizes[j])));
        c.q = gap / se;
        c.p = 1.0 - studentized_range_cdf(c.q, k, anova.df_within);
      }
      c.significant = c.p < alpha;
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace zmd
