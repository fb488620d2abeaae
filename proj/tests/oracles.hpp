#pragma once

// Independent reference computations used only by the tests. Nothing here
// shares code paths with the library routines it checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <set>
#include <vector>

#include "attnexit/tensor.hpp"

namespace oracle {

// Solves (X^T X) beta = X^T y with Gaussian elimination, partial pivoting.
inline std::vector<double> normal_equations(const std::vector<std::vector<double>>& x,
                                            const std::vector<double>& y) {
  const std::size_t n = x.size(), p = x[0].size();
  std::vector<std::vector<double>> a(p, std::vector<double>(p + 1, 0.0));
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < p; ++c)
      for (std::size_t i = 0; i < n; ++i) a[r][c] += x[i][r] * x[i][c];
    for (std::size_t i = 0; i < n; ++i) a[r][p] += x[i][r] * y[i];
  }
  for (std::size_t col = 0; col < p; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < p; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c <= p; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::vector<double> beta(p);
  for (std::size_t r = 0; r < p; ++r) beta[r] = a[r][p] / a[r][r];
  return beta;
}

// Textbook two-pass formulas, written out independently.
inline double two_pass_mean(const std::vector<double>& x) {
  long double s = 0;
  for (double v : x) s += v;
  return static_cast<double>(s / x.size());
}

inline double two_pass_variance(const std::vector<double>& x) {
  const long double m = two_pass_mean(x);
  long double s = 0;
  for (double v : x) s += (v - m) * (v - m);
  return static_cast<double>(s / x.size());
}

// Variance via shifting by the first element (numerically distinct route).
inline double shifted_variance(const std::vector<double>& x) {
  const long double k = x[0];
  long double s = 0, s2 = 0;
  for (double v : x) {
    s += v - k;
    s2 += (v - k) * (v - k);
  }
  const long double n = x.size();
  return static_cast<double>((s2 - s * s / n) / n);
}

inline double two_pass_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const long double mx = two_pass_mean(x), my = two_pass_mean(y);
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

// Fitted values of logits(i,j) ~ a(i-j) + b(j) + c(i) from an explicit
// one-hot design matrix solved with the library's dense least-squares routine.
struct DenseFit {
  attnexit::Matrix<double> fitted;
  double corr = 0.0;
};

inline DenseFit dense_decomposition(const attnexit::Matrix<double>& w) {
  const std::size_t L = w.rows();
  const std::size_t p = (2 * L - 1) + L + L;
  attnexit::Matrix<double> x(L * L, p);
  std::vector<double> y(L * L);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j) {
      const std::size_t r = i * L + j;
      x(r, i + L - 1 - j) = 1.0;
      x(r, 2 * L - 1 + j) = 1.0;
      x(r, 3 * L - 1 + i) = 1.0;
      y[r] = w(i, j);
    }
  }
  const auto beta = attnexit::lstsq(x, y);
  DenseFit out{attnexit::Matrix<double>(L, L), 0.0};
  std::vector<double> f(L * L);
  for (std::size_t r = 0; r < L * L; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < p; ++c) s += x(r, c) * beta[c];
    f[r] = s;
    out.fitted(r / L, r % L) = s;
  }
  out.corr = two_pass_pearson(y, f);
  return out;
}

// Protein-centric F1 at a single threshold (score >= tau means predicted).
inline double f1_at(const std::vector<std::vector<double>>& scores,
                    const std::vector<std::set<int>>& truth, double tau) {
  double psum = 0.0, rsum = 0.0;
  int pcount = 0, rcount = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int tp = 0, pred = 0;
    for (std::size_t k = 0; k < scores[i].size(); ++k) {
      if (scores[i][k] >= tau) {
        ++pred;
        if (truth[i].count(static_cast<int>(k))) ++tp;
      }
    }
    if (pred > 0) {
      psum += static_cast<double>(tp) / pred;
      ++pcount;
    }
    if (!truth[i].empty()) {
      rsum += static_cast<double>(tp) / truth[i].size();
      ++rcount;
    }
  }
  if (pcount == 0 || rcount == 0) return 0.0;
  const double p = psum / pcount, r = rsum / rcount;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

inline double f1_max_brute(const std::vector<std::vector<double>>& scores,
                           const std::vector<std::set<int>>& truth) {
  std::set<double> taus = {0.0, 1.0};
  for (const auto& s : scores) taus.insert(s.begin(), s.end());
  double best = 0.0;
  for (double t : taus) best = std::max(best, f1_at(scores, truth, t));
  return best;
}

// Risk-coverage area by enumerating prefixes of a given order.
inline double aurc_of_order(const std::vector<double>& losses, const std::vector<std::size_t>& order) {
  double area = 0.0, cum = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum += losses[order[k]];
    area += cum / static_cast<double>(k + 1);
  }
  return area / static_cast<double>(order.size());
}

}  // namespace oracle
