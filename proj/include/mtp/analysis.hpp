#pragma once

// Significance testing over per-run score tables: descriptive statistics,
// two-sample t-tests, Bonferroni correction and the Lilliefors normality
// test with a Monte Carlo null distribution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mtp/error.hpp"

namespace mtp {

struct RunStats {
  std::string label;
  std::vector<double> scores;
};

struct MeanStd {
  double mean = 0;
  double std = 0;  // n - 1 denominator
};

inline MeanStd mean_std(const std::vector<double>& x) {
  if (x.size() < 2) fail("mean_std: need at least 2 runs, got ", x.size());
  double m = 0;
  for (double v : x) m += v;
  m /= double(x.size());
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / double(x.size() - 1))};
}

inline MeanStd mean_std(const RunStats& r) { return mean_std(r.scores); }

namespace detail {

// Continued fraction for the regularized incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 500;
  constexpr double kEps = 1e-15, kTiny = 1e-300;
  double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1) < kEps) return h;
  }
  fail("incomplete beta: continued fraction did not converge (a=", a, ", b=", b, ", x=", x, ")");
}

}  // namespace detail

// I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (x < 0 || x > 1) fail("incomplete beta: x=", x, " outside [0,1]");
  if (x == 0 || x == 1) return x;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                          b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1) / (a + b + 2)) return front * detail::beta_cf(a, b, x) / a;
  return 1 - front * detail::beta_cf(b, a, 1 - x) / b;
}

// CDF of Student's t with df degrees of freedom (df may be fractional).
inline double student_t_cdf(double t, double df) {
  if (!(df > 0)) fail("student_t_cdf: df must be positive, got ", df);
  const double x = df / (df + t * t);
  const double tail = 0.5 * regularized_incomplete_beta(df / 2, 0.5, x);
  return t >= 0 ? 1 - tail : tail;
}

enum class TTestKind { kWelch, kPooled };

struct TTestResult {
  double t = 0;
  double df = 0;
  double p = 1;  // two-sided
};

inline TTestResult ttest_independent(const std::vector<double>& a, const std::vector<double>& b,
                                     TTestKind kind = TTestKind::kWelch) {
  const auto sa = mean_std(a), sb = mean_std(b);
  const double na = double(a.size()), nb = double(b.size());
  const double va = sa.std * sa.std, vb = sb.std * sb.std;
  TTestResult r;
  double se2;
  if (kind == TTestKind::kPooled) {
    r.df = na + nb - 2;
    const double sp2 = ((na - 1) * va + (nb - 1) * vb) / r.df;
    se2 = sp2 * (1 / na + 1 / nb);
  } else {
    se2 = va / na + vb / nb;
    const double num = se2 * se2;
    const double den = (va / na) * (va / na) / (na - 1) + (vb / nb) * (vb / nb) / (nb - 1);
    r.df = den > 0 ? num / den : na + nb - 2;
  }
  const double diff = sa.mean - sb.mean;
  if (se2 <= 0) {
    if (diff == 0) return {0, r.df, 1};
    fail("ttest_independent: zero variance in both samples");
  }
  r.t = diff / std::sqrt(se2);
  r.p = std::min(1.0, 2 * student_t_cdf(-std::abs(r.t), r.df));
  return r;
}

inline std::vector<double> bonferroni(const std::vector<double>& p, std::size_t m) {
  if (m < p.size()) fail("bonferroni: m=", m, " smaller than ", p.size(), " comparisons");
  std::vector<double> out;
  out.reserve(p.size());
  for (double v : p) out.push_back(std::min(1.0, v * double(m)));
  return out;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Kolmogorov-Smirnov distance between the standardized sample (sample mean,
// n-1 standard deviation) and N(0,1).
inline double lilliefors_statistic(std::vector<double> x) {
  const std::size_t n = x.size();
  const auto ms = mean_std(x);
  if (ms.std == 0) fail("lilliefors: constant sample");
  std::sort(x.begin(), x.end());
  double d = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = normal_cdf((x[i] - ms.mean) / ms.std);
    d = std::max({d, double(i + 1) / double(n) - f, f - double(i) / double(n)});
  }
  return d;
}

struct LillieforsResult {
  double statistic = 0;
  double p = 1;
};

// p-value = share of simulated normal samples of the same size whose
// statistic is at least the observed one.
inline LillieforsResult lilliefors_test(const std::vector<double>& samples,
                                        std::size_t simulations = 100000,
                                        std::uint64_t seed = 20210901) {
  if (samples.size() < 4) fail("lilliefors: need at least 4 samples, got ", samples.size());
  if (simulations == 0) fail("lilliefors: simulations must be positive");
  LillieforsResult r;
  r.statistic = lilliefors_statistic(samples);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::vector<double> sim(samples.size());
  std::size_t hits = 0;
  for (std::size_t s = 0; s < simulations; ++s) {
    for (auto& v : sim) v = normal(rng);
    if (lilliefors_statistic(sim) >= r.statistic - 1e-12) ++hits;
  }
  r.p = double(hits) / double(simulations);
  return r;
}

// CSV with header "label,run1,...,runk"; one row per label.
inline std::vector<RunStats> parse_runs_csv(std::istream& in) {
  std::vector<RunStats> out;
  std::string line;
  bool header = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    if (header) {
      header = false;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    RunStats r;
    std::getline(ss, r.label, ',');
    while (std::getline(ss, cell, ',')) {
      if (cell.find_first_not_of(" \t") == std::string::npos) continue;
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite");
        r.scores.push_back(v);
      } catch (const std::exception&) {
        fail("runs csv line ", lineno, ": bad score '", cell, "'");
      }
    }
    if (r.scores.size() < 2) fail("runs csv line ", lineno, ": label '", r.label, "' has fewer than 2 runs");
    out.push_back(std::move(r));
  }
  if (out.empty()) fail("runs csv: no data rows");
  return out;
}

}  // namespace mtp
