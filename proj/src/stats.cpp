#include "cvaenf/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace cvaenf::stats {

double mean(const std::vector<double>& x) {
  if (x.empty()) throw std::invalid_argument("mean of empty sample");
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double population_std(const std::vector<double>& x) {
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size()));
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson: need two equal-length samples");
  const double mx = mean(x), my = mean(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(average_ranks(x), average_ranks(y));
}

double excess_kurtosis(const std::vector<double>& x) {
  const double m = mean(x);
  double m2 = 0, m4 = 0;
  for (double v : x) {
    const double d = (v - m) * (v - m);
    m2 += d;
    m4 += d * d;
  }
  m2 /= static_cast<double>(x.size());
  m4 /= static_cast<double>(x.size());
  if (m2 == 0) return 0.0;
  return m4 / (m2 * m2) - 3.0;
}

// Hartigan & Hartigan (1985) algorithm AS 217: alternately fit the greatest
// convex minorant and least concave majorant on a shrinking modal interval.
// Arrays are 1-based to follow the published description.
double dip_statistic(std::vector<double> sample) {
  const int n = static_cast<int>(sample.size());
  if (n < 1) throw std::invalid_argument("dip of empty sample");
  std::sort(sample.begin(), sample.end());
  if (n < 2 || sample.front() == sample.back()) return 1.0 / (2.0 * n);

  std::vector<double> x(n + 1);
  for (int i = 0; i < n; ++i) x[i + 1] = sample[i];
  std::vector<int> mn(n + 1), mj(n + 1), gcm(n + 1), lcm(n + 1);

  mn[1] = 1;
  for (int j = 2; j <= n; ++j) {
    mn[j] = j - 1;
    while (true) {
      const int a = mn[j], b = mn[a];
      if (a == 1 || (x[j] - x[a]) * (a - b) < (x[a] - x[b]) * (j - a)) break;
      mn[j] = b;
    }
  }
  mj[n] = n;
  for (int k = n - 1; k >= 1; --k) {
    mj[k] = k + 1;
    while (true) {
      const int a = mj[k], b = mj[a];
      if (a == n || (x[k] - x[a]) * (a - b) < (x[a] - x[b]) * (k - a)) break;
      mj[k] = b;
    }
  }

  double dip = 1.0;
  int low = 1, high = n;
  while (true) {
    int l_gcm = 1;
    gcm[1] = high;
    while (gcm[l_gcm] > low) {
      gcm[l_gcm + 1] = mn[gcm[l_gcm]];
      ++l_gcm;
    }
    int l_lcm = 1;
    lcm[1] = low;
    while (lcm[l_lcm] < high) {
      lcm[l_lcm + 1] = mj[lcm[l_lcm]];
      ++l_lcm;
    }
    int ig = l_gcm, ih = l_lcm;
    int ix = l_gcm - 1, iv = 2;

    // Largest vertical distance between the two hulls on [low, high].
    double d = 0.0;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        const int gx = gcm[ix], lv = lcm[iv];
        if (gx > lv) {
          const int g1 = gcm[ix + 1];
          const double dx = (lv - g1 + 1) - (x[lv] - x[g1]) * (gx - g1) / (x[gx] - x[g1]);
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int l1 = lcm[iv - 1];
          const double dx = (x[gx] - x[l1]) * (lv - l1) / (x[lv] - x[l1]) - (gx - l1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        ix = std::max(ix, 1);
        iv = std::min(iv, l_lcm);
      } while (gcm[ix] != lcm[iv]);
    } else {
      d = 1.0;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = gcm[j + 1], je = gcm[j];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double c = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (jj - jb + 1) - (x[jj] - x[jb]) * c);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      const int jb = lcm[j], je = lcm[j + 1];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double c = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (x[jj] - x[jb]) * c - (jj - jb - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max(dip, std::max(dip_l, dip_u));

    if (low == gcm[ig] && high == lcm[ih]) break;
    low = gcm[ig];
    high = lcm[ih];
  }
  return dip / (2.0 * n);
}

double dip_test_pvalue(const std::vector<double>& x, int replicates, std::uint64_t seed) {
  const double observed = dip_statistic(x);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> null_sample(x.size());
  int exceed = 0;
  for (int r = 0; r < replicates; ++r) {
    for (double& v : null_sample) v = unif(rng);
    if (dip_statistic(null_sample) >= observed) ++exceed;
  }
  return (exceed + 1.0) / (replicates + 1.0);
}

Eigen::MatrixXd population_covariance(const Eigen::MatrixXd& samples) {
  if (samples.rows() < 1) throw std::invalid_argument("covariance of empty sample");
  const Eigen::MatrixXd centred = samples.rowwise() - samples.colwise().mean();
  return centred.transpose() * centred / static_cast<double>(samples.rows());
}

}  // namespace cvaenf::stats
