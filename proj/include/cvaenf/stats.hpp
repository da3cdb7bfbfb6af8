#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace cvaenf::stats {

double mean(const std::vector<double>& x);

/// Population (1/N) standard deviation.
double population_std(const std::vector<double>& x);

double pearson(const std::vector<double>& x, const std::vector<double>& y);

/// Pearson correlation of average ranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

double excess_kurtosis(const std::vector<double>& x);

/// Hartigan's dip statistic of the empirical distribution (in [1/(2n), 1/4]).
double dip_statistic(std::vector<double> x);

/// Monte-Carlo p-value of the dip against the uniform null with `replicates` draws.
double dip_test_pvalue(const std::vector<double>& x, int replicates, std::uint64_t seed);

/// Column covariance (1/N) of the rows of `samples`.
Eigen::MatrixXd population_covariance(const Eigen::MatrixXd& samples);

}  // namespace cvaenf::stats
