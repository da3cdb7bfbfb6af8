#pragma once

// Cohort metrics. Standard deviations use the population (1/N) convention.

#include "cvaenf/dataset.hpp"
#include "cvaenf/model.hpp"

#include <filesystem>
#include <functional>
#include <random>

namespace cvaenf {

struct MeanStd {
  double mean = 0;
  double std = 0;
};

MeanStd mean_std(const std::vector<double>& values);

struct CohortMetrics {
  MeanStd generalisation_mm;
  MeanStd specificity_mm;
  double volume_variability_mm3 = 0;
  Eigen::VectorXd activity;  // per latent dimension; empty for models without a latent code
};

/// Anything that reconstructs and samples shapes of one topology.
/// Covariates are passed standardized.
class ShapeGenerator {
 public:
  virtual ~ShapeGenerator() = default;
  virtual std::string kind() const = 0;
  virtual Positions reconstruct(const Positions& shape, const Eigen::VectorXd& covariates) const = 0;
  virtual std::vector<Positions> sample(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const = 0;
  /// Posterior-mean codes, one row per shape; zero columns when there is no latent code.
  virtual Eigen::MatrixXd latent_means(const std::vector<const Positions*>& shapes,
                                       const Eigen::MatrixXd& covariates) const = 0;
};

class CvaeNfGenerator : public ShapeGenerator {
 public:
  explicit CvaeNfGenerator(std::shared_ptr<const CvaeNfModel> model) : model_(std::move(model)) {}
  std::string kind() const override { return "cvae_nf"; }
  Positions reconstruct(const Positions& shape, const Eigen::VectorXd& covariates) const override;
  std::vector<Positions> sample(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const override;
  Eigen::MatrixXd latent_means(const std::vector<const Positions*>& shapes,
                               const Eigen::MatrixXd& covariates) const override;
  const CvaeNfModel& model() const { return *model_; }

 private:
  std::shared_ptr<const CvaeNfModel> model_;
};

/// Returns its input on reconstruction and the stored cohort cyclically on sampling.
class IdentityGenerator : public ShapeGenerator {
 public:
  explicit IdentityGenerator(std::vector<Positions> cohort = {}) : cohort_(std::move(cohort)) {}
  std::string kind() const override { return "identity"; }
  Positions reconstruct(const Positions& shape, const Eigen::VectorXd&) const override { return shape; }
  std::vector<Positions> sample(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const override;
  Eigen::MatrixXd latent_means(const std::vector<const Positions*>& shapes, const Eigen::MatrixXd&) const override {
    return Eigen::MatrixXd(static_cast<Index>(shapes.size()), 0);
  }

 private:
  std::vector<Positions> cohort_;
};

/// Point-distribution model over stacked coordinates (x0, y0, z0, x1, ...).
struct PcaSsm {
  Eigen::VectorXd mean;         // 3n
  Eigen::MatrixXd modes;        // 3n x k, orthonormal columns
  Eigen::VectorXd eigenvalues;  // k, nonincreasing
};

/// Throws std::invalid_argument when k exceeds the numerical rank or there are fewer than k+1 shapes.
PcaSsm fit_pca_ssm(const std::vector<Positions>& shapes, Index k);
Positions pca_reconstruct(const PcaSsm& ssm, const Positions& shape);
Positions pca_sample(const PcaSsm& ssm, std::mt19937_64& rng);
Eigen::VectorXd pca_coefficients(const PcaSsm& ssm, const Positions& shape);

class PcaGenerator : public ShapeGenerator {
 public:
  explicit PcaGenerator(PcaSsm ssm) : ssm_(std::move(ssm)) {}
  std::string kind() const override { return "pca"; }
  Positions reconstruct(const Positions& shape, const Eigen::VectorXd&) const override {
    return pca_reconstruct(ssm_, shape);
  }
  std::vector<Positions> sample(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const override;
  Eigen::MatrixXd latent_means(const std::vector<const Positions*>& shapes, const Eigen::MatrixXd&) const override;
  const PcaSsm& ssm() const { return ssm_; }

 private:
  PcaSsm ssm_;
};

/// Mean +- std over the test set of mean_vertex_distance(x, reconstruct(x)).
MeanStd generalisation_error(const ShapeGenerator& generator, const std::vector<const Positions*>& test,
                             const Eigen::MatrixXd& covariates);

/// Per generated shape, distance to its nearest real shape; mean +- std over the generated cohort.
MeanStd specificity_error(const std::vector<Positions>& generated, const std::vector<const Positions*>& real);
MeanStd specificity_error(const std::vector<Positions>& generated, const std::vector<Positions>& real);

/// Population std of enclosed volumes (closed meshes), or of precomputed volumes.
double volume_variability(const std::vector<SurfaceMesh>& cohort);
double volume_variability(const std::vector<double>& volumes);

/// Per-dimension population variance of the rows of `means` (subjects x latent).
Eigen::VectorXd latent_activity(const Eigen::MatrixXd& means);

using LatentEncoder = std::function<Eigen::VectorXd(const Positions&, const Eigen::VectorXd&)>;
Eigen::VectorXd latent_activity(const LatentEncoder& encoder, const std::vector<const Positions*>& shapes,
                                const Eigen::MatrixXd& covariates);

struct KdeCurve {
  std::string group;
  Eigen::VectorXd grid;
  Eigen::VectorXd density;
  Index members = 0;
};

/// Gaussian KDE of `values` at `x`; bandwidth is floored at 1e-6.
double gaussian_kde(const std::vector<double>& values, double bandwidth, double x);

/// One KDE per group on a shared grid spanning all values (+-3 bandwidths).
/// bandwidth <= 0 selects Silverman's rule per group. Groups with fewer than two
/// members are skipped and named in `skipped`.
std::vector<KdeCurve> subgroup_volume_density(const std::vector<double>& volumes, const std::vector<std::string>& labels,
                                              double bandwidth, Index grid_points = 200,
                                              std::vector<std::string>* skipped = nullptr);

void write_kde_csv(const std::vector<KdeCurve>& curves, const std::filesystem::path& path);
void write_activity_csv(const Eigen::VectorXd& activity, const std::filesystem::path& path);

struct MetricsRow {
  std::string method;
  CohortMetrics metrics;
};

/// JSON with every CohortMetrics field per method, and a Table-style CSV.
void write_metrics_json(const std::vector<MetricsRow>& rows, double real_volume_variability,
                        const std::filesystem::path& path);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

struct EvaluationInputs {
  const ShapeGenerator* generator = nullptr;
  std::vector<const Positions*> test;
  Eigen::MatrixXd test_covariates;  // standardized
  std::vector<const Positions*> real;  // specificity reference cohort
  Eigen::MatrixXd sample_covariates;   // standardized, one generated shape per row
  ShellLayout layout;
  std::uint64_t seed = 0;
};

struct Evaluation {
  CohortMetrics metrics;
  std::vector<Positions> generated;
  std::vector<double> generated_volumes;
};

Evaluation evaluate_generator(const EvaluationInputs& in);

}  // namespace cvaenf
