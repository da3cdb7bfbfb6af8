#include "cvaenf/evaluation.hpp"

#include <nlohmann/json.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <stdexcept>

namespace cvaenf {

namespace fs = std::filesystem;

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_std of an empty sample");
  double m = 0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / static_cast<double>(values.size()))};
}

Positions CvaeNfGenerator::reconstruct(const Positions& shape, const Eigen::VectorXd& covariates) const {
  return model_->reconstruct(shape, model_->config().conditional ? covariates : Eigen::VectorXd());
}

std::vector<Positions> CvaeNfGenerator::sample(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const {
  if (model_->config().conditional) return model_->sample_population(covariates, rng);
  return model_->sample_population(Eigen::MatrixXd(covariates.rows(), 0), rng);
}

Eigen::MatrixXd CvaeNfGenerator::latent_means(const std::vector<const Positions*>& shapes,
                                              const Eigen::MatrixXd& covariates) const {
  const Eigen::MatrixXd cov =
      model_->config().conditional ? covariates : Eigen::MatrixXd(static_cast<Index>(shapes.size()), 0);
  return model_->encode_means(shapes, cov);
}

std::vector<Positions> IdentityGenerator::sample(const Eigen::MatrixXd& covariates, std::mt19937_64&) const {
  if (cohort_.empty()) throw std::logic_error("identity generator has no cohort to sample from");
  std::vector<Positions> out;
  for (Index i = 0; i < covariates.rows(); ++i) out.push_back(cohort_[static_cast<std::size_t>(i) % cohort_.size()]);
  return out;
}

namespace {

Eigen::VectorXd stack(const Positions& p) {
  Eigen::VectorXd v(p.size());
  for (Index i = 0; i < p.rows(); ++i) v.segment<3>(3 * i) = p.row(i).transpose();
  return v;
}

Positions unstack(const Eigen::VectorXd& v) {
  Positions p(v.size() / 3, 3);
  for (Index i = 0; i < p.rows(); ++i) p.row(i) = v.segment<3>(3 * i).transpose();
  return p;
}

}  // namespace

PcaSsm fit_pca_ssm(const std::vector<Positions>& shapes, Index k) {
  const Index n = static_cast<Index>(shapes.size());
  if (k < 1) throw std::invalid_argument("fit_pca_ssm: k must be >= 1");
  if (n < k + 1) throw std::invalid_argument("fit_pca_ssm: need at least k+1 shapes");
  const Index dim = 3 * shapes.front().rows();
  Eigen::MatrixXd X(n, dim);
  for (Index i = 0; i < n; ++i) {
    if (shapes[i].rows() * 3 != dim) throw MeshError("fit_pca_ssm: shapes differ in vertex count");
    X.row(i) = stack(shapes[i]).transpose();
  }
  PcaSsm ssm;
  ssm.mean = X.colwise().mean().transpose();
  X.rowwise() -= ssm.mean.transpose();

  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  if (n <= dim) {
    // Gram trick: eigenvectors of X X^T / n map to modes through X^T.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X * X.transpose() / static_cast<double>(n));
    values = es.eigenvalues().reverse();
    vectors = X.transpose() * es.eigenvectors().rowwise().reverse();
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(X.transpose() * X / static_cast<double>(n));
    values = es.eigenvalues().reverse();
    vectors = es.eigenvectors().rowwise().reverse();
  }
  const double top = values.size() > 0 ? std::max(values[0], 0.0) : 0.0;
  Index rank = 0;
  while (rank < values.size() && values[rank] > 1e-10 * top && top > 0) ++rank;
  if (k > rank)
    throw std::invalid_argument("fit_pca_ssm: k = " + std::to_string(k) + " exceeds the data rank " +
                                std::to_string(rank));
  ssm.eigenvalues = values.head(k);
  ssm.modes = vectors.leftCols(k);
  for (Index j = 0; j < k; ++j) ssm.modes.col(j).normalize();
  return ssm;
}

Eigen::VectorXd pca_coefficients(const PcaSsm& ssm, const Positions& shape) {
  if (shape.size() != ssm.mean.size()) throw MeshError("pca: shape does not match the model topology");
  return ssm.modes.transpose() * (stack(shape) - ssm.mean);
}

Positions pca_reconstruct(const PcaSsm& ssm, const Positions& shape) {
  return unstack(ssm.mean + ssm.modes * pca_coefficients(ssm, shape));
}

Positions pca_sample(const PcaSsm& ssm, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::VectorXd b(ssm.eigenvalues.size());
  for (Index j = 0; j < b.size(); ++j) b[j] = n(rng) * std::sqrt(ssm.eigenvalues[j]);
  return unstack(ssm.mean + ssm.modes * b);
}

std::vector<Positions> PcaGenerator::sample(const Eigen::MatrixXd& covariates, std::mt19937_64& rng) const {
  std::vector<Positions> out;
  for (Index i = 0; i < covariates.rows(); ++i) out.push_back(pca_sample(ssm_, rng));
  return out;
}

Eigen::MatrixXd PcaGenerator::latent_means(const std::vector<const Positions*>& shapes, const Eigen::MatrixXd&) const {
  Eigen::MatrixXd out(static_cast<Index>(shapes.size()), ssm_.eigenvalues.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) out.row(static_cast<Index>(i)) = pca_coefficients(ssm_, *shapes[i]);
  return out;
}

MeanStd generalisation_error(const ShapeGenerator& generator, const std::vector<const Positions*>& test,
                             const Eigen::MatrixXd& covariates) {
  if (test.empty()) throw std::invalid_argument("generalisation_error: empty test set");
  std::vector<double> err;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Eigen::VectorXd c =
        covariates.cols() > 0 ? Eigen::VectorXd(covariates.row(static_cast<Index>(i)).transpose()) : Eigen::VectorXd();
    err.push_back(mean_vertex_distance(*test[i], generator.reconstruct(*test[i], c)));
  }
  return mean_std(err);
}

MeanStd specificity_error(const std::vector<Positions>& generated, const std::vector<const Positions*>& real) {
  if (generated.empty() || real.empty()) throw std::invalid_argument("specificity_error: empty cohort");
  std::vector<double> nearest;
  for (const Positions& g : generated) {
    double best = std::numeric_limits<double>::infinity();
    for (const Positions* r : real) {
      if (r->rows() != g.rows()) throw MeshError("specificity_error: topology mismatch");
      best = std::min(best, mean_vertex_distance(g, *r));
    }
    nearest.push_back(best);
  }
  return mean_std(nearest);
}

MeanStd specificity_error(const std::vector<Positions>& generated, const std::vector<Positions>& real) {
  std::vector<const Positions*> ptrs;
  for (const auto& r : real) ptrs.push_back(&r);
  return specificity_error(generated, ptrs);
}

double volume_variability(const std::vector<double>& volumes) {
  if (volumes.size() < 2) throw std::invalid_argument("volume_variability: need at least two meshes");
  return mean_std(volumes).std;
}

double volume_variability(const std::vector<SurfaceMesh>& cohort) {
  std::vector<double> v;
  for (const auto& m : cohort) v.push_back(enclosed_volume(m));
  return volume_variability(v);
}

Eigen::VectorXd latent_activity(const Eigen::MatrixXd& means) {
  if (means.rows() < 2) throw std::invalid_argument("latent_activity: need at least two subjects");
  const Eigen::MatrixXd centred = means.rowwise() - means.colwise().mean();
  return centred.array().square().colwise().mean().transpose();
}

Eigen::VectorXd latent_activity(const LatentEncoder& encoder, const std::vector<const Positions*>& shapes,
                                const Eigen::MatrixXd& covariates) {
  if (shapes.size() < 2) throw std::invalid_argument("latent_activity: need at least two subjects");
  Eigen::MatrixXd means;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Eigen::VectorXd c =
        covariates.cols() > 0 ? Eigen::VectorXd(covariates.row(static_cast<Index>(i)).transpose()) : Eigen::VectorXd();
    const Eigen::VectorXd mu = encoder(*shapes[i], c);
    if (i == 0) means.resize(static_cast<Index>(shapes.size()), mu.size());
    means.row(static_cast<Index>(i)) = mu.transpose();
  }
  return latent_activity(means);
}

double gaussian_kde(const std::vector<double>& values, double bandwidth, double x) {
  if (values.empty()) throw std::invalid_argument("gaussian_kde: no values");
  const double h = std::max(bandwidth, 1e-6);
  const double norm = 1.0 / (static_cast<double>(values.size()) * h * std::sqrt(2.0 * M_PI));
  double s = 0;
  for (double v : values) {
    const double u = (x - v) / h;
    s += std::exp(-0.5 * u * u);
  }
  return norm * s;
}

std::vector<KdeCurve> subgroup_volume_density(const std::vector<double>& volumes, const std::vector<std::string>& labels,
                                              double bandwidth, Index grid_points, std::vector<std::string>* skipped) {
  if (volumes.size() != labels.size()) throw std::invalid_argument("subgroup_volume_density: one label per volume");
  if (grid_points < 2) throw std::invalid_argument("subgroup_volume_density: need at least two grid points");
  std::map<std::string, std::vector<double>> groups;
  for (std::size_t i = 0; i < volumes.size(); ++i) groups[labels[i]].push_back(volumes[i]);

  std::map<std::string, double> widths;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, widest = 0;
  for (const auto& [name, vals] : groups) {
    if (vals.size() < 2) {
      if (skipped) skipped->push_back(name);
      continue;
    }
    double h = bandwidth;
    if (h <= 0) h = 1.06 * mean_std(vals).std * std::pow(static_cast<double>(vals.size()), -0.2);
    h = std::max(h, 1e-6);
    widths[name] = h;
    widest = std::max(widest, h);
    lo = std::min(lo, *std::min_element(vals.begin(), vals.end()));
    hi = std::max(hi, *std::max_element(vals.begin(), vals.end()));
  }
  std::vector<KdeCurve> out;
  if (widths.empty()) return out;
  const Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(grid_points, lo - 3 * widest, hi + 3 * widest);
  for (const auto& [name, h] : widths) {
    KdeCurve c{name, grid, Eigen::VectorXd(grid_points), static_cast<Index>(groups[name].size())};
    for (Index i = 0; i < grid_points; ++i) c.density[i] = gaussian_kde(groups[name], h, grid[i]);
    out.push_back(std::move(c));
  }
  return out;
}

void write_kde_csv(const std::vector<KdeCurve>& curves, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10) << "group,volume_mm3,density\n";
  for (const auto& c : curves)
    for (Index i = 0; i < c.grid.size(); ++i) out << c.group << ',' << c.grid[i] << ',' << c.density[i] << '\n';
}

void write_activity_csv(const Eigen::VectorXd& activity, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10) << "dimension,activity\n";
  for (Index i = 0; i < activity.size(); ++i) out << i << ',' << activity[i] << '\n';
}

void write_metrics_json(const std::vector<MetricsRow>& rows, double real_volume_variability, const fs::path& path) {
  nlohmann::json j;
  j["real_volume_variability_mm3"] = real_volume_variability;
  j["methods"] = nlohmann::json::array();
  for (const auto& r : rows) {
    const CohortMetrics& m = r.metrics;
    j["methods"].push_back({{"method", r.method},
                            {"generalisation_mm", {{"mean", m.generalisation_mm.mean}, {"std", m.generalisation_mm.std}}},
                            {"specificity_mm", {{"mean", m.specificity_mm.mean}, {"std", m.specificity_mm.std}}},
                            {"volume_variability_mm3", m.volume_variability_mm3},
                            {"activity", std::vector<double>(m.activity.data(), m.activity.data() + m.activity.size())}});
  }
  std::ofstream(path) << j.dump(2) << '\n';
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(10)
      << "method,generalisation_mean_mm,generalisation_std_mm,specificity_mean_mm,specificity_std_mm,"
         "volume_variability_mm3,mean_activity\n";
  for (const auto& r : rows) {
    const CohortMetrics& m = r.metrics;
    out << r.method << ',' << m.generalisation_mm.mean << ',' << m.generalisation_mm.std << ','
        << m.specificity_mm.mean << ',' << m.specificity_mm.std << ',' << m.volume_variability_mm3 << ','
        << (m.activity.size() > 0 ? m.activity.mean() : 0.0) << '\n';
  }
}

Evaluation evaluate_generator(const EvaluationInputs& in) {
  if (!in.generator) throw std::invalid_argument("evaluate_generator: no generator");
  Evaluation ev;
  ev.metrics.generalisation_mm = generalisation_error(*in.generator, in.test, in.test_covariates);
  std::mt19937_64 rng(in.seed);
  ev.generated = in.generator->sample(in.sample_covariates, rng);
  ev.metrics.specificity_mm = specificity_error(ev.generated, in.real);
  for (const auto& g : ev.generated) ev.generated_volumes.push_back(in.layout.blood_pool_volume(g));
  ev.metrics.volume_variability_mm3 = volume_variability(ev.generated_volumes);
  const Eigen::MatrixXd means = in.generator->latent_means(in.test, in.test_covariates);
  ev.metrics.activity = means.cols() > 0 && means.rows() >= 2 ? latent_activity(means) : Eigen::VectorXd();
  return ev;
}

}  // namespace cvaenf
