#include <doctest.h>

#include "cvaenf/evaluation.hpp"
#include "cvaenf/primitives.hpp"
#include "cvaenf/stats.hpp"
#include "scratch.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <numbers>

using namespace cvaenf;

namespace {

std::vector<Positions> random_cohort(int count, Index n_vertices, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sd);
  std::vector<Positions> out;
  for (int k = 0; k < count; ++k) {
    Positions p(n_vertices, 3);
    for (Index i = 0; i < n_vertices; ++i)
      for (int c = 0; c < 3; ++c) p(i, c) = g(rng);
    out.push_back(p);
  }
  return out;
}

std::vector<const Positions*> ptrs(const std::vector<Positions>& v) {
  std::vector<const Positions*> out;
  for (const auto& p : v) out.push_back(&p);
  return out;
}

/// Always returns a fixed shape.
class MeanShapeGenerator : public ShapeGenerator {
 public:
  explicit MeanShapeGenerator(Positions mean) : mean_(std::move(mean)) {}
  std::string kind() const override { return "mean"; }
  Positions reconstruct(const Positions&, const Eigen::VectorXd&) const override { return mean_; }
  std::vector<Positions> sample(const Eigen::MatrixXd& c, std::mt19937_64&) const override {
    return std::vector<Positions>(static_cast<std::size_t>(c.rows()), mean_);
  }
  Eigen::MatrixXd latent_means(const std::vector<const Positions*>& s, const Eigen::MatrixXd&) const override {
    return Eigen::MatrixXd::Zero(static_cast<Index>(s.size()), 2);
  }

 private:
  Positions mean_;
};

// shapes = mean + sum_j sqrt(var_j) * g_j * mode_j with orthonormal modes.
std::vector<Positions> linear_population(int count, Index n_vertices, const std::vector<double>& variances,
                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const Index dim = 3 * n_vertices;
  Eigen::MatrixXd basis = Eigen::MatrixXd::NullaryExpr(dim, static_cast<Index>(variances.size()), [&]() { return g(rng); });
  const Eigen::MatrixXd modes = Eigen::HouseholderQR<Eigen::MatrixXd>(basis).householderQ() *
                                Eigen::MatrixXd::Identity(dim, static_cast<Index>(variances.size()));
  Eigen::VectorXd mean = Eigen::VectorXd::NullaryExpr(dim, [&]() { return g(rng); });
  std::vector<Positions> out;
  for (int k = 0; k < count; ++k) {
    Eigen::VectorXd x = mean;
    for (std::size_t j = 0; j < variances.size(); ++j)
      x += std::sqrt(variances[j]) * g(rng) * modes.col(static_cast<Index>(j));
    Positions p(n_vertices, 3);
    for (Index i = 0; i < n_vertices; ++i) p.row(i) = x.segment<3>(3 * i).transpose();
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_CASE("generalisation of stub generators") {
  const auto test = random_cohort(6, 10, 1);
  const Eigen::MatrixXd cov(6, 0);
  const MeanStd id = generalisation_error(IdentityGenerator(), ptrs(test), cov);
  CHECK(id.mean == 0.0);
  CHECK(id.std == 0.0);

  const auto train = random_cohort(8, 10, 2);
  Positions mean = Positions::Zero(10, 3);
  for (const auto& p : train) mean += p / 8.0;
  const MeanStd m = generalisation_error(MeanShapeGenerator(mean), ptrs(test), cov);
  std::vector<double> d;
  for (const auto& p : test) d.push_back(mean_vertex_distance(p, mean));
  CHECK(m.mean == doctest::Approx(stats::mean(d)).epsilon(1e-14));
  CHECK(m.std == doctest::Approx(stats::population_std(d)).epsilon(1e-12));
  CHECK_THROWS_AS(generalisation_error(IdentityGenerator(), {}, cov), std::invalid_argument);
}

TEST_CASE("specificity oracles") {
  const auto real = random_cohort(5, 8, 3);
  SUBCASE("subset of the real cohort") {
    const std::vector<Positions> gen = {real[4], real[1], real[1]};
    const MeanStd s = specificity_error(gen, ptrs(real));
    CHECK(s.mean == 0.0);
    CHECK(s.std == 0.0);
  }
  SUBCASE("3 generated vs 2 real brute force") {
    const auto gen = random_cohort(3, 8, 4);
    const std::vector<Positions> two = {real[0], real[1]};
    std::vector<double> minima;
    for (const auto& g : gen)
      minima.push_back(std::min(mean_vertex_distance(g, two[0]), mean_vertex_distance(g, two[1])));
    const MeanStd s = specificity_error(gen, two);
    CHECK(s.mean == doctest::Approx(stats::mean(minima)).epsilon(1e-14));
    CHECK(s.std == doctest::Approx(stats::population_std(minima)).epsilon(1e-12));
  }
  SUBCASE("single real mesh") {
    const auto gen = random_cohort(4, 8, 5);
    std::vector<double> d;
    for (const auto& g : gen) d.push_back(mean_vertex_distance(g, real[2]));
    CHECK(specificity_error(gen, std::vector<Positions>{real[2]}).mean == doctest::Approx(stats::mean(d)));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(specificity_error(random_cohort(2, 9, 6), ptrs(real)), MeshError);
    CHECK_THROWS_AS(specificity_error(std::vector<Positions>{}, ptrs(real)), std::invalid_argument);
  }
}

TEST_CASE("specificity is nonincreasing as the real cohort grows") {
  const auto gen = random_cohort(10, 8, 7);
  const auto real = random_cohort(12, 8, 8);
  double previous = std::numeric_limits<double>::infinity();
  std::vector<const Positions*> growing;
  for (const auto& r : real) {
    growing.push_back(&r);
    const double s = specificity_error(gen, growing).mean;
    CHECK(s <= previous);
    previous = s;
  }
}

TEST_CASE("volume variability") {
  const SurfaceMesh ico = make_icosphere(1.0, 3);
  CHECK(volume_variability(std::vector<SurfaceMesh>(3, ico)) == 0.0);

  const SurfaceMesh a = make_icosphere(1.0, 4), b = make_icosphere(2.0, 4);
  const double v1 = 4.0 * std::numbers::pi / 3.0, v2 = 32.0 * std::numbers::pi / 3.0;
  CHECK(volume_variability({a, b}) == doctest::Approx(stats::population_std({v1, v2})).epsilon(0.01));
  CHECK(volume_variability(std::vector<double>{1.0, 3.0}) == 1.0);
  CHECK_THROWS_AS(volume_variability(std::vector<SurfaceMesh>{a}), std::invalid_argument);

  std::vector<SurfaceMesh> cohort;
  for (double r : {0.8, 1.0, 1.3, 1.1}) cohort.push_back(make_icosphere(r, 2));
  const double base = volume_variability(cohort);
  std::vector<SurfaceMesh> moved, permuted(cohort.rbegin(), cohort.rend());
  for (const auto& m : cohort) {
    Positions p = m.positions();
    p.rowwise() += Eigen::RowVector3d(40, -7, 2.5);
    moved.push_back(m.with_positions(p));
  }
  CHECK(volume_variability(moved) == doctest::Approx(base).epsilon(1e-9));
  CHECK(volume_variability(permuted) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("latent activity oracles") {
  const auto shapes = random_cohort(7, 12, 9);
  const Eigen::MatrixXd cov(7, 0);
  SUBCASE("constant encoder") {
    const LatentEncoder constant = [](const Positions&, const Eigen::VectorXd&) { return Eigen::VectorXd::Ones(4); };
    CHECK(latent_activity(constant, ptrs(shapes), cov).norm() == 0.0);
  }
  SUBCASE("volume stub encoder") {
    const SurfaceMesh ico = make_icosphere(1.0, 1);
    std::vector<Positions> spheres;
    std::vector<double> volumes;
    for (double r : {0.7, 1.0, 1.2, 1.5, 0.9}) {
      spheres.push_back(ico.positions() * r);
      volumes.push_back(enclosed_volume(spheres.back(), ico.topology()));
    }
    const LatentEncoder enc = [&](const Positions& p, const Eigen::VectorXd&) {
      Eigen::VectorXd z = Eigen::VectorXd::Zero(3);
      z[0] = enclosed_volume(p, ico.topology());
      return z;
    };
    const Eigen::VectorXd a = latent_activity(enc, ptrs(spheres), Eigen::MatrixXd(5, 0));
    const double sd = stats::population_std(volumes);
    CHECK(a[0] == doctest::Approx(sd * sd).epsilon(1e-12));
    CHECK(a[1] == 0.0);
    CHECK(a[2] == 0.0);
  }
  SUBCASE("duplicated mesh") {
    const std::vector<Positions> dup(4, shapes[0]);
    const LatentEncoder enc = [](const Positions& p, const Eigen::VectorXd&) {
      return Eigen::VectorXd(p.col(0).head(3));
    };
    CHECK(latent_activity(enc, ptrs(dup), Eigen::MatrixXd(4, 0)).norm() == 0.0);
  }
  SUBCASE("sum of activity is the covariance trace") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    const Eigen::MatrixXd mu = Eigen::MatrixXd::NullaryExpr(50, 6, [&]() { return g(rng); });
    CHECK(latent_activity(mu).sum() == doctest::Approx(stats::population_covariance(mu).trace()).epsilon(1e-12));
    CHECK_THROWS_AS(latent_activity(Eigen::MatrixXd(1, 3)), std::invalid_argument);
  }
}

TEST_CASE("PCA with k equal to the rank reconstructs training shapes exactly") {
  const auto train = random_cohort(6, 10, 11);
  const PcaSsm ssm = fit_pca_ssm(train, 5);
  CHECK((ssm.modes.transpose() * ssm.modes - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-10);
  for (Index j = 1; j < 5; ++j) CHECK(ssm.eigenvalues[j] <= ssm.eigenvalues[j - 1]);
  for (const auto& p : train) CHECK((pca_reconstruct(ssm, p) - p).cwiseAbs().maxCoeff() < 1e-6);
  CHECK_THROWS_AS(fit_pca_ssm(train, 6), std::invalid_argument);
}

TEST_CASE("PCA recovers the variances of a two-mode linear model") {
  const auto pop = linear_population(20000, 15, {4.0, 1.0}, 12);
  const PcaSsm ssm = fit_pca_ssm(pop, 2);
  CHECK(ssm.eigenvalues[0] == doctest::Approx(4.0).epsilon(0.05));
  CHECK(ssm.eigenvalues[1] == doctest::Approx(1.0).epsilon(0.05));
  std::mt19937_64 rng(1);
  std::vector<double> first;
  for (int i = 0; i < 4000; ++i) first.push_back(pca_coefficients(ssm, pca_sample(ssm, rng))[0]);
  CHECK(stats::population_std(first) == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("PCA generalisation improves up to the generating dimension") {
  const auto train = linear_population(200, 12, {9.0, 4.0, 1.0}, 13);
  const auto test = linear_population(50, 12, {9.0, 4.0, 1.0}, 13);  // same mean and modes, new draws
  const Eigen::MatrixXd cov(50, 0);
  std::vector<double> errors;
  for (Index k = 1; k <= 3; ++k)
    errors.push_back(generalisation_error(PcaGenerator(fit_pca_ssm(train, k)), ptrs(test), cov).mean);
  CHECK(errors[2] < errors[1]);
  CHECK(errors[1] < errors[0]);
  CHECK(errors[2] < 1e-8);
}

TEST_CASE("kernel density estimates") {
  SUBCASE("two-point closed form") {
    const double expected = std::exp(-0.5) / std::sqrt(2 * std::numbers::pi);
    CHECK(gaussian_kde({1.0, 3.0}, 1.0, 2.0) == doctest::Approx(expected).epsilon(1e-14));
  }
  SUBCASE("identical volumes use the bandwidth floor") {
    const auto curves = subgroup_volume_density({5.0, 5.0, 5.0}, {"a", "a", "a"}, 0.0, 11);
    REQUIRE(curves.size() == 1);
    CHECK(curves[0].density.allFinite());
    CHECK(curves[0].density.maxCoeff() > 0.0);
  }
  SUBCASE("disjoint groups keep their ordering") {
    const std::vector<double> v = {100, 104, 98, 101, 200, 210, 205, 199};
    const std::vector<std::string> g = {"low", "low", "low", "low", "high", "high", "high", "high"};
    std::vector<std::string> skipped;
    const auto curves = subgroup_volume_density(v, g, 0.0, 400, &skipped);
    REQUIRE(curves.size() == 2);
    CHECK(skipped.empty());
    CHECK(curves[0].grid == curves[1].grid);
    auto argmax = [](const KdeCurve& c) {
      Index i = 0;
      c.density.maxCoeff(&i);
      return c.grid[i];
    };
    const KdeCurve& low = curves[0].group == "low" ? curves[0] : curves[1];
    const KdeCurve& high = curves[0].group == "low" ? curves[1] : curves[0];
    CHECK(argmax(low) < argmax(high));
  }
  SUBCASE("small groups are skipped") {
    std::vector<std::string> skipped;
    const auto curves = subgroup_volume_density({1, 2, 3}, {"a", "a", "b"}, 1.0, 50, &skipped);
    CHECK(curves.size() == 1);
    CHECK(skipped == std::vector<std::string>{"b"});
  }
}

TEST_CASE("evaluation reports carry every metric") {
  const auto real = random_cohort(5, 8, 14);
  IdentityGenerator gen(real);
  EvaluationInputs in;
  in.generator = &gen;
  in.test = ptrs(real);
  in.test_covariates = Eigen::MatrixXd(5, 0);
  in.real = ptrs(real);
  in.sample_covariates = Eigen::MatrixXd(10, 0);
  // Cube connectivity over the 8 random vertices, so volumes are defined.
  in.layout.endo = make_cube(1.0).topology_ptr();
  const Evaluation ev = evaluate_generator(in);
  CHECK(ev.metrics.generalisation_mm.mean == 0.0);
  CHECK(ev.metrics.specificity_mm.mean == 0.0);
  CHECK(ev.generated.size() == 10);
  CHECK(ev.generated_volumes.size() == 10);

  const auto dir = scratch::dir("evaluation");
  write_metrics_json({{"identity", ev.metrics}}, 1.5, dir / "metrics.json");
  write_metrics_csv({{"identity", ev.metrics}}, dir / "metrics.csv");
  const auto j = nlohmann::json::parse(std::ifstream(dir / "metrics.json"));
  const auto& row = j.at("methods").at(0);
  for (const char* key : {"generalisation_mm", "specificity_mm", "volume_variability_mm3", "activity"})
    CHECK(row.contains(key));
  std::ifstream csv(dir / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header ==
        "method,generalisation_mean_mm,generalisation_std_mm,specificity_mean_mm,specificity_std_mm,"
        "volume_variability_mm3,mean_activity");
}
