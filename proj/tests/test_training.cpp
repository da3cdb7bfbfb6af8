#include <doctest.h>

#include "cvaenf/training.hpp"
#include "toy.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>

using namespace cvaenf;
using ad::Matrix;
using ad::Tape;

namespace {

struct ToyProblem {
  std::shared_ptr<const SamplingHierarchy> hierarchy = toy::icosahedron_hierarchy();
  std::vector<Positions> shapes = toy::jittered_shapes(24, 3);
  Eigen::MatrixXd covariates = toy::random_matrix(24, 2, 4);

  TrainingData data(Index begin, Index count) const {
    TrainingData d;
    for (Index i = begin; i < begin + count; ++i) d.shapes.push_back(&shapes[i]);
    d.covariates = covariates.middleRows(begin, count);
    return d;
  }
  MeshBatch batch(Index begin, Index count) const {
    TrainingData d = data(begin, count);
    return MeshBatch::from(d.shapes, d.covariates);
  }
  ShapeNormalizer normalizer() const { return ShapeNormalizer::fit(shapes); }
};

double loss_value(CvaeNfModel& model, const MeshBatch& batch, const Matrix& noise, KlObjective obj) {
  Tape t;
  return elbo_loss(t, model, batch, noise, 1.0, obj, 0.5).values.total;
}

// Largest per-tensor relative error between tape gradients and central differences.
double worst_gradient_error(CvaeNfModel& model, const MeshBatch& batch, const Matrix& noise, KlObjective obj) {
  Tape t;
  const Loss loss = elbo_loss(t, model, batch, noise, 1.0, obj, 0.5);
  model.zero_grad();
  t.backward(loss.total);
  double worst = 0;
  const double h = 1e-4;
  for (ad::Parameter* p : model.parameters()) {
    Matrix numeric(p->value.rows(), p->value.cols());
    for (Index k = 0; k < p->value.size(); ++k) {
      const double saved = p->value.data()[k];
      p->value.data()[k] = saved + h;
      const double up = loss_value(model, batch, noise, obj);
      p->value.data()[k] = saved - h;
      const double down = loss_value(model, batch, noise, obj);
      p->value.data()[k] = saved;
      numeric.data()[k] = (up - down) / (2 * h);
    }
    // Biases feeding batch norm have an exactly zero gradient; the floor keeps
    // their comparison from dividing rounding noise by rounding noise.
    const double scale = std::max({p->grad.norm(), numeric.norm(), 1e-6});
    const double rel = (p->grad - numeric).norm() / scale;
    if (rel > 1e-3 || std::getenv("GRAD_VERBOSE")) MESSAGE(p->name << " relative error " << rel);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace

TEST_CASE("full loss gradients match central differences") {
  ToyProblem toy_problem;
  for (KlObjective obj : {KlObjective::FlowedMc, KlObjective::AnalyticQ0}) {
    CvaeNfModel model(toy::tiny_config(1), toy_problem.hierarchy, toy::unit_schema(2), toy_problem.normalizer(), 1);
    toy::randomize_parameters(model, 40);
    const MeshBatch batch = toy_problem.batch(0, 3);
    const Matrix noise = toy::random_matrix(3, 2, 41);
    CHECK(worst_gradient_error(model, batch, noise, obj) < 1e-3);
  }
}

TEST_CASE("elbo_loss special cases") {
  ToyProblem tp;
  CvaeNfModel model(toy::tiny_config(2), tp.hierarchy, toy::unit_schema(2), tp.normalizer(), 1);
  toy::randomize_parameters(model, 7);
  const MeshBatch batch = tp.batch(0, 4);
  const Matrix noise = toy::random_matrix(4, 2, 8);

  SUBCASE("beta = 0 leaves only the reconstruction term") {
    Tape t;
    const Loss l = elbo_loss(t, model, batch, noise, 0.0, KlObjective::FlowedMc, 1.0);
    CHECK(l.values.total == l.values.recon_nll);
  }
  SUBCASE("reconstruction term is the scaled squared error") {
    Tape t;
    const auto pass = model.forward(t, batch, noise, Mode::Train);
    const Loss l = elbo_from_forward(t, pass, batch, noise, 0.0, KlObjective::FlowedMc, 2.0);
    const double sse = (pass.reconstruction.value() - batch.positions).squaredNorm();
    CHECK(l.values.recon_nll == doctest::Approx(sse / (2 * 4.0) / 4.0).epsilon(1e-12));
  }
  SUBCASE("total = recon + beta * kl") {
    Tape t;
    const Loss l = elbo_loss(t, model, batch, noise, 0.3, KlObjective::AnalyticQ0, 1.0);
    CHECK(l.values.total == doctest::Approx(l.values.recon_nll + 0.3 * l.values.kl_term).epsilon(1e-12));
  }
  SUBCASE("beta outside [0, 1] is rejected") {
    Tape t;
    CHECK_THROWS(elbo_loss(t, model, batch, noise, 1.5, KlObjective::AnalyticQ0, 1.0));
  }
}

TEST_CASE("analytic KL of a standard-normal posterior is zero") {
  CHECK(analytic_kl(Matrix::Zero(3, 5), Matrix::Zero(3, 5)).norm() == 0.0);
  // One dimension: mu = 1, sigma = e^0.5 -> 0.5 (1 + e - 1 - 1).
  CHECK(analytic_kl(Matrix::Ones(1, 1), Matrix::Constant(1, 1, 0.5))(0) ==
        doctest::Approx(0.5 * (1 + std::exp(1.0) - 1 - 1)).epsilon(1e-14));
}

TEST_CASE("Monte-Carlo KL estimate agrees with the closed form without flows") {
  // A synthetic forward record with z_K = z0 and zero log-determinants.
  const Index draws = 100000, d = 3;
  const Eigen::RowVector3d mu(0.4, -1.2, 0.1), ls(-0.3, 0.2, 0.0);
  const Matrix eps = toy::random_matrix(draws, d, 77);
  Matrix mu_rows = mu.replicate(draws, 1), ls_rows = ls.replicate(draws, 1);
  Matrix z0 = mu_rows + (ls_rows.array().exp() * eps.array()).matrix();
  Tape t;
  CvaeNfModel::ForwardPass pass;
  pass.reconstruction = t.constant(Matrix::Zero(1, 3 * draws));
  pass.mu = t.constant(mu_rows);
  pass.log_sigma = t.constant(ls_rows);
  pass.z0 = t.constant(z0);
  pass.z_final = pass.z0;
  pass.sum_log_det = t.constant(Matrix::Zero(draws, 1));
  MeshBatch batch;
  batch.positions = Matrix::Zero(1, 3 * draws);
  batch.covariates = Matrix::Zero(draws, 0);
  const Loss mc = elbo_from_forward(t, pass, batch, eps, 1.0, KlObjective::FlowedMc, 1.0);

  // Per-draw oracle values for the standard error.
  const Eigen::ArrayXd per = (-ls_rows.array() - 0.5 * eps.array().square() + 0.5 * z0.array().square()).rowwise().sum();
  const double se = std::sqrt((per - per.mean()).square().mean() / static_cast<double>(draws));
  const double exact = analytic_kl(mu, ls)(0);
  CHECK(std::abs(mc.values.kl_term - exact) < 3 * se);
  CHECK(mc.values.kl_term == doctest::Approx(per.mean()).epsilon(1e-10));
}

TEST_CASE("flowed objective is an unbiased estimate of the analytic bound without flows") {
  ToyProblem tp;
  CvaeNfModel model(toy::tiny_config(0), tp.hierarchy, toy::unit_schema(2), tp.normalizer(), 3);
  toy::randomize_parameters(model, 12);
  const MeshBatch batch = tp.batch(0, 1);
  // Noise enters the reconstruction term too, so average both objectives over the same draws.
  std::vector<double> diff;
  for (int r = 0; r < 400; ++r) {
    const Matrix noise = toy::random_matrix(1, 2, 1000 + r);
    Tape t1, t2;
    const double mc = elbo_loss(t1, model, batch, noise, 1.0, KlObjective::FlowedMc, 1.0, Mode::Eval).values.total;
    const double an = elbo_loss(t2, model, batch, noise, 1.0, KlObjective::AnalyticQ0, 1.0, Mode::Eval).values.total;
    diff.push_back(mc - an);
  }
  double m = 0;
  for (double x : diff) m += x / diff.size();
  double v = 0;
  for (double x : diff) v += (x - m) * (x - m) / diff.size();
  CHECK(m >= -3 * std::sqrt(v / diff.size()));
  CHECK(std::abs(m) < 3 * std::sqrt(v / diff.size()) + 1e-12);
}

TEST_CASE("kl_warmup") {
  CHECK(kl_warmup(0, 100) == 0.0);
  CHECK(kl_warmup(100, 100) == 1.0);
  CHECK(kl_warmup(50, 100) == 0.5);
  CHECK(kl_warmup(250, 100) == 1.0);
  CHECK(kl_warmup(0, 0) == 1.0);
  double prev = 0;
  for (Index e = 0; e < 300; ++e) {
    CHECK(kl_warmup(e, 70) >= prev);
    prev = kl_warmup(e, 70);
  }
  CHECK_THROWS(kl_warmup(-1, 10));
}

TEST_CASE("split_dataset") {
  const DatasetSplit s = split_dataset(2360);
  CHECK(s.train.size() == 422);
  CHECK(s.validation.size() == 59);
  CHECK(s.test.size() == 1879);
  std::vector<int> seen(2360, 0);
  for (const auto* part : {&s.train, &s.validation, &s.test})
    for (Index i : *part) ++seen[i];
  for (int c : seen) CHECK(c == 1);

  const DatasetSplit t = split_dataset(10, {0.8, 0.1, 0.1}, 4);
  CHECK(t.train.size() == 8);
  CHECK(t.validation.size() == 1);
  CHECK(t.test.size() == 1);
  CHECK(split_dataset(10, {0.8, 0.1, 0.1}, 4).train == t.train);
  CHECK_THROWS(split_dataset(2));
}

TEST_CASE("AdamW leaves decay-free parameters alone under zero gradients") {
  ad::Parameter free("bias", toy::random_matrix(2, 3, 1), false);
  ad::Parameter decayed("weight", toy::random_matrix(2, 3, 2), true);
  const Matrix f0 = free.value, d0 = decayed.value;
  AdamW opt(1e-3, 1e-2);
  for (int i = 0; i < 5; ++i) opt.step({&free, &decayed});
  CHECK((free.value - f0).norm() == 0.0);
  CHECK((decayed.value - d0 * std::pow(1 - 1e-5, 5)).norm() < 1e-15);
}

TEST_CASE("gradient clipping rescales to the global norm") {
  ad::Parameter a("a", Matrix::Zero(1, 2)), b("b", Matrix::Zero(1, 1));
  a.grad << 3, 0;
  b.grad << 4;
  CHECK(clip_gradients({&a, &b}, 1.0) == doctest::Approx(5.0));
  CHECK(std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm()) == doctest::Approx(1.0));
}

TEST_CASE("training descends, is reproducible, and respects the warm-up") {
  ToyProblem tp;
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.warmup_epochs = 50;
  cfg.batch_size = 8;
  cfg.learning_rate = 3e-3;
  cfg.recon_sigma = 0.1;
  cfg.seed = 5;
  auto run = [&] {
    CvaeNfModel model(toy::tiny_config(1), tp.hierarchy, toy::unit_schema(2), tp.normalizer(), 9);
    Trainer trainer(model, cfg);
    return trainer.fit(tp.data(0, 20), tp.data(20, 4));
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.size() == 50);
  CHECK(a.back().loss.recon_nll < a.front().loss.recon_nll);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].loss.total == b[i].loss.total);
    CHECK(a[i].val_generalisation_mm == b[i].val_generalisation_mm);
    CHECK(a[i].beta < 1.0);
  }
}

TEST_CASE("one training step makes the posterior mean covariate-sensitive") {
  ToyProblem tp;
  CvaeNfModel model(toy::tiny_config(1), tp.hierarchy, toy::unit_schema(2), tp.normalizer(), 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 24;
  Trainer trainer(model, cfg);
  trainer.run_epoch(tp.data(0, 24), TrainingData{});
  const Eigen::VectorXd c1 = Eigen::Vector2d(0, 0), c2 = Eigen::Vector2d(0, 1);
  CHECK((model.encode(tp.shapes[0], c1).mu - model.encode(tp.shapes[0], c2).mu).norm() > 0.0);
}

TEST_CASE("checkpoint round trip preserves the validation loss") {
  ToyProblem tp;
  ShellLayout layout;
  layout.endo = tp.hierarchy->levels[0].topology;
  CvaeNfModel model(toy::tiny_config(2), tp.hierarchy, toy::unit_schema(2), tp.normalizer(), 2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 6;
  Trainer trainer(model, cfg);
  trainer.fit(tp.data(0, 18), tp.data(18, 6));
  const auto dir = std::filesystem::temp_directory_path() / "cvaenf_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, model, CheckpointInfo{trainer.epoch(), trainer.best_score(), layout, cfg}, &trainer.optimizer());
  AdamW opt(1e-3, 1e-2);
  LoadedCheckpoint loaded = load_checkpoint(dir, &opt);
  CHECK(loaded.info.epoch == 3);
  CHECK(opt.steps() == trainer.optimizer().steps());
  CHECK(loaded.model->trained());
  const auto before = reconstruction_error(model, tp.data(18, 6));
  const auto after = reconstruction_error(*loaded.model, tp.data(18, 6));
  CHECK(std::abs(before.first - after.first) < 1e-6);
  const MeshBatch val = tp.batch(18, 6);
  const Matrix noise = toy::random_matrix(6, 2, 3);
  Tape t1, t2;
  const double l1 = elbo_loss(t1, model, val, noise, 1.0, KlObjective::FlowedMc, 1.0, Mode::Eval).values.total;
  const double l2 = elbo_loss(t2, *loaded.model, val, noise, 1.0, KlObjective::FlowedMc, 1.0, Mode::Eval).values.total;
  CHECK(std::abs(l1 - l2) < 1e-6);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config parsing rejects unknown keys and invalid values") {
  TrainConfig c = nlohmann::json{{"learning_rate", 0.01}, {"kl_objective", "analytic_q0"}}.get<TrainConfig>();
  CHECK(c.learning_rate == 0.01);
  CHECK(c.kl_objective == KlObjective::AnalyticQ0);
  CHECK_THROWS_AS(nlohmann::json({{"learnig_rate", 0.01}}).get<TrainConfig>(), ConfigError);
  TrainConfig bad;
  bad.warmup_epochs = bad.epochs + 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig{};
  bad.recon_sigma = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
