#include <doctest.h>

#include "cli_support.hpp"
#include "cvaenf/mesh_io.hpp"
#include "cvaenf/training.hpp"
#include "scratch.hpp"

#include <nlohmann/json.hpp>

#include <iomanip>

using namespace cvaenf;
using clitest::read_csv;
using clitest::run;
using clitest::write_text;
namespace fs = std::filesystem;

namespace {

const char* kSmallSpec = R"({"n_subjects": 30, "subdivisions": 1, "covariates": ["sex", "age", "weight"],
  "couplings": {"weight": {"size": 1.0}, "age": {"size": -0.8, "thickness": 2.5}}, "seed": 3})";

const char* kTinyModel = R"("model": {"latent_dim": 3, "encoder_features": [6, 6], "sampling_factor": 2,
  "sampling_levels": 1, "cheb_order": 3, "flow_steps": 2, "conditioner_hidden": 6})";

std::string train_config(int epochs, const std::string& extra = "") {
  return "{\"epochs\": " + std::to_string(epochs) +
         ", \"warmup_epochs\": 2, \"batch_size\": 8, \"split\": [20, 5, 5], " + kTinyModel + extra + "}";
}

/// Synthetic dataset shared by the CLI tests, generated once.
const fs::path& dataset() {
  static const fs::path dir = [] {
    const fs::path root = scratch::dir("cli_data");
    write_text(root / "spec.json", kSmallSpec);
    REQUIRE(run({"synth", "--config", (root / "spec.json").string(), "--out", (root / "data").string()}).code == 0);
    return root / "data";
  }();
  return dir;
}

/// A 4-epoch training run shared by the eval/sample/manipulate tests.
const fs::path& trained_run() {
  static const fs::path dir = [] {
    const fs::path root = scratch::dir("cli_run");
    write_text(root / "train.json", train_config(4));
    const auto r = run({"train", "--data", dataset().string(), "--config", (root / "train.json").string(), "--out",
                        (root / "run").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return root / "run";
  }();
  return dir;
}

}  // namespace

TEST_CASE("synth writes the dataset layout and a manifest") {
  const fs::path root = scratch::dir("cli_synth");
  write_text(root / "spec.json", R"({"n_subjects": 10, "subdivisions": 0})");
  const auto r = run({"synth", "--config", (root / "spec.json").string(), "--out", (root / "out").string()});
  REQUIRE(r.code == 0);
  int meshes = 0;
  for (const auto& e : fs::directory_iterator(root / "out" / "meshes")) meshes += e.path().extension() == ".ply";
  CHECK(meshes == 20);
  CHECK(read_csv(root / "out" / "covariates.csv").size() == 11);
  CHECK(read_csv(root / "out" / "covariates.csv")[0][0] == "id");
  const auto manifest = nlohmann::json::parse(clitest::slurp(root / "out" / "manifest.json"));
  for (const char* key : {"command", "config", "seed", "outputs", "started_at", "finished_at"})
    CHECK(manifest.contains(key));
}

TEST_CASE("synth is reproducible and reports bad keys") {
  const fs::path root = scratch::dir("cli_synth_repro");
  write_text(root / "spec.json", kSmallSpec);
  REQUIRE(run({"synth", "--config", (root / "spec.json").string(), "--out", (root / "a").string()}).code == 0);
  REQUIRE(run({"synth", "--config", (root / "spec.json").string(), "--out", (root / "b").string()}).code == 0);
  CHECK(clitest::digest(root / "a") == clitest::digest(root / "b"));

  write_text(root / "bad.json", R"({"couplings": {"weight": {"sise": 1.0}}})");
  const auto r = run({"synth", "--config", (root / "bad.json").string(), "--out", (root / "c").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("weight.sise") != std::string::npos);
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"bogus"}).code == 2);
  CHECK(run({"train", "--out", "x"}).code == 2);
  CHECK(run({"eval", "--checkpoint", "/nonexistent", "--data", "/nonexistent", "--out", "x"}).code == 2);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("train writes one metrics row per epoch and checkpoints") {
  const fs::path run_dir = trained_run();
  const auto rows = read_csv(run_dir / "metrics.csv");
  REQUIRE(rows.size() == 5);
  CHECK(rows[0][0] == "epoch");
  for (int e = 0; e < 4; ++e) CHECK(rows[static_cast<std::size_t>(e + 1)][0] == std::to_string(e));
  for (const char* f : {"model.json", "weights.bin", "split.json"}) {
    CHECK(fs::exists(run_dir / "best" / f));
    CHECK(fs::exists(run_dir / "final" / f));
  }
  CHECK(fs::exists(run_dir / "final" / "optimizer.bin"));
  const auto meta = nlohmann::json::parse(clitest::slurp(run_dir / "final" / "model.json"));
  CHECK(meta.at("epoch") == 4);
  CHECK(meta.at("flow_steps") == 2);
  CHECK(meta.at("covariates").at("names").size() == 3);
}

TEST_CASE("--flow-steps 0 trains the plain conditional VAE") {
  const fs::path root = scratch::dir("cli_vae");
  write_text(root / "train.json", train_config(2));
  const auto r = run({"train", "--data", dataset().string(), "--config", (root / "train.json").string(), "--out",
                      (root / "run").string(), "--flow-steps", "0", "--kl-objective", "analytic_q0"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto meta = nlohmann::json::parse(clitest::slurp(root / "run" / "final" / "model.json"));
  CHECK(meta.at("flow_steps") == 0);
  CHECK(meta.at("train_config").at("kl_objective") == "analytic_q0");
  CHECK(r.out.find("cvae ") != std::string::npos);
}

TEST_CASE("resumed training continues the epoch count and the loss curve") {
  const fs::path root = scratch::dir("cli_resume");
  write_text(root / "short.json", train_config(4));
  write_text(root / "long.json", train_config(7));
  const std::string data = dataset().string();
  REQUIRE(run({"train", "--data", data, "--config", (root / "long.json").string(), "--out", (root / "straight").string()})
              .code == 0);
  REQUIRE(run({"train", "--data", data, "--config", (root / "short.json").string(), "--out", (root / "split").string()})
              .code == 0);
  const auto r = run({"train", "--data", data, "--config", (root / "long.json").string(), "--out",
                      (root / "split").string(), "--resume", (root / "split" / "final").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto straight = read_csv(root / "straight" / "metrics.csv");
  const auto resumed = read_csv(root / "split" / "metrics.csv");
  REQUIRE(resumed.size() == 8);
  for (int e = 0; e < 7; ++e) CHECK(resumed[static_cast<std::size_t>(e + 1)][0] == std::to_string(e));
  // Continuity against the uninterrupted run over the resumed epochs.
  for (std::size_t e = 5; e < 8; ++e) {
    const double a = std::stod(straight[e][1]), b = std::stod(resumed[e][1]);
    CHECK(std::abs(a - b) <= 0.1 * std::abs(a));
  }
}

TEST_CASE("train reports missing covariate columns and numerical failure") {
  const fs::path root = scratch::dir("cli_train_errors");
  write_text(root / "missing.json", train_config(2, R"(, "covariates": ["age", "pulse"])"));
  auto r = run({"train", "--data", dataset().string(), "--config", (root / "missing.json").string(), "--out",
                (root / "a").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("pulse") != std::string::npos);

  write_text(root / "unknown.json", R"({"epochs": 1, "learning_rat": 0.1})");
  r = run({"train", "--data", dataset().string(), "--config", (root / "unknown.json").string(), "--out",
           (root / "b").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("learning_rat") != std::string::npos);

  write_text(root / "explode.json", train_config(3, R"(, "learning_rate": 1e300, "grad_clip": 1e300)"));
  r = run({"train", "--data", dataset().string(), "--config", (root / "explode.json").string(), "--out",
           (root / "c").string()});
  CHECK(r.code == 3);
}

TEST_CASE("eval of the identity stub has zero generalisation and a PCA row on request") {
  const fs::path root = scratch::dir("cli_eval_identity");
  fs::create_directories(root / "ckpt");
  write_text(root / "ckpt" / "model.json", R"({"kind": "identity"})");
  const auto r = run({"eval", "--checkpoint", (root / "ckpt").string(), "--data", dataset().string(), "--out",
                      (root / "out").string(), "--compare", "pca:k=4", "--samples", "20"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto j = nlohmann::json::parse(clitest::slurp(root / "out" / "metrics.json"));
  REQUIRE(j.at("methods").size() == 2);
  const auto& identity = j.at("methods").at(0);
  CHECK(identity.at("method") == "identity");
  CHECK(identity.at("generalisation_mm").at("mean") == 0.0);
  CHECK(identity.at("specificity_mm").at("mean") == 0.0);
  CHECK(j.at("methods").at(1).at("method") == "pca_k4");
  for (const auto& m : j.at("methods"))
    for (const char* key : {"generalisation_mm", "specificity_mm", "volume_variability_mm3", "activity"})
      CHECK(m.contains(key));
  CHECK(read_csv(root / "out" / "metrics.csv").size() == 3);
  CHECK(read_csv(root / "out" / "kde.csv")[0] == std::vector<std::string>{"group", "volume_mm3", "density"});
}

TEST_CASE("eval of a trained checkpoint and topology mismatch") {
  const fs::path root = scratch::dir("cli_eval");
  auto r = run({"eval", "--checkpoint", (trained_run() / "best").string(), "--data", dataset().string(), "--out",
                (root / "out").string(), "--samples", "10"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(fs::exists(root / "out" / "activity_cvae_nf.csv"));
  CHECK(read_csv(root / "out" / "activity_cvae_nf.csv").size() == 4);

  write_text(root / "spec.json", R"({"n_subjects": 4, "subdivisions": 0, "covariates": ["sex", "age", "weight"]})");
  REQUIRE(run({"synth", "--config", (root / "spec.json").string(), "--out", (root / "other").string()}).code == 0);
  r = run({"eval", "--checkpoint", (trained_run() / "best").string(), "--data", (root / "other").string(), "--out",
           (root / "out2").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("topology") != std::string::npos);
}

TEST_CASE("sample writes n shapes per covariate row, reproducibly") {
  const fs::path root = scratch::dir("cli_sample");
  write_text(root / "cov.csv", "id,weight,age,sex\nrow,80,60,1\n");
  const std::string ck = (trained_run() / "best").string();
  for (const char* out : {"a", "b"})
    REQUIRE(run({"sample", "--checkpoint", ck, "--covariates", (root / "cov.csv").string(), "--n", "5", "--seed", "9",
                 "--out", (root / out).string()})
                .code == 0);
  const auto rows = read_csv(root / "a" / "volumes.csv");
  REQUIRE(rows.size() == 6);
  CHECK(rows[0] == std::vector<std::string>{"id", "BPVol", "MyoVol"});
  CHECK(rows[1][0] == "row_0");
  CHECK(fs::exists(root / "a" / "meshes" / "row_4_epi.ply"));
  CHECK(clitest::digest(root / "a") == clitest::digest(root / "b"));

  write_text(root / "partial.csv", "id,weight,age\nrow,80,60\n");
  const auto r = run({"sample", "--checkpoint", ck, "--covariates", (root / "partial.csv").string(), "--out",
                      (root / "c").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("sex") != std::string::npos);
}

TEST_CASE("manipulate: single step at the original value is the reconstruction") {
  const fs::path root = scratch::dir("cli_manipulate");
  const fs::path ck = trained_run() / "best";
  const ShapeDataset ds = load_dataset(dataset(), {"sex", "age", "weight"});
  const double weight = ds.covariates(3, 2);
  std::ostringstream range;
  range << std::setprecision(17) << weight << ':' << weight;
  const auto r = run({"manipulate", "--checkpoint", ck.string(), "--data", dataset().string(), "--subject", ds.ids[3],
                      "--attribute", "weight", "--range", range.str(), "--steps", "1", "--out", (root / "out").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);

  const LoadedCheckpoint loaded = load_checkpoint(ck);
  const Positions expected = loaded.model->reconstruct(
      ds.shapes[3], loaded.model->covariates().standardize(ds.covariates.row(3).transpose()));
  const SurfaceMesh endo = load_mesh(root / "out" / "meshes" / "step0_endo.ply");
  const SurfaceMesh epi = load_mesh(root / "out" / "meshes" / "step0_epi.ply");
  const Positions got = ds.layout.combine(endo.positions(), epi.positions());
  CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-9);
  const auto rows = read_csv(root / "out" / "manipulation.csv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0] == std::vector<std::string>{"step", "weight", "BPVol", "MyoVol"});
}

TEST_CASE("manipulate rejects unknown attributes and bad ranges") {
  const fs::path root = scratch::dir("cli_manipulate_errors");
  const std::string ck = (trained_run() / "best").string();
  auto r = run({"manipulate", "--checkpoint", ck, "--data", dataset().string(), "--attribute", "shoe_size", "--range",
                "0:1", "--out", (root / "a").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("shoe_size") != std::string::npos);
  r = run({"manipulate", "--checkpoint", ck, "--data", dataset().string(), "--attribute", "age", "--range", "10",
           "--out", (root / "b").string()});
  CHECK(r.code == 2);
  r = run({"manipulate", "--checkpoint", ck, "--data", dataset().string(), "--attribute", "age", "--range", "-5:70",
           "--steps", "3", "--out", (root / "c").string()});
  CHECK(r.code == 0);
  CHECK(read_csv(root / "c" / "manipulation.csv")[1][1] == "-5");
}

TEST_CASE("flow-demo exports the density grid") {
  const fs::path root = scratch::dir("cli_flow_demo");
  REQUIRE(run({"flow-demo", "--out", (root / "a").string(), "--resolution", "20"}).code == 0);
  REQUIRE(run({"flow-demo", "--out", (root / "b").string(), "--resolution", "20"}).code == 0);
  const auto rows = read_csv(root / "a" / "density.csv");
  REQUIRE(rows.size() == 401);
  CHECK(rows[0] == std::vector<std::string>{"zx", "zy", "density"});
  CHECK(clitest::slurp(root / "a" / "density.csv") == clitest::slurp(root / "b" / "density.csv"));
  CHECK(run({"flow-demo", "--out", (root / "c").string(), "--flow-steps", "-1"}).code == 2);
}
