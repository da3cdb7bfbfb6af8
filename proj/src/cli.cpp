#include "cvaenf/cli.hpp"

#include "cvaenf/evaluation.hpp"
#include "cvaenf/mesh_io.hpp"
#include "cvaenf/synthdata.hpp"
#include "cvaenf/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>

namespace cvaenf {

namespace fs = std::filesystem;
using nlohmann::json;

FlowChain<double> demo_flow_chain(int steps, std::uint64_t seed) {
  if (steps < 0) throw ConfigError("--flow-steps must be >= 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> offset(0.0, 0.3);
  FlowChain<double> chain(2);
  for (int k = 0; k < steps; ++k) {
    const double t = angle(rng);
    const Eigen::Vector2d dir(std::cos(t), std::sin(t));
    PlanarFlowParams<double> p{2.5 * dir, 3.0 * dir, offset(rng)};
    chain.push_back(p);
  }
  return chain;
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

// FNV-1a over the weights file; stable identifier for a checkpoint's contents.
std::string checkpoint_id(const fs::path& dir) {
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) return "";
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

struct Manifest {
  std::string command;
  std::string started = utc_now();
  json fields = json::object();

  void write(const fs::path& out_dir) const {
    json j = fields;
    j["command"] = command;
    j["started_at"] = started;
    j["finished_at"] = utc_now();
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "manifest.json") << j.dump(2) << '\n';
  }
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  return out;
}

void write_shape(const ShellLayout& layout, const Positions& combined, const fs::path& dir, const std::string& id) {
  if (layout.has_epi()) {
    save_mesh(SurfaceMesh(layout.endo, layout.endo_positions(combined)), dir / (id + "_endo.ply"));
    save_mesh(SurfaceMesh(layout.epi, layout.epi_positions(combined)), dir / (id + "_epi.ply"));
  } else {
    save_mesh(SurfaceMesh(layout.endo, combined), dir / (id + ".ply"));
  }
}

std::string method_name(const ModelConfig& c) {
  std::string base = c.conditional ? "cvae" : "vae";
  return c.flow_steps > 0 ? base + "_nf" : base;
}

json split_json(const ShapeDataset& ds, const DatasetSplit& split) {
  auto ids = [&](const std::vector<Index>& rows) {
    std::vector<std::string> out;
    for (Index r : rows) out.push_back(ds.ids[static_cast<std::size_t>(r)]);
    return out;
  };
  return json{{"train", ids(split.train)}, {"validation", ids(split.validation)}, {"test", ids(split.test)}};
}

std::vector<Index> rows_for(const ShapeDataset& ds, const std::vector<std::string>& ids) {
  std::map<std::string, Index> index;
  for (std::size_t i = 0; i < ds.ids.size(); ++i) index[ds.ids[i]] = static_cast<Index>(i);
  std::vector<Index> rows;
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw DatasetError("split lists subject '" + id + "' missing from the dataset");
    rows.push_back(it->second);
  }
  return rows;
}

// -- synth

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  Manifest manifest{"synth"};
  SynthSpec spec;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw SpecError("cannot open " + a.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw SpecError(a.config + ": " + e.what());
    }
    spec = j.get<SynthSpec>();
  }
  if (a.seed) spec.seed = *a.seed;
  const SynthPopulation pop = generate_population(spec);
  write_population(pop, a.out);
  manifest.fields = {{"config", a.config}, {"seed", spec.seed}, {"outputs", {a.out}}, {"spec", spec}};
  manifest.write(a.out);
  out << "synthesized " << pop.records.size() << " subjects into " << a.out << '\n';
  return kExitOk;
}

// -- train

struct TrainArgs {
  std::string data, config, out, resume, kl_objective;
  std::optional<std::uint64_t> seed;
  std::optional<Index> flow_steps;
};

struct TrainSetup {
  ModelConfig model;
  TrainConfig train;
  std::array<double, 3> split = kDefaultSplitRatios;
  std::vector<std::string> covariates;
};

TrainSetup parse_train_config(const json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainSetup s;
  json rest = j;
  try {
    if (rest.contains("model")) s.model = rest.at("model").get<ModelConfig>();
    if (rest.contains("split")) {
      const auto v = rest.at("split").get<std::vector<double>>();
      if (v.size() != 3) throw ConfigError("split must list three ratios (train, validation, test)");
      std::copy(v.begin(), v.end(), s.split.begin());
    }
    if (rest.contains("covariates")) s.covariates = rest.at("covariates").get<std::vector<std::string>>();
    rest.erase("model");
    rest.erase("split");
    rest.erase("covariates");
    s.train = rest.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  return s;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  Manifest manifest{"train"};
  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);

  TrainSetup setup;
  if (!a.config.empty()) setup = parse_train_config(read_json_file(a.config));

  std::unique_ptr<CvaeNfModel> model;
  CheckpointInfo resumed;
  if (!a.resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(a.resume);
    model = std::move(ck.model);
    resumed = ck.info;
    if (a.config.empty()) setup.train = resumed.train_config;
    setup.model = model->config();
    setup.covariates = model->covariates().names;
    if (a.flow_steps && *a.flow_steps != setup.model.flow_steps)
      throw ConfigError("--flow-steps cannot change when resuming");
  }
  if (a.seed) setup.train.seed = *a.seed;
  if (a.flow_steps) setup.model.flow_steps = *a.flow_steps;
  if (!a.kl_objective.empty()) {
    try {
      setup.train.kl_objective = parse_kl_objective(a.kl_objective);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  setup.model.validate();
  setup.train.validate();

  const ShapeDataset ds = load_dataset(a.data, setup.covariates);
  const DatasetSplit split = split_dataset(ds.size(), setup.split, setup.train.seed);
  if (split.train.empty()) throw ConfigError("training split is empty");

  if (!model) {
    std::vector<Positions> train_shapes;
    for (Index r : split.train) train_shapes.push_back(ds.shapes[static_cast<std::size_t>(r)]);
    const ShapeNormalizer norm = ShapeNormalizer::fit(train_shapes);
    const CovariateSchema schema = CovariateSchema::fit(ds.covariate_names, select_rows(ds.covariates, split.train));
    auto hierarchy = std::make_shared<const SamplingHierarchy>(build_sampling_hierarchy(
        ds.topology, norm.mean, setup.model.sampling_factor, setup.model.sampling_levels));
    model = std::make_unique<CvaeNfModel>(setup.model, hierarchy, schema, norm, setup.train.seed);
  } else if (!(model->topology() == *ds.topology)) {
    throw MeshError("checkpoint topology does not match the dataset");
  }

  const TrainingData train = make_training_data(ds, split.train, model->covariates());
  const TrainingData validation = make_training_data(ds, split.validation, model->covariates());

  Trainer trainer(*model, setup.train);
  if (!a.resume.empty()) {
    trainer.set_epoch(resumed.epoch);
    trainer.set_best_score(resumed.best_score);
    if (fs::exists(fs::path(a.resume) / "optimizer.bin"))
      trainer.optimizer().load(fs::path(a.resume) / "optimizer.bin", model->parameters());
  }

  const json split_ids = split_json(ds, split);
  auto save = [&](const fs::path& dir, bool with_optimizer) {
    CheckpointInfo info{trainer.epoch(), trainer.best_score(), ds.layout, setup.train};
    save_checkpoint(dir, *model, info, with_optimizer ? &trainer.optimizer() : nullptr);
    std::ofstream(dir / "split.json") << split_ids.dump(2) << '\n';
  };

  const fs::path metrics_path = out_dir / "metrics.csv";
  const bool append = !a.resume.empty() && fs::exists(metrics_path);
  write_metrics_csv({}, metrics_path, append);
  trainer.fit(train, validation, [&](const EpochMetrics& m, bool improved) {
    write_metrics_csv({m}, metrics_path, true);
    if (improved) save(out_dir / "best", false);
  });
  if (!fs::exists(out_dir / "best")) save(out_dir / "best", false);
  save(out_dir / "final", true);
  std::ofstream(out_dir / "split.json") << split_ids.dump(2) << '\n';

  manifest.fields = {{"config", a.config},
                     {"seed", setup.train.seed},
                     {"inputs", {a.data}},
                     {"outputs", {out_dir.string()}},
                     {"resumed_from", a.resume},
                     {"checkpoint_id", checkpoint_id(out_dir / "final")},
                     {"method", method_name(setup.model)},
                     {"epochs_completed", trainer.epoch()}};
  manifest.write(out_dir);
  out << "trained " << method_name(setup.model) << " to epoch " << trainer.epoch() << '\n';
  return kExitOk;
}

// -- eval

struct EvalArgs {
  std::string checkpoint, data, out;
  std::vector<std::string> compare;
  std::uint64_t seed = 0;
  Index samples = 1000;
};

Index parse_pca_k(const std::string& spec) {
  const std::string prefix = "pca:k=";
  if (spec.rfind(prefix, 0) != 0) throw ConfigError("unknown --compare method '" + spec + "' (expected pca:k=N)");
  try {
    std::size_t used = 0;
    const long k = std::stol(spec.substr(prefix.size()), &used);
    if (used != spec.size() - prefix.size() || k < 1) throw std::invalid_argument(spec);
    return k;
  } catch (const std::exception&) {
    throw ConfigError("malformed --compare value '" + spec + "'");
  }
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Manifest manifest{"eval"};
  const fs::path ck_dir = a.checkpoint;
  const json meta = read_json_file(ck_dir / "model.json");
  const std::string kind = meta.value("kind", std::string());
  if (a.samples < 1) throw ConfigError("--samples must be >= 1");

  std::shared_ptr<const CvaeNfModel> model;
  std::vector<std::string> names;
  if (kind == "cvae_nf") {
    model = std::shared_ptr<const CvaeNfModel>(load_checkpoint(ck_dir).model.release());
    names = model->covariates().names;
  } else if (kind != "identity") {
    throw ConfigError("unsupported checkpoint kind '" + kind + "'");
  }

  const ShapeDataset ds = load_dataset(a.data, names);
  if (model && !(model->topology() == *ds.topology))
    throw MeshError("checkpoint topology does not match the dataset");

  std::vector<Index> test_rows, train_rows;
  if (fs::exists(ck_dir / "split.json")) {
    const json split = read_json_file(ck_dir / "split.json");
    test_rows = rows_for(ds, split.at("test").get<std::vector<std::string>>());
    train_rows = rows_for(ds, split.at("train").get<std::vector<std::string>>());
  }
  if (test_rows.empty()) {
    test_rows.resize(static_cast<std::size_t>(ds.size()));
    std::iota(test_rows.begin(), test_rows.end(), Index{0});
  }
  if (train_rows.empty()) train_rows = test_rows;

  std::vector<const Positions*> test;
  for (Index r : test_rows) test.push_back(&ds.shapes[static_cast<std::size_t>(r)]);
  Eigen::MatrixXd test_cov(static_cast<Index>(test.size()), 0);
  if (model && model->covariate_dim() > 0)
    test_cov = model->covariates().standardize_rows(select_rows(ds.covariates, test_rows));
  Eigen::MatrixXd sample_cov(a.samples, test_cov.cols());
  for (Index i = 0; i < a.samples; ++i) sample_cov.row(i) = test_cov.row(i % test_cov.rows());

  std::vector<std::pair<std::string, std::unique_ptr<ShapeGenerator>>> generators;
  if (model) {
    generators.emplace_back(method_name(model->config()), std::make_unique<CvaeNfGenerator>(model));
  } else {
    std::vector<Positions> cohort;
    for (const Positions* p : test) cohort.push_back(*p);
    generators.emplace_back("identity", std::make_unique<IdentityGenerator>(std::move(cohort)));
  }
  for (const auto& c : a.compare) {
    const Index k = parse_pca_k(c);
    std::vector<Positions> train_shapes;
    for (Index r : train_rows) train_shapes.push_back(ds.shapes[static_cast<std::size_t>(r)]);
    try {
      generators.emplace_back("pca_k" + std::to_string(k),
                              std::make_unique<PcaGenerator>(fit_pca_ssm(train_shapes, k)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--compare ") + c + ": " + e.what());
    }
  }

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  std::vector<MetricsRow> rows;
  std::vector<double> kde_volumes;
  std::vector<std::string> kde_labels;
  std::vector<double> real_volumes;
  for (const Positions* p : test) real_volumes.push_back(ds.layout.blood_pool_volume(*p));
  for (double v : real_volumes) {
    kde_volumes.push_back(v);
    kde_labels.push_back("real");
  }
  for (const auto& [name, gen] : generators) {
    EvaluationInputs in;
    in.generator = gen.get();
    in.test = test;
    in.test_covariates = gen->kind() == "cvae_nf" ? test_cov : Eigen::MatrixXd(test_cov.rows(), 0);
    in.real = test;
    in.sample_covariates = gen->kind() == "cvae_nf" ? sample_cov : Eigen::MatrixXd(a.samples, 0);
    in.layout = ds.layout;
    in.seed = a.seed;
    const Evaluation ev = evaluate_generator(in);
    rows.push_back({name, ev.metrics});
    for (double v : ev.generated_volumes) {
      kde_volumes.push_back(v);
      kde_labels.push_back(name);
    }
    if (ev.metrics.activity.size() > 0) write_activity_csv(ev.metrics.activity, out_dir / ("activity_" + name + ".csv"));
  }
  const double real_var = volume_variability(real_volumes);
  write_metrics_json(rows, real_var, out_dir / "metrics.json");
  write_metrics_csv(rows, out_dir / "metrics.csv");
  std::vector<std::string> skipped;
  write_kde_csv(subgroup_volume_density(kde_volumes, kde_labels, 0.0, 200, &skipped), out_dir / "kde.csv");

  manifest.fields = {{"seed", a.seed},
                     {"inputs", {a.data, a.checkpoint}},
                     {"outputs", {out_dir.string()}},
                     {"checkpoint_id", checkpoint_id(ck_dir)},
                     {"compare", a.compare},
                     {"samples", a.samples},
                     {"kde_skipped_groups", skipped}};
  manifest.write(out_dir);
  for (const auto& r : rows)
    out << r.method << ": generalisation " << r.metrics.generalisation_mm.mean << " mm, specificity "
        << r.metrics.specificity_mm.mean << " mm, volume variability " << r.metrics.volume_variability_mm3
        << " mm^3\n";
  return kExitOk;
}

// -- sample

struct SampleArgs {
  std::string checkpoint, covariates, out;
  Index n = 1;
  std::uint64_t seed = 0;
};

Eigen::MatrixXd reorder_columns(const CovariateTable& table, const std::vector<std::string>& names) {
  Eigen::MatrixXd out(table.values.rows(), static_cast<Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j) {
    auto it = std::find(table.names.begin(), table.names.end(), names[j]);
    if (it == table.names.end()) throw DatasetError("missing covariates column '" + names[j] + "'");
    out.col(static_cast<Index>(j)) = table.values.col(it - table.names.begin());
  }
  return out;
}

int cmd_sample(const SampleArgs& a, std::ostream& out) {
  Manifest manifest{"sample"};
  if (a.n < 1) throw ConfigError("--n must be >= 1");
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const CvaeNfModel& model = *ck.model;
  const CovariateTable table = read_covariates_csv(a.covariates);
  if (table.ids.empty()) throw DatasetError(a.covariates + ": no covariate rows");
  const Eigen::MatrixXd raw = reorder_columns(table, model.covariates().names);
  const Eigen::MatrixXd standardized = model.covariates().standardize_rows(raw);

  const Index rows = standardized.rows();
  Eigen::MatrixXd cov(rows * a.n, model.covariate_dim());
  std::vector<std::string> ids;
  for (Index r = 0; r < rows; ++r) {
    for (Index k = 0; k < a.n; ++k) {
      if (cov.cols() > 0) cov.row(r * a.n + k) = standardized.row(r);
      ids.push_back(table.ids[static_cast<std::size_t>(r)] + "_" + std::to_string(k));
    }
  }
  std::mt19937_64 rng(a.seed);
  const std::vector<Positions> shapes = model.sample_population(cov, rng);

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir / "meshes");
  const ShellLayout& layout = ck.info.layout;
  std::ofstream csv = open_csv(out_dir / "volumes.csv");
  csv << (layout.has_epi() ? "id,BPVol,MyoVol\n" : "id,BPVol\n");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    write_shape(layout, shapes[i], out_dir / "meshes", ids[i]);
    csv << ids[i] << ',' << layout.blood_pool_volume(shapes[i]);
    if (layout.has_epi()) csv << ',' << layout.myocardial_volume(shapes[i]);
    csv << '\n';
  }
  manifest.fields = {{"seed", a.seed},
                     {"inputs", {a.checkpoint, a.covariates}},
                     {"outputs", {out_dir.string()}},
                     {"checkpoint_id", checkpoint_id(a.checkpoint)},
                     {"per_row", a.n}};
  manifest.write(out_dir);
  out << "sampled " << shapes.size() << " shapes\n";
  return kExitOk;
}

// -- manipulate

struct ManipulateArgs {
  std::string checkpoint, data, subject, attribute, range, out;
  Index steps = 11;
};

std::pair<double, double> parse_range(const std::string& s) {
  // The separator is the first ':' after the first character, so "-3:4" parses.
  const auto pos = s.find(':', 1);
  if (pos == std::string::npos) throw ConfigError("--range must look like a:b");
  auto number = [&](const std::string& t) {
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size() || !std::isfinite(v)) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      throw ConfigError("malformed --range '" + s + "'");
    }
  };
  return {number(s.substr(0, pos)), number(s.substr(pos + 1))};
}

int cmd_manipulate(const ManipulateArgs& a, std::ostream& out) {
  Manifest manifest{"manipulate"};
  if (a.steps < 1) throw ConfigError("--steps must be >= 1");
  const auto [lo, hi] = parse_range(a.range);
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const CvaeNfModel& model = *ck.model;
  if (!model.config().conditional) throw ConfigError("manipulate needs a conditional model");
  const Index attr = model.covariates().index_of(a.attribute);
  if (attr < 0) throw ConfigError("unknown attribute '" + a.attribute + "'");

  const ShapeDataset ds = load_dataset(a.data, model.covariates().names);
  if (!(model.topology() == *ds.topology)) throw MeshError("checkpoint topology does not match the dataset");
  Index row = 0;
  if (!a.subject.empty()) {
    auto it = std::find(ds.ids.begin(), ds.ids.end(), a.subject);
    if (it == ds.ids.end()) throw DatasetError("unknown subject '" + a.subject + "'");
    row = it - ds.ids.begin();
  }
  const Positions& base = ds.shapes[static_cast<std::size_t>(row)];
  const Eigen::VectorXd raw = ds.covariates.row(row).transpose();
  const PosteriorParams post = model.encode(base, model.covariates().standardize(raw));
  const Eigen::VectorXd z = model.latent_state(post.mu).z_final;

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir / "meshes");
  const ShellLayout& layout = ds.layout;
  std::ofstream csv = open_csv(out_dir / "manipulation.csv");
  csv << "step," << a.attribute << (layout.has_epi() ? ",BPVol,MyoVol\n" : ",BPVol\n");
  const int width = static_cast<int>(std::to_string(a.steps - 1).size());
  for (Index s = 0; s < a.steps; ++s) {
    const double v = a.steps == 1 ? lo : lo + (hi - lo) * static_cast<double>(s) / static_cast<double>(a.steps - 1);
    Eigen::VectorXd c = raw;
    c[attr] = v;
    const Positions shape = model.decode(z, model.covariates().standardize(c));
    std::ostringstream id;
    id << "step" << std::setw(width) << std::setfill('0') << s;
    write_shape(layout, shape, out_dir / "meshes", id.str());
    csv << s << ',' << v << ',' << layout.blood_pool_volume(shape);
    if (layout.has_epi()) csv << ',' << layout.myocardial_volume(shape);
    csv << '\n';
  }
  manifest.fields = {{"inputs", {a.checkpoint, a.data}},
                     {"outputs", {out_dir.string()}},
                     {"checkpoint_id", checkpoint_id(a.checkpoint)},
                     {"subject", ds.ids[static_cast<std::size_t>(row)]},
                     {"attribute", a.attribute},
                     {"range", {lo, hi}},
                     {"steps", a.steps}};
  manifest.write(out_dir);
  out << "wrote " << a.steps << " manipulation steps for " << ds.ids[static_cast<std::size_t>(row)] << '\n';
  return kExitOk;
}

// -- flow-demo

struct FlowDemoArgs {
  std::string out;
  std::uint64_t seed = 0;
  int flow_steps = 5;
  int resolution = 200;
  double bound = 4.0;
};

int cmd_flow_demo(const FlowDemoArgs& a, std::ostream& out) {
  Manifest manifest{"flow-demo"};
  if (a.resolution < 1) throw ConfigError("--resolution must be >= 1");
  if (!(a.bound > 0)) throw ConfigError("--bound must be > 0");
  const FlowChain<double> chain = demo_flow_chain(a.flow_steps, a.seed);
  const auto grid = export_density_grid(chain, {-a.bound, a.bound, -a.bound, a.bound}, a.resolution, a.resolution);

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  std::ofstream csv = open_csv(out_dir / "density.csv");
  csv << "zx,zy,density\n";
  for (const auto& p : grid) csv << p.zx << ',' << p.zy << ',' << p.density << '\n';

  json units = json::array();
  for (const auto& u : chain)
    units.push_back({{"u", {u.u()[0], u.u()[1]}}, {"w", {u.w()[0], u.w()[1]}}, {"b", u.b()}});
  std::ofstream(out_dir / "chain.json") << units.dump(2) << '\n';
  manifest.fields = {{"seed", a.seed},
                     {"outputs", {out_dir.string()}},
                     {"flow_steps", a.flow_steps},
                     {"resolution", a.resolution},
                     {"bound", a.bound}};
  manifest.write(out_dir);
  out << "wrote " << grid.size() << " density points\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Conditional flow VAE for triangle-mesh populations", "cvaenf"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic shell population");
  s->add_option("--config", synth.config, "Synth spec JSON")->check(CLI::ExistingFile);
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed, "Override the seed in the config");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--data", train.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--config", train.config, "Training config JSON")->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "Run directory")->required();
  t->add_option("--seed", train.seed, "Override the config seed");
  t->add_option("--flow-steps", train.flow_steps, "Planar flow units (0 = plain VAE)");
  t->add_option("--kl-objective", train.kl_objective, "flowed_mc | analytic_q0");
  t->add_option("--resume", train.resume, "Checkpoint directory to continue from")->check(CLI::ExistingDirectory);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--data", eval.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--out", eval.out, "Output directory")->required();
  e->add_option("--compare", eval.compare, "Baseline, e.g. pca:k=16");
  e->add_option("--seed", eval.seed, "Sampling seed");
  e->add_option("--samples", eval.samples, "Generated shapes per method");

  SampleArgs sample;
  auto* sa = app.add_subcommand("sample", "Generate shapes for given covariates");
  sa->add_option("--checkpoint", sample.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  sa->add_option("--covariates", sample.covariates, "Covariates CSV")->required()->check(CLI::ExistingFile);
  sa->add_option("--n", sample.n, "Shapes per covariate row");
  sa->add_option("--seed", sample.seed, "Sampling seed");
  sa->add_option("--out", sample.out, "Output directory")->required();

  ManipulateArgs manip;
  auto* m = app.add_subcommand("manipulate", "Sweep one covariate with the latent code fixed");
  m->add_option("--checkpoint", manip.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  m->add_option("--data", manip.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  m->add_option("--subject", manip.subject, "Subject id (default: first)");
  m->add_option("--attribute", manip.attribute, "Covariate to sweep")->required();
  m->add_option("--range", manip.range, "Raw sweep range a:b")->required();
  m->add_option("--steps", manip.steps, "Sweep points");
  m->add_option("--out", manip.out, "Output directory")->required();

  FlowDemoArgs demo;
  auto* f = app.add_subcommand("flow-demo", "Export the density of a 2-D planar flow chain");
  f->add_option("--out", demo.out, "Output directory")->required();
  f->add_option("--seed", demo.seed, "Chain seed");
  f->add_option("--flow-steps", demo.flow_steps, "Planar units");
  f->add_option("--resolution", demo.resolution, "Grid cells per axis");
  f->add_option("--bound", demo.bound, "Base grid half-width");

  std::vector<const char*> argv{"cvaenf"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(train, out);
    if (e->parsed()) return cmd_eval(eval, out);
    if (sa->parsed()) return cmd_sample(sample, out);
    if (m->parsed()) return cmd_manipulate(manip, out);
    if (f->parsed()) return cmd_flow_demo(demo, out);
  } catch (const TrainingAborted& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const NonFiniteLossError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const FlowSingularityError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitNumerical;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const SpecError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const DatasetError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const MeshError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
  return kExitUsage;
}

}  // namespace cvaenf
