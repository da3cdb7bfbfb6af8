#include "cvaenf/synthdata.hpp"

#include "cvaenf/mesh_io.hpp"
#include "cvaenf/primitives.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>

namespace cvaenf {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& covariate_names() {
  static const std::vector<std::string> names = {"sex",         "age", "height", "weight", "pulse",
                                                 "alcohol",     "smoking", "hba1c", "cholesterol", "crp",
                                                 "glucose",     "hdl", "igf1",   "ldl"};
  return names;
}

const std::array<std::string, kShapeFactors>& shape_factor_names() {
  static const std::array<std::string, kShapeFactors> names = {"size", "elongation", "thickness", "bending"};
  return names;
}

std::pair<double, double> covariate_distribution(const std::string& name) {
  // Rough adult-population location and spread; documentation, not clinical reference values.
  static const std::map<std::string, std::pair<double, double>> table = {
      {"sex", {0.5, 0.5}},        {"age", {62.0, 8.0}},         {"height", {170.0, 9.0}},
      {"weight", {77.0, 14.0}},   {"pulse", {68.0, 11.0}},      {"alcohol", {2.0, 1.0}},
      {"smoking", {0.5, 0.6}},    {"hba1c", {35.0, 5.0}},       {"cholesterol", {5.6, 1.1}},
      {"crp", {2.0, 1.5}},        {"glucose", {5.0, 0.9}},      {"hdl", {1.45, 0.38}},
      {"igf1", {21.0, 5.0}},      {"ldl", {3.5, 0.85}}};
  auto it = table.find(name);
  if (it == table.end()) throw SpecError("unknown covariate '" + name + "'");
  return it->second;
}

void SynthSpec::validate() const {
  if (n_subjects < 2) throw SpecError("n_subjects must be >= 2");
  if (subdivisions < 0 || subdivisions > 6) throw SpecError("subdivisions must lie in [0, 6]");
  if (!(endo_radius > 0)) throw SpecError("endo_radius must be > 0");
  if (!(wall_thickness > 0)) throw SpecError("wall_thickness must be > 0");
  if (!(axial_ratio > 0)) throw SpecError("axial_ratio must be > 0");
  if (!(noise >= 0)) throw SpecError("noise must be >= 0");
  if (clusters < 1 || clusters > 3) throw SpecError("clusters must lie in [1, 3]");
  if (!std::isfinite(cluster_separation)) throw SpecError("cluster_separation must be finite");
  for (double g : {size_gain, elongation_gain, thickness_gain, bending_gain})
    if (!std::isfinite(g)) throw SpecError("factor gains must be finite");
  std::set<std::string> seen;
  for (const auto& c : covariates) {
    covariate_distribution(c);
    if (!seen.insert(c).second) throw SpecError("duplicate covariate '" + c + "'");
  }
  const auto& factors = shape_factor_names();
  for (const auto& [cov, row] : couplings) {
    if (!seen.count(cov)) throw SpecError("unknown coupling key '" + cov + "'");
    for (const auto& [factor, w] : row) {
      if (std::find(factors.begin(), factors.end(), factor) == factors.end())
        throw SpecError("unknown coupling key '" + cov + "." + factor + "'");
      if (!std::isfinite(w)) throw SpecError("coupling '" + cov + "." + factor + "' is not finite");
    }
  }
}

void to_json(json& j, const SynthSpec& s) {
  j = json{{"n_subjects", s.n_subjects},
           {"subdivisions", s.subdivisions},
           {"endo_radius", s.endo_radius},
           {"wall_thickness", s.wall_thickness},
           {"axial_ratio", s.axial_ratio},
           {"covariates", s.covariates},
           {"couplings", s.couplings},
           {"noise", s.noise},
           {"clusters", s.clusters},
           {"cluster_separation", s.cluster_separation},
           {"size_gain", s.size_gain},
           {"elongation_gain", s.elongation_gain},
           {"thickness_gain", s.thickness_gain},
           {"bending_gain", s.bending_gain},
           {"seed", s.seed}};
}

void from_json(const json& j, SynthSpec& s) {
  if (!j.is_object()) throw SpecError("synth spec must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "n_subjects") s.n_subjects = v.get<Index>();
      else if (key == "subdivisions") s.subdivisions = v.get<int>();
      else if (key == "endo_radius") s.endo_radius = v.get<double>();
      else if (key == "wall_thickness") s.wall_thickness = v.get<double>();
      else if (key == "axial_ratio") s.axial_ratio = v.get<double>();
      else if (key == "covariates") s.covariates = v.get<std::vector<std::string>>();
      else if (key == "couplings") s.couplings = v.get<std::map<std::string, std::map<std::string, double>>>();
      else if (key == "noise") s.noise = v.get<double>();
      else if (key == "clusters") s.clusters = v.get<Index>();
      else if (key == "cluster_separation") s.cluster_separation = v.get<double>();
      else if (key == "size_gain") s.size_gain = v.get<double>();
      else if (key == "elongation_gain") s.elongation_gain = v.get<double>();
      else if (key == "thickness_gain") s.thickness_gain = v.get<double>();
      else if (key == "bending_gain") s.bending_gain = v.get<double>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else throw SpecError("unknown spec key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw SpecError(std::string("malformed synth spec: ") + e.what());
  }
}

std::map<std::string, std::map<std::string, double>> default_couplings() {
  return {{"weight", {{"size", 1.0}, {"thickness", 0.3}}}, {"age", {{"size", -0.8}, {"thickness", 2.5}}}};
}

ShellLayout synth_shell_layout(int subdivisions) {
  const SurfaceMesh sphere = make_icosphere(1.0, subdivisions);
  ShellLayout layout;
  layout.endo = sphere.topology_ptr();
  layout.epi = sphere.topology_ptr();
  return layout;
}

std::pair<Positions, Positions> synth_shells(const SynthSpec& spec, const Positions& unit_sphere,
                                             const std::array<double, kShapeFactors>& f) {
  const double wall = spec.wall_thickness * (1.0 + spec.thickness_gain * f[kThickness]);
  if (!(wall > 0.05 * spec.wall_thickness)) throw SpecError("wall thickness collapsed");
  const double scale = std::exp(spec.size_gain * f[kSize]);
  const double stretch = spec.axial_ratio * std::exp(spec.elongation_gain * f[kElongation]);
  const double shear = spec.bending_gain * f[kBending];
  auto deform = [&](double radius) {
    Positions p = unit_sphere * (radius * scale);
    p.col(2) *= stretch;
    p.col(0) += shear * p.col(2);
    return p;
  };
  return {deform(spec.endo_radius), deform(spec.endo_radius + wall)};
}

SynthPopulation generate_population(const SynthSpec& spec) {
  spec.validate();
  const SurfaceMesh sphere = make_icosphere(1.0, spec.subdivisions);
  SynthPopulation pop;
  pop.layout = synth_shell_layout(spec.subdivisions);
  pop.covariate_names = spec.covariates;

  const Index c = static_cast<Index>(spec.covariates.size());
  Eigen::MatrixXd coupling = Eigen::MatrixXd::Zero(kShapeFactors, c);
  for (Index j = 0; j < c; ++j) {
    auto row = spec.couplings.find(spec.covariates[j]);
    if (row == spec.couplings.end()) continue;
    for (int f = 0; f < kShapeFactors; ++f) {
      auto w = row->second.find(shape_factor_names()[f]);
      if (w != row->second.end()) coupling(f, j) = w->second;
    }
  }

  const int width = std::max(4, static_cast<int>(std::to_string(spec.n_subjects - 1).size()));
  for (Index i = 0; i < spec.n_subjects; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(i), 0x5EEDu};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<Index> pick(0, spec.clusters - 1);
    std::bernoulli_distribution coin(0.5);

    SynthRecord rec;
    std::ostringstream id;
    id << "subj" << std::setw(width) << std::setfill('0') << i;
    rec.id = id.str();
    bool accepted = false;
    for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
      rec.covariates.resize(c);
      Eigen::VectorXd standardized(c);
      for (Index j = 0; j < c; ++j) {
        const auto [mean, sd] = covariate_distribution(spec.covariates[j]);
        const double raw = spec.covariates[j] == "sex" ? (coin(rng) ? 1.0 : 0.0) : mean + sd * normal(rng);
        rec.covariates[j] = raw;
        standardized[j] = (raw - mean) / sd;
      }
      rec.cluster = pick(rng);
      const Eigen::VectorXd f = coupling * standardized;
      for (int k = 0; k < kShapeFactors; ++k) rec.factors[k] = f[k] + spec.noise * normal(rng);
      rec.factors[kSize] += (static_cast<double>(rec.cluster) - 0.5 * static_cast<double>(spec.clusters - 1)) *
                            spec.cluster_separation;
      try {
        std::tie(rec.endo, rec.epi) = synth_shells(spec, sphere.positions(), rec.factors);
        accepted = true;
      } catch (const SpecError&) {
      }
    }
    if (!accepted)
      throw SpecError("subject " + rec.id + ": 100 consecutive rejections (wall thickness driven to zero)");
    pop.records.push_back(std::move(rec));
  }
  return pop;
}

void write_population(const SynthPopulation& pop, const fs::path& dir) {
  fs::create_directories(dir / "meshes");
  CovariateTable table;
  table.names = pop.covariate_names;
  table.values.resize(static_cast<Index>(pop.records.size()), static_cast<Index>(pop.covariate_names.size()));
  std::ofstream gt(dir / "ground_truth.csv");
  gt << std::setprecision(std::numeric_limits<double>::max_digits10);
  gt << "id,cluster";
  for (const auto& f : shape_factor_names()) gt << ',' << f;
  gt << ",bp_volume_mm3,myo_volume_mm3\n";
  for (std::size_t i = 0; i < pop.records.size(); ++i) {
    const SynthRecord& r = pop.records[i];
    save_mesh(SurfaceMesh(pop.layout.endo, r.endo), dir / "meshes" / (r.id + "_endo.ply"));
    save_mesh(SurfaceMesh(pop.layout.epi, r.epi), dir / "meshes" / (r.id + "_epi.ply"));
    table.ids.push_back(r.id);
    table.values.row(static_cast<Index>(i)) = r.covariates.transpose();
    const Positions combined = pop.layout.combine(r.endo, r.epi);
    gt << r.id << ',' << r.cluster;
    for (double f : r.factors) gt << ',' << f;
    gt << ',' << pop.layout.blood_pool_volume(combined) << ',' << pop.layout.myocardial_volume(combined) << '\n';
  }
  write_covariates_csv(table, dir / "covariates.csv");
}

ShapeDataset to_dataset(const SynthPopulation& pop) {
  ShapeDataset ds;
  ds.layout = pop.layout;
  ds.topology = pop.layout.combined();
  ds.covariate_names = pop.covariate_names;
  ds.covariates.resize(static_cast<Index>(pop.records.size()), static_cast<Index>(pop.covariate_names.size()));
  for (std::size_t i = 0; i < pop.records.size(); ++i) {
    const SynthRecord& r = pop.records[i];
    ds.ids.push_back(r.id);
    ds.shapes.push_back(pop.layout.combine(r.endo, r.epi));
    ds.covariates.row(static_cast<Index>(i)) = r.covariates.transpose();
  }
  return ds;
}

}  // namespace cvaenf
