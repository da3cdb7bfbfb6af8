#pragma once

// Synthetic LV-like shell populations with known covariate -> shape couplings.
//
// Each subject has four standardized shape factors. The base shell pair is an
// icosphere endocardium of radius r and an epicardium of radius r + t, then
//   size        radial scale exp(size_gain * size)
//   elongation  axial (z) stretch exp(elongation_gain * elongation)
//   thickness   wall t * (1 + thickness_gain * thickness); must stay > 0
//   bending     volume-preserving shear x += bending_gain * bending * z

#include "cvaenf/dataset.hpp"

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <random>

namespace cvaenf {

class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The fourteen covariates in their canonical order.
const std::vector<std::string>& covariate_names();

enum ShapeFactor { kSize = 0, kElongation = 1, kThickness = 2, kBending = 3 };
constexpr int kShapeFactors = 4;
const std::array<std::string, kShapeFactors>& shape_factor_names();

struct SynthSpec {
  Index n_subjects = 100;
  int subdivisions = 2;
  double endo_radius = 25.0;     // mm
  double wall_thickness = 8.0;   // mm
  double axial_ratio = 1.6;      // base z stretch of both shells
  std::vector<std::string> covariates = covariate_names();
  /// couplings[covariate][factor] = weight on the standardized covariate.
  std::map<std::string, std::map<std::string, double>> couplings;
  double noise = 0.05;  // factor-space noise std
  Index clusters = 1;   // 1..3 size clusters
  double cluster_separation = 3.0;  // factor units between neighbouring clusters
  double size_gain = 0.1;
  double elongation_gain = 0.1;
  double thickness_gain = 0.2;
  double bending_gain = 0.15;
  std::uint64_t seed = 0;

  /// Throws SpecError naming the offending field or key.
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

/// Couplings mirroring the reported trends: weight raises size and wall
/// thickness; age lowers size and raises wall thickness.
std::map<std::string, std::map<std::string, double>> default_couplings();

struct SynthRecord {
  std::string id;
  Positions endo;
  Positions epi;
  Eigen::VectorXd covariates;  // raw values, spec order
  std::array<double, kShapeFactors> factors{};
  Index cluster = 0;
};

struct SynthPopulation {
  ShellLayout layout;
  std::vector<SynthRecord> records;
  std::vector<std::string> covariate_names;
};

/// Unit-sphere shell pair topology shared by every subject.
ShellLayout synth_shell_layout(int subdivisions);

/// Raw value distribution (mean, sd) used for each covariate.
std::pair<double, double> covariate_distribution(const std::string& name);

/// Shells for given factors; throws SpecError when the wall would vanish.
std::pair<Positions, Positions> synth_shells(const SynthSpec& spec, const Positions& unit_sphere,
                                             const std::array<double, kShapeFactors>& factors);

/// Deterministic in spec.seed; each subject draws from its own derived stream.
SynthPopulation generate_population(const SynthSpec& spec);

/// Writes meshes/{id}_endo.ply, meshes/{id}_epi.ply, covariates.csv, ground_truth.csv.
void write_population(const SynthPopulation& pop, const std::filesystem::path& dir);

/// Combined-shell dataset in memory, as load_dataset would return it.
ShapeDataset to_dataset(const SynthPopulation& pop);

}  // namespace cvaenf
