#pragma once

// On-disk population layout:
//   meshes/{id}_endo.ply, meshes/{id}_epi.ply   (or meshes/{id}.ply for single surfaces)
//   covariates.csv                              header "id,<names...>", raw values
//   ground_truth.csv                            optional, passed through untouched

#include "cvaenf/mesh.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cvaenf {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Where the endocardial and epicardial shells sit inside a combined mesh.
/// The endocardium comes first; `epi` is null for single-surface data.
struct ShellLayout {
  std::shared_ptr<const TriangleTopology> endo;
  std::shared_ptr<const TriangleTopology> epi;

  bool has_epi() const { return epi != nullptr; }
  Index n_endo_vertices() const { return endo->n_vertices(); }
  Index n_endo_faces() const { return endo->n_faces(); }

  /// Disjoint union of the shells, endo vertices and faces first.
  std::shared_ptr<const TriangleTopology> combined() const;
  Positions combine(const Positions& endo_positions, const Positions& epi_positions) const;
  Positions endo_positions(const Positions& combined) const;
  Positions epi_positions(const Positions& combined) const;

  /// BPVol: volume enclosed by the endocardial shell.
  double blood_pool_volume(const Positions& combined) const;
  /// MyoVol: epicardial minus endocardial volume; NaN without an epicardium.
  double myocardial_volume(const Positions& combined) const;

  /// Recovers the shells from a combined topology given the endo counts.
  static ShellLayout split(const TriangleTopology& combined, Index n_endo_vertices, Index n_endo_faces);
};

struct ShapeDataset {
  std::vector<std::string> ids;
  ShellLayout layout;
  std::shared_ptr<const TriangleTopology> topology;  // combined
  std::vector<Positions> shapes;                     // combined positions, mm
  std::vector<std::string> covariate_names;
  Eigen::MatrixXd covariates;  // raw, one row per subject

  Index size() const { return static_cast<Index>(shapes.size()); }
};

struct CovariateTable {
  std::vector<std::string> ids;
  std::vector<std::string> names;
  Eigen::MatrixXd values;
};

CovariateTable read_covariates_csv(const std::filesystem::path& path);
void write_covariates_csv(const CovariateTable& table, const std::filesystem::path& path);

/// Loads every subject listed in covariates.csv. When `required_names` is not
/// empty the covariate columns are reordered to match it; a missing column
/// throws DatasetError naming it.
ShapeDataset load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& required_names = {});

/// Subset of `rows` (order kept) as a new table of raw covariates.
Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<Index>& rows);

}  // namespace cvaenf
