#include "cvaenf/dataset.hpp"

#include "cvaenf/mesh_io.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace cvaenf {

namespace fs = std::filesystem;

std::shared_ptr<const TriangleTopology> ShellLayout::combined() const {
  if (!has_epi()) return endo;
  const int offset = static_cast<int>(endo->n_vertices());
  std::vector<Face> faces = endo->faces();
  for (Face f : epi->faces()) faces.push_back({f[0] + offset, f[1] + offset, f[2] + offset});
  return std::make_shared<const TriangleTopology>(endo->n_vertices() + epi->n_vertices(), std::move(faces));
}

Positions ShellLayout::combine(const Positions& endo_positions, const Positions& epi_positions) const {
  if (!has_epi()) return endo_positions;
  Positions out(endo_positions.rows() + epi_positions.rows(), 3);
  out << endo_positions, epi_positions;
  return out;
}

Positions ShellLayout::endo_positions(const Positions& combined) const {
  return combined.topRows(endo->n_vertices());
}

Positions ShellLayout::epi_positions(const Positions& combined) const {
  if (!has_epi()) throw MeshError("layout has no epicardial shell");
  return combined.middleRows(endo->n_vertices(), epi->n_vertices());
}

double ShellLayout::blood_pool_volume(const Positions& combined) const {
  return enclosed_volume(combined.topRows(endo->n_vertices()), *endo);
}

double ShellLayout::myocardial_volume(const Positions& combined) const {
  if (!has_epi()) return std::numeric_limits<double>::quiet_NaN();
  return enclosed_volume(combined.middleRows(endo->n_vertices(), epi->n_vertices()), *epi) -
         blood_pool_volume(combined);
}

ShellLayout ShellLayout::split(const TriangleTopology& combined, Index n_endo_vertices, Index n_endo_faces) {
  if (n_endo_vertices <= 0 || n_endo_vertices > combined.n_vertices() || n_endo_faces > combined.n_faces())
    throw MeshError("shell layout does not fit the combined topology");
  const auto& faces = combined.faces();
  std::vector<Face> endo(faces.begin(), faces.begin() + n_endo_faces);
  ShellLayout layout;
  layout.endo = std::make_shared<const TriangleTopology>(n_endo_vertices, std::move(endo));
  if (n_endo_vertices == combined.n_vertices()) return layout;
  const int offset = static_cast<int>(n_endo_vertices);
  std::vector<Face> epi;
  for (auto it = faces.begin() + n_endo_faces; it != faces.end(); ++it) {
    const Face f = *it;
    if (f[0] < offset || f[1] < offset || f[2] < offset) throw MeshError("epicardial face references the endocardium");
    epi.push_back({f[0] - offset, f[1] - offset, f[2] - offset});
  }
  layout.epi = std::make_shared<const TriangleTopology>(combined.n_vertices() - n_endo_vertices, std::move(epi));
  return layout;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

CovariateTable read_covariates_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DatasetError(path.string() + ": empty file");
  std::vector<std::string> header = split_csv_line(line);
  if (header.empty() || header.front() != "id") throw DatasetError(path.string() + ": first column must be 'id'");
  CovariateTable table;
  table.names.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(header.size()) + " columns");
    table.ids.push_back(cells.front());
    std::vector<double> row;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cells[j], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cells[j].size() || cells[j].empty())
        throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": bad number '" + cells[j] + "'");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  table.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(table.names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) table.values(i, j) = rows[i][j];
  return table;
}

void write_covariates_csv(const CovariateTable& table, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "id";
  for (const auto& n : table.names) out << ',' << n;
  out << '\n';
  for (Index i = 0; i < table.values.rows(); ++i) {
    out << table.ids[i];
    for (Index j = 0; j < table.values.cols(); ++j) out << ',' << table.values(i, j);
    out << '\n';
  }
}

ShapeDataset load_dataset(const fs::path& dir, const std::vector<std::string>& required_names) {
  CovariateTable table = read_covariates_csv(dir / "covariates.csv");
  if (table.ids.empty()) throw DatasetError(dir.string() + ": no subjects in covariates.csv");
  ShapeDataset ds;
  ds.ids = table.ids;
  if (required_names.empty()) {
    ds.covariate_names = table.names;
    ds.covariates = table.values;
  } else {
    ds.covariate_names = required_names;
    ds.covariates.resize(table.values.rows(), static_cast<Index>(required_names.size()));
    for (std::size_t j = 0; j < required_names.size(); ++j) {
      auto it = std::find(table.names.begin(), table.names.end(), required_names[j]);
      if (it == table.names.end()) throw DatasetError("missing covariates column '" + required_names[j] + "'");
      ds.covariates.col(static_cast<Index>(j)) = table.values.col(it - table.names.begin());
    }
  }

  const fs::path meshes = dir / "meshes";
  const bool shells = fs::exists(meshes / (table.ids.front() + "_endo.ply"));
  std::shared_ptr<const TriangleTopology> endo_topo, epi_topo;
  for (const std::string& id : table.ids) {
    if (shells) {
      SurfaceMesh endo = load_mesh(meshes / (id + "_endo.ply"), endo_topo);
      SurfaceMesh epi = load_mesh(meshes / (id + "_epi.ply"), epi_topo);
      if (endo_topo && endo.topology_ptr() != endo_topo) throw MeshError(id + ": endocardial topology differs");
      if (epi_topo && epi.topology_ptr() != epi_topo) throw MeshError(id + ": epicardial topology differs");
      endo_topo = endo.topology_ptr();
      epi_topo = epi.topology_ptr();
      Positions p(endo.n_vertices() + epi.n_vertices(), 3);
      p << endo.positions(), epi.positions();
      ds.shapes.push_back(std::move(p));
    } else {
      SurfaceMesh m = load_mesh(meshes / (id + ".ply"), endo_topo);
      if (endo_topo && m.topology_ptr() != endo_topo) throw MeshError(id + ": topology differs");
      endo_topo = m.topology_ptr();
      ds.shapes.push_back(m.positions());
    }
  }
  ds.layout.endo = endo_topo;
  ds.layout.epi = epi_topo;
  ds.topology = ds.layout.combined();
  return ds;
}

Eigen::MatrixXd select_rows(const Eigen::MatrixXd& m, const std::vector<Index>& rows) {
  Eigen::MatrixXd out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

}  // namespace cvaenf
