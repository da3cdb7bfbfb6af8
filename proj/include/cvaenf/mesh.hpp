#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SparseCore>

#include <array>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cvaenf {

using Index = Eigen::Index;
using Face = std::array<int, 3>;
using Edge = std::pair<int, int>;

/// Vertex coordinates, one row per vertex (mm).
using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3>;

/// Sparse linear operator acting on per-vertex feature matrices from the left.
using SparseOperator = Eigen::SparseMatrix<double, Eigen::RowMajor>;

class MeshError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Fixed triangle connectivity shared by every mesh of a population.
///
/// Faces keep their winding. Edges are derived from faces as sorted unique
/// (i < j) pairs, so two topologies built from the same faces compare equal.
class TriangleTopology {
 public:
  TriangleTopology() = default;
  TriangleTopology(Index n_vertices, std::vector<Face> faces);

  Index n_vertices() const { return n_vertices_; }
  Index n_faces() const { return static_cast<Index>(faces_.size()); }
  const std::vector<Face>& faces() const { return faces_; }
  const std::vector<Edge>& edges() const { return edges_; }

  /// Symmetric vertex adjacency lists, sorted ascending.
  std::vector<std::vector<int>> adjacency() const;

  /// Connected component label per vertex (labels in order of first vertex).
  std::vector<int> components() const;

  bool operator==(const TriangleTopology& other) const {
    return n_vertices_ == other.n_vertices_ && faces_ == other.faces_;
  }

 private:
  Index n_vertices_ = 0;
  std::vector<Face> faces_;
  std::vector<Edge> edges_;
};

/// A mesh instance: shared topology plus its own vertex positions.
class SurfaceMesh {
 public:
  SurfaceMesh() = default;
  SurfaceMesh(std::shared_ptr<const TriangleTopology> topology, Positions positions);

  const TriangleTopology& topology() const { return *topology_; }
  const std::shared_ptr<const TriangleTopology>& topology_ptr() const { return topology_; }
  const Positions& positions() const { return positions_; }
  Index n_vertices() const { return positions_.rows(); }

  SurfaceMesh with_positions(Positions positions) const {
    return SurfaceMesh(topology_, std::move(positions));
  }

 private:
  std::shared_ptr<const TriangleTopology> topology_;
  Positions positions_;
};

/// Signed-tetrahedron sum over faces, (1/6) |sum v0 . (v1 x v2)|.
/// Exact for closed, consistently oriented surfaces. Open surfaces give an
/// origin-dependent value; this is not detected.
template <typename Derived>
typename Derived::Scalar enclosed_volume(const Eigen::MatrixBase<Derived>& positions,
                                         const TriangleTopology& topology) {
  using Scalar = typename Derived::Scalar;
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  if (topology.faces().empty()) throw MeshError("enclosed_volume: empty face list");
  if (positions.rows() != topology.n_vertices() || positions.cols() != 3)
    throw MeshError("enclosed_volume: positions do not match topology");
  // Centring on the first vertex keeps the sum well conditioned far from the origin.
  const Vec3 origin = positions.row(0).transpose();
  Scalar six_volume(0);
  for (const Face& f : topology.faces()) {
    const Vec3 a = positions.row(f[0]).transpose() - origin;
    const Vec3 b = positions.row(f[1]).transpose() - origin;
    const Vec3 c = positions.row(f[2]).transpose() - origin;
    six_volume += a.dot(b.cross(c));
  }
  using std::abs;
  return abs(six_volume) / Scalar(6);
}

inline double enclosed_volume(const SurfaceMesh& mesh) {
  return enclosed_volume(mesh.positions(), mesh.topology());
}

/// Epicardial minus endocardial enclosed volume. Caller guarantees nesting.
inline double myocardial_volume(const SurfaceMesh& epi, const SurfaceMesh& endo) {
  return enclosed_volume(epi) - enclosed_volume(endo);
}

/// Mean over vertices of the per-vertex Euclidean distance.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar mean_vertex_distance(const Eigen::MatrixBase<DerivedA>& a,
                                               const Eigen::MatrixBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() == 0)
    throw MeshError("mean_vertex_distance: shape mismatch");
  return (a - b).rowwise().norm().mean();
}

double mean_vertex_distance(const SurfaceMesh& a, const SurfaceMesh& b);

/// Rescaled symmetric-normalized Laplacian 2L/lambda_max - I with lambda_max = 2.
SparseOperator scaled_laplacian(const TriangleTopology& topology);

/// Mean length over the derived edge set.
double mean_edge_length(const Positions& positions, const TriangleTopology& topology);

}  // namespace cvaenf
