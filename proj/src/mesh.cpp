#include "cvaenf/mesh.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace cvaenf {

TriangleTopology::TriangleTopology(Index n_vertices, std::vector<Face> faces)
    : n_vertices_(n_vertices), faces_(std::move(faces)) {
  if (n_vertices < 0) throw MeshError("negative vertex count");
  for (const Face& f : faces_) {
    for (int v : f) {
      if (v < 0 || v >= n_vertices)
        throw MeshError("face index " + std::to_string(v) + " out of range [0, " +
                        std::to_string(n_vertices) + ")");
    }
    if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) throw MeshError("degenerate face");
  }
  edges_.reserve(faces_.size() * 3);
  for (const Face& f : faces_) {
    for (int k = 0; k < 3; ++k) {
      int a = f[k], b = f[(k + 1) % 3];
      edges_.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
}

std::vector<std::vector<int>> TriangleTopology::adjacency() const {
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n_vertices_));
  for (const auto& [a, b] : edges_) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  for (auto& row : adj) std::sort(row.begin(), row.end());
  return adj;
}

std::vector<int> TriangleTopology::components() const {
  std::vector<int> parent(static_cast<std::size_t>(n_vertices_));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (const auto& [a, b] : edges_) {
    int ra = find(a), rb = find(b);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  }
  std::vector<int> label(parent.size(), -1), root_label(parent.size(), -1);
  int next = 0;
  for (std::size_t v = 0; v < parent.size(); ++v) {
    int r = find(static_cast<int>(v));
    if (root_label[r] < 0) root_label[r] = next++;
    label[v] = root_label[r];
  }
  return label;
}

SurfaceMesh::SurfaceMesh(std::shared_ptr<const TriangleTopology> topology, Positions positions)
    : topology_(std::move(topology)), positions_(std::move(positions)) {
  if (!topology_) throw MeshError("mesh without topology");
  if (positions_.rows() != topology_->n_vertices())
    throw MeshError("position rows (" + std::to_string(positions_.rows()) +
                    ") != topology vertex count (" + std::to_string(topology_->n_vertices()) + ")");
  if (!positions_.allFinite()) throw MeshError("non-finite vertex coordinate");
}

double mean_vertex_distance(const SurfaceMesh& a, const SurfaceMesh& b) {
  if (!(a.topology() == b.topology())) throw MeshError("mean_vertex_distance: topology mismatch");
  return mean_vertex_distance(a.positions(), b.positions());
}

SparseOperator scaled_laplacian(const TriangleTopology& topology) {
  const Index n = topology.n_vertices();
  Eigen::VectorXd degree = Eigen::VectorXd::Zero(n);
  for (const auto& [a, b] : topology.edges()) {
    degree[a] += 1.0;
    degree[b] += 1.0;
  }
  // L = I - D^-1/2 A D^-1/2 (isolated vertices keep an identity row), and
  // with lambda_max = 2 the rescaled operator is L - I.
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(topology.edges().size() * 2);
  for (const auto& [a, b] : topology.edges()) {
    const double w = -1.0 / std::sqrt(degree[a] * degree[b]);
    entries.emplace_back(a, b, w);
    entries.emplace_back(b, a, w);
  }
  SparseOperator op(n, n);
  op.setFromTriplets(entries.begin(), entries.end());
  op.makeCompressed();
  return op;
}

double mean_edge_length(const Positions& positions, const TriangleTopology& topology) {
  if (topology.edges().empty()) return 0.0;
  double total = 0.0;
  for (const auto& [a, b] : topology.edges()) total += (positions.row(a) - positions.row(b)).norm();
  return total / static_cast<double>(topology.edges().size());
}

}  // namespace cvaenf
