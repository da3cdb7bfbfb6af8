#pragma once

#include "cvaenf/mesh.hpp"

#include <filesystem>

namespace cvaenf {

/// One resolution of the mesh hierarchy. `down`/`up` connect this level to the
/// next coarser one and are empty (0x0) on the coarsest level.
struct MeshLevel {
  std::shared_ptr<const TriangleTopology> topology;
  Positions reference_positions;
  SparseOperator scaled_laplacian;
  SparseOperator down;  // n_{k+1} x n_k, one unit entry per row
  SparseOperator up;    // n_k x n_{k+1}, barycentric rows
};

struct SamplingHierarchy {
  Index factor = 0;
  std::vector<MeshLevel> levels;  // levels.size() == number of down-samplings + 1

  Index depth() const { return levels.empty() ? 0 : static_cast<Index>(levels.size()) - 1; }
  Index n_vertices(Index level) const { return levels.at(level).topology->n_vertices(); }
};

struct DecimationResult {
  std::vector<int> kept;  // original indices of retained vertices, ascending
  std::shared_ptr<const TriangleTopology> topology;
};

/// Quadric-error half-edge collapse down to `target_per_component` vertices in
/// each connected component. Retained vertices keep their positions.
/// Ties on cost are broken by the lowest removed, then kept, vertex index.
DecimationResult decimate_qem(const TriangleTopology& topology, const Positions& positions,
                              const std::vector<Index>& target_per_component);

/// Builds `levels` successive decimations by `factor` (per component, rounded up).
/// Throws std::invalid_argument for factor < 2 or levels < 0 and MeshError when a
/// level would drop below 4 vertices in some component.
SamplingHierarchy build_sampling_hierarchy(std::shared_ptr<const TriangleTopology> topology,
                                           const Positions& reference_positions, Index factor,
                                           Index levels);

/// Manifest: manifest.json plus per-level OFF files and sparse-triplet text files.
void save_hierarchy(const SamplingHierarchy& hierarchy, const std::filesystem::path& dir);
SamplingHierarchy load_hierarchy(const std::filesystem::path& dir);

void write_sparse_triplets(const SparseOperator& op, const std::filesystem::path& path);
SparseOperator read_sparse_triplets(const std::filesystem::path& path);

}  // namespace cvaenf
