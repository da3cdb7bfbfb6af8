#include "cvaenf/hierarchy.hpp"
#include "cvaenf/mesh_io.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <queue>
#include <set>
#include <tuple>

namespace cvaenf {
namespace {

using Quadric = Eigen::Matrix4d;
using Vec3 = Eigen::Vector3d;

struct Candidate {
  double cost;
  int removed;
  int kept;
  unsigned stamp_removed;
  unsigned stamp_kept;

  bool operator>(const Candidate& o) const {
    return std::tie(cost, removed, kept) > std::tie(o.cost, o.removed, o.kept);
  }
};

class Collapser {
 public:
  Collapser(const TriangleTopology& topology, const Positions& positions)
      : pos_(positions),
        faces_(topology.faces()),
        face_alive_(faces_.size(), true),
        vertex_alive_(static_cast<std::size_t>(topology.n_vertices()), true),
        incident_(static_cast<std::size_t>(topology.n_vertices())),
        quadric_(static_cast<std::size_t>(topology.n_vertices()), Quadric::Zero()),
        stamp_(static_cast<std::size_t>(topology.n_vertices()), 0u),
        component_(topology.components()) {
    for (std::size_t f = 0; f < faces_.size(); ++f) {
      const Face& face = faces_[f];
      for (int v : face) incident_[v].insert(static_cast<int>(f));
      const Vec3 a = pos_.row(face[0]), b = pos_.row(face[1]), c = pos_.row(face[2]);
      Vec3 n = (b - a).cross(c - a);
      const double len = n.norm();
      if (len <= 0.0) continue;
      n /= len;
      Eigen::Vector4d plane(n.x(), n.y(), n.z(), -n.dot(a));
      const Quadric k = plane * plane.transpose();
      for (int v : face) quadric_[v] += k;
    }
  }

  const std::vector<int>& component() const { return component_; }

  std::vector<int> run(const std::vector<Index>& target) {
    std::vector<Index> count(target.size(), 0);
    for (int c : component_) ++count[c];
    for (std::size_t v = 0; v < vertex_alive_.size(); ++v) push_vertex_edges(static_cast<int>(v));

    auto done = [&] {
      for (std::size_t c = 0; c < count.size(); ++c)
        if (count[c] > target[c]) return false;
      return true;
    };
    while (!done()) {
      if (queue_.empty()) throw MeshError("decimation stalled: no valid edge collapse left");
      const Candidate cand = queue_.top();
      queue_.pop();
      if (!vertex_alive_[cand.removed] || !vertex_alive_[cand.kept]) continue;
      if (stamp_[cand.removed] != cand.stamp_removed || stamp_[cand.kept] != cand.stamp_kept) continue;
      if (count[component_[cand.removed]] <= target[component_[cand.removed]]) continue;
      if (!collapse_is_valid(cand.removed, cand.kept)) continue;
      collapse(cand.removed, cand.kept);
      --count[component_[cand.removed]];
    }
    std::vector<int> kept;
    for (std::size_t v = 0; v < vertex_alive_.size(); ++v)
      if (vertex_alive_[v]) kept.push_back(static_cast<int>(v));
    return kept;
  }

  std::vector<Face> surviving_faces() const {
    std::vector<Face> out;
    for (std::size_t f = 0; f < faces_.size(); ++f)
      if (face_alive_[f]) out.push_back(faces_[f]);
    return out;
  }

 private:
  std::set<int> neighbours(int v) const {
    std::set<int> out;
    for (int f : incident_[v])
      for (int w : faces_[f])
        if (w != v) out.insert(w);
    return out;
  }

  double cost(int removed, int kept) const {
    const Quadric q = quadric_[removed] + quadric_[kept];
    Eigen::Vector4d p(pos_(kept, 0), pos_(kept, 1), pos_(kept, 2), 1.0);
    return std::max(0.0, p.dot(q * p));
  }

  void push_vertex_edges(int v) {
    for (int w : neighbours(v)) {
      queue_.push({cost(v, w), v, w, stamp_[v], stamp_[w]});
      queue_.push({cost(w, v), w, v, stamp_[w], stamp_[v]});
    }
  }

  bool collapse_is_valid(int removed, int kept) const {
    // Link condition: shared neighbours are exactly the apexes of the faces on the edge.
    std::set<int> apex;
    for (int f : incident_[removed]) {
      const Face& face = faces_[f];
      if (std::find(face.begin(), face.end(), kept) == face.end()) continue;
      for (int w : face)
        if (w != removed && w != kept) apex.insert(w);
    }
    if (apex.empty()) return false;
    const std::set<int> nr = neighbours(removed), nk = neighbours(kept);
    std::set<int> common;
    std::set_intersection(nr.begin(), nr.end(), nk.begin(), nk.end(), std::inserter(common, common.end()));
    if (common != apex) return false;
    // The surviving vertex must keep at least three neighbours.
    if (nr.size() + nk.size() - common.size() - 2 < 3) return false;
    // Reject collapses that flip or degenerate a surviving face.
    for (int f : incident_[removed]) {
      const Face& face = faces_[f];
      if (std::find(face.begin(), face.end(), kept) != face.end()) continue;
      Face moved = face;
      for (int& w : moved)
        if (w == removed) w = kept;
      const Vec3 before = normal(face), after = normal(moved);
      if (after.norm() <= 1e-12 * std::max(1.0, before.norm())) return false;
      if (before.dot(after) <= 0.0) return false;
    }
    return true;
  }

  Vec3 normal(const Face& f) const {
    const Vec3 a = pos_.row(f[0]), b = pos_.row(f[1]), c = pos_.row(f[2]);
    return (b - a).cross(c - a);
  }

  void collapse(int removed, int kept) {
    quadric_[kept] += quadric_[removed];
    const std::set<int> faces_of_removed = incident_[removed];
    for (int f : faces_of_removed) {
      Face& face = faces_[f];
      if (std::find(face.begin(), face.end(), kept) != face.end()) {
        face_alive_[f] = false;
        for (int w : face) incident_[w].erase(f);
      } else {
        for (int& w : face)
          if (w == removed) w = kept;
        incident_[kept].insert(f);
      }
    }
    incident_[removed].clear();
    vertex_alive_[removed] = false;
    const std::set<int> ring = neighbours(kept);
    ++stamp_[kept];
    for (int w : ring) ++stamp_[w];
    push_vertex_edges(kept);
    for (int w : ring) push_vertex_edges(w);
  }

  const Positions& pos_;
  std::vector<Face> faces_;
  std::vector<bool> face_alive_;
  std::vector<bool> vertex_alive_;
  std::vector<std::set<int>> incident_;
  std::vector<Quadric> quadric_;
  std::vector<unsigned> stamp_;
  std::vector<int> component_;
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> queue_;
};

// Closest point on triangle abc to p, as barycentric weights (Ericson, RTCD 5.1.5).
Eigen::Vector3d closest_barycentric(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return {1, 0, 0};
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return {0, 1, 0};
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    const double v = d1 / (d1 - d3);
    return {1 - v, v, 0};
  }
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return {0, 0, 1};
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    const double w = d2 / (d2 - d6);
    return {1 - w, 0, w};
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return {0, 1 - w, w};
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return {1 - v - w, v, w};
}

}  // namespace

DecimationResult decimate_qem(const TriangleTopology& topology, const Positions& positions,
                              const std::vector<Index>& target_per_component) {
  Collapser collapser(topology, positions);
  std::vector<int> kept = collapser.run(target_per_component);
  std::vector<int> remap(static_cast<std::size_t>(topology.n_vertices()), -1);
  for (std::size_t i = 0; i < kept.size(); ++i) remap[kept[i]] = static_cast<int>(i);
  std::vector<Face> faces = collapser.surviving_faces();
  for (Face& f : faces)
    for (int& v : f) v = remap[v];
  DecimationResult result;
  result.topology = std::make_shared<const TriangleTopology>(static_cast<Index>(kept.size()), std::move(faces));
  result.kept = std::move(kept);
  return result;
}

SamplingHierarchy build_sampling_hierarchy(std::shared_ptr<const TriangleTopology> topology,
                                           const Positions& reference_positions, Index factor,
                                           Index levels) {
  if (factor < 2) throw std::invalid_argument("sampling factor must be >= 2");
  if (levels < 0) throw std::invalid_argument("level count must be >= 0");
  if (reference_positions.rows() != topology->n_vertices())
    throw MeshError("reference positions do not match topology");

  SamplingHierarchy h;
  h.factor = factor;
  MeshLevel current;
  current.topology = std::move(topology);
  current.reference_positions = reference_positions;
  current.scaled_laplacian = scaled_laplacian(*current.topology);

  for (Index level = 0; level < levels; ++level) {
    const TriangleTopology& topo = *current.topology;
    const std::vector<int> comp = topo.components();
    const int n_comp = comp.empty() ? 0 : *std::max_element(comp.begin(), comp.end()) + 1;
    std::vector<Index> sizes(static_cast<std::size_t>(n_comp), 0), target(sizes.size());
    for (int c : comp) ++sizes[c];
    for (std::size_t c = 0; c < sizes.size(); ++c) {
      target[c] = (sizes[c] + factor - 1) / factor;
      if (target[c] < 4)
        throw MeshError("decimation below 4 vertices (level " + std::to_string(level + 1) + ")");
    }
    DecimationResult dec = decimate_qem(topo, current.reference_positions, target);

    const Index n = topo.n_vertices(), m = static_cast<Index>(dec.kept.size());
    std::vector<Eigen::Triplet<double>> down_entries, up_entries;
    std::vector<int> new_index(static_cast<std::size_t>(n), -1);
    for (Index i = 0; i < m; ++i) {
      down_entries.emplace_back(i, dec.kept[i], 1.0);
      new_index[dec.kept[i]] = static_cast<int>(i);
    }
    Positions coarse(m, 3);
    for (Index i = 0; i < m; ++i) coarse.row(i) = current.reference_positions.row(dec.kept[i]);

    const auto& coarse_faces = dec.topology->faces();
    for (Index v = 0; v < n; ++v) {
      if (new_index[v] >= 0) {
        up_entries.emplace_back(v, new_index[v], 1.0);
        continue;
      }
      const Vec3 p = current.reference_positions.row(v);
      double best = std::numeric_limits<double>::infinity();
      Face best_face{};
      Eigen::Vector3d best_w;
      for (const Face& f : coarse_faces) {
        if (comp[dec.kept[f[0]]] != comp[v]) continue;
        const Vec3 a = coarse.row(f[0]), b = coarse.row(f[1]), c = coarse.row(f[2]);
        const Eigen::Vector3d w = closest_barycentric(p, a, b, c);
        const double d = (p - (w[0] * a + w[1] * b + w[2] * c)).squaredNorm();
        if (d < best) {
          best = d;
          best_face = f;
          best_w = w;
        }
      }
      if (!std::isfinite(best)) throw MeshError("no coarse triangle for removed vertex");
      for (int k = 0; k < 3; ++k)
        if (best_w[k] > 0.0) up_entries.emplace_back(v, best_face[k], best_w[k]);
    }
    current.down.resize(m, n);
    current.down.setFromTriplets(down_entries.begin(), down_entries.end());
    current.down.makeCompressed();
    current.up.resize(n, m);
    current.up.setFromTriplets(up_entries.begin(), up_entries.end());
    current.up.makeCompressed();
    h.levels.push_back(std::move(current));

    current = MeshLevel{};
    current.topology = dec.topology;
    current.reference_positions = std::move(coarse);
    current.scaled_laplacian = scaled_laplacian(*current.topology);
  }
  h.levels.push_back(std::move(current));
  return h;
}

void write_sparse_triplets(const SparseOperator& op, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw MeshError("cannot write " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  out << op.rows() << ' ' << op.cols() << ' ' << op.nonZeros() << '\n';
  for (Index r = 0; r < op.outerSize(); ++r)
    for (SparseOperator::InnerIterator it(op, r); it; ++it)
      out << it.row() << ' ' << it.col() << ' ' << it.value() << '\n';
}

SparseOperator read_sparse_triplets(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open " + path.string());
  Index rows = 0, cols = 0, nnz = 0;
  if (!(in >> rows >> cols >> nnz) || rows < 0 || cols < 0 || nnz < 0)
    throw MeshError(path.string() + ": malformed triplet header");
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(nnz));
  for (Index k = 0; k < nnz; ++k) {
    Index r = 0, c = 0;
    double v = 0;
    if (!(in >> r >> c >> v)) throw MeshError(path.string() + ": truncated triplets");
    if (r < 0 || r >= rows || c < 0 || c >= cols || !std::isfinite(v))
      throw MeshError(path.string() + ": triplet out of range");
    entries.emplace_back(r, c, v);
  }
  SparseOperator op(rows, cols);
  op.setFromTriplets(entries.begin(), entries.end());
  op.makeCompressed();
  return op;
}

void save_hierarchy(const SamplingHierarchy& hierarchy, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["factor"] = hierarchy.factor;
  manifest["levels"] = nlohmann::json::array();
  for (std::size_t k = 0; k < hierarchy.levels.size(); ++k) {
    const MeshLevel& level = hierarchy.levels[k];
    const std::string stem = "level" + std::to_string(k);
    save_mesh(SurfaceMesh(level.topology, level.reference_positions), dir / (stem + ".off"));
    write_sparse_triplets(level.scaled_laplacian, dir / (stem + "_laplacian.txt"));
    nlohmann::json entry = {{"n_vertices", level.topology->n_vertices()},
                            {"n_faces", level.topology->n_faces()},
                            {"mesh", stem + ".off"},
                            {"laplacian", stem + "_laplacian.txt"}};
    if (k + 1 < hierarchy.levels.size()) {
      write_sparse_triplets(level.down, dir / (stem + "_down.txt"));
      write_sparse_triplets(level.up, dir / (stem + "_up.txt"));
      entry["down"] = stem + "_down.txt";
      entry["up"] = stem + "_up.txt";
    }
    manifest["levels"].push_back(entry);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

SamplingHierarchy load_hierarchy(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw MeshError("missing hierarchy manifest in " + dir.string());
  const nlohmann::json manifest = nlohmann::json::parse(in);
  SamplingHierarchy h;
  h.factor = manifest.at("factor").get<Index>();
  for (const auto& entry : manifest.at("levels")) {
    MeshLevel level;
    SurfaceMesh mesh = load_mesh(dir / entry.at("mesh").get<std::string>());
    level.topology = mesh.topology_ptr();
    level.reference_positions = mesh.positions();
    level.scaled_laplacian = read_sparse_triplets(dir / entry.at("laplacian").get<std::string>());
    if (entry.contains("down")) {
      level.down = read_sparse_triplets(dir / entry.at("down").get<std::string>());
      level.up = read_sparse_triplets(dir / entry.at("up").get<std::string>());
    }
    h.levels.push_back(std::move(level));
  }
  return h;
}

}  // namespace cvaenf
