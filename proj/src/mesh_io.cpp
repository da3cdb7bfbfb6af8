#include "cvaenf/mesh_io.hpp"

#include <fstream>
#include <limits>
#include <sstream>
#include <string>

namespace cvaenf {
namespace {

std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  for (char& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext;
}

// Next non-empty, non-comment line.
bool next_line(std::istream& in, std::string& line) {
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    return true;
  }
  return false;
}

struct RawMesh {
  Positions positions;
  std::vector<Face> faces;
};

Face read_face(std::istringstream& row, const std::string& where) {
  long count = 0;
  if (!(row >> count)) throw MeshError(where + ": missing face vertex count");
  if (count != 3) throw MeshError(where + ": non-triangle face");
  Face f{};
  for (int& v : f) {
    long long idx = 0;
    if (!(row >> idx)) throw MeshError(where + ": truncated face");
    if (idx < 0 || idx > std::numeric_limits<int>::max()) throw MeshError(where + ": bad face index");
    v = static_cast<int>(idx);
  }
  return f;
}

RawMesh read_off(std::istream& in, const std::string& name) {
  std::string line;
  if (!next_line(in, line)) throw MeshError(name + ": empty file");
  std::istringstream head(line);
  std::string magic;
  head >> magic;
  if (magic != "OFF") throw MeshError(name + ": malformed header, expected OFF");
  long nv = -1, nf = -1, ne = 0;
  if (!(head >> nv)) {
    if (!next_line(in, line)) throw MeshError(name + ": missing counts");
    head = std::istringstream(line);
    head >> nv;
  }
  if (!(head >> nf >> ne) || nv < 0 || nf < 0) throw MeshError(name + ": malformed header counts");
  RawMesh raw;
  raw.positions.resize(nv, 3);
  for (long i = 0; i < nv; ++i) {
    if (!next_line(in, line)) throw MeshError(name + ": truncated vertex list");
    std::istringstream row(line);
    if (!(row >> raw.positions(i, 0) >> raw.positions(i, 1) >> raw.positions(i, 2)))
      throw MeshError(name + ": malformed vertex line");
  }
  raw.faces.reserve(static_cast<std::size_t>(nf));
  for (long i = 0; i < nf; ++i) {
    if (!next_line(in, line)) throw MeshError(name + ": truncated face list");
    std::istringstream row(line);
    raw.faces.push_back(read_face(row, name));
  }
  return raw;
}

RawMesh read_ply(std::istream& in, const std::string& name) {
  std::string line;
  if (!next_line(in, line) || line.rfind("ply", 0) != 0) throw MeshError(name + ": malformed header, expected ply");
  long nv = -1, nf = -1;
  std::vector<std::string> vertex_props;
  std::string current;
  bool ascii = false;
  while (true) {
    if (!next_line(in, line)) throw MeshError(name + ": unterminated header");
    std::istringstream tok(line);
    std::string key;
    tok >> key;
    if (key == "end_header") break;
    if (key == "format") {
      std::string fmt;
      tok >> fmt;
      ascii = fmt == "ascii";
    } else if (key == "element") {
      long count = -1;
      tok >> current >> count;
      if (current == "vertex") nv = count;
      else if (current == "face") nf = count;
      else if (count != 0) throw MeshError(name + ": unsupported element '" + current + "'");
    } else if (key == "property" && current == "vertex") {
      std::string type, prop;
      tok >> type >> prop;
      vertex_props.push_back(prop);
    }
  }
  if (!ascii) throw MeshError(name + ": only ASCII PLY is supported");
  if (nv < 0 || nf < 0) throw MeshError(name + ": malformed header, missing vertex/face element");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < vertex_props.size(); ++i) {
    if (vertex_props[i] == "x") ix = static_cast<int>(i);
    if (vertex_props[i] == "y") iy = static_cast<int>(i);
    if (vertex_props[i] == "z") iz = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw MeshError(name + ": vertex element lacks x/y/z");
  RawMesh raw;
  raw.positions.resize(nv, 3);
  std::vector<double> values(vertex_props.size());
  for (long i = 0; i < nv; ++i) {
    if (!next_line(in, line)) throw MeshError(name + ": truncated vertex list");
    std::istringstream row(line);
    for (double& v : values)
      if (!(row >> v)) throw MeshError(name + ": malformed vertex line");
    raw.positions.row(i) << values[ix], values[iy], values[iz];
  }
  for (long i = 0; i < nf; ++i) {
    if (!next_line(in, line)) throw MeshError(name + ": truncated face list");
    std::istringstream row(line);
    raw.faces.push_back(read_face(row, name));
  }
  return raw;
}

RawMesh read_raw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MeshError("cannot open " + path.string());
  const std::string ext = lower_extension(path);
  if (ext == ".off") return read_off(in, path.string());
  if (ext == ".ply") return read_ply(in, path.string());
  throw MeshError(path.string() + ": unsupported mesh extension '" + ext + "'");
}

}  // namespace

SurfaceMesh load_mesh(const std::filesystem::path& path) {
  RawMesh raw = read_raw(path);
  const Index n = raw.positions.rows();
  auto topology = std::make_shared<const TriangleTopology>(n, std::move(raw.faces));
  return SurfaceMesh(std::move(topology), std::move(raw.positions));
}

SurfaceMesh load_mesh(const std::filesystem::path& path,
                      const std::shared_ptr<const TriangleTopology>& topology) {
  RawMesh raw = read_raw(path);
  if (topology && raw.positions.rows() == topology->n_vertices() && raw.faces == topology->faces())
    return SurfaceMesh(topology, std::move(raw.positions));
  const Index n = raw.positions.rows();
  return SurfaceMesh(std::make_shared<const TriangleTopology>(n, std::move(raw.faces)),
                     std::move(raw.positions));
}

void save_mesh(const SurfaceMesh& mesh, const std::filesystem::path& path) {
  const std::string ext = lower_extension(path);
  if (ext != ".off" && ext != ".ply") throw MeshError(path.string() + ": unsupported mesh extension");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw MeshError("cannot write " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  const auto& p = mesh.positions();
  const auto& faces = mesh.topology().faces();
  if (ext == ".off") {
    out << "OFF\n" << p.rows() << ' ' << faces.size() << " 0\n";
  } else {
    out << "ply\nformat ascii 1.0\nelement vertex " << p.rows()
        << "\nproperty double x\nproperty double y\nproperty double z\nelement face " << faces.size()
        << "\nproperty list uchar int vertex_indices\nend_header\n";
  }
  for (Index i = 0; i < p.rows(); ++i) out << p(i, 0) << ' ' << p(i, 1) << ' ' << p(i, 2) << '\n';
  for (const Face& f : faces) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

}  // namespace cvaenf
