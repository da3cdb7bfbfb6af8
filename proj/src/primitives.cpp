#include "cvaenf/primitives.hpp"

#include <map>

namespace cvaenf {

SurfaceMesh make_cube(double side) {
  const double h = side / 2.0;
  Positions p(8, 3);
  p << -h, -h, -h,  //
      h, -h, -h,    //
      h, h, -h,     //
      -h, h, -h,    //
      -h, -h, h,    //
      h, -h, h,     //
      h, h, h,      //
      -h, h, h;
  std::vector<Face> faces = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                             {1, 2, 6}, {1, 6, 5}, {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7}};
  return SurfaceMesh(std::make_shared<const TriangleTopology>(8, std::move(faces)), std::move(p));
}

SurfaceMesh make_icosphere(double radius, int subdivisions) {
  if (subdivisions < 0 || subdivisions > 6) throw std::invalid_argument("icosphere subdivisions must be in [0, 6]");
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> verts = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0},
                                        {0, -1, t}, {0, 1, t},  {0, -1, -t}, {0, 1, -t},
                                        {t, 0, -1}, {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& v : verts) v.normalize();
  std::vector<Face> faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      const int idx = static_cast<int>(verts.size()) - 1;
      midpoint.emplace(key, idx);
      return idx;
    };
    std::vector<Face> next;
    next.reserve(faces.size() * 4);
    for (const Face& f : faces) {
      const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  Positions p(static_cast<Index>(verts.size()), 3);
  for (std::size_t i = 0; i < verts.size(); ++i) p.row(static_cast<Index>(i)) = radius * verts[i].transpose();
  const Index n = p.rows();
  return SurfaceMesh(std::make_shared<const TriangleTopology>(n, std::move(faces)), std::move(p));
}

}  // namespace cvaenf
