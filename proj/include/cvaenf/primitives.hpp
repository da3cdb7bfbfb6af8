#pragma once

#include "cvaenf/mesh.hpp"

namespace cvaenf {

/// Axis-aligned cube centred at the origin, 8 vertices and 12 outward-wound triangles.
SurfaceMesh make_cube(double side);

/// Subdivided icosahedron projected onto a sphere of `radius` about the origin.
/// 10 * 4^s + 2 vertices; subdivisions must lie in [0, 6].
SurfaceMesh make_icosphere(double radius, int subdivisions);

}  // namespace cvaenf
