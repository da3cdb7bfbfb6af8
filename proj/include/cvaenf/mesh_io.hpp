#pragma once

#include "cvaenf/mesh.hpp"

#include <filesystem>

namespace cvaenf {

/// Reads an OFF or ASCII-PLY triangle mesh; the format is chosen by extension.
/// Throws MeshError on malformed headers, out-of-range indices or non-triangle faces.
SurfaceMesh load_mesh(const std::filesystem::path& path);

/// Like load_mesh, but reuses `topology` when the file's faces match it, so a
/// population loaded this way shares one topology object.
SurfaceMesh load_mesh(const std::filesystem::path& path,
                      const std::shared_ptr<const TriangleTopology>& topology);

/// Writes OFF or ASCII-PLY by extension, with round-trip exact coordinates.
void save_mesh(const SurfaceMesh& mesh, const std::filesystem::path& path);

}  // namespace cvaenf
