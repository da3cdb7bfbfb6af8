#pragma once

#include <filesystem>
#include <string>

namespace scratch {

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / "cvaenf_tests" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace scratch
