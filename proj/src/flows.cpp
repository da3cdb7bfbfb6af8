#include "cvaenf/flows.hpp"

namespace cvaenf {

std::vector<DensityGridPoint> export_density_grid(const FlowChain<double>& chain, const GridBounds& bounds,
                                                  int resolution_x, int resolution_y) {
  if (chain.dim() != 2) throw std::invalid_argument("export_density_grid: chain must be 2-dimensional");
  if (resolution_x < 1 || resolution_y < 1) throw std::invalid_argument("export_density_grid: empty grid");
  const double dx = (bounds.x_max - bounds.x_min) / resolution_x;
  const double dy = (bounds.y_max - bounds.y_min) / resolution_y;
  std::vector<DensityGridPoint> out;
  out.reserve(static_cast<std::size_t>(resolution_x) * static_cast<std::size_t>(resolution_y));
  for (int j = 0; j < resolution_y; ++j) {
    for (int i = 0; i < resolution_x; ++i) {
      const Eigen::Vector2d z0(bounds.x_min + (i + 0.5) * dx, bounds.y_min + (j + 0.5) * dy);
      const LatentState<double> s = chain_forward(z0, chain);
      const double log_q = standard_normal_log_density(z0) - s.sum_log_det;
      out.push_back({s.z_final[0], s.z_final[1], std::exp(log_q)});
    }
  }
  return out;
}

}  // namespace cvaenf
