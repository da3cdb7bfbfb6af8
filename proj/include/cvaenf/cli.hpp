#pragma once

#include "cvaenf/flows.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace cvaenf {

enum ExitCode { kExitOk = 0, kExitUsage = 2, kExitNumerical = 3 };

/// Runs one command line (without the program name), e.g.
/// {"train", "--data", "d", "--config", "c.json", "--out", "o"}.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Seeded 2-D chain of expanding planar units used by `flow-demo`; the units push
/// mass away from their hyperplanes, so a Gaussian base becomes multimodal.
FlowChain<double> demo_flow_chain(int steps, std::uint64_t seed);

}  // namespace cvaenf
