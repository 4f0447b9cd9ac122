#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iselab/tensor.hpp"

namespace iselab {

struct OpGradReport {
  std::string op;
  int instances = 0;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckTol = 1e-6;

/// Runs grad_check in double precision over random instances of every
/// differentiable op, plus a full two-layer model whose loss is checked
/// against finite differences for every parameter tensor.
std::vector<OpGradReport> run_grad_check_suite(std::uint64_t seed, int instances_per_op = 100);

bool all_pass(const std::vector<OpGradReport>& reports);

/// Formats the per-op error table printed by the grad-check command.
std::string format_grad_report(const std::vector<OpGradReport>& reports);

}  // namespace iselab
