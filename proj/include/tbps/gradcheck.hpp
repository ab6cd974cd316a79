#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/rng.hpp"

namespace tbps {

struct GradCheckOptions {
  int instances = 20;
  double tolerance = 1e-4;
  double step = 1e-6;
  int max_coords = 48;  // sampled coordinates per leaf
  std::uint64_t seed = 0;
  std::vector<std::string> only;  // empty runs every row
  std::string fault;              // row whose analytic gradient is corrupted
};

struct GradCheckRow {
  std::string name;
  int instances = 0;
  int redraws = 0;  // instances rejected for sitting on a kink
  double max_rel_error = 0;
  bool pass = false;
};

// One random instance: trainable leaves and a scalar function of them.
struct GradCheckInstance {
  std::vector<ad::Var> leaves;
  std::function<ad::Var()> f;
};

struct GradCheckResult {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  bool kink = false;     // one-sided differences disagree at some coordinate
};

// Central differences on up to max_coords coordinates of every leaf.
GradCheckResult check_instance(const GradCheckInstance& inst, double step, int max_coords, Rng& rng,
                               bool corrupt = false);

std::vector<std::string> gradcheck_names();
std::vector<GradCheckRow> run_gradcheck(const GradCheckOptions& opts);

}  // namespace tbps
