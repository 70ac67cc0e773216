#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "spcm/autograd.hpp"
#include "spcm/rng.hpp"

namespace spcm {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::string worst;  // "param[flat_index]" of the worst coordinate
};

// Central-difference check of analytic gradients. `loss(true)` must rebuild
// the graph, run backward and leave gradients in Parameter::grad; `loss(false)`
// only evaluates. With max_coords_per_param == 0 every coordinate is checked,
// otherwise a seeded subset per parameter.
inline GradCheckResult finite_diff_check(const std::vector<Parameter*>& params,
                                         const std::function<double(bool)>& loss,
                                         double eps = 1e-5,
                                         std::size_t max_coords_per_param = 0,
                                         std::uint64_t seed = 0x5eed,
                                         double abs_floor = 1e-8) {
  zero_grads(params);
  loss(true);
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult res;
  Rng rng(seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    const std::size_t n = p->value.numel();
    std::vector<std::size_t> coords;
    if (max_coords_per_param == 0 || n <= max_coords_per_param) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < max_coords_per_param; ++i)
        coords.push_back(std::size_t(rng.uniform_int(n)));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    }
    for (std::size_t j : coords) {
      const double orig = p->value[j];
      p->value[j] = orig + eps;
      const double lp = loss(false);
      p->value[j] = orig - eps;
      const double lm = loss(false);
      p->value[j] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = analytic[pi][j];
      const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), abs_floor});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = strf("%s[%zu]", p->name.c_str(), j);
      }
    }
  }
  return res;
}

}  // namespace spcm
