#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "scd/rng.hpp"
#include "scd/tensor.hpp"

namespace scd {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::int64_t checked_coords = 0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;
  bool finite = true;  // false when any value/gradient was NaN/Inf
  std::vector<GradCheckEntry> entries;

  bool passed(double tol) const { return finite && max_rel_err < tol; }
};

// Compares analytic gradients against central finite differences with
// per-coordinate step h = h_scale*(1+|x|). `loss_fn` must rebuild the
// forward pass from the current values of the checked tensors. When
// max_coords > 0, at most that many coordinates per tensor are probed
// (chosen deterministically from `seed`).
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<std::pair<std::string, Tensor>> checked,
                                  double h_scale = 1e-5, std::int64_t max_coords = -1,
                                  std::uint64_t seed = 0) {
  GradCheckReport report;

  for (auto& [name, t] : checked) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  if (!std::isfinite(loss.item())) {
    report.finite = false;
    report.worst = "<loss>";
    return report;
  }
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(checked.size());
  for (auto& [name, t] : checked) analytic.push_back(t.grad());

  auto eval = [&]() {
    NoGradGuard ng;
    return loss_fn().item();
  };

  for (std::size_t pi = 0; pi < checked.size(); ++pi) {
    auto& [name, t] = checked[pi];
    GradCheckEntry entry;
    entry.name = name;
    const std::int64_t n = t.size();
    std::vector<std::int64_t> coords;
    if (max_coords > 0 && n > max_coords) {
      Rng rng = Rng::derive(seed, 0x6fd1u, pi);
      for (std::int64_t c = 0; c < max_coords; ++c)
        coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t c = 0; c < n; ++c) coords[static_cast<std::size_t>(c)] = c;
    }
    for (auto c : coords) {
      double& x = t.values()[static_cast<std::size_t>(c)];
      const double saved = x;
      const double h = h_scale * (1.0 + std::abs(saved));
      x = saved + h;
      const double fp = eval();
      x = saved - h;
      const double fm = eval();
      x = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][static_cast<std::size_t>(c)];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.finite = false;
        report.worst = name;
        continue;
      }
      const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
      if (rel > entry.max_rel_err) entry.max_rel_err = rel;
      ++entry.checked_coords;
    }
    if (entry.max_rel_err > report.max_rel_err) {
      report.max_rel_err = entry.max_rel_err;
      report.worst = name;
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace scd
