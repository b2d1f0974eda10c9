#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "rap/errors.hpp"

namespace rap {

/// Uniform discretization of a time interval. Nodes are t_start + k*dt for
/// k in [0, count). All quadrature and sup-norm estimation in the library
/// happens on such grids.
struct TimeGrid {
  double t_start = 0.0;
  double dt = 1.0;
  std::size_t count = 2;

  TimeGrid() = default;
  TimeGrid(double start, double step, std::size_t n) : t_start(start), dt(step), count(n) {
    if (!(dt > 0.0)) throw PreconditionError("TimeGrid: dt must be positive, got " + std::to_string(dt));
    if (count < 2) throw PreconditionError("TimeGrid: count must be >= 2, got " + std::to_string(count));
  }

  /// Grid covering [t_lo, t_hi] with step <= dt_request (end node included;
  /// the step is shrunk so the span is hit exactly).
  static TimeGrid over(double t_lo, double t_hi, double dt_request) {
    if (!(t_hi > t_lo)) throw PreconditionError("TimeGrid::over: empty interval");
    if (!(dt_request > 0.0)) throw PreconditionError("TimeGrid::over: dt must be positive");
    auto n = static_cast<std::size_t>(std::ceil((t_hi - t_lo) / dt_request - 1e-12));
    if (n < 1) n = 1;
    return TimeGrid(t_lo, (t_hi - t_lo) / static_cast<double>(n), n + 1);
  }

  double node(std::size_t k) const { return t_start + static_cast<double>(k) * dt; }
  double t_end() const { return node(count - 1); }
  double span() const { return t_end() - t_start; }

  bool contains(double t, double slack = 1e-9) const {
    return t >= t_start - slack * dt && t <= t_end() + slack * dt;
  }

  /// Index of the node nearest to t (clamped to the grid).
  std::size_t nearest_index(double t) const {
    double x = (t - t_start) / dt;
    if (x <= 0.0) return 0;
    auto k = static_cast<std::size_t>(std::llround(x));
    return k >= count ? count - 1 : k;
  }

  /// True when `other` lives on this grid's lattice: same dt and an offset
  /// that is an integer number of steps, with span inside this span.
  bool aligned_subgrid(const TimeGrid& other, double rel_tol = 1e-9) const {
    if (std::abs(other.dt - dt) > rel_tol * dt) return false;
    double off = (other.t_start - t_start) / dt;
    if (std::abs(off - std::llround(off)) > rel_tol) return false;
    long long k0 = std::llround(off);
    return k0 >= 0 && static_cast<std::size_t>(k0) + other.count <= count;
  }

  /// Step offset of an aligned subgrid (call aligned_subgrid first).
  std::size_t offset_of(const TimeGrid& other) const {
    return static_cast<std::size_t>(std::llround((other.t_start - t_start) / dt));
  }

  /// This grid extended by whole steps covering at least the given margins.
  TimeGrid padded(double pad_left, double pad_right) const {
    const auto nl = static_cast<std::size_t>(std::ceil(pad_left / dt - 1e-9));
    const auto nr = static_cast<std::size_t>(std::ceil(pad_right / dt - 1e-9));
    return TimeGrid(t_start - static_cast<double>(nl) * dt, dt, count + nl + nr);
  }
};

}  // namespace rap
