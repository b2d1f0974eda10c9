#include "rap/signal.hpp"

#include <cmath>

#include "rap/errors.hpp"

namespace rap {

double slow_eval(SlowKind kind, double t) {
  switch (kind) {
    case SlowKind::Arctan: return std::atan(t);
    case SlowKind::Tanh: return std::tanh(t);
    case SlowKind::TOverOnePlusAbsT: return t / (1.0 + std::abs(t));
    case SlowKind::SinSqrtOnePlusT2: return std::sin(std::sqrt(1.0 + t * t));
  }
  return 0.0;
}

double slow_sup(SlowKind kind) {
  switch (kind) {
    case SlowKind::Arctan: return M_PI / 2.0;
    case SlowKind::Tanh: return 1.0;
    case SlowKind::TOverOnePlusAbsT: return 1.0;
    case SlowKind::SinSqrtOnePlusT2: return 1.0;
  }
  return 0.0;
}

bool slow_is_odd(SlowKind kind) {
  switch (kind) {
    case SlowKind::Arctan:
    case SlowKind::Tanh:
    case SlowKind::TOverOnePlusAbsT: return true;
    case SlowKind::SinSqrtOnePlusT2: return false;
  }
  return false;
}

void Signal::check_dim(Eigen::Index d) const {
  if (d != dim_)
    throw PreconditionError("Signal: term dimension " + std::to_string(d) +
                            " does not match signal dimension " + std::to_string(dim_));
}

Signal& Signal::add(TrigTerm t) {
  check_dim(t.cos_coef.size());
  check_dim(t.sin_coef.size());
  terms_.emplace_back(std::move(t));
  return *this;
}

Signal& Signal::add(SlowTerm t) {
  check_dim(t.scale.size());
  terms_.emplace_back(std::move(t));
  return *this;
}

Signal& Signal::add(ConstTerm t) {
  check_dim(t.value.size());
  terms_.emplace_back(std::move(t));
  return *this;
}

Signal& Signal::add(CustomTerm t) {
  if (!t.eval) throw PreconditionError("Signal: custom term has no evaluator");
  terms_.emplace_back(std::move(t));
  return *this;
}

Eigen::VectorXd Signal::eval(double t) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim_);
  for (const auto& term : terms_) {
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, TrigTerm>) {
            out += v.cos_coef * std::cos(v.omega * t) + v.sin_coef * std::sin(v.omega * t);
          } else if constexpr (std::is_same_v<T, SlowTerm>) {
            out += v.scale * slow_eval(v.kind, t);
          } else if constexpr (std::is_same_v<T, ConstTerm>) {
            out += v.value;
          } else {
            out += v.eval(t);
          }
        },
        term);
  }
  return out;
}

double Signal::eval_scalar(double t) const {
  if (dim_ != 1) throw PreconditionError("Signal::eval_scalar on non-scalar signal");
  return eval(t)(0);
}

double Signal::sup_bound() const {
  Eigen::VectorXd bound = Eigen::VectorXd::Zero(dim_);
  double custom = 0.0;
  for (const auto& term : terms_) {
    std::visit(
        [&](const auto& v) {
          using T = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<T, TrigTerm>) {
            bound += (v.cos_coef.array().square() + v.sin_coef.array().square()).sqrt().matrix();
          } else if constexpr (std::is_same_v<T, SlowTerm>) {
            bound += v.scale.cwiseAbs() * slow_sup(v.kind);
          } else if constexpr (std::is_same_v<T, ConstTerm>) {
            bound += v.value.cwiseAbs();
          } else {
            custom += v.sup_bound;
          }
        },
        term);
  }
  return bound.norm() + custom;
}

GridFunction Signal::sample(const TimeGrid& grid) const {
  GridFunction out(grid, dim_);
  for (std::size_t k = 0; k < grid.count; ++k) out.set(k, eval(grid.node(k)));
  return out;
}

Signal Signal::scalar_sin(double omega, double amplitude) {
  Signal s(1);
  TrigTerm t;
  t.omega = omega;
  t.cos_coef = Eigen::VectorXd::Zero(1);
  t.sin_coef = Eigen::VectorXd::Constant(1, amplitude);
  s.add(std::move(t));
  return s;
}

Signal Signal::scalar_cos(double omega, double amplitude) {
  Signal s(1);
  TrigTerm t;
  t.omega = omega;
  t.cos_coef = Eigen::VectorXd::Constant(1, amplitude);
  t.sin_coef = Eigen::VectorXd::Zero(1);
  s.add(std::move(t));
  return s;
}

Signal Signal::constant(const Eigen::VectorXd& c) {
  Signal s(c.size());
  s.add(ConstTerm{c});
  return s;
}

double remote_translation_defect(const Signal& s, double tau, double tail, double horizon,
                                 double grid_dt) {
  if (!(grid_dt > 0.0))
    throw PreconditionError("remote_translation_defect: grid_dt must be positive, got " +
                            std::to_string(grid_dt));
  if (!(tail < horizon))
    throw PreconditionError("remote_translation_defect: need tail < horizon");
  double worst = 0.0;
  const auto steps = static_cast<std::size_t>(std::floor((horizon - tail) / grid_dt));
  for (std::size_t k = 0; k <= steps; ++k) {
    const double a = tail + static_cast<double>(k) * grid_dt;
    worst = std::max(worst, (s.eval(a + tau) - s.eval(a)).norm());
    worst = std::max(worst, (s.eval(-a + tau) - s.eval(-a)).norm());
  }
  return worst;
}

TranslationScan epsilon_translation_scan(const Signal& s, double epsilon, double search_range,
                                         double tail, double horizon, double scan_step,
                                         double grid_dt) {
  if (!(epsilon > 0.0)) throw PreconditionError("epsilon_translation_scan: epsilon must be positive");
  if (!(search_range > 0.0))
    throw PreconditionError("epsilon_translation_scan: search_range must be positive");
  TranslationScan out;
  out.scan_step = scan_step;
  const auto n = static_cast<long long>(std::floor(search_range / scan_step));
  for (long long k = -n; k <= n; ++k) {
    const double tau = static_cast<double>(k) * scan_step;
    const double d = remote_translation_defect(s, tau, tail, horizon, grid_dt);
    if (d < epsilon) out.accepted.emplace_back(tau, d);
  }
  if (out.accepted.size() >= 2) {
    double gap = 0.0;
    for (std::size_t i = 1; i < out.accepted.size(); ++i)
      gap = std::max(gap, out.accepted[i].first - out.accepted[i - 1].first);
    out.max_gap = gap;
  }
  return out;
}

Eigen::VectorXd ergodic_mean(const Signal& s, double T, double dt) {
  if (!(T > 0.0)) throw PreconditionError("ergodic_mean: T must be positive");
  auto half = static_cast<std::size_t>(std::ceil(T / dt - 1e-12));
  if (half < 1) half = 1;
  const double h = T / static_cast<double>(half);
  // Symmetric pairing cancels odd terms to rounding error.
  Eigen::VectorXd sum = s.eval(0.0);
  for (std::size_t k = 1; k < half; ++k) {
    const double t = static_cast<double>(k) * h;
    sum += s.eval(t) + s.eval(-t);
  }
  sum += 0.5 * (s.eval(T) + s.eval(-T));
  return sum * h / (2.0 * T);
}

}  // namespace rap
