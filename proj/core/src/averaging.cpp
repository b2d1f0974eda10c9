#include "rap/averaging.hpp"

#include <array>
#include <cmath>

#include "rap/errors.hpp"
#include "rap/green.hpp"
#include "rap/parallel.hpp"
#include "rap/quadrature.hpp"

namespace rap {

namespace {

// Catmull-Rom weights for a unit-interval parameter.
std::array<double, 4> catmull_weights(double u) {
  const double u2 = u * u, u3 = u2 * u;
  return {0.5 * (-u + 2.0 * u2 - u3), 0.5 * (2.0 - 5.0 * u2 + 3.0 * u3),
          0.5 * (u + 4.0 * u2 - 3.0 * u3), 0.5 * (-u2 + u3)};
}

std::array<std::size_t, 4> stencil(double pos, std::size_t n, double& frac) {
  double x = pos;
  if (x < 0.0) x = 0.0;
  const double last = static_cast<double>(n - 1);
  if (x > last) x = last;
  auto i = static_cast<std::size_t>(std::floor(x));
  if (i >= n - 1) i = n - 2;
  frac = x - static_cast<double>(i);
  auto clampi = [n](long long k) {
    if (k < 0) return std::size_t{0};
    if (k >= static_cast<long long>(n)) return n - 1;
    return static_cast<std::size_t>(k);
  };
  const auto ii = static_cast<long long>(i);
  return {clampi(ii - 1), clampi(ii), clampi(ii + 1), clampi(ii + 2)};
}

Eigen::VectorXd symmetric_vector_mean(
    const std::function<Eigen::VectorXd(double)>& f, double T, double dt_request) {
  auto half = static_cast<std::size_t>(std::ceil(T / dt_request - 1e-12));
  if (half < 1) half = 1;
  const double dt = T / static_cast<double>(half);
  Eigen::VectorXd sum = f(0.0);
  for (std::size_t k = 1; k < half; ++k) {
    const double t = static_cast<double>(k) * dt;
    sum += f(t) + f(-t);
  }
  sum += 0.5 * (f(T) + f(-T));
  return sum * dt / (2.0 * T);
}

std::vector<Eigen::VectorXd> axis_probes(Eigen::Index dim, double radius) {
  std::vector<Eigen::VectorXd> out;
  out.push_back(Eigen::VectorXd::Zero(dim));
  for (Eigen::Index ax = 0; ax < dim; ++ax) {
    for (const double frac : {0.35, 0.7, 1.0}) {
      Eigen::VectorXd v = Eigen::VectorXd::Zero(dim);
      v(ax) = frac * radius;
      out.push_back(v);
      out.push_back(-v);
    }
  }
  if (dim > 1) {
    Eigen::VectorXd v = Eigen::VectorXd::Constant(dim, radius / std::sqrt(static_cast<double>(dim)));
    out.push_back(v);
    out.push_back(-v);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Field diagnostics and averages
// ---------------------------------------------------------------------------

VanishingReport check_vanishing(const ParamField& field, const std::vector<double>& nus,
                                double t_span) {
  VanishingReport rep;
  rep.nus = nus;
  const auto probes = axis_probes(field.dim, field.W_radius);
  for (const double nu : nus) {
    double fs = 0.0, dfs = 0.0;
    for (int i = 0; i <= 64; ++i) {
      const double t = -t_span + 2.0 * t_span * i / 64.0;
      for (const auto& x : probes) {
        fs = std::max(fs, field.value(t, x, nu).norm());
        dfs = std::max(dfs, field.jacobian(t, x, nu).operatorNorm());
      }
    }
    rep.f_sup.push_back(fs);
    rep.df_sup.push_back(dfs);
  }
  rep.vanishing = true;
  for (std::size_t i = 1; i < nus.size(); ++i) {
    if (rep.f_sup[i] > rep.f_sup[i - 1] + 1e-12 || rep.df_sup[i] > rep.df_sup[i - 1] + 1e-12)
      rep.vanishing = false;
  }
  if (!rep.f_sup.empty() &&
      (rep.f_sup.back() > 0.5 * rep.f_sup.front() + 1e-12 ||
       rep.df_sup.back() > 0.5 * rep.df_sup.front() + 1e-12))
    rep.vanishing = false;
  return rep;
}

Eigen::VectorXd time_average(const ParamField& field, const Eigen::VectorXd& x, double T,
                             double dt) {
  if (!(T > 0.0)) throw PreconditionError("time_average: T must be positive");
  const double nu = field.nu_ref;
  return symmetric_vector_mean([&](double t) { return field.value(t, x, nu); }, T, dt);
}

AveragedField averaged_field(const ParamField& field, double nu_slot, double T, double dt) {
  AveragedField out;
  out.dim = field.dim;
  ParamField f = field;
  out.value = [f, nu_slot, T, dt](const Eigen::VectorXd& x) {
    return symmetric_vector_mean([&](double t) { return f.value(t, x, nu_slot); }, T, dt);
  };
  out.jacobian = [f, nu_slot, T, dt](const Eigen::VectorXd& x) {
    const Eigen::Index d = f.dim;
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
    // Column-by-column symmetric mean of the jacobian.
    for (Eigen::Index j = 0; j < d; ++j) {
      const Eigen::VectorXd col = symmetric_vector_mean(
          [&](double t) -> Eigen::VectorXd { return f.jacobian(t, x, nu_slot).col(j); }, T, dt);
      acc.col(j) = col;
    }
    return acc;
  };
  return out;
}

// ---------------------------------------------------------------------------
// Exponential smoothing
// ---------------------------------------------------------------------------

Eigen::VectorXd exp_smooth(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& H,
                           const Eigen::VectorXd& x, double nu, double t, double tail_tol,
                           double H_sup, double du) {
  if (!(nu > 0.0)) throw PreconditionError("exp_smooth: nu must be positive, got " + std::to_string(nu));
  if (!(tail_tol > 0.0)) throw PreconditionError("exp_smooth: tail_tol must be positive");
  const double arg = std::max(H_sup, 1e-300) / (nu * tail_tol);
  const double window = arg > 1.0 ? std::log(arg) / nu : du;
  auto panels = static_cast<std::size_t>(std::ceil(window / du));
  if (panels % 2 != 0) ++panels;
  if (panels < 2) panels = 2;
  const double h = window / static_cast<double>(panels);
  // Composite Simpson of e^{-nu u} H(t - u, x) over [0, window].
  Eigen::VectorXd sum = H(t, x) + std::exp(-nu * window) * H(t - window, x);
  for (std::size_t k = 1; k < panels; ++k) {
    const double u = static_cast<double>(k) * h;
    sum += ((k % 2 != 0) ? 4.0 : 2.0) * std::exp(-nu * u) * H(t - u, x);
  }
  return sum * h / 3.0;
}

double smoothing_defect_xi(const std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)>& H,
                           const Eigen::VectorXd& x, double nu, double t_window, double dt) {
  if (!(nu > 0.0)) throw PreconditionError("smoothing_defect_xi: nu must be positive");
  const double u_max = 50.0 / nu;
  // Prefix integrals of H(., x) over one lattice covering all translates.
  const double lat_lo = -t_window - u_max;
  const auto n_lat = static_cast<std::size_t>(std::ceil((t_window - lat_lo) / dt)) + 1;
  const Eigen::Index d = x.size();
  Eigen::MatrixXd prefix(static_cast<Eigen::Index>(n_lat), d);
  prefix.row(0).setZero();
  Eigen::VectorXd prev = H(lat_lo, x);
  for (std::size_t k = 1; k < n_lat; ++k) {
    const Eigen::VectorXd cur = H(lat_lo + static_cast<double>(k) * dt, x);
    prefix.row(static_cast<Eigen::Index>(k)) =
        prefix.row(static_cast<Eigen::Index>(k) - 1) + (0.5 * dt) * (prev + cur).transpose();
    prev = cur;
  }
  // Translate sample points on the lattice, spread over [-t_window, t_window].
  std::vector<std::size_t> t_idx;
  const auto first_t = static_cast<std::size_t>(std::llround((0.0 - (lat_lo - (-t_window))) / dt));
  (void)first_t;
  const auto t0_idx = static_cast<std::size_t>(std::llround((-t_window - lat_lo) / dt));
  const std::size_t t_count = 201;
  for (std::size_t i = 0; i < t_count; ++i)
    t_idx.push_back(t0_idx + ((n_lat - 1 - t0_idx) * i) / (t_count - 1));

  // u lattice: multiples of m*dt.
  const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(u_max / dt / 2000.0)));
  const double du = static_cast<double>(m) * dt;
  const auto n_u = static_cast<std::size_t>(std::floor(u_max / du));
  auto h_of = [&](std::size_t j) {  // h(u_j): sup over translates of the window mean
    const std::size_t steps = j * m;
    double worst = 0.0;
    for (const std::size_t ti : t_idx) {
      if (ti < steps) continue;
      const double nrm = (prefix.row(static_cast<Eigen::Index>(ti)) -
                          prefix.row(static_cast<Eigen::Index>(ti - steps)))
                             .norm();
      worst = std::max(worst, nrm / (static_cast<double>(j) * du));
    }
    return worst;
  };
  // Simpson in u of h(u) u e^{-nu u}; integrand vanishes at u = 0.
  auto integrand = [&](std::size_t j) {
    if (j == 0) return 0.0;
    const double u = static_cast<double>(j) * du;
    return h_of(j) * u * std::exp(-nu * u);
  };
  const std::size_t panels = n_u % 2 == 0 ? n_u : n_u - 1;
  double sum = integrand(0) + integrand(panels);
  for (std::size_t j = 1; j < panels; ++j) sum += ((j % 2 != 0) ? 4.0 : 2.0) * integrand(j);
  return nu * nu * sum * du / 3.0;
}

// ---------------------------------------------------------------------------
// Mollifier
// ---------------------------------------------------------------------------

double Mollifier::operator()(const Eigen::VectorXd& x) const {
  const double r2 = x.squaredNorm() / (a * a);
  if (r2 > 1.0) return 0.0;
  return d_a * std::pow(1.0 - r2, 2 * q);
}

Eigen::VectorXd Mollifier::grad(const Eigen::VectorXd& x) const {
  const double r2 = x.squaredNorm() / (a * a);
  if (r2 >= 1.0) return Eigen::VectorXd::Zero(x.size());
  const double factor = d_a * 2.0 * q * std::pow(1.0 - r2, 2 * q - 1) * (-2.0 / (a * a));
  return factor * x;
}

Mollifier mollifier_build(double a, int q, int dim) {
  if (!(a > 0.0)) throw PreconditionError("mollifier_build: a must be positive");
  if (q < 1) throw PreconditionError("mollifier_build: q must be >= 1");
  if (dim < 1 || dim > 3)
    throw PreconditionError("mollifier_build: unsupported dimension " + std::to_string(dim));
  // Radial reduction: int_{B_a} (1-|x|^2/a^2)^{2q} dx
  //                  = sigma_d int_0^a (1-r^2/a^2)^{2q} r^{d-1} dr.
  const double sigma = dim == 1 ? 2.0 : (dim == 2 ? 2.0 * M_PI : 4.0 * M_PI);
  auto radial = [a, q, dim](double r) {
    return std::pow(1.0 - r * r / (a * a), 2 * q) * std::pow(r, dim - 1);
  };
  const double integral = sigma * adaptive_simpson(radial, 0.0, a, 1e-14 * std::max(1.0, a));
  Mollifier m;
  m.a = a;
  m.q = q;
  m.dim = dim;
  m.d_a = 1.0 / integral;
  return m;
}

double mollifier_mass(const Mollifier& m, double tol) {
  const double a = m.a;
  if (m.dim == 1) {
    return adaptive_simpson([&](double x) { return m(Eigen::VectorXd::Constant(1, x)); }, -a, a,
                            tol);
  }
  if (m.dim == 2) {
    return adaptive_simpson(
        [&](double x) {
          return adaptive_simpson(
              [&](double y) {
                Eigen::VectorXd v(2);
                v << x, y;
                return m(v);
              },
              -a, a, tol * 0.1);
        },
        -a, a, tol);
  }
  return adaptive_simpson(
      [&](double x) {
        return adaptive_simpson(
            [&](double y) {
              return adaptive_simpson(
                  [&](double z) {
                    Eigen::VectorXd v(3);
                    v << x, y, z;
                    return m(v);
                  },
                  -a, a, tol * 0.01);
            },
            -a, a, tol * 0.1);
      },
      -a, a, tol);
}

// ---------------------------------------------------------------------------
// Smoothed field table
// ---------------------------------------------------------------------------

SmoothedField::SmoothedField(std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> H,
                             Eigen::Index dim, double nu, const TimeGrid& tgrid,
                             const Eigen::VectorXd& x_lo, const Eigen::VectorXd& x_hi,
                             std::size_t probes_per_axis, double tail_tol, double H_sup)
    : H_(std::move(H)), dim_(dim), nu_(nu), tgrid_(tgrid), x_lo_(x_lo) {
  if (!(nu > 0.0)) throw PreconditionError("SmoothedField: nu must be positive");
  if (probes_per_axis < 4) probes_per_axis = 4;
  nx_ = probes_per_axis;
  xcells_ = 1;
  for (Eigen::Index ax = 0; ax < dim_; ++ax) xcells_ *= nx_;
  hx_ = (x_hi - x_lo) / static_cast<double>(nx_ - 1);
  data_.assign(tgrid_.count * xcells_ * static_cast<std::size_t>(dim_), 0.0);

  const double arg = std::max(H_sup, 1e-300) / (nu * tail_tol);
  const double window = arg > 1.0 ? std::log(arg) / nu : tgrid.dt;
  const double dt = tgrid_.dt;
  const double decay_full = std::exp(-nu * dt);
  const double decay_half = std::exp(-nu * dt * 0.5);

  parallel_for_chunks(xcells_, 8, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t cell = c0; cell < c1; ++cell) {
      Eigen::VectorXd x(dim_);
      std::size_t rem = cell;
      for (Eigen::Index ax = dim_ - 1; ax >= 0; --ax) {
        x(ax) = x_lo_(ax) + static_cast<double>(rem % nx_) * hx_(ax);
        rem /= nx_;
      }
      // Startup value by composite Simpson over the truncation window.
      const double t0 = tgrid_.t_start;
      auto panels = static_cast<std::size_t>(std::ceil(window / dt));
      if (panels % 2 != 0) ++panels;
      if (panels < 2) panels = 2;
      const double hu = window / static_cast<double>(panels);
      Eigen::VectorXd F = H_(t0, x) + std::exp(-nu * window) * H_(t0 - window, x);
      for (std::size_t k = 1; k < panels; ++k) {
        const double u = static_cast<double>(k) * hu;
        F += ((k % 2 != 0) ? 4.0 : 2.0) * std::exp(-nu * u) * H_(t0 - u, x);
      }
      F *= hu / 3.0;

      auto store = [&](std::size_t ti, const Eigen::VectorXd& v) {
        for (Eigen::Index c = 0; c < dim_; ++c)
          data_[(ti * xcells_ + cell) * static_cast<std::size_t>(dim_) + static_cast<std::size_t>(c)] = v(c);
      };
      store(0, F);
      // Exponential-window recurrence; errors contract by e^{-nu dt} per step.
      Eigen::VectorXd h_prev = H_(t0, x);
      for (std::size_t ti = 1; ti < tgrid_.count; ++ti) {
        const double t = tgrid_.node(ti);
        const Eigen::VectorXd h_mid = H_(t - 0.5 * dt, x);
        const Eigen::VectorXd h_cur = H_(t, x);
        F = decay_full * F +
            (dt / 6.0) * (decay_full * h_prev + 4.0 * decay_half * h_mid + h_cur);
        store(ti, F);
        h_prev = h_cur;
      }
    }
  });
}

Eigen::VectorXd SmoothedField::read_cell_interp_x(std::size_t ti, const Eigen::VectorXd& x) const {
  // Tensor Catmull-Rom across the x axes.
  std::array<std::array<std::size_t, 4>, 3> idx{};
  std::array<std::array<double, 4>, 3> w{};
  for (Eigen::Index ax = 0; ax < dim_; ++ax) {
    double frac = 0.0;
    idx[static_cast<std::size_t>(ax)] = stencil((x(ax) - x_lo_(ax)) / hx_(ax), nx_, frac);
    w[static_cast<std::size_t>(ax)] = catmull_weights(frac);
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim_);
  const auto d = static_cast<std::size_t>(dim_);
  std::array<std::size_t, 3> strides{};
  strides[d - 1] = 1;
  for (std::size_t ax = d - 1; ax-- > 0;) strides[ax] = strides[ax + 1] * nx_;
  std::array<std::size_t, 3> j{0, 0, 0};
  for (;;) {
    double weight = 1.0;
    std::size_t cell = 0;
    for (std::size_t ax = 0; ax < d; ++ax) {
      weight *= w[ax][j[ax]];
      cell += idx[ax][j[ax]] * strides[ax];
    }
    if (weight != 0.0)
      for (Eigen::Index c = 0; c < dim_; ++c) out(c) += weight * read(ti, cell, c);
    std::size_t ax = 0;
    for (; ax < d; ++ax) {
      if (++j[ax] < 4) break;
      j[ax] = 0;
    }
    if (ax == d) break;
  }
  return out;
}

Eigen::VectorXd SmoothedField::eval(double t, const Eigen::VectorXd& x) const {
  double frac = 0.0;
  const auto ti = stencil((t - tgrid_.t_start) / tgrid_.dt, tgrid_.count, frac);
  const auto wt = catmull_weights(frac);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim_);
  for (std::size_t k = 0; k < 4; ++k)
    if (wt[k] != 0.0) out += wt[k] * read_cell_interp_x(ti[k], x);
  return out;
}

Eigen::VectorXd SmoothedField::ddt(double t, const Eigen::VectorXd& x) const {
  return H_(t, x) - nu_ * eval(t, x);
}

// ---------------------------------------------------------------------------
// Near-identity change of variables
// ---------------------------------------------------------------------------

Eigen::VectorXd NearIdentityMap::U(double t, const Eigen::VectorXd& x) const {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(x.size());
  for (std::size_t j = 0; j < offsets_.size(); ++j)
    acc += weights_[j] * smoothed_->eval(t, x + offsets_[j]);
  return acc;
}

Eigen::MatrixXd NearIdentityMap::dU_dx(double t, const Eigen::VectorXd& x) const {
  const Eigen::Index d = x.size();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t j = 0; j < offsets_.size(); ++j) {
    const Eigen::VectorXd hb = smoothed_->eval(t, x + offsets_[j]);
    acc.noalias() += hb * grad_weights_[j].transpose();
  }
  return acc;
}

Eigen::VectorXd NearIdentityMap::dU_dt(double t, const Eigen::VectorXd& x) const {
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(x.size());
  for (std::size_t j = 0; j < offsets_.size(); ++j) {
    acc += weights_[j] *
           (H_(t, x + offsets_[j]) - nu_ * smoothed_->eval(t, x + offsets_[j]));
  }
  return acc;
}

Eigen::VectorXd NearIdentityMap::G(double t, const Eigen::VectorXd& x) const {
  return dU_dt(t, x) - H_(t, x);
}

void NearIdentityMap::eval_all(double t, const Eigen::VectorXd& x, Eigen::VectorXd& u,
                               Eigen::MatrixXd& du_dx, Eigen::VectorXd& du_dt) const {
  const Eigen::Index d = x.size();
  u = Eigen::VectorXd::Zero(d);
  du_dx = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd hsum = Eigen::VectorXd::Zero(d);
  for (std::size_t j = 0; j < offsets_.size(); ++j) {
    const Eigen::VectorXd y = x + offsets_[j];
    const Eigen::VectorXd hb = smoothed_->eval(t, y);
    u += weights_[j] * hb;
    du_dx.noalias() += hb * grad_weights_[j].transpose();
    hsum += weights_[j] * H_(t, y);
  }
  du_dt = hsum - nu_ * u;
}

namespace {

/// Dense tensor table of an x-only function (used for the averaged field
/// inside the change of variables).
struct TensorTable {
  Eigen::Index dim = 1;
  Eigen::VectorXd x_lo, hx;
  std::size_t nx = 1;
  std::vector<double> data;  // [cell][component]

  static TensorTable build(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                           Eigen::Index dim, const Eigen::VectorXd& lo, const Eigen::VectorXd& hi,
                           std::size_t probes) {
    TensorTable t;
    t.dim = dim;
    t.x_lo = lo;
    t.nx = std::max<std::size_t>(probes, 4);
    t.hx = (hi - lo) / static_cast<double>(t.nx - 1);
    std::size_t cells = 1;
    for (Eigen::Index ax = 0; ax < dim; ++ax) cells *= t.nx;
    t.data.assign(cells * static_cast<std::size_t>(dim), 0.0);
    parallel_for_chunks(cells, 4, [&](std::size_t c0, std::size_t c1) {
      for (std::size_t cell = c0; cell < c1; ++cell) {
        Eigen::VectorXd x(dim);
        std::size_t rem = cell;
        for (Eigen::Index ax = dim - 1; ax >= 0; --ax) {
          x(ax) = lo(ax) + static_cast<double>(rem % t.nx) * t.hx(ax);
          rem /= t.nx;
        }
        const Eigen::VectorXd v = f(x);
        for (Eigen::Index c = 0; c < dim; ++c)
          t.data[cell * static_cast<std::size_t>(dim) + static_cast<std::size_t>(c)] = v(c);
      }
    });
    return t;
  }

  Eigen::VectorXd eval(const Eigen::VectorXd& x) const {
    std::array<std::array<std::size_t, 4>, 3> idx{};
    std::array<std::array<double, 4>, 3> w{};
    for (Eigen::Index ax = 0; ax < dim; ++ax) {
      double frac = 0.0;
      idx[static_cast<std::size_t>(ax)] = stencil((x(ax) - x_lo(ax)) / hx(ax), nx, frac);
      w[static_cast<std::size_t>(ax)] = catmull_weights(frac);
    }
    const auto d = static_cast<std::size_t>(dim);
    std::array<std::size_t, 3> strides{};
    strides[d - 1] = 1;
    for (std::size_t ax = d - 1; ax-- > 0;) strides[ax] = strides[ax + 1] * nx;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
    std::array<std::size_t, 3> j{0, 0, 0};
    for (;;) {
      double weight = 1.0;
      std::size_t cell = 0;
      for (std::size_t ax = 0; ax < d; ++ax) {
        weight *= w[ax][j[ax]];
        cell += idx[ax][j[ax]] * strides[ax];
      }
      if (weight != 0.0)
        for (Eigen::Index c = 0; c < dim; ++c)
          out(c) += weight * data[cell * d + static_cast<std::size_t>(c)];
      std::size_t ax = 0;
      for (; ax < d; ++ax) {
        if (++j[ax] < 4) break;
        j[ax] = 0;
      }
      if (ax == d) break;
    }
    return out;
  }
};

}  // namespace

NearIdentityMap build_change_of_variable(const ParamField& field, double nu, double r,
                                         const std::function<double(double)>& a_schedule, int q,
                                         const AveragingOptions& opts) {
  if (!(nu > 0.0)) throw PreconditionError("build_change_of_variable: nu must be positive");
  const double a = a_schedule ? a_schedule(nu) : std::sqrt(nu);
  if (!(a > 0.0)) throw PreconditionError("build_change_of_variable: a(nu) must be positive");
  if (r + a > field.W_radius + 1e-12)
    throw SpanError("build_change_of_variable: mollification ball exceeds W (r + a = " +
                    std::to_string(r + a) + " > W_radius = " + std::to_string(field.W_radius) + ")");
  const Eigen::Index d = field.dim;

  NearIdentityMap map;
  map.nu_ = nu;
  map.mollifier_ = mollifier_build(a, q, static_cast<int>(d));

  // Averaged field tabulated over the reachable range (cell evaluations are
  // the expensive symmetric means).
  const double reach = r + a + 1e-9;
  const Eigen::VectorXd lo = Eigen::VectorXd::Constant(d, -reach);
  const Eigen::VectorXd hi = Eigen::VectorXd::Constant(d, reach);
  ParamField f = field;
  const double T = opts.T_average, dta = opts.dt_average;
  auto f0_exact = [f, nu, T, dta](const Eigen::VectorXd& x) {
    return symmetric_vector_mean([&](double t) { return f.value(t, x, nu); }, T, dta);
  };
  auto f0_table = std::make_shared<TensorTable>(
      TensorTable::build(f0_exact, d, lo, hi, opts.x_probes));

  map.H_ = [f, nu, f0_table](double t, const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return f.value(t, x, nu) - f0_table->eval(x);
  };

  const double H_sup = 2.0 * field.sup_bound + 1e-9;
  TimeGrid tgrid = TimeGrid::over(opts.table_t_lo, opts.table_t_hi, opts.table_dt);
  map.smoothed_ = std::make_shared<SmoothedField>(map.H_, d, nu, tgrid, lo, hi, opts.x_probes,
                                                  opts.tail_tol, H_sup);

  // Mollification ball: tensor midpoint nodes on [-a, a]^d, weights
  // normalized so constants are reproduced exactly.
  const std::size_t nball = std::max<std::size_t>(opts.ball_nodes, 4);
  const double cell = 2.0 * a / static_cast<double>(nball);
  std::size_t total = 1;
  for (Eigen::Index ax = 0; ax < d; ++ax) total *= nball;
  double wsum = 0.0;
  std::vector<std::pair<Eigen::VectorXd, double>> raw;
  raw.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Eigen::VectorXd off(d);
    std::size_t rem = i;
    for (Eigen::Index ax = d - 1; ax >= 0; --ax) {
      off(ax) = -a + (static_cast<double>(rem % nball) + 0.5) * cell;
      rem /= nball;
    }
    const double wd = map.mollifier_(off);
    if (wd > 0.0) {
      raw.emplace_back(off, wd);
      wsum += wd;
    }
  }
  if (raw.empty() || wsum <= 0.0)
    throw Error("build_change_of_variable: empty mollification quadrature");
  map.offsets_.reserve(raw.size());
  map.weights_.reserve(raw.size());
  map.grad_weights_.reserve(raw.size());
  for (const auto& [off, wd] : raw) {
    map.offsets_.push_back(off);
    map.weights_.push_back(wd / wsum);
    map.grad_weights_.push_back(map.mollifier_.grad(off) / wsum);
  }

  // Diagnostics sampled over the table span and the working ball.
  {
    NearIdentityMap::Diagnostics diag;
    const auto probes = axis_probes(d, r);
    auto dH_dx = [&](double t, const Eigen::VectorXd& x) -> Eigen::MatrixXd {
      // x-derivative of H through the tabulated averaged field.
      const double eps = 1e-5;
      Eigen::MatrixXd jf0(d, d);
      for (Eigen::Index j = 0; j < d; ++j) {
        Eigen::VectorXd xp = x, xm = x;
        xp(j) += eps;
        xm(j) -= eps;
        jf0.col(j) = (f0_table->eval(xp) - f0_table->eval(xm)) / (2.0 * eps);
      }
      return f.jacobian(t, x, nu) - jf0;
    };
    for (int i = 0; i <= 32; ++i) {
      const double t = tgrid.t_start + tgrid.span() * i / 32.0;
      for (const auto& x : probes) {
        diag.sup_nu_U = std::max(diag.sup_nu_U, nu * map.U(t, x).norm());
        diag.sup_nu_dU = std::max(diag.sup_nu_dU, nu * map.dU_dx(t, x).operatorNorm());
        diag.sup_G = std::max(diag.sup_G, map.G(t, x).norm());
        // dG/dx = d(dU/dt)/dx - dH/dx, with the first term through the
        // gradient weights of the mollifier.
        Eigen::MatrixXd ddUdt = Eigen::MatrixXd::Zero(d, d);
        for (std::size_t jj = 0; jj < map.offsets_.size(); ++jj) {
          const Eigen::VectorXd y = x + map.offsets_[jj];
          const Eigen::VectorXd val = map.H_(t, y) - nu * map.smoothed_->eval(t, y);
          ddUdt.noalias() += val * map.grad_weights_[jj].transpose();
        }
        diag.sup_dG = std::max(diag.sup_dG, (ddUdt - dH_dx(t, x)).operatorNorm());
      }
    }
    map.diag_ = diag;
  }
  return map;
}

// ---------------------------------------------------------------------------
// Reduced field
// ---------------------------------------------------------------------------

ReducedField::ReducedField(const ParamField& field, double nu,
                           std::shared_ptr<const NearIdentityMap> map, AveragedField f0)
    : field_(field), nu_(nu), map_(std::move(map)), f0_(std::move(f0)) {}

Eigen::VectorXd ReducedField::eval(double t, const Eigen::VectorXd& y) const {
  if (nu_ == 0.0) return f0_.value(y);
  const Eigen::Index d = y.size();
  Eigen::VectorXd u, du_dt;
  Eigen::MatrixXd du;
  map_->eval_all(t, y, u, du, du_dt);
  const Eigen::VectorXd rhs = field_.value(t, y + nu_ * u, nu_) - du_dt;
  const Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(d, d) + nu_ * du;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(lhs);
  const Eigen::VectorXd out = lu.solve(rhs);
  if (!out.allFinite())
    throw Error("reduce_averaged: singular I + nu dU/dy at t = " + std::to_string(t));
  return out;
}

Eigen::VectorXd ReducedField::F(double t, const Eigen::VectorXd& y) const {
  return eval(t, y) - f0_.value(y);
}

ReducedField reduce_averaged(const ParamField& field, double nu,
                             std::shared_ptr<const NearIdentityMap> map, AveragedField f0) {
  return ReducedField(field, nu, std::move(map), std::move(f0));
}

// ---------------------------------------------------------------------------
// Equilibrium and the averaged solve
// ---------------------------------------------------------------------------

EquilibriumReport find_equilibrium(const AveragedField& f0, const Eigen::VectorXd& x_init,
                                   std::size_t max_iterations) {
  EquilibriumReport rep;
  Eigen::VectorXd x = x_init;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    const Eigen::VectorXd fx = f0.value(x);
    rep.newton_iterations = it;
    if (fx.norm() <= 1e-10) break;
    const Eigen::MatrixXd J = f0.jacobian(x);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
    if (!lu.isInvertible())
      throw Error("find_equilibrium: singular jacobian at ||x|| = " + std::to_string(x.norm()));
    x -= lu.solve(fx);
    if (it + 1 == max_iterations && f0.value(x).norm() > 1e-10)
      throw ConvergenceError("find_equilibrium: Newton did not reach ||f0|| <= 1e-10 in " +
                             std::to_string(max_iterations) + " steps");
  }
  rep.x0 = x;
  const Eigen::MatrixXd J = f0.jacobian(x);
  Eigen::EigenSolver<Eigen::MatrixXd> es(J);
  if (es.info() != Eigen::Success) throw Error("find_equilibrium: eigensolver failed");
  rep.eigenvalues = es.eigenvalues();
  rep.min_abs_re = rep.eigenvalues.real().cwiseAbs().minCoeff();
  rep.hyperbolic = rep.min_abs_re > 1e-8 * std::max(1.0, J.operatorNorm());
  return rep;
}

AveragedSolveResult solve_averaged(const ParamField& field, double nu, double r0,
                                   const AveragedSolveOptions& opts) {
  if (!(nu > 0.0)) throw PreconditionError("solve_averaged: nu must be positive");
  if (!(r0 > 0.0)) throw PreconditionError("solve_averaged: r0 must be positive");
  const Eigen::Index d = field.dim;

  AveragedSolveResult out;
  out.nu = nu;

  // Averaged system and its hyperbolic equilibrium.
  AveragedField f0 =
      averaged_field(field, nu, opts.averaging.T_average, opts.averaging.dt_average);
  const Eigen::VectorXd x_init =
      opts.x_init.size() == d ? opts.x_init : Eigen::VectorXd::Zero(d);
  out.equilibrium = find_equilibrium(f0, x_init);
  if (!out.equilibrium.hyperbolic)
    throw PreconditionError(
        "solve_averaged: averaged equilibrium is not hyperbolic (min |Re lambda| = " +
        std::to_string(out.equilibrium.min_abs_re) + ")");
  const Eigen::VectorXd x0 = out.equilibrium.x0;
  const Eigen::MatrixXd A = f0.jacobian(x0);

  // Rescaled-time grid planning: s = nu t, ds = nu dt.
  const double ds = nu * opts.core.dt;
  const double s_lo = nu * opts.core.t_start;

  const double alpha_guess = 0.8 * out.equilibrium.min_abs_re;
  DichotomyData plan{Eigen::MatrixXd(), 2.0, alpha_guess, false};
  const double scale_F = 2.0 * field.sup_bound + 1.0;
  const double pad_s = green_window(plan, scale_F, opts.z_tail_tol);
  TimeGrid s_work = TimeGrid(s_lo, ds, opts.core.count).padded(pad_s, pad_s);

  // Change of variables with the table spanning the rescaled window.
  const double r_map = x0.norm() + r0;
  AveragingOptions avg = opts.averaging;
  avg.table_t_lo = s_work.t_start / nu - 2.0 * avg.table_dt;
  avg.table_t_hi = s_work.t_end() / nu + 2.0 * avg.table_dt;
  std::function<double(double)> schedule =
      opts.a_schedule ? opts.a_schedule : [](double v) { return std::sqrt(v); };
  auto map = std::make_shared<NearIdentityMap>(
      build_change_of_variable(field, nu, r_map, schedule, opts.mollifier_q, avg));
  out.diagnostics = map->diagnostics();

  ReducedField reduced = reduce_averaged(field, nu, map, f0);

  // Constant-coefficient kernel from the spectral splitting of A.
  const Eigen::MatrixXd P = spectral_projection(A);
  auto A_const = MatrixFunction::constant(A);
  auto fund = std::make_shared<FundamentalSolution>(
      integrate_fundamental(A_const, s_work, 1e-11));
  auto est = estimate_dichotomy(*fund, P, opts.dichotomy_pairs);
  if (!est.report.found)
    throw Error("solve_averaged: dichotomy fit failed on the averaged linearization");
  GreenKernel kernel(fund, est.data);

  // Picard iteration in rescaled time: z(s) = int G(s,u) Fbar(u, z(u)) du,
  // Fbar(s, z) = R(s/nu, x0 + z) - A z.
  GridFunction z(s_work, d);
  GridFunction w(s_work, d);
  double prev_diff = -1.0;
  std::size_t stall = 0;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    parallel_for_chunks(s_work.count, 2048, [&](std::size_t b, std::size_t e) {
      for (std::size_t k = b; k < e; ++k) {
        const double s = s_work.node(k);
        const Eigen::VectorXd zk = z.at(k);
        w.set(k, reduced.eval(s / nu, x0 + zk) - A * zk);
      }
    });
    GridFunction next = green_convolve(kernel, w, opts.z_tail_tol, s_work, /*clamp_window=*/true);
    const double diff = next.sup_diff(z);
    out.iterate_norms.push_back(diff);
    if (next.sup_norm() > r0 + 10.0 * opts.tol)
      throw ConvergenceError("solve_averaged: iterate escaped the ball r0 = " + std::to_string(r0) +
                             " (sup = " + std::to_string(next.sup_norm()) + ")");
    if (prev_diff >= 0.0 && prev_diff > 0.0 && diff / prev_diff >= 1.0) {
      if (++stall >= 3)
        throw ConvergenceError("solve_averaged: no contraction in rescaled time (ratio " +
                               std::to_string(diff / prev_diff) + ")");
    } else {
      stall = 0;
    }
    prev_diff = diff;
    z = std::move(next);
    if (diff < opts.tol) break;
    if (it + 1 == opts.max_iterations)
      throw ConvergenceError("solve_averaged: no convergence in " +
                             std::to_string(opts.max_iterations) + " iterations (last diff " +
                             std::to_string(diff) + ")");
  }

  // Sampled sup of the reduced defect F = R - f0 along the converged iterate.
  for (int i = 0; i <= 32; ++i) {
    const std::size_t k = (s_work.count - 1) * static_cast<std::size_t>(i) / 32;
    const double s = s_work.node(k);
    out.sup_F = std::max(out.sup_F, reduced.F(s / nu, x0 + z.at(k)).norm());
  }

  // Unwind both changes of variables: y(t) = x0 + z(nu t), x = y + nu U(t,y).
  out.phi = GridFunction(opts.core, d);
  for (std::size_t k = 0; k < opts.core.count; ++k) {
    const double t = opts.core.node(k);
    const Eigen::VectorXd y = x0 + z.eval(nu * t);
    out.phi.set(k, y + nu * map->U(t, y));
  }
  out.sup_deviation = 0.0;
  for (std::size_t k = 0; k < opts.core.count; ++k)
    out.sup_deviation = std::max(out.sup_deviation, (out.phi.at(k) - x0).norm());

  // Residual against the original small-parameter equation.
  double worst = 0.0;
  const double two_dt = 2.0 * opts.core.dt;
  for (std::size_t k = 1; k + 1 < opts.core.count; ++k) {
    const Eigen::VectorXd dx = (out.phi.at(k + 1) - out.phi.at(k - 1)) / two_dt;
    const double t = opts.core.node(k);
    worst = std::max(worst, (dx - nu * field.value(t, out.phi.at(k), nu)).norm());
  }
  out.residual_sup = worst;
  return out;
}

}  // namespace rap
