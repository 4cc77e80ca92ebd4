#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "retarget/errors.hpp"

namespace retarget {

using VecX = Eigen::VectorXd;

// Smooth objective over the box lower <= x <= upper. When `gradient` is
// empty, central finite differences are used.
struct BoxProblem {
  VecX lower;
  VecX upper;
  std::function<double(const VecX&)> objective;
  std::function<VecX(const VecX&)> gradient;

  int dimension() const { return static_cast<int>(lower.size()); }

  void validate() const {
    if (lower.size() != upper.size())
      throw InvalidArgument("BoxProblem: lower and upper differ in length");
    for (int i = 0; i < lower.size(); ++i)
      if (!(lower(i) <= upper(i)))
        throw InvalidArgument("BoxProblem: lower > upper at index " + std::to_string(i));
    if (!objective) throw InvalidArgument("BoxProblem: objective is empty");
  }

  VecX project(const VecX& x) const { return x.cwiseMax(lower).cwiseMin(upper); }
};

struct SolveOptions {
  double grad_tol = 1e-8;
  double step_tol = 1e-10;
  int max_iters = 200;
  double fd_eps = 1e-6;
  int memory = 10;
  double armijo_c = 1e-4;
  int max_halvings = 60;
};

enum class Termination { kGradientTol, kStepTol, kMaxIters };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::kGradientTol: return "gradient-tol";
    case Termination::kStepTol: return "step-tol";
    case Termination::kMaxIters: return "max-iters";
  }
  return "?";
}

struct SolveReport {
  VecX x_star;
  double f_star = 0.0;
  int iterations = 0;
  bool converged = false;
  Termination termination = Termination::kMaxIters;
  std::vector<double> f_history;  // objective at every accepted iterate, x0 first
};

// Central differences with step fd_eps * max(1, |x_i|).
inline VecX finite_difference_gradient(const std::function<double(const VecX&)>& f,
                                       const VecX& x, double fd_eps) {
  VecX g(x.size());
  VecX xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double h = fd_eps * std::max(1.0, std::abs(x(i)));
    const double xi = x(i);
    xp(i) = xi + h;
    const double fp = f(xp);
    xp(i) = xi - h;
    const double fm = f(xp);
    xp(i) = xi;
    g(i) = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Projected limited-memory quasi-Newton with an Armijo backtracking search
// along the projection arc. Variables pinned at a bound by the gradient are
// frozen for the quasi-Newton direction.
inline SolveReport minimize_box(const BoxProblem& problem, const VecX& x0,
                                const SolveOptions& opts = {}) {
  problem.validate();
  if (x0.size() != problem.lower.size())
    throw InvalidArgument("minimize_box: x0 has the wrong dimension");
  const int n = problem.dimension();

  auto grad = [&](const VecX& x) -> VecX {
    if (problem.gradient) return problem.gradient(x);
    return finite_difference_gradient(problem.objective, x, opts.fd_eps);
  };

  SolveReport rep;
  VecX x = problem.project(x0);
  double f = problem.objective(x);
  if (!std::isfinite(f)) throw InvalidStartError("minimize_box: objective is not finite at x0");
  VecX g = grad(x);
  if (!g.allFinite()) throw InvalidStartError("minimize_box: gradient is not finite at x0");
  rep.f_history.push_back(f);

  std::deque<VecX> s_hist, y_hist;
  std::deque<double> rho_hist;
  rep.termination = Termination::kMaxIters;

  int iter = 0;
  for (; iter < opts.max_iters; ++iter) {
    const VecX pg = problem.project(x - g) - x;
    if (pg.lpNorm<Eigen::Infinity>() <= opts.grad_tol) {
      rep.termination = Termination::kGradientTol;
      break;
    }

    std::vector<char> free(n, 1);
    for (int i = 0; i < n; ++i) {
      if ((x(i) <= problem.lower(i) && g(i) > 0.0) || (x(i) >= problem.upper(i) && g(i) < 0.0))
        free[i] = 0;
    }
    auto mask = [&](VecX v) {
      for (int i = 0; i < n; ++i)
        if (!free[i]) v(i) = 0.0;
      return v;
    };

    auto lbfgs_direction = [&]() -> VecX {
      VecX q = mask(g);
      const int m = static_cast<int>(s_hist.size());
      std::vector<double> alpha(m);
      for (int k = m - 1; k >= 0; --k) {
        alpha[k] = rho_hist[k] * mask(s_hist[k]).dot(q);
        q -= alpha[k] * mask(y_hist[k]);
      }
      double gamma;
      if (m > 0) {
        gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      } else {
        // Without curvature pairs the first trial step has unit inf-norm;
        // backtracking shortens it as needed.
        const double gmax = mask(g).lpNorm<Eigen::Infinity>();
        gamma = gmax > 0.0 ? 1.0 / gmax : 1.0;
      }
      VecX r = gamma * q;
      for (int k = 0; k < m; ++k) {
        const double beta = rho_hist[k] * mask(y_hist[k]).dot(r);
        r += mask(s_hist[k]) * (alpha[k] - beta);
      }
      return -mask(r);
    };

    auto line_search = [&](const VecX& d, VecX& x_out, double& f_out) -> bool {
      double step = 1.0;
      bool saw_finite = false;
      for (int h = 0; h < opts.max_halvings; ++h, step *= 0.5) {
        const VecX trial = problem.project(x + step * d);
        if (trial == x) return false;
        const double ft = problem.objective(trial);
        if (!std::isfinite(ft)) continue;
        saw_finite = true;
        if (ft <= f + opts.armijo_c * g.dot(trial - x)) {
          x_out = trial;
          f_out = ft;
          return true;
        }
      }
      if (!saw_finite)
        throw InvalidStartError("minimize_box: objective is non-finite along every trial step");
      return false;
    };

    VecX d = lbfgs_direction();
    if (!d.allFinite() || g.dot(d) >= 0.0) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = lbfgs_direction();
    }

    VecX x_new;
    double f_new = f;
    bool ok = g.dot(d) < 0.0 && line_search(d, x_new, f_new);
    if (!ok && !s_hist.empty()) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = lbfgs_direction();
      ok = g.dot(d) < 0.0 && line_search(d, x_new, f_new);
    }
    if (!ok) {
      rep.termination = Termination::kStepTol;
      break;
    }

    const VecX s = x_new - x;
    const VecX g_new = grad(x_new);
    const VecX y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    x = x_new;
    f = f_new;
    g = g_new;
    rep.f_history.push_back(f);
    if (!g.allFinite()) throw InvalidStartError("minimize_box: gradient became non-finite");
    if (s.norm() <= opts.step_tol) {
      ++iter;
      rep.termination = Termination::kStepTol;
      break;
    }
  }

  rep.x_star = x;
  rep.f_star = f;
  rep.iterations = iter;
  rep.converged = rep.termination != Termination::kMaxIters;
  return rep;
}

// Max componentwise deviation of the supplied gradient from central
// differences, relative to the infinity norm of the finite-difference
// gradient. Returns 0 when both vanish.
inline double check_gradient(const BoxProblem& problem, const VecX& x, double fd_eps = 1e-6) {
  if (!problem.gradient) throw InvalidArgument("check_gradient: problem has no gradient");
  const VecX analytic = problem.gradient(x);
  const VecX numeric = finite_difference_gradient(problem.objective, x, fd_eps);
  const double scale = numeric.lpNorm<Eigen::Infinity>();
  const double diff = (analytic - numeric).lpNorm<Eigen::Infinity>();
  if (diff == 0.0) return 0.0;
  return diff / std::max(scale, 1e-300);
}

}  // namespace retarget
