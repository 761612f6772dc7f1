#pragma once

// Fits calibration parameters by minimizing the training objective
// subject to the directional trust region g(theta) >= tau. The
// constraint is enforced with a growing quadratic penalty
//   Phi_mu(theta) = value(theta) + mu * max(0, tau - g(theta))^2
// around a BFGS inner loop with Armijo backtracking, restarted from the
// identity and from seeded perturbations of it. Two guarantees hold
// unconditionally in full mode: the returned parameters satisfy
// g >= tau - constraint_tol, and the returned objective never exceeds
// the identity objective (the identity itself is always a candidate).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "supcal/common.hpp"
#include "supcal/core.hpp"
#include "supcal/objective.hpp"
#include "supcal/surrogate.hpp"

namespace supcal {

enum class FitMode {
  full,       // biases and scales, trust region enforced
  bias_only,  // biases only, scales pinned at 1, trust region ignored
};

struct SolverConfig {
  int max_iters = 500;
  double grad_tol = 1e-6;
  double constraint_tol = 1e-6;
  double penalty_init = 10.0;
  double penalty_growth = 10.0;
  int max_outer_rounds = 6;
  int restarts = 3;
  std::uint64_t seed = 0;
  FitMode mode = FitMode::full;
};

struct FitResult {
  CalibrationParams params;
  double objective_value = 0.0;
  double constraint_value = 1.0;
  bool feasible = true;
  int iterations = 0;
  // Accuracy of the uncalibrated base predictions on the surrogate
  // records; this is what the tau schedule consumes.
  double in_sample_accuracy = 0.0;
};

// Fraction of records whose base (uncalibrated) argmax matches the
// label. Ties go to the smallest class index.
inline double in_sample_accuracy(const SurrogateDataset& ds) {
  if (ds.records.empty()) {
    throw ValueError("in_sample_accuracy of an empty dataset");
  }
  long hits = 0;
  for (const SurrogateRecord& rec : ds.records) {
    if (predict_label(probs_from_logits(rec.logits)) == rec.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ds.records.size());
}

// Accuracy-driven trust-region bound. The angle budget alpha (degrees)
// shrinks with accuracy and with the number of classes; below coin-flip
// accuracy the constraint is fully open (tau = cos 180 = -1).
inline double tau_from_accuracy(double accuracy, int num_classes) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) {
    throw ValueError("accuracy must be in [0,1]");
  }
  if (num_classes < 2) throw ValueError("need >= 2 classes");
  const double root = 1.0 / static_cast<double>(num_classes - 1);
  double alpha;
  if (accuracy >= 0.9) {
    alpha = std::pow(20.0, root);
  } else if (accuracy >= 0.7) {
    alpha = std::pow(45.0, root);
  } else if (accuracy >= 0.5) {
    alpha = std::pow(90.0, root);
  } else {
    alpha = 180.0;
  }
  return std::cos(alpha * 3.14159265358979323846 / 180.0);
}

namespace detail {

// Longest parameter-space move a single descent step may make.
inline constexpr double kMaxStepNorm = 1.0;

// Relative progress floor: after kStallLimit consecutive accepted steps
// that each improve the value by less than kFtol * (1 + |value|), the
// iteration is treated as converged.
inline constexpr double kFtol = 1e-9;
inline constexpr int kStallLimit = 3;

struct BfgsOutcome {
  std::vector<double> x;
  double value = 0.0;
  int iterations = 0;
  bool finite = true;
};

// Quasi-second-order descent with an explicit inverse-Hessian estimate.
// F is (const vector<double>& x, vector<double>& grad) -> double and
// must fill grad. Deterministic: no randomness, fixed iteration order.
template <class F>
BfgsOutcome bfgs_minimize(F&& f, std::vector<double> x0, int max_iters,
                          double grad_tol) {
  const std::size_t d = x0.size();
  BfgsOutcome out;
  std::vector<double> g(d, 0.0), g_new(d, 0.0), p(d, 0.0), x_new(d, 0.0);
  std::vector<double> H(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) H[j * d + j] = 1.0;

  double fx = f(x0, g);
  if (!std::isfinite(fx)) {
    out.x = std::move(x0);
    out.value = fx;
    out.finite = false;
    return out;
  }

  std::vector<double> x = std::move(x0);
  int iter = 0;
  int stalled = 0;
  double alpha_prev = 1.0;
  for (; iter < max_iters; ++iter) {
    double gnorm = 0.0;
    for (double v : g) gnorm += v * v;
    if (std::sqrt(gnorm) < grad_tol) break;

    double gp = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += H[r * d + c] * g[c];
      p[r] = -acc;
      gp += p[r] * g[r];
    }
    if (!(gp < 0.0)) {
      // Estimate lost positive-definiteness; fall back to steepest descent.
      for (std::size_t j = 0; j < d * d; ++j) H[j] = 0.0;
      for (std::size_t j = 0; j < d; ++j) H[j * d + j] = 1.0;
      gp = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        p[j] = -g[j];
        gp += p[j] * g[j];
      }
      if (!(gp < 0.0)) break;
    }

    // Cap the proposal length. Where floored probabilities flatten the
    // likelihood, the inverse-Hessian estimate can propose arbitrarily
    // long jumps that clear the barrier around the current basin;
    // bounded steps keep accepted iterates on monotone descent paths.
    double pnorm = 0.0;
    for (double v : p) pnorm += v * v;
    pnorm = std::sqrt(pnorm);
    if (pnorm > kMaxStepNorm) {
      const double shrink = kMaxStepNorm / pnorm;
      for (double& v : p) v *= shrink;
      gp *= shrink;
    }

    // Backtracking line search, warm-started near the last accepted
    // step length so a stretch of short steps does not pay the full
    // halving ladder every iteration.
    double alpha = std::min(1.0, 4.0 * alpha_prev);
    double f_new = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      for (std::size_t j = 0; j < d; ++j) x_new[j] = x[j] + alpha * p[j];
      f_new = f(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * alpha * gp) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;
    alpha_prev = alpha;

    if (fx - f_new <= kFtol * (1.0 + std::abs(fx))) {
      if (++stalled >= kStallLimit) {
        x = x_new;
        fx = f_new;
        g = g_new;
        ++iter;
        break;
      }
    } else {
      stalled = 0;
    }

    double sy = 0.0, ss = 0.0, yy = 0.0;
    std::vector<double> s(d), y(d);
    for (std::size_t j = 0; j < d; ++j) {
      s[j] = x_new[j] - x[j];
      y[j] = g_new[j] - g[j];
      sy += s[j] * y[j];
      ss += s[j] * s[j];
      yy += y[j] * y[j];
    }
    if (sy > 1e-12 * std::sqrt(ss * yy)) {
      // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
      const double rho = 1.0 / sy;
      std::vector<double> Hy(d, 0.0);
      double yHy = 0.0;
      for (std::size_t r = 0; r < d; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += H[r * d + c] * y[c];
        Hy[r] = acc;
        yHy += y[r] * acc;
      }
      for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          H[r * d + c] += -rho * (s[r] * Hy[c] + Hy[r] * s[c]) +
                          rho * rho * yHy * s[r] * s[c] +
                          rho * s[r] * s[c];
        }
      }
    }
    x = x_new;
    fx = f_new;
    g = g_new;
  }
  out.x = std::move(x);
  out.value = fx;
  out.iterations = iter;
  return out;
}

inline std::vector<double> pack_params(const CalibrationParams& params,
                                       FitMode mode) {
  std::vector<double> x;
  if (mode == FitMode::bias_only) {
    x.reserve(params.coeffs.size());
    for (const ClassAffine& ca : params.coeffs) x.push_back(ca.bias);
  } else {
    x.reserve(2 * params.coeffs.size());
    for (const ClassAffine& ca : params.coeffs) {
      x.push_back(ca.bias);
      x.push_back(ca.scale);
    }
  }
  return x;
}

inline CalibrationParams unpack_params(const std::vector<double>& x,
                                       int num_classes, int context_size,
                                       FitMode mode) {
  CalibrationParams params = CalibrationParams::identity(num_classes,
                                                         context_size);
  if (mode == FitMode::bias_only) {
    for (std::size_t c = 0; c < params.coeffs.size(); ++c) {
      params.coeffs[c].bias = x[c];
    }
  } else {
    for (std::size_t c = 0; c < params.coeffs.size(); ++c) {
      params.coeffs[c].bias = x[2 * c];
      params.coeffs[c].scale = x[2 * c + 1];
    }
  }
  return params;
}

}  // namespace detail

// Minimize the objective over calibration parameters for this dataset.
// Throws CoverageError when a class never appears, NumericError when
// every restart ends non-finite.
inline FitResult fit(const SurrogateDataset& ds, const ObjectiveConfig& cfg,
                     const SolverConfig& solver) {
  const CoverageReport coverage = class_coverage(ds);
  if (!coverage.complete) {
    std::string missing;
    for (int c : coverage.missing) {
      if (!missing.empty()) missing += ", ";
      missing += std::to_string(c);
    }
    throw CoverageError("surrogate data never shows class(es): " + missing);
  }

  const int n = ds.num_classes;
  const FitMode mode = solver.mode;
  const CalibrationParams identity =
      CalibrationParams::identity(n, ds.context_size);

  auto raw_eval = [&](const std::vector<double>& x, std::vector<double>& grad,
                      double& constraint) {
    CalibrationParams params = detail::unpack_params(x, n, ds.context_size,
                                                     mode);
    ObjectiveEval eval = total_objective(params, ds, cfg);
    constraint = trust_region_value(params, cfg.eps_norm);
    if (mode == FitMode::bias_only) {
      grad.resize(x.size());
      for (std::size_t c = 0; c < x.size(); ++c) {
        grad[c] = eval.gradient[2 * c];
      }
    } else {
      grad = std::move(eval.gradient);
    }
    return eval.value;
  };

  const ObjectiveEval identity_eval = total_objective(identity, ds, cfg);

  FitResult best;
  best.params = identity;
  best.objective_value = identity_eval.value;
  best.constraint_value = trust_region_value(identity, cfg.eps_norm);
  best.feasible = best.constraint_value >= cfg.tau - solver.constraint_tol;
  best.iterations = 0;
  best.in_sample_accuracy = in_sample_accuracy(ds);

  const int starts = std::max(1, solver.restarts);
  int finite_restarts = 0;
  for (int r = 0; r < starts; ++r) {
    std::vector<double> x0 = detail::pack_params(identity, mode);
    if (r > 0) {
      std::mt19937_64 rng(derive_seed(solver.seed, static_cast<std::uint64_t>(r)));
      for (double& v : x0) v += 0.1 * rng_normal(rng);
      if (mode == FitMode::full) {
        // Shrink the biases toward identity until the start is feasible.
        for (int tries = 0; tries < 60; ++tries) {
          CalibrationParams p0 =
              detail::unpack_params(x0, n, ds.context_size, mode);
          if (trust_region_value(p0, cfg.eps_norm) >=
              cfg.tau - solver.constraint_tol) {
            break;
          }
          for (std::size_t c = 0; c + 1 < x0.size(); c += 2) x0[c] *= 0.5;
        }
      }
    }

    detail::BfgsOutcome outcome;
    if (mode == FitMode::bias_only) {
      auto f = [&](const std::vector<double>& x, std::vector<double>& grad) {
        double constraint = 0.0;
        return raw_eval(x, grad, constraint);
      };
      outcome = detail::bfgs_minimize(f, std::move(x0), solver.max_iters,
                                      solver.grad_tol);
    } else {
      double mu = solver.penalty_init;
      std::vector<double> x = std::move(x0);
      int total_iters = 0;
      bool finite = true;
      for (int round = 0; round < solver.max_outer_rounds; ++round) {
        auto phi = [&](const std::vector<double>& xc,
                       std::vector<double>& grad) {
          double constraint = 0.0;
          double value = raw_eval(xc, grad, constraint);
          const double gap = cfg.tau - constraint;
          if (gap > 0.0) {
            value += mu * gap * gap;
            CalibrationParams pc =
                detail::unpack_params(xc, n, ds.context_size, mode);
            const std::vector<double> cg =
                trust_region_gradient(pc, cfg.eps_norm);
            for (std::size_t j = 0; j < grad.size(); ++j) {
              grad[j] -= 2.0 * mu * gap * cg[j];
            }
          }
          return value;
        };
        detail::BfgsOutcome step = detail::bfgs_minimize(
            phi, std::move(x), solver.max_iters, solver.grad_tol);
        total_iters += step.iterations;
        x = std::move(step.x);
        if (!step.finite || !std::isfinite(step.value)) {
          finite = false;
          break;
        }
        CalibrationParams pr = detail::unpack_params(x, n, ds.context_size,
                                                     mode);
        if (trust_region_value(pr, cfg.eps_norm) >=
            cfg.tau - solver.constraint_tol) {
          break;
        }
        mu *= solver.penalty_growth;
      }
      outcome.x = std::move(x);
      outcome.iterations = total_iters;
      outcome.finite = finite;
    }

    if (!outcome.finite) continue;
    CalibrationParams fitted =
        detail::unpack_params(outcome.x, n, ds.context_size, mode);
    const ObjectiveEval eval = total_objective(fitted, ds, cfg);
    if (!std::isfinite(eval.value)) continue;
    ++finite_restarts;
    const double constraint = trust_region_value(fitted, cfg.eps_norm);
    const bool feas = constraint >= cfg.tau - solver.constraint_tol;
    if (mode == FitMode::full && !feas) continue;
    if (eval.value < best.objective_value) {
      best.params = std::move(fitted);
      best.objective_value = eval.value;
      best.constraint_value = constraint;
      best.feasible = feas;
      best.iterations = outcome.iterations;
    }
  }

  if (finite_restarts == 0) {
    throw NumericError("objective was non-finite at every restart");
  }
  return best;
}

// Saved fit: header key-value lines, then one "class c b w" line per
// non-reference class. Doubles at %.17g so load_fit is bit-exact.
inline void save_fit(std::ostream& out, const FitResult& fit,
                     const ObjectiveConfig& cfg) {
  out << "context_size = " << fit.params.context_size << "\n";
  out << "tau = " << detail::fmt_g17(cfg.tau) << "\n";
  out << "lambda_inv = " << detail::fmt_g17(cfg.lambda_inv) << "\n";
  out << "objective = " << detail::fmt_g17(fit.objective_value) << "\n";
  out << "constraint = " << detail::fmt_g17(fit.constraint_value) << "\n";
  out << "feasible = " << (fit.feasible ? 1 : 0) << "\n";
  out << "iterations = " << fit.iterations << "\n";
  out << "in_sample_accuracy = " << detail::fmt_g17(fit.in_sample_accuracy)
      << "\n";
  for (std::size_t c = 0; c < fit.params.coeffs.size(); ++c) {
    out << "class " << (c + 1) << ' '
        << detail::fmt_g17(fit.params.coeffs[c].bias) << ' '
        << detail::fmt_g17(fit.params.coeffs[c].scale) << "\n";
  }
}

struct FitFile {
  FitResult result;
  double tau = -1.0;
  double lambda_inv = 0.0;
};

inline FitFile load_fit(std::istream& in) {
  FitFile file;
  std::vector<std::pair<int, ClassAffine>> coeffs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    try {
      if (key == "class") {
        int c;
        ClassAffine ca;
        if (!(ss >> c >> ca.bias >> ca.scale)) {
          throw IngestError("bad class line");
        }
        coeffs.emplace_back(c, ca);
      } else {
        std::string eq, value;
        if (!(ss >> eq >> value) || eq != "=") {
          throw IngestError("expected 'key = value'");
        }
        if (key == "context_size") {
          file.result.params.context_size = std::stoi(value);
        } else if (key == "tau") {
          file.tau = std::stod(value);
        } else if (key == "lambda_inv") {
          file.lambda_inv = std::stod(value);
        } else if (key == "objective") {
          file.result.objective_value = std::stod(value);
        } else if (key == "constraint") {
          file.result.constraint_value = std::stod(value);
        } else if (key == "feasible") {
          file.result.feasible = std::stoi(value) != 0;
        } else if (key == "iterations") {
          file.result.iterations = std::stoi(value);
        } else if (key == "in_sample_accuracy") {
          file.result.in_sample_accuracy = std::stod(value);
        } else {
          throw IngestError("unknown key '" + key + "'");
        }
      }
    } catch (const IngestError& e) {
      throw IngestError("fit file line " + std::to_string(lineno) + ": " +
                        e.what());
    } catch (const std::exception& e) {
      throw IngestError("fit file line " + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  if (coeffs.empty()) throw IngestError("fit file has no class lines");
  std::sort(coeffs.begin(), coeffs.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t j = 0; j < coeffs.size(); ++j) {
    if (coeffs[j].first != static_cast<int>(j + 1)) {
      throw IngestError("fit file class ids must be 1..n-1 without gaps");
    }
    file.result.params.coeffs.push_back(coeffs[j].second);
  }
  return file;
}

}  // namespace supcal
