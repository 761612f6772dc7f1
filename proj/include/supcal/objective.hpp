#pragma once

// Training objective for calibration parameters theta = (b_c, w_c):
//
//   value(theta) = sum_records -ln p_theta(y | m)
//                + lambda_inv * sum_queries mean_{context pairs} SymXent
//
// Each query contributes the average SymXent over its context pairs,
// so the penalty stays on the likelihood's scale no matter how many
// contexts the budget enumerates.
//
// plus a directional trust-region statistic g(theta) handled by the
// solver as a constraint g >= tau. Gradients are analytic; the layout is
// [b_1, w_1, ..., b_{n-1}, w_{n-1}]. Probabilities are floored at
// kProbFloor before logs, and the floor zeroes the matching gradient
// path, so value and gradient stay finite for any finite theta.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "supcal/common.hpp"
#include "supcal/core.hpp"
#include "supcal/surrogate.hpp"

namespace supcal {

struct ObjectiveConfig {
  double lambda_inv = 10.0;
  // Lower bound on the trust-region statistic; -1 disables it.
  double tau = -1.0;
  double eps_norm = 1e-10;
  // Seeds the context-pair subsample for very wide context sets. Fixed
  // per solve so the objective is a stable function of theta.
  std::uint64_t pair_seed = 0;
};

// Beyond this many contexts per query, SymXent pairs are subsampled.
inline constexpr int kPairExhaustiveLimit = 40;
inline constexpr int kPairSampleCount = 780;

namespace detail {

// Calibrated class probabilities for raw logits m under theta, written
// into p (size n). z is scratch for the calibrated logits.
inline void calibrated_probs_into(const std::vector<double>& m,
                                  const CalibrationParams& params,
                                  std::vector<double>& z,
                                  std::vector<double>& p) {
  const std::size_t d = m.size();
  z.resize(d);
  double zmax = 0.0;
  for (std::size_t c = 0; c < d; ++c) {
    z[c] = params.coeffs[c].scale * m[c] + params.coeffs[c].bias;
    zmax = std::max(zmax, z[c]);
  }
  p.resize(d + 1);
  double denom = std::exp(0.0 - zmax);
  p[0] = denom;
  for (std::size_t c = 0; c < d; ++c) {
    p[c + 1] = std::exp(z[c] - zmax);
    denom += p[c + 1];
  }
  for (double& v : p) v /= denom;
}

// Record indices grouped by query id. Records are stored sorted by
// (context_id, query_id), so each group comes out in canonical
// context order.
inline std::map<int, std::vector<int>> records_by_query(
    const SurrogateDataset& ds) {
  std::map<int, std::vector<int>> groups;
  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    groups[ds.records[r].query_id].push_back(static_cast<int>(r));
  }
  return groups;
}

// Unordered index pairs (a < b) out of L contexts: all of them up to
// the exhaustive limit, otherwise kPairSampleCount distinct pairs
// sampled by rank without replacement.
inline std::vector<std::pair<int, int>> query_pairs(int L,
                                                    std::uint64_t seed) {
  std::vector<std::pair<int, int>> pairs;
  if (L < 2) return pairs;
  const std::uint64_t total =
      static_cast<std::uint64_t>(L) * (L - 1) / 2;
  auto unrank = [L](std::uint64_t r) {
    int a = 0;
    std::uint64_t row = static_cast<std::uint64_t>(L - 1);
    while (r >= row) {
      r -= row;
      ++a;
      --row;
    }
    return std::pair<int, int>(a, a + 1 + static_cast<int>(r));
  };
  if (L <= kPairExhaustiveLimit) {
    pairs.reserve(total);
    for (int a = 0; a < L; ++a) {
      for (int b = a + 1; b < L; ++b) pairs.emplace_back(a, b);
    }
  } else {
    std::mt19937_64 rng(seed);
    std::set<std::uint64_t> chosen;
    while (chosen.size() < static_cast<std::size_t>(kPairSampleCount)) {
      chosen.insert(rng_below(rng, total));
    }
    pairs.reserve(chosen.size());
    for (std::uint64_t r : chosen) pairs.push_back(unrank(r));
  }
  return pairs;
}

inline void check_compatible(const CalibrationParams& params,
                             const SurrogateDataset& ds) {
  if (ds.records.empty()) {
    throw ValueError("objective needs a non-empty surrogate dataset");
  }
  for (const SurrogateRecord& rec : ds.records) {
    if (rec.logits.m.size() != params.coeffs.size()) {
      throw ValueError("record logit width " +
                       std::to_string(rec.logits.m.size()) +
                       " does not match parameter width " +
                       std::to_string(params.coeffs.size()));
    }
    if (rec.label < 0 || rec.label > static_cast<int>(params.coeffs.size())) {
      throw ValueError("record label outside class range");
    }
  }
}

// Sum of -ln p(y) over records; grad accumulated when non-null.
inline double nll_accumulate(const CalibrationParams& params,
                             const SurrogateDataset& ds,
                             std::vector<double>* grad) {
  const std::size_t d = params.coeffs.size();
  std::vector<double> z, p;
  double total = 0.0;
  for (const SurrogateRecord& rec : ds.records) {
    calibrated_probs_into(rec.logits.m, params, z, p);
    const double py = p[rec.label];
    total += -std::log(std::max(py, kProbFloor));
    if (grad && py > kProbFloor) {
      for (std::size_t c = 0; c < d; ++c) {
        const double gz =
            p[c + 1] - (rec.label == static_cast<int>(c + 1) ? 1.0 : 0.0);
        (*grad)[2 * c] += gz;
        (*grad)[2 * c + 1] += gz * rec.logits.m[c];
      }
    }
  }
  return total;
}

// Per-pair SymXent between the calibrated distributions of a query's
// records a and b, from per-record cached probabilities and floored
// logs. The gradient through each side's softmax is
//   gz[c] = -P_c (ln~Q_c - sum_j P_j ln~Q_j)
//           - (Q_c [P_c>eps] - P_c sum_j Q_j [P_j>eps])
// where ~ marks the floored value, and symmetrically for the other
// side; gz is accumulated per record and projected onto (1, m) once
// after all pairs, which keeps each softmax evaluated a single time.
inline double penalty_accumulate(const CalibrationParams& params,
                                 const SurrogateDataset& ds,
                                 std::uint64_t pair_seed,
                                 std::vector<double>* grad) {
  const std::size_t d = params.coeffs.size();
  double total = 0.0;
  std::vector<double> z, probs, logs, gz;
  for (const auto& [query_id, recs] : records_by_query(ds)) {
    const std::size_t L = recs.size();
    const std::uint64_t qseed =
        derive_seed(pair_seed, static_cast<std::uint64_t>(
                                   static_cast<std::int64_t>(query_id)));
    const std::vector<std::pair<int, int>> pairs =
        query_pairs(static_cast<int>(L), qseed);
    if (pairs.empty()) continue;

    probs.resize(L * (d + 1));
    logs.resize(L * (d + 1));
    std::vector<double> p;
    for (std::size_t r = 0; r < L; ++r) {
      calibrated_probs_into(ds.records[recs[r]].logits.m, params, z, p);
      for (std::size_t j = 0; j <= d; ++j) {
        probs[r * (d + 1) + j] = p[j];
        logs[r * (d + 1) + j] = std::log(std::max(p[j], kProbFloor));
      }
    }
    if (grad) gz.assign(L * d, 0.0);

    double qtotal = 0.0;
    for (const auto& [a, b] : pairs) {
      const double* P = &probs[a * (d + 1)];
      const double* Q = &probs[b * (d + 1)];
      const double* lp = &logs[a * (d + 1)];
      const double* lq = &logs[b * (d + 1)];
      double SP = 0.0;  // sum_j P_j ln~Q_j
      double SQ = 0.0;  // sum_j Q_j ln~P_j
      double IP = 0.0;  // sum_j Q_j [P_j>eps]
      double IQ = 0.0;  // sum_j P_j [Q_j>eps]
      for (std::size_t j = 0; j <= d; ++j) {
        qtotal += -(P[j] * lq[j] + Q[j] * lp[j]);
        SP += P[j] * lq[j];
        SQ += Q[j] * lp[j];
        if (P[j] > kProbFloor) IP += Q[j];
        if (Q[j] > kProbFloor) IQ += P[j];
      }
      if (grad) {
        for (std::size_t c = 0; c < d; ++c) {
          const std::size_t j = c + 1;
          gz[a * d + c] += -P[j] * (lq[j] - SP) -
                           ((P[j] > kProbFloor ? Q[j] : 0.0) - P[j] * IP);
          gz[b * d + c] += -Q[j] * (lp[j] - SQ) -
                           ((Q[j] > kProbFloor ? P[j] : 0.0) - Q[j] * IQ);
        }
      }
    }

    const double inv_pairs = 1.0 / static_cast<double>(pairs.size());
    total += qtotal * inv_pairs;
    if (grad) {
      for (std::size_t r = 0; r < L; ++r) {
        const std::vector<double>& m = ds.records[recs[r]].logits.m;
        for (std::size_t c = 0; c < d; ++c) {
          (*grad)[2 * c] += gz[r * d + c] * inv_pairs;
          (*grad)[2 * c + 1] += gz[r * d + c] * m[c] * inv_pairs;
        }
      }
    }
  }
  return total;
}

}  // namespace detail

// Negative log-likelihood of the record labels under calibrated
// probabilities, summed over records.
inline double nll(const CalibrationParams& params,
                  const SurrogateDataset& ds) {
  detail::check_compatible(params, ds);
  return detail::nll_accumulate(params, ds, nullptr);
}

// Symmetric cross-entropy H(p,q) + H(q,p) with floored logs. Equals
// 2 H(p) when the distributions agree.
inline double sym_xent(const ProbDist& p, const ProbDist& q) {
  if (p.num_classes() != q.num_classes()) {
    throw ValueError("sym_xent: dimension mismatch");
  }
  double value = 0.0;
  for (int j = 0; j < p.num_classes(); ++j) {
    value += -(p.p[j] * std::log(std::max(q.p[j], kProbFloor)) +
               q.p[j] * std::log(std::max(p.p[j], kProbFloor)));
  }
  return value;
}

// Context-invariance penalty: for each query, the mean SymXent between
// the calibrated distributions over every unordered pair of its
// contexts (subsampled per query beyond kPairExhaustiveLimit
// contexts), summed across queries.
inline double inv_penalty(const CalibrationParams& params,
                          const SurrogateDataset& ds,
                          std::uint64_t pair_seed = 0) {
  detail::check_compatible(params, ds);
  return detail::penalty_accumulate(params, ds, pair_seed, nullptr);
}

// Mean over classes of the cosine between (b_c, w_c) and the identity
// direction (0, 1): g = (1/(n-1)) sum_c w_c / max(||(b_c,w_c)||, eps).
// Always in [-1, 1]; exactly 1 at the identity parameters.
inline double trust_region_value(const CalibrationParams& params,
                                 double eps_norm = 1e-10) {
  if (params.coeffs.empty()) throw ValueError("empty parameter vector");
  double sum = 0.0;
  for (const ClassAffine& ca : params.coeffs) {
    const double r = std::hypot(ca.bias, ca.scale);
    sum += ca.scale / std::max(r, eps_norm);
  }
  return sum / static_cast<double>(params.coeffs.size());
}

// Gradient of trust_region_value in the [b, w] layout. Inside the
// eps_norm ball the cosine is w/eps, hence the flat b derivative.
inline std::vector<double> trust_region_gradient(
    const CalibrationParams& params, double eps_norm = 1e-10) {
  const double inv_n1 = 1.0 / static_cast<double>(params.coeffs.size());
  std::vector<double> grad(2 * params.coeffs.size(), 0.0);
  for (std::size_t c = 0; c < params.coeffs.size(); ++c) {
    const double b = params.coeffs[c].bias;
    const double w = params.coeffs[c].scale;
    const double r = std::hypot(b, w);
    if (r > eps_norm) {
      grad[2 * c] = inv_n1 * (-w * b / (r * r * r));
      grad[2 * c + 1] = inv_n1 * (b * b / (r * r * r));
    } else {
      grad[2 * c + 1] = inv_n1 / eps_norm;
    }
  }
  return grad;
}

struct ObjectiveEval {
  double value = 0.0;
  double nll_part = 0.0;
  double penalty_part = 0.0;
  std::vector<double> gradient;
};

// value = nll + lambda_inv * inv_penalty, with the analytic gradient.
// The trust-region constraint is not folded in here; the solver owns it.
// penalty_part is the unscaled penalty, skipped (0) when lambda_inv is 0
// since it then contributes nothing to value or gradient.
inline ObjectiveEval total_objective(const CalibrationParams& params,
                                     const SurrogateDataset& ds,
                                     const ObjectiveConfig& cfg) {
  detail::check_compatible(params, ds);
  ObjectiveEval eval;
  eval.gradient.assign(2 * params.coeffs.size(), 0.0);
  eval.nll_part = detail::nll_accumulate(params, ds, &eval.gradient);
  if (cfg.lambda_inv != 0.0) {
    std::vector<double> pen_grad(2 * params.coeffs.size(), 0.0);
    eval.penalty_part =
        detail::penalty_accumulate(params, ds, cfg.pair_seed, &pen_grad);
    for (std::size_t j = 0; j < eval.gradient.size(); ++j) {
      eval.gradient[j] += cfg.lambda_inv * pen_grad[j];
    }
  }
  eval.value = eval.nll_part + cfg.lambda_inv * eval.penalty_part;
  return eval;
}

}  // namespace supcal
