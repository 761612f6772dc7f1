#pragma once

// Core vocabulary for calibrated in-context classification.
//
// All distributions are over n classes with class 0 as the reference.
// A LogitVector holds the n-1 relative log-odds m_c = ln(p_c / p_0);
// class 0 is implicit with logit 0. Calibration is a per-class affine
// map in log-odds space, z_c = w_c * m_c + b_c, followed by a softmax
// that reintroduces the reference class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "supcal/common.hpp"

namespace supcal {

// Ordered set of class names. Index in the list is the class id; the
// string is the verbalizer scored against the model.
class LabelSpace {
 public:
  LabelSpace() = default;

  static LabelSpace from_verbalizers(std::vector<std::string> words) {
    if (words.size() < 2) {
      throw ValueError("label space needs at least 2 classes, got " +
                       std::to_string(words.size()));
    }
    for (std::size_t i = 0; i < words.size(); ++i) {
      for (std::size_t j = i + 1; j < words.size(); ++j) {
        if (words[i] == words[j]) {
          throw ValueError("duplicate verbalizer: '" + words[i] + "'");
        }
      }
    }
    LabelSpace ls;
    ls.words_ = std::move(words);
    return ls;
  }

  int num_classes() const { return static_cast<int>(words_.size()); }

  const std::string& verbalizer(int c) const { return words_.at(c); }

  const std::vector<std::string>& verbalizers() const { return words_; }

  // -1 when the word is not in the space.
  int index_of(std::string_view word) const {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (words_[i] == word) return static_cast<int>(i);
    }
    return -1;
  }

 private:
  std::vector<std::string> words_;
};

// Probability vector over the n classes. Entries in [0,1], sum within
// 1e-9 of one; both are checked at construction.
struct ProbDist {
  std::vector<double> p;

  ProbDist() = default;

  explicit ProbDist(std::vector<double> probs) : p(std::move(probs)) {
    if (p.size() < 2) throw ValueError("distribution needs >= 2 classes");
    double sum = 0.0;
    for (double v : p) {
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw ValueError("probability out of [0,1]");
      }
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
      throw ValueError("probabilities sum to " + std::to_string(sum));
    }
  }

  int num_classes() const { return static_cast<int>(p.size()); }
};

// Relative log-odds versus class 0. Size is n-1; entries must be finite.
struct LogitVector {
  std::vector<double> m;

  LogitVector() = default;

  explicit LogitVector(std::vector<double> logits) : m(std::move(logits)) {
    if (m.empty()) throw ValueError("logit vector must be non-empty");
    for (double v : m) {
      if (!std::isfinite(v)) throw ValueError("non-finite logit");
    }
  }

  int num_classes() const { return static_cast<int>(m.size()) + 1; }
};

struct ClassAffine {
  double bias = 0.0;
  double scale = 1.0;
};

// One affine pair per non-reference class, tagged with the context size
// the parameters were trained for (0 when not tied to a size).
struct CalibrationParams {
  std::vector<ClassAffine> coeffs;
  int context_size = 0;

  static CalibrationParams identity(int num_classes, int context_size = 0) {
    if (num_classes < 2) throw ValueError("identity needs >= 2 classes");
    CalibrationParams params;
    params.coeffs.assign(num_classes - 1, ClassAffine{});
    params.context_size = context_size;
    return params;
  }

  int num_classes() const { return static_cast<int>(coeffs.size()) + 1; }
};

// m_c = ln(p_c) - ln(p_0), with the floor applied before the logs so a
// zero probability maps to a large finite logit instead of -inf.
inline LogitVector logits_from_probs(const ProbDist& dist) {
  const double lp0 = std::log(std::max(dist.p[0], kProbFloor));
  std::vector<double> m(dist.p.size() - 1);
  for (std::size_t c = 1; c < dist.p.size(); ++c) {
    m[c - 1] = std::log(std::max(dist.p[c], kProbFloor)) - lp0;
  }
  return LogitVector(std::move(m));
}

// Softmax over (0, m_1..m_{n-1}). The running max includes the implicit
// zero so exp never overflows regardless of logit magnitude.
inline ProbDist probs_from_logits(const LogitVector& logits) {
  double zmax = 0.0;
  for (double v : logits.m) zmax = std::max(zmax, v);
  double denom = std::exp(0.0 - zmax);
  std::vector<double> p(logits.m.size() + 1);
  p[0] = denom;
  for (std::size_t c = 0; c < logits.m.size(); ++c) {
    p[c + 1] = std::exp(logits.m[c] - zmax);
    denom += p[c + 1];
  }
  for (double& v : p) v /= denom;
  return ProbDist(std::move(p));
}

inline LogitVector apply_affine(const CalibrationParams& params,
                                const LogitVector& logits) {
  if (params.coeffs.size() != logits.m.size()) {
    throw ValueError("params cover " + std::to_string(params.coeffs.size()) +
                     " classes but logits cover " +
                     std::to_string(logits.m.size()));
  }
  std::vector<double> z(logits.m.size());
  for (std::size_t c = 0; c < z.size(); ++c) {
    z[c] = params.coeffs[c].scale * logits.m[c] + params.coeffs[c].bias;
  }
  return LogitVector(std::move(z));
}

inline ProbDist calibrated_dist(const LogitVector& logits,
                                const CalibrationParams& params) {
  return probs_from_logits(apply_affine(params, logits));
}

// Argmax with ties broken toward the smallest index, so predictions are
// reproducible regardless of platform.
inline int predict_label(const ProbDist& dist) {
  int best = 0;
  for (int c = 1; c < dist.num_classes(); ++c) {
    if (dist.p[c] > dist.p[best]) best = c;
  }
  return best;
}

// A labeled example. id is assigned by whoever built the collection
// (the harness uses the dataset row index) and is opaque downstream.
struct Exemplar {
  int id = -1;
  std::string text;
  int label = -1;
};

// Ordered demonstration sequence. Order matters (models are sensitive
// to it), and member ids must be distinct.
struct Context {
  std::vector<Exemplar> members;

  Context() = default;

  explicit Context(std::vector<Exemplar> shots) : members(std::move(shots)) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        if (members[i].id == members[j].id) {
          throw ValueError("context repeats exemplar id " +
                           std::to_string(members[i].id));
        }
      }
    }
  }

  int size() const { return static_cast<int>(members.size()); }

  bool contains_id(int id) const {
    for (const Exemplar& e : members) {
      if (e.id == id) return true;
    }
    return false;
  }

  // Canonical serialization: member ids in order, comma separated.
  // Used for hashing and as a cache key.
  std::string key() const {
    std::string out;
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(members[i].id);
    }
    return out;
  }
};

}  // namespace supcal
