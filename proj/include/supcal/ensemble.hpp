#pragma once

// Two-level ensemble over context sizes. For each usable size i in
// [i_min, i_max] a calibration fit is trained on that size's surrogate
// data. Prediction averages uniformly twice: the calibrated
// distributions over m_i sampled contexts of size i, then those
// per-size means across sizes. Sizes whose surrogate data misses a
// class are skipped with a recorded reason; if every size is skipped
// the task cannot be modeled and training errors out.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "supcal/backend.hpp"
#include "supcal/common.hpp"
#include "supcal/core.hpp"
#include "supcal/objective.hpp"
#include "supcal/solver.hpp"
#include "supcal/surrogate.hpp"

namespace supcal {

struct EnsembleConfig {
  int i_min = 1;
  int i_max = 0;  // 0 means min(5, k-1)
  // 0 means the rule max(1, min(floor(|records_i| / 2), 24)).
  int m_override = 0;
  // When set, replaces the accuracy-driven tau for every size.
  std::optional<double> tau_override;
  // Resample the m_i prediction contexts per query instead of reusing
  // the ones fixed at train time.
  bool resample_per_query = false;
  std::uint64_t seed = 0;
};

struct SizeModel {
  int context_size = 0;
  FitResult fit;
  double tau = -1.0;
  double lambda_inv = 0.0;
  int m_count = 0;
  // Contexts used at prediction time, in draw order. Growing m keeps
  // earlier draws, so widening the ensemble never reshuffles them.
  std::vector<ContextId> prediction_contexts;
};

struct SkippedSize {
  int context_size = 0;
  std::string reason;
};

struct EnsembleModel {
  std::vector<Exemplar> shots;
  int num_classes = 0;
  std::vector<SizeModel> sizes;
  std::vector<SkippedSize> skipped;
  bool resample_per_query = false;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<ContextId> sample_prediction_contexts(int k, int i, int m,
                                                         std::uint64_t seed) {
  const std::uint64_t total = ordered_subset_count(k, i);
  std::mt19937_64 rng(seed);
  std::set<std::uint64_t> seen;
  std::vector<ContextId> out;
  out.reserve(m);
  while (static_cast<int>(out.size()) < m) {
    std::uint64_t r = rng_below(rng, total);
    if (seen.insert(r).second) {
      out.push_back(unrank_ordered_subset(r, k, i));
    }
  }
  return out;
}

}  // namespace detail

inline EnsembleModel train_ensemble(const std::vector<Exemplar>& shots,
                                    const Backend& backend,
                                    const ContextBudget& budget,
                                    const ObjectiveConfig& objective,
                                    const SolverConfig& solver,
                                    const EnsembleConfig& cfg) {
  const int k = static_cast<int>(shots.size());
  if (k < 2) throw ValueError("ensemble needs at least 2 exemplars");
  const int n = backend.num_classes();

  const int i_min = std::max(1, cfg.i_min);
  const int i_max = cfg.i_max > 0 ? std::min(cfg.i_max, k - 1)
                                  : std::min(5, k - 1);
  if (i_min > i_max) {
    throw ValueError("empty context size range [" + std::to_string(i_min) +
                     ", " + std::to_string(i_max) + "]");
  }

  EnsembleModel model;
  model.shots = shots;
  model.num_classes = n;
  model.resample_per_query = cfg.resample_per_query;
  model.seed = cfg.seed;

  for (int i = i_min; i <= i_max; ++i) {
    SurrogateDataset ds = generate_surrogate(
        shots, i, backend, budget,
        derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    const CoverageReport coverage = class_coverage(ds);
    if (!coverage.complete) {
      std::string reason = "missing class(es)";
      for (int c : coverage.missing) reason += " " + std::to_string(c);
      reason += " in surrogate data";
      model.skipped.push_back({i, std::move(reason)});
      continue;
    }

    const double acc = in_sample_accuracy(ds);
    ObjectiveConfig obj = objective;
    obj.tau = cfg.tau_override ? *cfg.tau_override : tau_from_accuracy(acc, n);
    obj.pair_seed = derive_seed(cfg.seed, 0x70616972ull + i);

    SolverConfig sol = solver;
    sol.seed = derive_seed(derive_seed(cfg.seed, 0x666974ull),
                           static_cast<std::uint64_t>(i));

    SizeModel size_model;
    size_model.context_size = i;
    size_model.fit = fit(ds, obj, sol);
    size_model.tau = obj.tau;
    size_model.lambda_inv = obj.lambda_inv;

    const std::uint64_t total_contexts = ordered_subset_count(k, i);
    std::int64_t m = cfg.m_override > 0
                         ? cfg.m_override
                         : std::min<std::int64_t>(
                               static_cast<std::int64_t>(ds.records.size()) / 2,
                               24);
    m = std::max<std::int64_t>(1, m);
    if (static_cast<std::uint64_t>(m) > total_contexts) {
      m = static_cast<std::int64_t>(total_contexts);
    }
    size_model.m_count = static_cast<int>(m);
    size_model.prediction_contexts = detail::sample_prediction_contexts(
        k, i, size_model.m_count,
        derive_seed(cfg.seed, 0x63747800ull + i));
    model.sizes.push_back(std::move(size_model));
  }

  if (model.sizes.empty()) {
    std::string what = "no usable context size:";
    for (const SkippedSize& s : model.skipped) {
      what += " [i=" + std::to_string(s.context_size) + ": " + s.reason + "]";
    }
    throw UnsupportedTaskError(what);
  }
  return model;
}

// Mean of per-size means of calibrated distributions. Deterministic for
// a fixed model; with resample_per_query the contexts are drawn anew
// from a seed tied to the query text, so it stays reproducible.
inline ProbDist ensemble_predict(const EnsembleModel& model,
                                 std::string_view query_text,
                                 const Backend& backend) {
  if (model.sizes.empty()) throw ValueError("model has no trained sizes");
  if (backend.num_classes() != model.num_classes) {
    throw ValueError("backend class count does not match model");
  }
  const int k = static_cast<int>(model.shots.size());
  std::vector<double> grand(model.num_classes, 0.0);
  for (const SizeModel& size : model.sizes) {
    std::vector<ContextId> resampled;
    const std::vector<ContextId>* contexts = &size.prediction_contexts;
    if (model.resample_per_query) {
      resampled = detail::sample_prediction_contexts(
          k, size.context_size, size.m_count,
          derive_seed(derive_seed(model.seed, fnv1a64(query_text)),
                      static_cast<std::uint64_t>(size.context_size)));
      contexts = &resampled;
    }
    std::vector<double> size_mean(model.num_classes, 0.0);
    for (const ContextId& cid : *contexts) {
      const ProbDist dist = calibrated_dist(
          logits_from_probs(
              backend.infer(query_text, materialize(model.shots, cid))),
          size.fit.params);
      for (int c = 0; c < model.num_classes; ++c) size_mean[c] += dist.p[c];
    }
    const double inv = 1.0 / static_cast<double>(contexts->size());
    for (int c = 0; c < model.num_classes; ++c) {
      grand[c] += size_mean[c] * inv;
    }
  }
  const double inv_sizes = 1.0 / static_cast<double>(model.sizes.size());
  for (double& v : grand) v *= inv_sizes;
  return ProbDist(std::move(grand));
}

inline int ensemble_predict_label(const EnsembleModel& model,
                                  std::string_view query_text,
                                  const Backend& backend) {
  return predict_label(ensemble_predict(model, query_text, backend));
}

// Model directory: manifest.txt with the scalar state and per-size
// lines, shots.jsonl with the exemplars, params_i<N>.txt per size.
inline void save_ensemble(const std::filesystem::path& dir,
                          const EnsembleModel& model) {
  std::filesystem::create_directories(dir);

  {
    std::ofstream shots_out(dir / "shots.jsonl");
    if (!shots_out) throw IngestError("cannot write " +
                                      (dir / "shots.jsonl").string());
    for (const Exemplar& e : model.shots) {
      nlohmann::json j{{"id", e.id}, {"text", e.text}, {"label", e.label}};
      shots_out << j.dump() << "\n";
    }
  }

  std::ofstream out(dir / "manifest.txt");
  if (!out) throw IngestError("cannot write " +
                              (dir / "manifest.txt").string());
  out << "k = " << model.shots.size() << "\n";
  out << "num_classes = " << model.num_classes << "\n";
  out << "seed = " << model.seed << "\n";
  out << "resample_per_query = " << (model.resample_per_query ? 1 : 0)
      << "\n";
  for (const SizeModel& size : model.sizes) {
    const std::string fname =
        "params_i" + std::to_string(size.context_size) + ".txt";
    out << "size " << size.context_size << " m=" << size.m_count
        << " file=" << fname << " contexts=";
    for (std::size_t j = 0; j < size.prediction_contexts.size(); ++j) {
      if (j) out << '|';
      out << detail::join_ints(size.prediction_contexts[j]);
    }
    out << "\n";
    std::ofstream params_out(dir / fname);
    if (!params_out) throw IngestError("cannot write " +
                                       (dir / fname).string());
    ObjectiveConfig echo;
    echo.tau = size.tau;
    echo.lambda_inv = size.lambda_inv;
    save_fit(params_out, size.fit, echo);
  }
  for (const SkippedSize& s : model.skipped) {
    out << "skip " << s.context_size << " " << s.reason << "\n";
  }
}

inline EnsembleModel load_ensemble(const std::filesystem::path& dir) {
  EnsembleModel model;

  {
    std::ifstream shots_in(dir / "shots.jsonl");
    if (!shots_in) throw IngestError("cannot open " +
                                     (dir / "shots.jsonl").string());
    std::string line;
    while (std::getline(shots_in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.contains("id") || !j.contains("text") ||
          !j.contains("label")) {
        throw IngestError("bad shots.jsonl line: " + line);
      }
      Exemplar e;
      e.id = j["id"].get<int>();
      e.text = j["text"].get<std::string>();
      e.label = j["label"].get<int>();
      model.shots.push_back(std::move(e));
    }
  }

  std::ifstream in(dir / "manifest.txt");
  if (!in) throw IngestError("cannot open " + (dir / "manifest.txt").string());
  std::string line;
  int lineno = 0;
  std::size_t declared_k = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    auto fail = [&](const std::string& msg) -> IngestError {
      return IngestError("manifest line " + std::to_string(lineno) + ": " +
                         msg);
    };
    if (key == "k" || key == "num_classes" || key == "seed" ||
        key == "resample_per_query") {
      std::string eq, value;
      if (!(ss >> eq >> value) || eq != "=") throw fail("expected key = value");
      if (key == "k") declared_k = std::stoull(value);
      else if (key == "num_classes") model.num_classes = std::stoi(value);
      else if (key == "seed") model.seed = std::stoull(value);
      else model.resample_per_query = std::stoi(value) != 0;
    } else if (key == "size") {
      SizeModel size;
      std::string field;
      if (!(ss >> size.context_size)) throw fail("bad size id");
      std::string fname;
      while (ss >> field) {
        if (field.rfind("m=", 0) == 0) {
          size.m_count = std::stoi(field.substr(2));
        } else if (field.rfind("file=", 0) == 0) {
          fname = field.substr(5);
        } else if (field.rfind("contexts=", 0) == 0) {
          std::stringstream cs(field.substr(9));
          std::string tuple;
          while (std::getline(cs, tuple, '|')) {
            ContextId cid;
            std::stringstream ts(tuple);
            std::string tok;
            while (std::getline(ts, tok, ',')) cid.push_back(std::stoi(tok));
            size.prediction_contexts.push_back(std::move(cid));
          }
        } else {
          throw fail("unknown size field '" + field + "'");
        }
      }
      if (fname.empty()) throw fail("size line missing file=");
      std::ifstream params_in(dir / fname);
      if (!params_in) throw IngestError("cannot open " +
                                        (dir / fname).string());
      FitFile ff = load_fit(params_in);
      size.fit = ff.result;
      size.tau = ff.tau;
      size.lambda_inv = ff.lambda_inv;
      model.sizes.push_back(std::move(size));
    } else if (key == "skip") {
      SkippedSize s;
      if (!(ss >> s.context_size)) throw fail("bad skip line");
      std::getline(ss, s.reason);
      if (!s.reason.empty() && s.reason[0] == ' ') s.reason.erase(0, 1);
      model.skipped.push_back(std::move(s));
    } else {
      throw fail("unknown key '" + key + "'");
    }
  }
  if (model.sizes.empty()) throw IngestError("manifest lists no sizes");
  if (declared_k != model.shots.size()) {
    throw IngestError("manifest k does not match shots.jsonl");
  }
  for (const SizeModel& size : model.sizes) {
    if (static_cast<int>(size.prediction_contexts.size()) != size.m_count) {
      throw IngestError("size " + std::to_string(size.context_size) +
                        ": context list does not match m");
    }
  }
  return model;
}

}  // namespace supcal
