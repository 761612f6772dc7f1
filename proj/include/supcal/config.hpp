#pragma once

// Application config file: flat "section.key = value" lines, '#'
// comments, blank lines ignored. Unknown keys are an error rather than
// a silent no-op, so typos surface immediately.

#include <cstdint>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "supcal/backend.hpp"
#include "supcal/baselines.hpp"
#include "supcal/common.hpp"
#include "supcal/ensemble.hpp"
#include "supcal/harness.hpp"
#include "supcal/objective.hpp"
#include "supcal/solver.hpp"
#include "supcal/surrogate.hpp"

namespace supcal {

struct AppConfig {
  MockModelSpec mock;
  std::vector<std::string> mock_labels;  // empty: label0..label{n-1}
  BackendConfig backend;
  ExperimentSpec experiment;  // carries budget/objective/solver/... too
  std::string dataset_path;
  FileFormat dataset_format = FileFormat::auto_detect;
  std::string dataset_name;
  std::string template_file;
  std::string template_name;
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw IngestError("config key '" + key + "': expected a boolean, got '" +
                    v + "'");
}

inline std::vector<std::string> split_commas(const std::string& v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = v.find(',', start);
    out.push_back(strip(v.substr(
        start, comma == std::string::npos ? comma : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::vector<double> parse_double_list(const std::string& v,
                                             const std::string& key) {
  std::vector<double> out;
  for (const std::string& tok : split_commas(v)) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw IngestError("config key '" + key + "': bad number '" + tok + "'");
    }
  }
  return out;
}

}  // namespace detail

inline AppConfig parse_config(std::istream& in) {
  AppConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::strip(line);
    if (s.empty() || s[0] == '#') continue;
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) {
      throw IngestError("config line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    const std::string key = detail::strip(s.substr(0, eq));
    const std::string value = detail::strip(s.substr(eq + 1));
    try {
      auto u64 = [&] { return std::stoull(value); };
      auto i32 = [&] { return std::stoi(value); };
      auto f64 = [&] { return std::stod(value); };
      auto boolean = [&] { return detail::parse_bool(value, key); };

      if (key == "mock.num_classes") cfg.mock.num_classes = i32();
      else if (key == "mock.slope") cfg.mock.slope = f64();
      else if (key == "mock.intercept") cfg.mock.intercept = f64();
      else if (key == "mock.conditional_scale")
        cfg.mock.conditional_scale = detail::parse_double_list(value, key);
      else if (key == "mock.marginal_shift")
        cfg.mock.marginal_shift = detail::parse_double_list(value, key);
      else if (key == "mock.majority_bias") cfg.mock.majority_bias = f64();
      else if (key == "mock.recency_bias") cfg.mock.recency_bias = f64();
      else if (key == "mock.noise_sd") cfg.mock.noise_sd = f64();
      else if (key == "mock.seed") cfg.mock.seed = u64();
      else if (key == "mock.labels")
        cfg.mock_labels = detail::split_commas(value);
      else if (key == "backend.endpoint_url") cfg.backend.endpoint_url = value;
      else if (key == "backend.model_name") cfg.backend.model_name = value;
      else if (key == "backend.timeout_ms") cfg.backend.timeout_ms = i32();
      else if (key == "backend.max_retries") cfg.backend.max_retries = i32();
      else if (key == "backend.auth_token_env_var")
        cfg.backend.auth_token_env_var = value;
      else if (key == "backend.scoring") {
        if (value == "full_sequence")
          cfg.backend.scoring = ScoringMode::full_sequence;
        else if (value == "first_token")
          cfg.backend.scoring = ScoringMode::first_token;
        else
          throw IngestError("config key 'backend.scoring': expected "
                            "full_sequence or first_token");
      } else if (key == "backend.concurrency")
        cfg.backend.concurrency = i32();
      else if (key == "budget.max_contexts")
        cfg.experiment.budget.max_contexts = std::stoll(value);
      else if (key == "objective.lambda_inv")
        cfg.experiment.objective.lambda_inv = f64();
      else if (key == "objective.eps_norm")
        cfg.experiment.objective.eps_norm = f64();
      else if (key == "solver.max_iters")
        cfg.experiment.solver.max_iters = i32();
      else if (key == "solver.grad_tol")
        cfg.experiment.solver.grad_tol = f64();
      else if (key == "solver.constraint_tol")
        cfg.experiment.solver.constraint_tol = f64();
      else if (key == "solver.penalty_init")
        cfg.experiment.solver.penalty_init = f64();
      else if (key == "solver.penalty_growth")
        cfg.experiment.solver.penalty_growth = f64();
      else if (key == "solver.max_outer_rounds")
        cfg.experiment.solver.max_outer_rounds = i32();
      else if (key == "solver.restarts")
        cfg.experiment.solver.restarts = i32();
      else if (key == "solver.seed") cfg.experiment.solver.seed = u64();
      else if (key == "solver.mode") {
        if (value == "full") cfg.experiment.solver.mode = FitMode::full;
        else if (value == "bias_only")
          cfg.experiment.solver.mode = FitMode::bias_only;
        else
          throw IngestError(
              "config key 'solver.mode': expected full or bias_only");
      } else if (key == "ensemble.i_min")
        cfg.experiment.ensemble.i_min = i32();
      else if (key == "ensemble.i_max") cfg.experiment.ensemble.i_max = i32();
      else if (key == "ensemble.m_override")
        cfg.experiment.ensemble.m_override = i32();
      else if (key == "ensemble.tau_override")
        cfg.experiment.ensemble.tau_override = f64();
      else if (key == "ensemble.resample_per_query")
        cfg.experiment.ensemble.resample_per_query = boolean();
      else if (key == "baseline.content_free_tokens")
        cfg.experiment.baseline.content_free_tokens =
            detail::split_commas(value);
      else if (key == "baseline.dc_pseudo_inputs")
        cfg.experiment.baseline.dc_pseudo_inputs = i32();
      else if (key == "baseline.bc_batch_limit")
        cfg.experiment.baseline.bc_batch_limit = i32();
      else if (key == "baseline.seed") cfg.experiment.baseline.seed = u64();
      else if (key == "experiment.shots") cfg.experiment.shots = i32();
      else if (key == "experiment.method")
        cfg.experiment.method = method_from_name(value);
      else if (key == "experiment.seeds") {
        cfg.experiment.seeds.clear();
        for (const std::string& tok : detail::split_commas(value)) {
          cfg.experiment.seeds.push_back(std::stoull(tok));
        }
      } else if (key == "experiment.test_size")
        cfg.experiment.test_size = i32();
      else if (key == "experiment.fixed_test_set")
        cfg.experiment.fixed_test_set = boolean();
      else if (key == "experiment.measure_time")
        cfg.experiment.measure_time = boolean();
      else if (key == "dataset.path") cfg.dataset_path = value;
      else if (key == "dataset.format") {
        if (value == "jsonl") cfg.dataset_format = FileFormat::jsonl;
        else if (value == "csv") cfg.dataset_format = FileFormat::csv;
        else if (value == "auto") cfg.dataset_format = FileFormat::auto_detect;
        else
          throw IngestError(
              "config key 'dataset.format': expected jsonl, csv, or auto");
      } else if (key == "dataset.name") cfg.dataset_name = value;
      else if (key == "template.file") cfg.template_file = value;
      else if (key == "template.name") cfg.template_name = value;
      else
        throw IngestError("unknown config key '" + key + "'");
    } catch (const IngestError& e) {
      throw IngestError("config line " + std::to_string(lineno) + ": " +
                        e.what());
    } catch (const std::exception& e) {
      throw IngestError("config line " + std::to_string(lineno) + ": key '" +
                        key + "': " + e.what());
    }
  }
  return cfg;
}

inline AppConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open config file: " + path);
  return parse_config(in);
}

// Label space for the mock task: configured words, or label0..label{n-1}.
inline LabelSpace mock_label_space(const AppConfig& cfg) {
  if (!cfg.mock_labels.empty()) {
    return LabelSpace::from_verbalizers(cfg.mock_labels);
  }
  std::vector<std::string> words;
  for (int c = 0; c < cfg.mock.num_classes; ++c) {
    words.push_back("label" + std::to_string(c));
  }
  return LabelSpace::from_verbalizers(std::move(words));
}

}  // namespace supcal
