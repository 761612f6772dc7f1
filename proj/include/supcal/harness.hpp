#pragma once

// Experiment harness: dataset ingestion, shot/test sampling, metric
// computation, the per-seed experiment loop over every method, and the
// CSV report writers. Also owns the application config file format.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "supcal/backend.hpp"
#include "supcal/baselines.hpp"
#include "supcal/common.hpp"
#include "supcal/core.hpp"
#include "supcal/ensemble.hpp"
#include "supcal/objective.hpp"
#include "supcal/solver.hpp"
#include "supcal/surrogate.hpp"

namespace supcal {

struct Dataset {
  std::string name;
  LabelSpace labels;
  std::vector<Exemplar> items;  // id = row index in the source file
};

enum class FileFormat { auto_detect, jsonl, csv };

namespace detail {

inline Dataset dataset_from_rows(
    std::vector<std::pair<std::string, std::string>> rows,
    const LabelSpace& labels, const std::string& name,
    const std::vector<int>& linenos) {
  Dataset ds;
  ds.name = name;
  ds.labels = labels;
  ds.items.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int label = labels.index_of(rows[r].second);
    if (label < 0) {
      throw IngestError(name + " line " + std::to_string(linenos[r]) +
                        ": unknown label '" + rows[r].second + "'");
    }
    Exemplar e;
    e.id = static_cast<int>(r);
    e.text = std::move(rows[r].first);
    e.label = label;
    ds.items.push_back(std::move(e));
  }
  if (ds.items.empty()) throw IngestError(name + ": dataset is empty");
  return ds;
}

// Minimal CSV with double-quote escaping. Returns one row of cells.
inline std::vector<std::string> parse_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t j = 0; j < line.size(); ++j) {
    const char ch = line[j];
    if (quoted) {
      if (ch == '"') {
        if (j + 1 < line.size() && line[j + 1] == '"') {
          cell += '"';
          ++j;
        } else {
          quoted = false;
        }
      } else {
        cell += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(std::move(cell));
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  cells.push_back(std::move(cell));
  return cells;
}

}  // namespace detail

inline Dataset load_dataset_jsonl(std::istream& in, const LabelSpace& labels,
                                  const std::string& name) {
  std::vector<std::pair<std::string, std::string>> rows;
  std::vector<int> linenos;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw IngestError(name + " line " + std::to_string(lineno) +
                        ": not a JSON object");
    }
    if (!j.contains("text") || !j["text"].is_string() ||
        !j.contains("label") || !j["label"].is_string()) {
      throw IngestError(name + " line " + std::to_string(lineno) +
                        ": needs string fields 'text' and 'label'");
    }
    rows.emplace_back(j["text"].get<std::string>(),
                      j["label"].get<std::string>());
    linenos.push_back(lineno);
  }
  return detail::dataset_from_rows(std::move(rows), labels, name, linenos);
}

inline Dataset load_dataset_csv(std::istream& in, const LabelSpace& labels,
                                const std::string& name) {
  std::vector<std::pair<std::string, std::string>> rows;
  std::vector<int> linenos;
  std::string line;
  int lineno = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells = detail::parse_csv_row(line);
    if (!saw_header) {
      if (cells.size() != 2 || cells[0] != "text" || cells[1] != "label") {
        throw IngestError(name + ": csv header must be exactly 'text,label'");
      }
      saw_header = true;
      continue;
    }
    if (cells.size() != 2) {
      throw IngestError(name + " line " + std::to_string(lineno) +
                        ": expected 2 cells, got " +
                        std::to_string(cells.size()));
    }
    rows.emplace_back(std::move(cells[0]), std::move(cells[1]));
    linenos.push_back(lineno);
  }
  if (!saw_header) throw IngestError(name + ": csv file has no header");
  return detail::dataset_from_rows(std::move(rows), labels, name, linenos);
}

inline Dataset load_dataset(const std::string& path, const LabelSpace& labels,
                            FileFormat format = FileFormat::auto_detect,
                            std::string name = "") {
  if (name.empty()) name = path;
  if (format == FileFormat::auto_detect) {
    if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0) {
      format = FileFormat::csv;
    } else {
      format = FileFormat::jsonl;
    }
  }
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open dataset: " + path);
  return format == FileFormat::csv ? load_dataset_csv(in, labels, name)
                                   : load_dataset_jsonl(in, labels, name);
}

inline void save_dataset_jsonl(std::ostream& out, const Dataset& ds) {
  for (const Exemplar& e : ds.items) {
    nlohmann::json j{{"text", e.text},
                     {"label", ds.labels.verbalizer(e.label)}};
    out << j.dump() << "\n";
  }
}

// k distinct items drawn uniformly without replacement, in draw order;
// the pool is every other item, in original order.
inline std::pair<std::vector<Exemplar>, std::vector<Exemplar>> sample_shots(
    const Dataset& ds, int k, std::uint64_t seed) {
  const int total = static_cast<int>(ds.items.size());
  if (k < 1) throw ValueError("k must be >= 1");
  if (k > total) {
    throw ValueError("k=" + std::to_string(k) + " exceeds dataset size " +
                     std::to_string(total));
  }
  std::vector<int> order(total);
  for (int j = 0; j < total; ++j) order[j] = j;
  std::mt19937_64 rng(derive_seed(seed, 0x73686f7473ull));
  std::vector<Exemplar> shots;
  shots.reserve(k);
  for (int t = 0; t < k; ++t) {
    const int pick =
        t + static_cast<int>(rng_below(rng, static_cast<std::uint64_t>(
                                                total - t)));
    std::swap(order[t], order[pick]);
    shots.push_back(ds.items[order[t]]);
  }
  std::vector<int> rest(order.begin() + k, order.end());
  std::sort(rest.begin(), rest.end());
  std::vector<Exemplar> pool;
  pool.reserve(rest.size());
  for (int idx : rest) pool.push_back(ds.items[idx]);
  return {std::move(shots), std::move(pool)};
}

// Confusion matrix convention: rows are the true class, columns the
// predicted class, so each row sums to that class's support.
using Confusion = std::vector<std::vector<long>>;

inline Confusion make_confusion(int n) {
  return Confusion(n, std::vector<long>(n, 0));
}

inline double accuracy_of(const Confusion& conf) {
  long diag = 0, total = 0;
  for (std::size_t r = 0; r < conf.size(); ++r) {
    for (std::size_t c = 0; c < conf[r].size(); ++c) {
      total += conf[r][c];
      if (r == c) diag += conf[r][c];
    }
  }
  if (total == 0) throw ValueError("empty confusion matrix");
  return static_cast<double>(diag) / static_cast<double>(total);
}

struct ClassPRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Precision, recall, F1 per class. A class with no predicted and no
// true examples scores zero across the board (it still counts in the
// macro average).
inline std::vector<ClassPRF> per_class_prf(const Confusion& conf) {
  const std::size_t n = conf.size();
  std::vector<ClassPRF> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    long tp = conf[c][c];
    long rowsum = 0, colsum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      rowsum += conf[c][j];
      colsum += conf[j][c];
    }
    ClassPRF& prf = out[c];
    prf.precision = colsum > 0 ? static_cast<double>(tp) / colsum : 0.0;
    prf.recall = rowsum > 0 ? static_cast<double>(tp) / rowsum : 0.0;
    prf.f1 = (prf.precision + prf.recall) > 0.0
                 ? 2.0 * prf.precision * prf.recall /
                       (prf.precision + prf.recall)
                 : 0.0;
  }
  return out;
}

inline double macro_f1(const Confusion& conf) {
  const std::vector<ClassPRF> prf = per_class_prf(conf);
  double sum = 0.0;
  for (const ClassPRF& p : prf) sum += p.f1;
  return sum / static_cast<double>(prf.size());
}

enum class Method { base, cc, dc, bc, sc, sc_bias_only };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::base: return "base";
    case Method::cc: return "cc";
    case Method::dc: return "dc";
    case Method::bc: return "bc";
    case Method::sc: return "sc";
    case Method::sc_bias_only: return "sc_bias_only";
  }
  throw ValueError("unreachable method");
}

inline Method method_from_name(const std::string& s) {
  if (s == "base") return Method::base;
  if (s == "cc") return Method::cc;
  if (s == "dc") return Method::dc;
  if (s == "bc") return Method::bc;
  if (s == "sc") return Method::sc;
  if (s == "sc_bias_only") return Method::sc_bias_only;
  throw IngestError("unknown method '" + s + "'");
}

struct ExperimentSpec {
  std::string dataset_name;
  int shots = 4;
  Method method = Method::sc;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  int test_size = 256;
  // Take the first test_size pool items instead of sampling per seed.
  bool fixed_test_set = false;
  // Wall-clock timing makes reports differ between runs; turning it
  // off writes zeros so repeated runs are byte-identical.
  bool measure_time = true;
  ContextBudget budget;
  ObjectiveConfig objective;
  SolverConfig solver;
  EnsembleConfig ensemble;
  BaselineConfig baseline;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double train_seconds = 0.0;
  double infer_seconds_per_256 = 0.0;
  Confusion confusion;
  std::vector<SkippedSize> skipped;
};

struct MetricsReport {
  std::string dataset_name;
  Method method = Method::base;
  int num_classes = 0;
  std::vector<SeedResult> per_seed;
  Confusion pooled_confusion;
  std::vector<ClassPRF> per_class;  // over the pooled confusion
  double mean_accuracy = 0.0;
  double sd_accuracy = 0.0;
  double mean_macro_f1 = 0.0;
  double sd_macro_f1 = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace detail

// One full evaluation: for each seed draw shots and a disjoint test
// set, train whatever the method requires, predict, and score.
inline MetricsReport run_experiment(const Dataset& ds,
                                    const ExperimentSpec& spec,
                                    const Backend& backend) {
  if (backend.num_classes() != ds.labels.num_classes()) {
    throw ValueError("backend class count does not match dataset");
  }
  if (spec.seeds.empty()) throw ValueError("experiment needs >= 1 seed");
  if (spec.test_size < 1) throw ValueError("test_size must be >= 1");
  const int n = ds.labels.num_classes();

  MetricsReport report;
  report.dataset_name = spec.dataset_name.empty() ? ds.name
                                                  : spec.dataset_name;
  report.method = spec.method;
  report.num_classes = n;
  report.pooled_confusion = make_confusion(n);

  using clock = std::chrono::steady_clock;
  for (std::uint64_t seed : spec.seeds) {
    auto [shots, pool] = sample_shots(ds, spec.shots, seed);
    if (pool.empty()) {
      throw ValueError("no items left for testing after drawing shots");
    }
    std::vector<Exemplar> test;
    const int tsize = std::min<int>(spec.test_size,
                                    static_cast<int>(pool.size()));
    if (spec.fixed_test_set) {
      test.assign(pool.begin(), pool.begin() + tsize);
    } else {
      std::mt19937_64 rng(derive_seed(seed, 0x74657374ull));
      std::vector<int> order(pool.size());
      for (std::size_t j = 0; j < pool.size(); ++j) {
        order[j] = static_cast<int>(j);
      }
      for (int t = 0; t < tsize; ++t) {
        const int pick = t + static_cast<int>(rng_below(
                                 rng, pool.size() - static_cast<std::size_t>(t)));
        std::swap(order[t], order[pick]);
        test.push_back(pool[order[t]]);
      }
    }

    SeedResult result;
    result.seed = seed;
    result.confusion = make_confusion(n);

    const Context full_context{std::vector<Exemplar>(shots)};
    EnsembleModel model;
    const bool is_sc =
        spec.method == Method::sc || spec.method == Method::sc_bias_only;

    const auto t_train0 = clock::now();
    if (is_sc) {
      SolverConfig solver = spec.solver;
      solver.mode = spec.method == Method::sc_bias_only ? FitMode::bias_only
                                                        : FitMode::full;
      EnsembleConfig ens = spec.ensemble;
      ens.seed = derive_seed(seed, 0x656e73ull);
      model = train_ensemble(shots, backend, spec.budget, spec.objective,
                             solver, ens);
      result.skipped = model.skipped;
    }
    if (spec.measure_time) {
      result.train_seconds =
          std::chrono::duration<double>(clock::now() - t_train0).count();
    }

    std::vector<int> predictions(test.size(), -1);
    const auto t_infer0 = clock::now();
    switch (spec.method) {
      case Method::base: {
        for (std::size_t q = 0; q < test.size(); ++q) {
          predictions[q] = predict_label(
              base_predict(test[q].text, full_context, backend));
        }
        break;
      }
      case Method::cc: {
        const ProbDist ref = cc_reference(full_context, backend,
                                          spec.baseline);
        for (std::size_t q = 0; q < test.size(); ++q) {
          predictions[q] = predict_label(normalize_by_reference(
              backend.infer(test[q].text, full_context), ref));
        }
        break;
      }
      case Method::dc: {
        std::vector<std::string> corpus;
        corpus.reserve(test.size());
        for (const Exemplar& e : test) corpus.push_back(e.text);
        BaselineConfig bcfg = spec.baseline;
        bcfg.seed = derive_seed(seed, bcfg.seed ^ 0x6463ull);
        const ProbDist ref = dc_reference(full_context, backend, corpus,
                                          bcfg);
        for (std::size_t q = 0; q < test.size(); ++q) {
          predictions[q] = predict_label(normalize_by_reference(
              backend.infer(test[q].text, full_context), ref));
        }
        break;
      }
      case Method::bc: {
        std::vector<std::string> batch;
        batch.reserve(test.size());
        for (const Exemplar& e : test) batch.push_back(e.text);
        const std::vector<ProbDist> outs =
            bc_predict(batch, full_context, backend, spec.baseline);
        for (std::size_t q = 0; q < test.size(); ++q) {
          predictions[q] = predict_label(outs[q]);
        }
        break;
      }
      case Method::sc:
      case Method::sc_bias_only: {
        for (std::size_t q = 0; q < test.size(); ++q) {
          predictions[q] = ensemble_predict_label(model, test[q].text,
                                                  backend);
        }
        break;
      }
    }
    if (spec.measure_time) {
      const double elapsed =
          std::chrono::duration<double>(clock::now() - t_infer0).count();
      result.infer_seconds_per_256 =
          elapsed / static_cast<double>(test.size()) * 256.0;
    }

    for (std::size_t q = 0; q < test.size(); ++q) {
      result.confusion[test[q].label][predictions[q]] += 1;
      report.pooled_confusion[test[q].label][predictions[q]] += 1;
    }
    result.accuracy = accuracy_of(result.confusion);
    result.macro_f1 = macro_f1(result.confusion);
    report.per_seed.push_back(std::move(result));
  }

  std::vector<double> accs, f1s;
  for (const SeedResult& r : report.per_seed) {
    accs.push_back(r.accuracy);
    f1s.push_back(r.macro_f1);
  }
  std::tie(report.mean_accuracy, report.sd_accuracy) = detail::mean_sd(accs);
  std::tie(report.mean_macro_f1, report.sd_macro_f1) = detail::mean_sd(f1s);
  report.per_class = per_class_prf(report.pooled_confusion);
  return report;
}

namespace detail {

inline std::string fmt_fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

}  // namespace detail

// Per-seed CSV, one row per seed. Fixed formatting so two runs of the
// same experiment produce identical bytes (timings excepted unless
// measurement is off).
inline void write_report_csv(std::ostream& out, const MetricsReport& report) {
  out << "method,seed,accuracy,macro_f1,train_seconds,"
         "infer_seconds_per_256\n";
  for (const SeedResult& r : report.per_seed) {
    out << method_name(report.method) << ',' << r.seed << ','
        << detail::fmt_fixed(r.accuracy, 6) << ','
        << detail::fmt_fixed(r.macro_f1, 6) << ','
        << detail::fmt_fixed(r.train_seconds, 3) << ','
        << detail::fmt_fixed(r.infer_seconds_per_256, 3) << "\n";
  }
}

// Human-oriented companion to the CSV: aggregate metrics, per-class
// scores, the pooled confusion matrix, and any skipped sizes.
inline void write_report_text(std::ostream& out,
                              const MetricsReport& report) {
  out << "dataset: " << report.dataset_name << "\n";
  out << "method: " << method_name(report.method) << "\n";
  out << "seeds: " << report.per_seed.size() << "\n";
  out << "accuracy: " << detail::fmt_fixed(report.mean_accuracy, 6) << " +- "
      << detail::fmt_fixed(report.sd_accuracy, 6) << "\n";
  out << "macro_f1: " << detail::fmt_fixed(report.mean_macro_f1, 6) << " +- "
      << detail::fmt_fixed(report.sd_macro_f1, 6) << "\n";
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const ClassPRF& p = report.per_class[c];
    out << "class " << c << ": precision="
        << detail::fmt_fixed(p.precision, 6)
        << " recall=" << detail::fmt_fixed(p.recall, 6)
        << " f1=" << detail::fmt_fixed(p.f1, 6) << "\n";
  }
  out << "confusion (rows = true):\n";
  for (const auto& row : report.pooled_confusion) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out << (c ? " " : "") << row[c];
    }
    out << "\n";
  }
  for (const SeedResult& r : report.per_seed) {
    for (const SkippedSize& s : r.skipped) {
      out << "skipped: seed=" << r.seed << " i=" << s.context_size << " "
          << s.reason << "\n";
    }
  }
}

// Aggregates one or more per-seed CSVs into a mean +- sd row per
// method. Input must carry the exact header write_report_csv emits.
inline void summarize_reports(const std::vector<std::istream*>& inputs,
                              std::ostream& out) {
  std::map<std::string, std::vector<std::array<double, 4>>> by_method;
  std::vector<std::string> method_order;
  for (std::istream* in : inputs) {
    std::string line;
    if (!std::getline(*in, line)) throw IngestError("empty report csv");
    if (line != "method,seed,accuracy,macro_f1,train_seconds,"
                "infer_seconds_per_256") {
      throw IngestError("unexpected report header: " + line);
    }
    int lineno = 1;
    while (std::getline(*in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const std::vector<std::string> cells = detail::parse_csv_row(line);
      if (cells.size() != 6) {
        throw IngestError("report line " + std::to_string(lineno) +
                          ": expected 6 cells");
      }
      try {
        std::array<double, 4> row{std::stod(cells[2]), std::stod(cells[3]),
                                  std::stod(cells[4]), std::stod(cells[5])};
        if (by_method.find(cells[0]) == by_method.end()) {
          method_order.push_back(cells[0]);
        }
        by_method[cells[0]].push_back(row);
      } catch (const std::exception&) {
        throw IngestError("report line " + std::to_string(lineno) +
                          ": bad number");
      }
    }
  }
  if (by_method.empty()) throw IngestError("no report rows to summarize");
  out << "method,seeds,mean_accuracy,sd_accuracy,mean_macro_f1,sd_macro_f1,"
         "mean_train_seconds,mean_infer_seconds_per_256\n";
  for (const std::string& m : method_order) {
    const auto& rows = by_method[m];
    std::vector<double> acc, f1, tr, inf;
    for (const auto& r : rows) {
      acc.push_back(r[0]);
      f1.push_back(r[1]);
      tr.push_back(r[2]);
      inf.push_back(r[3]);
    }
    const auto [acc_m, acc_s] = detail::mean_sd(acc);
    const auto [f1_m, f1_s] = detail::mean_sd(f1);
    const auto [tr_m, tr_s] = detail::mean_sd(tr);
    const auto [inf_m, inf_s] = detail::mean_sd(inf);
    (void)tr_s;
    (void)inf_s;
    out << m << ',' << rows.size() << ',' << detail::fmt_fixed(acc_m, 6)
        << ',' << detail::fmt_fixed(acc_s, 6) << ','
        << detail::fmt_fixed(f1_m, 6) << ',' << detail::fmt_fixed(f1_s, 6)
        << ',' << detail::fmt_fixed(tr_m, 3) << ','
        << detail::fmt_fixed(inf_m, 3) << "\n";
  }
}

// Synthetic dataset drawn from the mock's ground truth: texts are the
// decimal feature values, labels are sampled from the true posterior.
inline Dataset simulate_dataset(const MockModelSpec& spec,
                                const LabelSpace& labels, int size,
                                std::uint64_t seed) {
  if (size < 1) throw ValueError("dataset size must be >= 1");
  if (labels.num_classes() != spec.num_classes) {
    throw ValueError("label space does not match mock class count");
  }
  std::mt19937_64 rng(derive_seed(seed, 0x73696dull));
  Dataset ds;
  ds.name = "simulated";
  ds.labels = labels;
  for (int j = 0; j < size; ++j) {
    const double s = rng_unit(rng) * 6.0 - 3.0;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", s);
    const ProbDist posterior = mock_true_posterior(spec, buf);
    double u = rng_unit(rng);
    int label = spec.num_classes - 1;
    double cum = 0.0;
    for (int c = 0; c < spec.num_classes; ++c) {
      cum += posterior.p[c];
      if (u < cum) {
        label = c;
        break;
      }
    }
    Exemplar e;
    e.id = j;
    e.text = buf;
    e.label = label;
    ds.items.push_back(std::move(e));
  }
  return ds;
}

}  // namespace supcal
