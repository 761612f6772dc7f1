// Command-line front end. Stages are separate subcommands so each
// intermediate product (mock task file, surrogate records, fitted
// parameters, ensemble directory, report CSV) can be cached on disk and
// inspected independently:
//
//   supcal simulate       build a mock task file from the simulator
//   supcal gen-surrogate  score held-out permutation contexts
//   supcal fit            minimize the calibration objective
//   supcal predict        label queries with a trained ensemble
//   supcal evaluate       run a seeded experiment, emit per-seed CSV
//   supcal report         aggregate CSVs into mean +- sd per method
//
// Global flags: --config <path>, --seed <u64>, --backend {mock, http}.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "supcal/http_backend.hpp"
#include "supcal/supcal.hpp"

namespace {

struct GlobalOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string backend_kind = "mock";
};

supcal::AppConfig app_config(const GlobalOpts& g) {
  if (g.config_path.empty()) return {};
  return supcal::load_config(g.config_path);
}

// Label words for parsing datasets and naming predictions, resolved in
// order: explicit --labels, the configured template's words, then the
// mock task's words.
supcal::LabelSpace resolve_labels(const supcal::AppConfig& cfg,
                                  const std::string& labels_flag) {
  if (!labels_flag.empty()) {
    std::vector<std::string> words;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = labels_flag.find(',', start);
      words.push_back(labels_flag.substr(
          start, comma == std::string::npos ? comma : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return supcal::LabelSpace::from_verbalizers(std::move(words));
  }
  if (!cfg.template_file.empty()) {
    auto all = supcal::load_template_file(cfg.template_file);
    std::string name = cfg.template_name;
    if (name.empty() && all.size() == 1) name = all.begin()->first;
    const auto it = all.find(name);
    if (it == all.end()) {
      throw supcal::IngestError("template '" + name + "' not found in " +
                                cfg.template_file);
    }
    return it->second.label_space;
  }
  return supcal::mock_label_space(cfg);
}

supcal::PromptTemplate resolve_template(const supcal::AppConfig& cfg,
                                        const supcal::LabelSpace& labels) {
  if (!cfg.template_file.empty()) {
    auto all = supcal::load_template_file(cfg.template_file);
    std::string name = cfg.template_name;
    if (name.empty() && all.size() == 1) name = all.begin()->first;
    const auto it = all.find(name);
    if (it == all.end()) {
      throw supcal::IngestError("template '" + name + "' not found in " +
                                cfg.template_file);
    }
    return it->second;
  }
  supcal::PromptTemplate tmpl;
  tmpl.input_prefix = "input: ";
  tmpl.separator = "\n";
  tmpl.output_prefix = "label:";
  tmpl.label_space = labels;
  return tmpl;
}

std::unique_ptr<supcal::Backend> make_backend(const GlobalOpts& g,
                                              const supcal::AppConfig& cfg,
                                              const supcal::LabelSpace& labels) {
  if (g.backend_kind == "mock") {
    supcal::MockModelSpec spec = cfg.mock;
    spec.num_classes = labels.num_classes();
    return std::make_unique<supcal::MockBackend>(spec);
  }
  if (g.backend_kind == "http") {
    return std::make_unique<supcal::HttpBackend>(cfg.backend,
                                                 resolve_template(cfg, labels));
  }
  throw supcal::ValueError("unknown backend '" + g.backend_kind +
                           "' (expected mock or http)");
}

supcal::Dataset load_dataset_arg(const supcal::AppConfig& cfg,
                                 const std::string& dataset_flag,
                                 const supcal::LabelSpace& labels) {
  const std::string path =
      dataset_flag.empty() ? cfg.dataset_path : dataset_flag;
  if (path.empty()) {
    throw supcal::ValueError(
        "no dataset: pass --dataset or set dataset.path in the config");
  }
  supcal::Dataset ds = supcal::load_dataset(path, labels, cfg.dataset_format);
  if (!cfg.dataset_name.empty()) ds.name = cfg.dataset_name;
  return ds;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw supcal::IngestError("cannot write " + path);
  return out;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw supcal::IngestError("cannot open " + path);
  return in;
}

// ---- simulate ----

int cmd_simulate(const GlobalOpts& g, const std::string& out_path, int size) {
  const supcal::AppConfig cfg = app_config(g);
  const supcal::LabelSpace labels = supcal::mock_label_space(cfg);
  const std::uint64_t seed = g.seed.value_or(cfg.mock.seed);
  const supcal::Dataset ds =
      supcal::simulate_dataset(cfg.mock, labels, size, seed);
  std::ofstream out = open_out(out_path);
  supcal::save_dataset_jsonl(out, ds);
  std::cerr << "wrote " << ds.items.size() << " items to " << out_path
            << "\n";
  return 0;
}

// ---- gen-surrogate ----

int cmd_gen_surrogate(const GlobalOpts& g, const std::string& dataset_flag,
                      const std::string& labels_flag, int shots,
                      int context_size, const std::string& out_path,
                      const std::string& shots_out) {
  const supcal::AppConfig cfg = app_config(g);
  const supcal::LabelSpace labels = resolve_labels(cfg, labels_flag);
  const supcal::Dataset ds = load_dataset_arg(cfg, dataset_flag, labels);
  const std::unique_ptr<supcal::Backend> backend =
      make_backend(g, cfg, ds.labels);

  const std::uint64_t seed = g.seed.value_or(0);
  const int k = shots > 0 ? shots : cfg.experiment.shots;
  const auto [exemplars, pool] = supcal::sample_shots(ds, k, seed);

  const supcal::SurrogateDataset sur = supcal::generate_surrogate(
      exemplars, context_size, *backend, cfg.experiment.budget,
      supcal::derive_seed(seed, static_cast<std::uint64_t>(context_size)));

  std::ofstream out = open_out(out_path);
  supcal::save_surrogate(out, sur);
  if (!shots_out.empty()) {
    std::ofstream sout = open_out(shots_out);
    for (const supcal::Exemplar& e : exemplars) {
      nlohmann::json j{{"id", e.id}, {"text", e.text}, {"label", e.label}};
      sout << j.dump() << "\n";
    }
  }
  std::cerr << "wrote " << sur.records.size() << " records (context size "
            << context_size << ", " << sur.contexts_by_query.size()
            << " queries) to " << out_path << "\n";
  return 0;
}

// ---- fit ----

int cmd_fit(const GlobalOpts& g, const std::string& in_path,
            const std::string& out_path, const std::string& tau_arg,
            std::optional<double> lambda, bool bias_only) {
  const supcal::AppConfig cfg = app_config(g);
  std::ifstream in = open_in(in_path);
  const supcal::SurrogateDataset sur = supcal::load_surrogate(in);

  supcal::ObjectiveConfig ocfg = cfg.experiment.objective;
  if (lambda) ocfg.lambda_inv = *lambda;
  if (tau_arg == "auto") {
    ocfg.tau = supcal::tau_from_accuracy(supcal::in_sample_accuracy(sur),
                                         sur.num_classes);
  } else {
    ocfg.tau = std::stod(tau_arg);
  }

  supcal::SolverConfig scfg = cfg.experiment.solver;
  if (g.seed) scfg.seed = *g.seed;
  if (bias_only) scfg.mode = supcal::FitMode::bias_only;

  const supcal::FitResult result = supcal::fit(sur, ocfg, scfg);
  std::ofstream out = open_out(out_path);
  supcal::save_fit(out, result, ocfg);
  std::cerr << "objective " << result.objective_value << ", constraint "
            << result.constraint_value << " (tau " << ocfg.tau << "), "
            << (result.feasible ? "feasible" : "infeasible") << ", "
            << result.iterations << " iterations, in-sample accuracy "
            << result.in_sample_accuracy << "\n";
  return 0;
}

// ---- predict ----

std::vector<std::string> read_queries(const std::string& path) {
  std::vector<std::string> queries;
  std::string line;
  if (path.empty() || path == "-") {
    while (std::getline(std::cin, line)) queries.push_back(line);
  } else {
    std::ifstream in = open_in(path);
    while (std::getline(in, line)) queries.push_back(line);
  }
  if (queries.empty()) throw supcal::ValueError("no query lines to predict");
  return queries;
}

int cmd_predict(const GlobalOpts& g, const std::string& load_model,
                const std::string& save_model, const std::string& dataset_flag,
                const std::string& labels_flag, int shots,
                const std::string& queries_path, const std::string& out_path) {
  const supcal::AppConfig cfg = app_config(g);
  const supcal::LabelSpace labels = resolve_labels(cfg, labels_flag);
  const std::uint64_t seed = g.seed.value_or(0);

  supcal::EnsembleModel model;
  if (!load_model.empty()) {
    model = supcal::load_ensemble(load_model);
  } else {
    const supcal::Dataset ds = load_dataset_arg(cfg, dataset_flag, labels);
    const std::unique_ptr<supcal::Backend> train_backend =
        make_backend(g, cfg, ds.labels);
    const int k = shots > 0 ? shots : cfg.experiment.shots;
    const auto [exemplars, pool] = supcal::sample_shots(ds, k, seed);
    supcal::EnsembleConfig ecfg = cfg.experiment.ensemble;
    ecfg.seed = supcal::derive_seed(seed, 0x656e73ull);
    model = supcal::train_ensemble(exemplars, *train_backend,
                                   cfg.experiment.budget,
                                   cfg.experiment.objective,
                                   cfg.experiment.solver, ecfg);
    if (!save_model.empty()) supcal::save_ensemble(save_model, model);
  }

  if (labels.num_classes() != model.num_classes) {
    throw supcal::ValueError("label space has " +
                             std::to_string(labels.num_classes()) +
                             " classes but the model has " +
                             std::to_string(model.num_classes));
  }
  const std::unique_ptr<supcal::Backend> backend = make_backend(g, cfg, labels);
  const std::vector<std::string> queries = read_queries(queries_path);

  std::ofstream file_out;
  std::ostream* out = &std::cout;
  if (!out_path.empty() && out_path != "-") {
    file_out = open_out(out_path);
    out = &file_out;
  }
  *out << "index\tlabel\tprobs\n";
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const supcal::ProbDist dist =
        supcal::ensemble_predict(model, queries[q], *backend);
    const int label = supcal::predict_label(dist);
    *out << q << '\t' << labels.verbalizer(label) << '\t';
    for (std::size_t c = 0; c < dist.p.size(); ++c) {
      if (c) *out << ' ';
      *out << dist.p[c];
    }
    *out << "\n";
  }
  return 0;
}

// ---- evaluate ----

int cmd_evaluate(const GlobalOpts& g, const std::string& dataset_flag,
                 const std::string& labels_flag, int simulate_size,
                 const std::string& method_flag, const std::string& seeds_flag,
                 int shots, int test_size, bool fixed_test_set,
                 bool no_timing, const std::string& out_path,
                 const std::string& summary_path) {
  const supcal::AppConfig cfg = app_config(g);
  supcal::Dataset ds;
  if (simulate_size > 0) {
    const supcal::LabelSpace labels = supcal::mock_label_space(cfg);
    ds = supcal::simulate_dataset(cfg.mock, labels, simulate_size,
                                  g.seed.value_or(cfg.mock.seed));
  } else {
    const supcal::LabelSpace labels = resolve_labels(cfg, labels_flag);
    ds = load_dataset_arg(cfg, dataset_flag, labels);
  }
  const std::unique_ptr<supcal::Backend> backend =
      make_backend(g, cfg, ds.labels);

  supcal::ExperimentSpec es = cfg.experiment;
  es.dataset_name = ds.name;
  if (!method_flag.empty()) es.method = supcal::method_from_name(method_flag);
  if (!seeds_flag.empty()) {
    es.seeds.clear();
    std::istringstream ss(seeds_flag);
    std::string tok;
    while (std::getline(ss, tok, ',')) es.seeds.push_back(std::stoull(tok));
  } else if (g.seed) {
    es.seeds = {*g.seed};
  }
  if (shots > 0) es.shots = shots;
  if (test_size > 0) es.test_size = test_size;
  if (fixed_test_set) es.fixed_test_set = true;
  if (no_timing) es.measure_time = false;

  const supcal::MetricsReport report =
      supcal::run_experiment(ds, es, *backend);

  if (out_path.empty() || out_path == "-") {
    supcal::write_report_csv(std::cout, report);
  } else {
    std::ofstream out = open_out(out_path);
    supcal::write_report_csv(out, report);
    supcal::write_report_text(std::cout, report);
  }
  if (!summary_path.empty()) {
    std::ofstream sout = open_out(summary_path);
    supcal::write_report_text(sout, report);
  }
  return 0;
}

// ---- report ----

int cmd_report(const std::vector<std::string>& csv_paths,
               const std::string& out_path) {
  std::vector<std::ifstream> files;
  files.reserve(csv_paths.size());
  std::vector<std::istream*> inputs;
  for (const std::string& path : csv_paths) {
    files.push_back(open_in(path));
    inputs.push_back(&files.back());
  }
  if (out_path.empty() || out_path == "-") {
    supcal::summarize_reports(inputs, std::cout);
  } else {
    std::ofstream out = open_out(out_path);
    supcal::summarize_reports(inputs, out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calibration toolkit for few-shot in-context classifiers"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  app.add_option("--config", g.config_path,
                 "config file (section.key = value lines)");
  app.add_option("--seed", g.seed, "run seed override");
  app.add_option("--backend", g.backend_kind, "mock or http")
      ->check(CLI::IsMember({"mock", "http"}));

  // simulate
  auto* sim = app.add_subcommand("simulate", "build a mock task file");
  std::string sim_out;
  int sim_size = 400;
  sim->add_option("--out", sim_out, "output dataset jsonl")->required();
  sim->add_option("--size", sim_size, "number of items")
      ->check(CLI::PositiveNumber);

  // gen-surrogate
  auto* gen = app.add_subcommand(
      "gen-surrogate", "score held-out permutation contexts into a file");
  std::string gen_dataset, gen_labels, gen_out, gen_shots_out;
  int gen_shots = 0, gen_context_size = 0;
  gen->add_option("--dataset", gen_dataset, "dataset jsonl/csv path");
  gen->add_option("--labels", gen_labels, "comma-separated label words");
  gen->add_option("--shots", gen_shots, "exemplars to sample (k)");
  gen->add_option("--context-size", gen_context_size,
                  "demonstrations per context (i < k)")
      ->required()
      ->check(CLI::PositiveNumber);
  gen->add_option("--out", gen_out, "output surrogate file")->required();
  gen->add_option("--shots-out", gen_shots_out,
                  "also save the sampled exemplars as jsonl");

  // fit
  auto* fit_cmd =
      app.add_subcommand("fit", "minimize the calibration objective");
  std::string fit_in, fit_out, fit_tau = "auto";
  std::optional<double> fit_lambda;
  bool fit_bias_only = false;
  fit_cmd->add_option("--in", fit_in, "surrogate file")->required();
  fit_cmd->add_option("--out", fit_out, "output fit file")->required();
  fit_cmd->add_option("--tau", fit_tau,
                      "trust-region bound, or 'auto' for the accuracy"
                      " schedule");
  fit_cmd->add_option("--lambda", fit_lambda, "invariance penalty weight");
  fit_cmd->add_flag("--bias-only", fit_bias_only,
                    "fit biases only, scales pinned at 1");

  // predict
  auto* pred =
      app.add_subcommand("predict", "label queries with a trained ensemble");
  std::string pred_load, pred_save, pred_dataset, pred_labels, pred_queries,
      pred_out;
  int pred_shots = 0;
  pred->add_option("--load-model", pred_load, "trained ensemble directory");
  pred->add_option("--save-model", pred_save,
                   "save the trained ensemble to this directory");
  pred->add_option("--dataset", pred_dataset,
                   "dataset to sample exemplars from (when training)");
  pred->add_option("--labels", pred_labels, "comma-separated label words");
  pred->add_option("--shots", pred_shots, "exemplars to sample (k)");
  pred->add_option("--queries", pred_queries,
                   "file with one query per line ('-' for stdin)");
  pred->add_option("--out", pred_out, "output tsv ('-' for stdout)");

  // evaluate
  auto* ev = app.add_subcommand(
      "evaluate", "run a seeded experiment and emit a per-seed CSV");
  std::string ev_dataset, ev_labels, ev_method, ev_seeds, ev_out, ev_summary;
  int ev_simulate = 0, ev_shots = 0, ev_test_size = 0;
  bool ev_fixed = false, ev_no_timing = false;
  ev->add_option("--dataset", ev_dataset, "dataset jsonl/csv path");
  ev->add_option("--labels", ev_labels, "comma-separated label words");
  ev->add_option("--simulate", ev_simulate,
                 "evaluate on a freshly simulated mock dataset of this size");
  ev->add_option("--method", ev_method,
                 "base, cc, dc, bc, sc, or sc_bias_only");
  ev->add_option("--seeds", ev_seeds, "comma-separated seed list");
  ev->add_option("--shots", ev_shots, "exemplars per seed (k)");
  ev->add_option("--test-size", ev_test_size, "test queries per seed");
  ev->add_flag("--fixed-test-set", ev_fixed,
               "use the first test-size pool items for every seed");
  ev->add_flag("--no-timing", ev_no_timing,
               "write zero timings so repeated runs are byte-identical");
  ev->add_option("--out", ev_out, "report csv path ('-' for stdout)");
  ev->add_option("--summary", ev_summary, "also write a text summary here");

  // report
  auto* rep = app.add_subcommand("report",
                                 "aggregate report CSVs into mean +- sd");
  std::vector<std::string> rep_inputs;
  std::string rep_out;
  rep->add_option("inputs", rep_inputs, "report csv files")->required();
  rep->add_option("--out", rep_out, "output csv ('-' for stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed()) return cmd_simulate(g, sim_out, sim_size);
    if (gen->parsed()) {
      return cmd_gen_surrogate(g, gen_dataset, gen_labels, gen_shots,
                               gen_context_size, gen_out, gen_shots_out);
    }
    if (fit_cmd->parsed()) {
      return cmd_fit(g, fit_in, fit_out, fit_tau, fit_lambda, fit_bias_only);
    }
    if (pred->parsed()) {
      return cmd_predict(g, pred_load, pred_save, pred_dataset, pred_labels,
                         pred_shots, pred_queries, pred_out);
    }
    if (ev->parsed()) {
      return cmd_evaluate(g, ev_dataset, ev_labels, ev_simulate, ev_method,
                          ev_seeds, ev_shots, ev_test_size, ev_fixed,
                          ev_no_timing, ev_out, ev_summary);
    }
    if (rep->parsed()) return cmd_report(rep_inputs, rep_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
