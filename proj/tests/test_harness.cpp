#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "supcal/config.hpp"
#include "supcal/harness.hpp"

using namespace supcal;
using Catch::Approx;

namespace {

LabelSpace binary_labels() {
  return LabelSpace::from_verbalizers({"negative", "positive"});
}

Dataset tiny_jsonl() {
  std::stringstream in(
      R"({"text": "great movie", "label": "positive"})"
      "\n"
      R"({"text": "boring plot", "label": "negative"})"
      "\n\n"
      R"({"text": "loved it", "label": "positive"})"
      "\n");
  return load_dataset_jsonl(in, binary_labels(), "tiny");
}

}  // namespace

TEST_CASE("jsonl datasets load with row-index ids", "[harness]") {
  const Dataset ds = tiny_jsonl();
  REQUIRE(ds.items.size() == 3);
  CHECK(ds.items[0].id == 0);
  CHECK(ds.items[0].text == "great movie");
  CHECK(ds.items[0].label == 1);
  CHECK(ds.items[1].label == 0);
  CHECK(ds.items[2].id == 2);
  CHECK(ds.name == "tiny");
}

TEST_CASE("jsonl loader reports the offending line", "[harness]") {
  {
    std::stringstream in(
        R"({"text": "x", "label": "positive"})"
        "\n"
        R"({"text": "y", "label": "meh"})"
        "\n");
    CHECK_THROWS_WITH(load_dataset_jsonl(in, binary_labels(), "d"),
                      Catch::Matchers::ContainsSubstring("line 2") &&
                          Catch::Matchers::ContainsSubstring("meh"));
  }
  {
    std::stringstream in("not json\n");
    CHECK_THROWS_AS(load_dataset_jsonl(in, binary_labels(), "d"),
                    IngestError);
  }
  {
    std::stringstream in(R"({"text": "x", "label": 3})"
                         "\n");
    CHECK_THROWS_AS(load_dataset_jsonl(in, binary_labels(), "d"),
                    IngestError);
  }
  {
    std::stringstream in("");
    CHECK_THROWS_AS(load_dataset_jsonl(in, binary_labels(), "d"),
                    IngestError);
  }
}

TEST_CASE("csv datasets match their jsonl equivalent", "[harness]") {
  std::stringstream csv(
      "text,label\n"
      "great movie,positive\n"
      "boring plot,negative\n"
      "loved it,positive\n");
  const Dataset from_csv = load_dataset_csv(csv, binary_labels(), "tiny");
  const Dataset from_jsonl = tiny_jsonl();
  REQUIRE(from_csv.items.size() == from_jsonl.items.size());
  for (std::size_t j = 0; j < from_csv.items.size(); ++j) {
    CHECK(from_csv.items[j].id == from_jsonl.items[j].id);
    CHECK(from_csv.items[j].text == from_jsonl.items[j].text);
    CHECK(from_csv.items[j].label == from_jsonl.items[j].label);
  }
}

TEST_CASE("csv quoting handles embedded commas and quotes", "[harness]") {
  const std::vector<std::string> row =
      detail::parse_csv_row(R"("a, b",c,"he said ""hi""")");
  REQUIRE(row.size() == 3);
  CHECK(row[0] == "a, b");
  CHECK(row[1] == "c");
  CHECK(row[2] == "he said \"hi\"");

  std::stringstream csv(
      "text,label\n"
      "\"tense, twisty thriller\",positive\n");
  const Dataset ds = load_dataset_csv(csv, binary_labels(), "q");
  CHECK(ds.items[0].text == "tense, twisty thriller");
}

TEST_CASE("csv loader enforces its header and shape", "[harness]") {
  {
    std::stringstream in("body,label\nx,positive\n");
    CHECK_THROWS_AS(load_dataset_csv(in, binary_labels(), "d"), IngestError);
  }
  {
    std::stringstream in("text,label\nx,positive,extra\n");
    CHECK_THROWS_WITH(load_dataset_csv(in, binary_labels(), "d"),
                      Catch::Matchers::ContainsSubstring("line 2"));
  }
  {
    std::stringstream in("");
    CHECK_THROWS_AS(load_dataset_csv(in, binary_labels(), "d"), IngestError);
  }
}

TEST_CASE("saved jsonl reloads identically", "[harness]") {
  const Dataset ds = tiny_jsonl();
  std::stringstream buf;
  save_dataset_jsonl(buf, ds);
  const Dataset again = load_dataset_jsonl(buf, ds.labels, ds.name);
  REQUIRE(again.items.size() == ds.items.size());
  for (std::size_t j = 0; j < ds.items.size(); ++j) {
    CHECK(again.items[j].text == ds.items[j].text);
    CHECK(again.items[j].label == ds.items[j].label);
  }
}

TEST_CASE("shot sampling partitions the dataset", "[harness]") {
  MockModelSpec spec;
  const Dataset ds = simulate_dataset(spec, binary_labels(), 30, 3);
  const auto [shots, pool] = sample_shots(ds, 6, 11);
  CHECK(shots.size() == 6);
  CHECK(pool.size() == 24);
  std::set<int> seen;
  for (const Exemplar& e : shots) seen.insert(e.id);
  for (const Exemplar& e : pool) seen.insert(e.id);
  CHECK(seen.size() == 30);
  // The pool keeps the original dataset order.
  for (std::size_t j = 1; j < pool.size(); ++j) {
    CHECK(pool[j - 1].id < pool[j].id);
  }
  // Same seed, same draw; different seed, different draw.
  const auto [shots2, pool2] = sample_shots(ds, 6, 11);
  for (std::size_t j = 0; j < shots.size(); ++j) {
    CHECK(shots2[j].id == shots[j].id);
  }
  const auto [shots3, pool3] = sample_shots(ds, 6, 12);
  bool same = true;
  for (std::size_t j = 0; j < shots.size(); ++j) {
    same = same && shots3[j].id == shots[j].id;
  }
  CHECK_FALSE(same);

  CHECK_THROWS_AS(sample_shots(ds, 31, 0), ValueError);
  CHECK_THROWS_AS(sample_shots(ds, 0, 0), ValueError);
}

TEST_CASE("metric hand values", "[harness]") {
  const Confusion conf{{40, 10}, {20, 30}};
  CHECK(accuracy_of(conf) == Approx(0.7).epsilon(1e-12));
  const std::vector<ClassPRF> prf = per_class_prf(conf);
  CHECK(prf[0].precision == Approx(40.0 / 60.0).epsilon(1e-12));
  CHECK(prf[0].recall == Approx(0.8).epsilon(1e-12));
  CHECK(prf[0].f1 == Approx(8.0 / 11.0).epsilon(1e-12));
  CHECK(prf[1].precision == Approx(0.75).epsilon(1e-12));
  CHECK(prf[1].recall == Approx(0.6).epsilon(1e-12));
  CHECK(prf[1].f1 == Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(macro_f1(conf) == Approx((8.0 / 11.0 + 2.0 / 3.0) / 2.0)
                              .epsilon(1e-12));
}

TEST_CASE("empty classes score zero without dividing by zero", "[harness]") {
  const Confusion conf{{5, 0}, {0, 0}};
  const std::vector<ClassPRF> prf = per_class_prf(conf);
  CHECK(prf[1].precision == 0.0);
  CHECK(prf[1].recall == 0.0);
  CHECK(prf[1].f1 == 0.0);
  CHECK(macro_f1(conf) == Approx(0.5).epsilon(1e-12));
  CHECK_THROWS_AS(accuracy_of(Confusion{{0, 0}, {0, 0}}), ValueError);
}

TEST_CASE("method names round-trip", "[harness]") {
  for (Method m : {Method::base, Method::cc, Method::dc, Method::bc,
                   Method::sc, Method::sc_bias_only}) {
    CHECK(method_from_name(method_name(m)) == m);
  }
  CHECK_THROWS_AS(method_from_name("zeroshot"), IngestError);
}

TEST_CASE("simulated datasets are deterministic and well formed",
          "[harness]") {
  MockModelSpec spec;
  spec.slope = 1.5;
  const Dataset ds = simulate_dataset(spec, binary_labels(), 50, 9);
  REQUIRE(ds.items.size() == 50);
  for (std::size_t j = 0; j < ds.items.size(); ++j) {
    CHECK(ds.items[j].id == static_cast<int>(j));
    const double s = std::stod(ds.items[j].text);
    CHECK(s >= -3.0);
    CHECK(s <= 3.0);
    CHECK(ds.items[j].label >= 0);
    CHECK(ds.items[j].label <= 1);
  }
  const Dataset again = simulate_dataset(spec, binary_labels(), 50, 9);
  for (std::size_t j = 0; j < ds.items.size(); ++j) {
    CHECK(again.items[j].text == ds.items[j].text);
    CHECK(again.items[j].label == ds.items[j].label);
  }
  // A strong positive slope puts most positive-feature items in class 1.
  long agree = 0;
  for (const Exemplar& e : ds.items) {
    if ((std::stod(e.text) > 0.0) == (e.label == 1)) ++agree;
  }
  CHECK(agree > 35);

  CHECK_THROWS_AS(simulate_dataset(spec, binary_labels(), 0, 9), ValueError);
  MockModelSpec three;
  three.num_classes = 3;
  CHECK_THROWS_AS(simulate_dataset(three, binary_labels(), 10, 9),
                  ValueError);
}

TEST_CASE("experiment report aggregates per-seed results", "[harness]") {
  MockModelSpec spec;
  spec.slope = 1.5;
  MockBackend backend(spec);
  const Dataset ds = simulate_dataset(spec, binary_labels(), 60, 4);
  ExperimentSpec espec;
  espec.method = Method::base;
  espec.shots = 4;
  espec.seeds = {0, 1, 2};
  espec.test_size = 10;
  espec.measure_time = false;
  const MetricsReport report = run_experiment(ds, espec, backend);

  REQUIRE(report.per_seed.size() == 3);
  CHECK(report.num_classes == 2);
  long pooled_total = 0;
  for (const auto& row : report.pooled_confusion) {
    for (long v : row) pooled_total += v;
  }
  CHECK(pooled_total == 30);
  double mean = 0.0;
  for (const SeedResult& r : report.per_seed) {
    mean += r.accuracy;
    CHECK(r.train_seconds == 0.0);
    CHECK(r.infer_seconds_per_256 == 0.0);
    long seed_total = 0;
    for (const auto& row : r.confusion) {
      for (long v : row) seed_total += v;
    }
    CHECK(seed_total == 10);
  }
  mean /= 3.0;
  CHECK(report.mean_accuracy == Approx(mean).epsilon(1e-12));
}

TEST_CASE("a fixed test set takes the pool head in order", "[harness]") {
  MockModelSpec spec;
  MockBackend backend(spec);
  const Dataset ds = simulate_dataset(spec, binary_labels(), 40, 6);
  ExperimentSpec espec;
  espec.method = Method::base;
  espec.shots = 3;
  espec.seeds = {5};
  espec.test_size = 7;
  espec.fixed_test_set = true;
  espec.measure_time = false;
  const MetricsReport report = run_experiment(ds, espec, backend);

  const auto [shots, pool] = sample_shots(ds, 3, 5);
  std::vector<long> expected_row_sums(2, 0);
  for (int q = 0; q < 7; ++q) expected_row_sums[pool[q].label] += 1;
  for (int c = 0; c < 2; ++c) {
    long got = 0;
    for (long v : report.pooled_confusion[c]) got += v;
    CHECK(got == expected_row_sums[c]);
  }
}

TEST_CASE("per-seed csv reports are byte-identical when timing is off",
          "[harness]") {
  MockModelSpec spec;
  spec.slope = 1.4;
  spec.marginal_shift = {1.0};
  spec.noise_sd = 0.3;
  MockBackend backend(spec);
  const Dataset ds = simulate_dataset(spec, binary_labels(), 40, 2);
  ExperimentSpec espec;
  espec.method = Method::sc;
  espec.shots = 4;
  espec.seeds = {0, 1};
  espec.test_size = 6;
  espec.measure_time = false;

  std::stringstream a, b;
  write_report_csv(a, run_experiment(ds, espec, backend));
  write_report_csv(b, run_experiment(ds, espec, backend));
  CHECK(a.str() == b.str());
  CHECK(a.str().rfind("method,seed,accuracy,macro_f1,train_seconds,"
                      "infer_seconds_per_256\n",
                      0) == 0);
  // Timing columns are hard zeros.
  std::string line;
  std::getline(a, line);
  int rows = 0;
  while (std::getline(a, line)) {
    ++rows;
    CHECK(line.substr(line.size() - 12) == ",0.000,0.000");
    CHECK(line.rfind("sc,", 0) == 0);
  }
  CHECK(rows == 2);
}

TEST_CASE("summaries aggregate rows per method", "[harness]") {
  std::stringstream a(
      "method,seed,accuracy,macro_f1,train_seconds,infer_seconds_per_256\n"
      "base,0,0.500000,0.400000,0.000,1.000\n"
      "base,1,0.700000,0.600000,0.000,3.000\n");
  std::stringstream b(
      "method,seed,accuracy,macro_f1,train_seconds,infer_seconds_per_256\n"
      "sc,0,0.900000,0.880000,2.000,4.000\n");
  std::stringstream out;
  summarize_reports({&a, &b}, out);

  std::string line;
  std::getline(out, line);
  CHECK(line ==
        "method,seeds,mean_accuracy,sd_accuracy,mean_macro_f1,sd_macro_f1,"
        "mean_train_seconds,mean_infer_seconds_per_256");
  std::getline(out, line);
  CHECK(line == "base,2,0.600000,0.141421,0.500000,0.141421,0.000,2.000");
  std::getline(out, line);
  CHECK(line == "sc,1,0.900000,0.000000,0.880000,0.000000,2.000,4.000");
}

TEST_CASE("summary input validation", "[harness]") {
  {
    std::stringstream bad("wrong,header\n");
    std::stringstream out;
    CHECK_THROWS_AS(summarize_reports({&bad}, out), IngestError);
  }
  {
    std::stringstream bad(
        "method,seed,accuracy,macro_f1,train_seconds,"
        "infer_seconds_per_256\n"
        "base,0,oops,0.4,0,0\n");
    std::stringstream out;
    CHECK_THROWS_AS(summarize_reports({&bad}, out), IngestError);
  }
  {
    std::stringstream empty("");
    std::stringstream out;
    CHECK_THROWS_AS(summarize_reports({&empty}, out), IngestError);
  }
}

TEST_CASE("config files parse into every section", "[harness]") {
  std::stringstream in(
      "# experiment setup\n"
      "mock.num_classes = 3\n"
      "mock.slope = 1.5\n"
      "mock.marginal_shift = 2.0, -0.5\n"
      "mock.labels = red, green, blue\n"
      "backend.endpoint_url = http://localhost:8080/score\n"
      "backend.scoring = first_token\n"
      "backend.concurrency = 2\n"
      "budget.max_contexts = 120\n"
      "objective.lambda_inv = 5.0\n"
      "solver.mode = bias_only\n"
      "solver.restarts = 4\n"
      "ensemble.tau_override = 0.25\n"
      "ensemble.resample_per_query = true\n"
      "baseline.dc_pseudo_inputs = 8\n"
      "experiment.method = dc\n"
      "experiment.seeds = 3, 5, 8\n"
      "experiment.test_size = 64\n"
      "experiment.measure_time = false\n"
      "dataset.path = data/train.jsonl\n"
      "dataset.format = csv\n"
      "template.name = sst2\n");
  const AppConfig cfg = parse_config(in);
  CHECK(cfg.mock.num_classes == 3);
  CHECK(cfg.mock.slope == 1.5);
  REQUIRE(cfg.mock.marginal_shift.size() == 2);
  CHECK(cfg.mock.marginal_shift[1] == -0.5);
  CHECK(cfg.mock_labels == std::vector<std::string>{"red", "green", "blue"});
  CHECK(cfg.backend.endpoint_url == "http://localhost:8080/score");
  CHECK(cfg.backend.scoring == ScoringMode::first_token);
  CHECK(cfg.backend.concurrency == 2);
  CHECK(cfg.experiment.budget.max_contexts == 120);
  CHECK(cfg.experiment.objective.lambda_inv == 5.0);
  CHECK(cfg.experiment.solver.mode == FitMode::bias_only);
  CHECK(cfg.experiment.solver.restarts == 4);
  REQUIRE(cfg.experiment.ensemble.tau_override.has_value());
  CHECK(*cfg.experiment.ensemble.tau_override == 0.25);
  CHECK(cfg.experiment.ensemble.resample_per_query);
  CHECK(cfg.experiment.baseline.dc_pseudo_inputs == 8);
  CHECK(cfg.experiment.method == Method::dc);
  CHECK(cfg.experiment.seeds == std::vector<std::uint64_t>{3, 5, 8});
  CHECK(cfg.experiment.test_size == 64);
  CHECK_FALSE(cfg.experiment.measure_time);
  CHECK(cfg.dataset_path == "data/train.jsonl");
  CHECK(cfg.dataset_format == FileFormat::csv);
  CHECK(cfg.template_name == "sst2");
}

TEST_CASE("config rejects unknown keys and bad values", "[harness]") {
  {
    std::stringstream in("mock.slope = 1.0\nmock.sloep = 2.0\n");
    CHECK_THROWS_WITH(parse_config(in),
                      Catch::Matchers::ContainsSubstring("line 2") &&
                          Catch::Matchers::ContainsSubstring("mock.sloep"));
  }
  {
    std::stringstream in("solver.mode = fastest\n");
    CHECK_THROWS_AS(parse_config(in), IngestError);
  }
  {
    std::stringstream in("experiment.measure_time = maybe\n");
    CHECK_THROWS_AS(parse_config(in), IngestError);
  }
  {
    std::stringstream in("no equals sign here\n");
    CHECK_THROWS_AS(parse_config(in), IngestError);
  }
}

TEST_CASE("mock label space defaults to generated names", "[harness]") {
  AppConfig cfg;
  cfg.mock.num_classes = 3;
  const LabelSpace generated = mock_label_space(cfg);
  CHECK(generated.verbalizer(0) == "label0");
  CHECK(generated.verbalizer(2) == "label2");
  cfg.mock_labels = {"yes", "no"};
  const LabelSpace configured = mock_label_space(cfg);
  CHECK(configured.num_classes() == 2);
  CHECK(configured.verbalizer(1) == "no");
}
