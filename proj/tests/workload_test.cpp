#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cicada/rng.hpp"
#include "cicada/workload.hpp"

using namespace cicada;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& fn, std::string* what = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (what) *what = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return ErrorKind::Config;
}

std::shared_ptr<const ModelDescriptor> small(ModelFamily f, std::size_t layers = 0) {
  CostProfile p;
  p.size_factor = 1.0 / 4096.0;
  return std::make_shared<const ModelDescriptor>(
      generate_model(f, layers ? layers : family_base(f).default_layers, 1, p));
}

ExperimentPlan plan_for(std::vector<std::shared_ptr<const ModelDescriptor>> models, std::vector<TraceRecord> trace,
                        std::vector<StrategyName> strategies) {
  ExperimentPlan plan;
  for (auto& m : models) plan.models[m->model_id] = m;
  plan.trace = std::move(trace);
  for (auto s : strategies) plan.strategies.push_back(StrategyConfig::of(s));
  plan.seed = 5;
  return plan;
}

const CellReport& cell(const ComparisonReport& r, const std::string& strategy) {
  for (const auto& c : r.cells)
    if (c.strategy == strategy) return c;
  throw std::runtime_error("no cell " + strategy);
}

}  // namespace

TEST(Trace, EmptyInput) {
  EXPECT_TRUE(parse_trace_text("").empty());
  EXPECT_TRUE(parse_trace_text("offset_ms,model_id\n\n# nothing\n").empty());
}

TEST(Trace, ThreeLinesSorted) {
  const auto t = parse_trace_text("offset_ms,model_id\n250.5,b\n10,a\n 99 , c \n");
  EXPECT_EQ(t, (std::vector<TraceRecord>{{10, "a"}, {99, "c"}, {250.5, "b"}}));
}

TEST(Trace, ErrorsCarryLineNumbers) {
  std::string what;
  EXPECT_EQ(kind_of([] { parse_trace_text("1,a\n-3,a\n"); }, &what), ErrorKind::InvalidOffset);
  EXPECT_NE(what.find("line 2"), std::string::npos);
  EXPECT_EQ(kind_of([] { parse_trace_text("1,a\n\nabc,a\n"); }, &what), ErrorKind::FormatError);
  EXPECT_NE(what.find("line 3"), std::string::npos);
  EXPECT_EQ(kind_of([] { parse_trace_text("5\n"); }), ErrorKind::FormatError);
  const std::set<std::string> known{"a"};
  EXPECT_EQ(kind_of([&] { parse_trace_text("1,a\n2,b\n", &known); }, &what), ErrorKind::UnknownModel);
  EXPECT_NE(what.find("line 2"), std::string::npos);
  EXPECT_EQ(kind_of([] { parse_trace("/nonexistent/trace.csv"); }), ErrorKind::Io);
}

TEST(Trace, CsvRoundTripThroughFile) {
  const auto t = synthesize_trace(5, 40, 0.4, 3, {"x", "y"});
  const auto path = fs::temp_directory_path() / "workload_trace.csv";
  std::ofstream(path) << trace_to_csv(t);
  EXPECT_EQ(parse_trace(path), t);
  fs::remove(path);
}

TEST(Synth, HistogramMatchesIndependentCount) {
  const auto t = synthesize_trace(60, 2426, 0.5, 1);
  ASSERT_EQ(t.size(), 2426u);
  // recount from the CSV text itself
  std::vector<std::size_t> oracle(60, 0);
  std::istringstream in(trace_to_csv(t));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) oracle[static_cast<std::size_t>(std::stod(line) / 60000.0)]++;
  EXPECT_EQ(per_minute_histogram(t, 60), oracle);
  for (std::size_t i = 1; i < t.size(); ++i) ASSERT_LE(t[i - 1].offset_ms, t[i].offset_ms);
  EXPECT_GE(t.front().offset_ms, 0.0);
  EXPECT_LT(t.back().offset_ms, 3'600'000.0);
}

TEST(Synth, ZeroBurstinessIsEven) {
  const auto h = per_minute_histogram(synthesize_trace(60, 2426, 0.0, 9), 60);
  const auto [lo, hi] = std::minmax_element(h.begin(), h.end());
  ASSERT_GT(*lo, 0u);
  EXPECT_LE(static_cast<double>(*hi) / static_cast<double>(*lo), 2.0);
}

TEST(Synth, Deterministic) {
  EXPECT_EQ(synthesize_trace(60, 500, 0.7, 4, {"a", "b", "c"}), synthesize_trace(60, 500, 0.7, 4, {"a", "b", "c"}));
  EXPECT_NE(synthesize_trace(60, 500, 0.7, 4), synthesize_trace(60, 500, 0.7, 5));
}

TEST(Synth, BurstierMeansHigherVariation) {
  double low = 0, high = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    low += coefficient_of_variation(per_minute_histogram(synthesize_trace(60, 2426, 0.1, s), 60));
    high += coefficient_of_variation(per_minute_histogram(synthesize_trace(60, 2426, 0.9, s), 60));
  }
  EXPECT_GT(high / 50, low / 50);
}

TEST(Synth, BadArguments) {
  EXPECT_THROW(synthesize_trace(60, 0, 0.5, 1), Error);
  EXPECT_THROW(synthesize_trace(0, 10, 0.5, 1), Error);
  EXPECT_THROW(synthesize_trace(60, 10, -1, 1), Error);
}

TEST(Stats, CoefficientAndPercentile) {
  // mean 3, population variance 2
  EXPECT_DOUBLE_EQ(coefficient_of_variation({1, 2, 3, 4, 5}), std::sqrt(2.0) / 3.0);
  EXPECT_DOUBLE_EQ(coefficient_of_variation({4, 4, 4}), 0.0);
  EXPECT_EQ(percentile({5, 1, 4, 2, 3}, 50), 3);
  EXPECT_EQ(percentile({5, 1, 4, 2, 3}, 99), 5);
  EXPECT_EQ(percentile({5, 1, 4, 2, 3}, 0), 1);
  std::vector<Micros> hundred(100);
  std::iota(hundred.begin(), hundred.end(), 1);
  EXPECT_EQ(percentile(hundred, 99), 99);
}

TEST(Experiment, SingleRequestCicadaBeatsSequential) {
  for (auto f : {ModelFamily::ResNetLike, ModelFamily::VGGLike, ModelFamily::LLaMALike}) {
    const auto m = small(f);
    GeneratedWeightStore store(1);
    const auto rep =
        run_experiment(plan_for({m}, {{0, m->model_id}}, {StrategyName::SP, StrategyName::Cicada}), store);
    EXPECT_LE(cell(rep, "Cicada").mean_latency_us, cell(rep, "SP").mean_latency_us) << to_string(f);
    EXPECT_LT(cell(rep, "SP").utilization, cell(rep, "Cicada").utilization) << to_string(f);
  }
}

TEST(Experiment, RepeatsAreIdentical) {
  const auto m = small(ModelFamily::VGGLike);
  GeneratedWeightStore store(1);
  auto plan = plan_for({m}, synthesize_trace(1, 12, 0.5, 2, {m->model_id}), {StrategyName::Cicada, StrategyName::Mini});
  plan.repeat_count = 2;
  const auto rep = run_experiment(plan, store);
  std::map<std::pair<std::string, RequestId>, std::vector<Micros>> lat;
  for (const auto& r : rep.requests) lat[{r.strategy, r.request_id}].push_back(r.latency_us);
  ASSERT_EQ(lat.size(), 24u);
  for (const auto& [k, v] : lat) {
    ASSERT_EQ(v.size(), 2u);
    EXPECT_EQ(v[0], v[1]);
  }
  EXPECT_EQ(report_to_csv(rep), report_to_csv(run_experiment(plan, store)));
  EXPECT_EQ(report_to_json(rep, 5).dump(), report_to_json(run_experiment(plan, store), 5).dump());
}

TEST(Experiment, MiniShrinksPlaceholderMemory) {
  for (auto f : {ModelFamily::ResNetLike, ModelFamily::VGGLike, ModelFamily::LLaMALike}) {
    const auto m = small(f);
    GeneratedWeightStore store(1);
    const auto rep = run_experiment(plan_for({m}, {{0, m->model_id}}, {StrategyName::SP, StrategyName::Mini}), store);
    const double sp = static_cast<double>(cell(rep, "SP").peak_registration_bytes);
    const double mini = static_cast<double>(cell(rep, "Mini").peak_registration_bytes);
    EXPECT_GE(1.0 - mini / sp, 0.45) << to_string(f);
  }
}

TEST(Experiment, ReportReconcilesWithRequestRows) {
  const auto a = small(ModelFamily::VGGLike);
  const auto b = small(ModelFamily::ResNetLike, 8);
  GeneratedWeightStore store(1);
  const auto trace = synthesize_trace(1, 30, 0.6, 7, {a->model_id, b->model_id});
  const auto rep = run_experiment(plan_for({a, b}, trace, {StrategyName::SP, StrategyName::Cicada}), store);
  ASSERT_EQ(rep.cells.size(), 4u);

  // recompute from requests.csv text
  std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
  std::istringstream in(requests_to_csv(rep));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "strategy,model,repeat,request_id,arrival_us,admitted_us,latency_us,ok");
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 8u);
    auto& [sum, n] = acc[{f[0], f[1]}];
    sum += std::stod(f[6]);
    ++n;
  }
  for (const auto& c : rep.cells) {
    const auto& [sum, n] = acc.at({c.strategy, c.model_id});
    EXPECT_EQ(static_cast<std::size_t>(n), c.requests);
    EXPECT_NEAR(sum / n, c.mean_latency_us, 1.0);
  }
}

TEST(Experiment, ReplayAdmitsOnTime) {
  const auto m = small(ModelFamily::VGGLike);
  GeneratedWeightStore store(1);
  auto plan = plan_for({m}, synthesize_trace(2, 80, 0.5, 1, {m->model_id}), {StrategyName::Cicada});
  const auto rep = run_experiment(plan, store);
  EXPECT_LE(cell(rep, "Cicada").max_admission_delay_us, plan.runtime.scheduler.tick);
  for (const auto& r : rep.requests) {
    EXPECT_TRUE(r.ok);
    EXPECT_LE(std::llabs(r.admitted_us - r.arrival_us), plan.runtime.scheduler.tick);
  }
}

TEST(Experiment, StrategiesSeeTheSameWeights) {
  const auto m = small(ModelFamily::LLaMALike, 6);
  GeneratedWeightStore store(3);
  std::vector<std::vector<std::array<std::uint8_t, 4>>> probes;
  for (auto s : kAllStrategies) {
    InferenceRequest req;
    req.request_id = 4;
    req.model = m;
    req.input = make_input(*m, mix_seed(5, 4));
    req.strategy = StrategyConfig::of(s);
    probes.push_back(run_request(req, {}, store).weight_probes);
  }
  ASSERT_EQ(probes[0].size(), 6u);
  for (const auto& p : probes) EXPECT_EQ(p, probes[0]);
}

TEST(Experiment, FailedCellDoesNotStopOthers) {
  const auto good = small(ModelFamily::VGGLike);
  auto broken = std::make_shared<ModelDescriptor>(*small(ModelFamily::ResNetLike, 4));
  broken->model_id = "absent";
  const auto dir = fs::temp_directory_path() / "workload_fail";
  fs::remove_all(dir);
  write_weight_files(*good, 1, dir / good->model_id);
  DirectoryWeightStore store(dir);
  const auto rep =
      run_experiment(plan_for({good, broken}, {{0, good->model_id}, {1, "absent"}}, {StrategyName::Cicada}), store);
  ASSERT_EQ(rep.cells.size(), 2u);
  for (const auto& c : rep.cells) {
    if (c.model_id == "absent") {
      EXPECT_EQ(c.failed, 1u);
      EXPECT_FALSE(c.error.empty());
    } else {
      EXPECT_EQ(c.failed, 0u);
      EXPECT_GT(c.mean_latency_us, 0.0);
    }
  }
  fs::remove_all(dir);
}

TEST(Experiment, WritesArtifacts) {
  const auto m = small(ModelFamily::VGGLike);
  GeneratedWeightStore store(1);
  const auto rep = run_experiment(plan_for({m}, {{0, m->model_id}}, {StrategyName::SP, StrategyName::Cicada}), store);
  const auto dir = fs::temp_directory_path() / "workload_report";
  fs::remove_all(dir);
  write_report(rep, 5, dir);
  for (const char* f : {"report.csv", "report.json", "requests.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  std::size_t svgs = 0, csvs = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (name.rfind("gantt_", 0) == 0) ++svgs;
    if (name.rfind("events_", 0) == 0) ++csvs;
  }
  EXPECT_EQ(svgs, 2u);
  EXPECT_EQ(csvs, 2u);
  fs::remove_all(dir);
}

TEST(Scenario, DelayedReadShape) {
  const auto sc = delayed_retrieval_scenario(20'000);
  ASSERT_EQ(sc.model->layers.size(), 4u);
  EXPECT_NO_THROW(validate_model(*sc.model));
}
