// Command line front end. Exit 0 ok, 1 invariant violation, 2 I/O or config.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cicada/catalog.hpp"
#include "cicada/crc32.hpp"
#include "cicada/invariants.hpp"
#include "cicada/pipeline.hpp"
#include "cicada/weight_file.hpp"
#include "cicada/workload.hpp"

namespace fs = std::filesystem;
using namespace cicada;

namespace {

constexpr int kOk = 0;
constexpr int kViolation = 1;
constexpr int kIoConfig = 2;

// CICADA_SEED wins over every --seed style flag
std::uint64_t effective_seed(std::uint64_t flag) {
  const char* env = std::getenv("CICADA_SEED");
  if (!env || !*env) return flag;
  char* end = nullptr;
  errno = 0;
  const auto v = std::strtoull(env, &end, 10);
  if (errno || *end) throw Error(ErrorKind::Config, std::string("CICADA_SEED is not an integer: ") + env);
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string part;
  while (std::getline(in, part, sep))
    if (!part.empty()) out.push_back(part);
  return out;
}

std::uint32_t output_crc(const std::vector<float>& out) {
  return crc32(std::as_bytes(std::span(out)));
}

struct GenArgs {
  std::string family = "vgg";
  std::size_t layers = 0;
  std::uint64_t seed = 1;
  double size_factor = CostProfile{}.size_factor;
  std::string out = "models";
};

int cmd_gen(const GenArgs& a) {
  CostProfile profile;
  profile.size_factor = a.size_factor;
  const auto family = family_from_string(a.family);
  const auto layers = a.layers ? a.layers : family_base(family).default_layers;
  const auto seed = effective_seed(a.seed);
  const auto model = generate_model(family, layers, seed, profile);
  fs::create_directories(a.out);
  save_model(model, fs::path(a.out) / (model.model_id + ".json"));
  const auto manifest = write_weight_files(model, seed, fs::path(a.out) / model.model_id);
  std::cout << model.model_id << ": " << model.layers.size() << " layers, "
            << model.total_weight_bytes << " weight bytes, " << manifest.size() << " shards in "
            << (fs::path(a.out) / model.model_id).string() << "\n";
  return kOk;
}

struct RunArgs {
  std::string model;
  std::string weights;
  std::string strategy = "cicada";
  std::uint64_t input_seed = 1;
  std::string mode = "virtual";
  double time_scale = RuntimeConfig{}.time_scale;
  std::string events;
};

int cmd_run(const RunArgs& a) {
  auto model = std::make_shared<ModelDescriptor>(load_model(a.model));
  validate_model(*model);
  const fs::path root = a.weights.empty() ? fs::path(a.model).parent_path() : fs::path(a.weights);
  if (!fs::is_directory(root / model->model_id))
    throw Error(ErrorKind::Io, "no weight directory " + (root / model->model_id).string() +
                                   " (run gen first or pass --weights)");
  DirectoryWeightStore store(root);

  RuntimeConfig cfg;
  cfg.mode = clock_mode_from_string(a.mode);
  cfg.time_scale = a.time_scale;
  const auto seed = effective_seed(a.input_seed);
  cfg.init_seed = seed;

  InferenceRequest req;
  req.request_id = 0;
  req.model = model;
  req.input = make_input(*model, seed);
  req.strategy = strategy_from_string(a.strategy);
  RunStats stats;
  const auto res = run_request(req, cfg, store, &stats);

  const auto u = utilization(res.events);
  std::printf("model %s strategy %s mode %s\n", model->model_id.c_str(),
              std::string(to_string(res.strategy)).c_str(), a.mode.c_str());
  std::printf("latency_us %lld\nutilization %.6f\npeak_memory_bytes %llu\n",
              static_cast<long long>(res.latency), u.utilization,
              static_cast<unsigned long long>(stats.peak_resident));
  std::printf("output %zu values crc32 %08x\n", res.output.size(), output_crc(res.output));
  if (!a.events.empty()) {
    const auto fmt = fs::path(a.events).extension() == ".json" ? GanttFormat::Json : GanttFormat::Csv;
    export_gantt(res.events, fmt, a.events);
  }
  return kOk;
}

struct BenchArgs {
  std::string trace;
  std::string synth;
  std::string strategies = "sp,mini,preload,cicada";
  std::string models = "vgg:5";
  std::string out_dir = "bench_out";
  std::uint64_t seed = 1;
  std::string mode = "virtual";
  double time_scale = RuntimeConfig{}.time_scale;
  double size_factor = CostProfile{}.size_factor;
  std::size_t repeat = 1;
  std::size_t max_in_flight = RuntimeConfig{}.max_in_flight;
};

int cmd_bench(const BenchArgs& a) {
  if (a.trace.empty() == a.synth.empty())
    throw Error(ErrorKind::Config, "bench needs exactly one of --trace or --synth");
  const auto seed = effective_seed(a.seed);

  ExperimentPlan plan;
  plan.seed = seed;
  plan.time_scale = a.time_scale;
  plan.repeat_count = a.repeat;
  plan.runtime.mode = clock_mode_from_string(a.mode);
  plan.runtime.max_in_flight = a.max_in_flight;
  for (const auto& s : split(a.strategies, ',')) plan.strategies.push_back(strategy_from_string(s));
  if (plan.strategies.empty()) throw Error(ErrorKind::Config, "no strategies given");

  CostProfile profile;
  profile.size_factor = a.size_factor;
  std::vector<std::string> ids;
  for (const auto& m : split(a.models, ',')) {
    const auto parts = split(m, ':');
    if (parts.empty() || parts.size() > 2) throw Error(ErrorKind::Config, "bad model spec '" + m + "'");
    const auto family = family_from_string(parts[0]);
    std::size_t layers = family_base(family).default_layers;
    if (parts.size() == 2) {
      try {
        layers = std::stoul(parts[1]);
      } catch (const std::logic_error&) {
        throw Error(ErrorKind::Config, "bad layer count in '" + m + "'");
      }
    }
    auto model = std::make_shared<const ModelDescriptor>(generate_model(family, layers, seed, profile));
    ids.push_back(model->model_id);
    plan.models[model->model_id] = std::move(model);
  }
  if (plan.models.empty()) throw Error(ErrorKind::Config, "no models given");

  const std::set<std::string> known(ids.begin(), ids.end());
  if (!a.trace.empty()) {
    plan.trace = parse_trace(a.trace, &known);
  } else {
    const auto p = split(a.synth, ',');
    if (p.size() != 3) throw Error(ErrorKind::Config, "--synth expects minutes,count,burstiness");
    try {
      plan.trace = synthesize_trace(std::stoul(p[0]), std::stoul(p[1]), std::stod(p[2]), seed, ids);
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::Config, "--synth expects minutes,count,burstiness");
    }
  }

  fs::create_directories(a.out_dir);
  ComparisonReport report;
  if (plan.runtime.mode == ClockMode::Real) {
    // real reads go through files on disk
    const auto root = fs::path(a.out_dir) / "weights";
    for (const auto& [id, m] : plan.models) write_weight_files(*m, seed, root / id);
    DirectoryWeightStore store(root);
    report = run_experiment(plan, store);
  } else {
    GeneratedWeightStore store(seed);
    report = run_experiment(plan, store);
  }
  write_report(report, seed, a.out_dir);

  int rc = kOk;
  for (const auto& c : report.cells) {
    std::printf("%-8s %-16s n=%zu mean=%.1fus p99=%lldus util=%.4f peak=%llu\n", c.strategy.c_str(),
                c.model_id.c_str(), c.requests, c.mean_latency_us,
                static_cast<long long>(c.p99_latency_us), c.utilization,
                static_cast<unsigned long long>(c.peak_memory));
    if (c.failed) {
      std::fprintf(stderr, "%s/%s: %zu failed: %s\n", c.strategy.c_str(), c.model_id.c_str(), c.failed,
                   c.error.c_str());
      if (c.error.find(to_string(ErrorKind::InvariantViolation)) != std::string::npos) rc = kViolation;
      else if (rc == kOk) rc = kIoConfig;
    }
  }
  return rc;
}

struct GanttArgs {
  std::string events;
  std::string format = "svg";
  std::string out;
};

int cmd_gantt(const GanttArgs& a) {
  const auto events = load_events(a.events);
  const auto fmt = gantt_format_from_string(a.format);
  fs::path out = a.out;
  if (out.empty()) {
    out = a.events;
    out.replace_extension(fmt == GanttFormat::Svg ? ".svg" : fmt == GanttFormat::Json ? ".json" : ".csv");
    if (out == fs::path(a.events)) throw Error(ErrorKind::Config, "refusing to overwrite the input; pass --out");
  }
  export_gantt(events, fmt, out);
  std::cout << out.string() << "\n";
  return kOk;
}

struct VerifyArgs {
  std::string events;
  bool sequential = false;
  bool allow_missing_r = false;
};

int cmd_verify(const VerifyArgs& a) {
  const auto events = load_events(a.events);
  OrderingOptions opts;
  opts.sequential_retrieval = a.sequential;
  opts.require_retrieval = !a.allow_missing_r;
  const auto bad = check_ordering(events, opts);
  for (const auto& v : bad) std::cout << describe(v) << "\n";
  std::cout << events.size() << " events, " << bad.size() << " violations\n";
  return bad.empty() ? kOk : kViolation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pipelined model loading and inference simulator"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a model descriptor and its weight files");
  g->add_option("--family", gen.family, "resnet, vgg, llama, opt or custom");
  g->add_option("--layers", gen.layers, "layer count (0 = family default)");
  g->add_option("--seed", gen.seed);
  g->add_option("--size-factor", gen.size_factor);
  g->add_option("--out", gen.out, "output directory");

  RunArgs run;
  auto* r = app.add_subcommand("run", "run one request");
  r->add_option("--model", run.model, "model descriptor json")->required();
  r->add_option("--weights", run.weights, "weights root (default: next to the model)");
  r->add_option("--strategy", run.strategy, "sp, mini, preload or cicada");
  r->add_option("--input-seed", run.input_seed);
  r->add_option("--mode", run.mode, "virtual or real");
  r->add_option("--time-scale", run.time_scale, "real mode: wall = model time x scale");
  r->add_option("--events", run.events, "write the event log (.csv or .json)");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "replay a trace across strategies");
  b->add_option("--trace", bench.trace, "offset_ms,model_id csv");
  b->add_option("--synth", bench.synth, "minutes,count,burstiness");
  b->add_option("--strategies", bench.strategies);
  b->add_option("--models", bench.models, "family[:layers],...");
  b->add_option("--out-dir", bench.out_dir);
  b->add_option("--seed", bench.seed);
  b->add_option("--mode", bench.mode);
  b->add_option("--time-scale", bench.time_scale);
  b->add_option("--size-factor", bench.size_factor);
  b->add_option("--repeat", bench.repeat);
  b->add_option("--max-in-flight", bench.max_in_flight);

  GanttArgs gantt;
  auto* gt = app.add_subcommand("gantt", "render an event log");
  gt->add_option("--events", gantt.events)->required();
  gt->add_option("--format", gantt.format, "svg, csv or json");
  gt->add_option("--out", gantt.out);

  VerifyArgs verify;
  auto* v = app.add_subcommand("verify", "check ordering invariants of an event log");
  v->add_option("--events", verify.events)->required();
  v->add_flag("--sequential", verify.sequential, "R may not start before L ends");
  v->add_flag("--allow-missing-r", verify.allow_missing_r);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kIoConfig;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*r) return cmd_run(run);
    if (*b) return cmd_bench(bench);
    if (*gt) return cmd_gantt(gantt);
    if (*v) return cmd_verify(verify);
  } catch (const Error& e) {
    std::cerr << "cicada: " << e.what() << "\n";
    return e.kind() == ErrorKind::InvariantViolation ? kViolation : kIoConfig;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "cicada: " << e.what() << "\n";
    return kIoConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "cicada: bad json: " << e.what() << "\n";
    return kIoConfig;
  }
  return kIoConfig;
}
