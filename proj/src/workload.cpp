#include "cicada/workload.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cicada/rng.hpp"

namespace cicada {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string line_tag(std::size_t n) { return "line " + std::to_string(n); }

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::vector<TraceRecord> parse_trace_text(const std::string& text, const std::set<std::string>* known) {
  std::vector<TraceRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw Error(ErrorKind::FormatError, line_tag(n) + ": expected offset_ms,model_id");
    const auto off = trim(line.substr(0, comma));
    const auto model = trim(line.substr(comma + 1));
    if (off == "offset_ms") continue;  // header
    double v = 0.0;
    std::size_t used = 0;
    try {
      v = std::stod(off, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != off.size() || off.empty() || !std::isfinite(v))
      throw Error(ErrorKind::FormatError, line_tag(n) + ": bad offset '" + off + "'");
    if (v < 0) throw Error(ErrorKind::InvalidOffset, line_tag(n) + ": negative offset " + off);
    if (model.empty() || model.find(',') != std::string::npos)
      throw Error(ErrorKind::FormatError, line_tag(n) + ": bad model id");
    if (known && !known->count(model))
      throw Error(ErrorKind::UnknownModel, line_tag(n) + ": " + model);
    out.push_back({v, model});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const TraceRecord& a, const TraceRecord& b) { return a.offset_ms < b.offset_ms; });
  return out;
}

std::vector<TraceRecord> parse_trace(const std::filesystem::path& path, const std::set<std::string>* known) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read trace " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_trace_text(buf.str(), known);
}

std::string trace_to_csv(const std::vector<TraceRecord>& trace) {
  std::string out = "offset_ms,model_id\n";
  for (const auto& r : trace) out += fmt(r.offset_ms, 3) + "," + r.model_id + "\n";
  return out;
}

std::vector<TraceRecord> synthesize_trace(std::size_t duration_min, std::size_t total,
                                          double burstiness, std::uint64_t seed,
                                          const std::vector<std::string>& model_ids) {
  if (total == 0) throw Error(ErrorKind::Config, "total_invocations must be >= 1");
  if (duration_min == 0) throw Error(ErrorKind::Config, "duration must be >= 1 minute");
  if (model_ids.empty()) throw Error(ErrorKind::Config, "no models to assign");
  if (burstiness < 0) throw Error(ErrorKind::Config, "burstiness must be >= 0");

  SplitMix64 rng(mix_seed(seed, 0x7ace));
  const double minute_ms = 60'000.0;
  std::vector<double> offsets;
  offsets.reserve(total);

  if (burstiness == 0.0) {
    const double step = static_cast<double>(duration_min) * minute_ms / static_cast<double>(total);
    for (std::size_t i = 0; i < total; ++i) offsets.push_back((static_cast<double>(i) + 0.5) * step);
  } else {
    // Box-Muller by hand: std::normal_distribution differs between standard
    // libraries and the trace must be identical everywhere.
    const double sigma = 3.0 * burstiness;
    std::vector<double> w(duration_min);
    for (auto& x : w) {
      const double u1 = 1.0 - rng.uniform01();
      const double u2 = rng.uniform01();
      const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
      x = std::exp(sigma * z);
    }
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    std::vector<std::size_t> count(duration_min);
    std::vector<std::pair<double, std::size_t>> frac;
    std::size_t given = 0;
    for (std::size_t m = 0; m < duration_min; ++m) {
      const double q = static_cast<double>(total) * w[m] / sum;
      count[m] = static_cast<std::size_t>(std::floor(q));
      given += count[m];
      frac.emplace_back(q - std::floor(q), m);
    }
    std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; given < total; ++k, ++given) ++count[frac[k % frac.size()].second];
    for (std::size_t m = 0; m < duration_min; ++m)
      for (std::size_t c = 0; c < count[m]; ++c)
        offsets.push_back((static_cast<double>(m) + rng.uniform01()) * minute_ms);
    std::sort(offsets.begin(), offsets.end());
  }

  std::vector<TraceRecord> out;
  out.reserve(total);
  for (double off : offsets) {
    const auto pick = static_cast<std::size_t>(rng() % model_ids.size());
    // round to the microsecond so CSV round trips are exact
    out.push_back({std::round(off * 1000.0) / 1000.0, model_ids[pick]});
  }
  return out;
}

std::vector<std::size_t> per_minute_histogram(const std::vector<TraceRecord>& trace,
                                              std::size_t duration_min) {
  std::vector<std::size_t> h(duration_min, 0);
  for (const auto& r : trace) {
    const auto bin = static_cast<std::size_t>(std::floor(r.offset_ms / 60'000.0));
    if (bin < duration_min) ++h[bin];
  }
  return h;
}

double coefficient_of_variation(const std::vector<std::size_t>& counts) {
  if (counts.empty()) return 0.0;
  double mean = 0.0;
  for (auto c : counts) mean += static_cast<double>(c);
  mean /= static_cast<double>(counts.size());
  if (mean == 0.0) return 0.0;
  double var = 0.0;
  for (auto c : counts) var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
  var /= static_cast<double>(counts.size());
  return std::sqrt(var) / mean;
}

Micros percentile(std::vector<Micros> values, double p) {
  if (values.empty()) return 0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

ComparisonReport run_experiment(const ExperimentPlan& plan, const WeightStore& store) {
  if (plan.repeat_count == 0) throw Error(ErrorKind::Config, "repeat_count must be >= 1");
  for (std::size_t i = 0; i < plan.trace.size(); ++i)
    if (!plan.models.count(plan.trace[i].model_id))
      throw Error(ErrorKind::UnknownModel, "trace record " + std::to_string(i + 1) + ": " +
                                               plan.trace[i].model_id);

  ComparisonReport report;
  for (const auto& strategy : plan.strategies) {
    const std::string sname(to_string(strategy.name));
    for (const auto& [model_id, model] : plan.models) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < plan.trace.size(); ++i)
        if (plan.trace[i].model_id == model_id) idx.push_back(i);
      if (idx.empty()) continue;

      CellReport cell;
      cell.strategy = sname;
      cell.model_id = model_id;
      std::vector<Micros> latencies;
      RuntimeConfig cfg = plan.runtime;
      cfg.time_scale = plan.time_scale;
      cfg.init_seed = plan.seed;
      const double scale = cfg.mode == ClockMode::Real ? plan.time_scale : 1.0;

      for (std::size_t rep = 0; rep < plan.repeat_count; ++rep) {
        Runtime rt(cfg, store);
        std::vector<std::pair<std::size_t, std::future<InferenceResult>>> futs;
        for (auto i : idx) {
          InferenceRequest req;
          req.request_id = i;
          req.model = model;
          req.input = make_input(*model, mix_seed(plan.seed, i));
          req.arrival_ts = static_cast<Micros>(std::llround(plan.trace[i].offset_ms * 1000.0));
          req.strategy = strategy;
          futs.emplace_back(i, rt.submit(std::move(req)));
        }
        try {
          rt.run();
        } catch (const Error& e) {
          cell.error = e.what();
        }
        const auto& st = rt.stats();
        std::vector<StageInterval> events;
        std::map<RequestId, Micros> arrivals;
        double util_sum = 0.0;
        std::size_t util_n = 0;
        for (auto& [i, fut] : futs) {
          RequestRow row{sname, model_id, rep, i, 0, 0, 0, false};
          row.arrival_us = static_cast<Micros>(std::llround(plan.trace[i].offset_ms * 1000.0 * scale));
          if (fut.wait_for(std::chrono::seconds(0)) != std::future_status::ready) {
            ++cell.failed;
            report.requests.push_back(row);
            continue;
          }
          try {
            auto res = fut.get();
            row.ok = true;
            row.admitted_us = res.admitted_at;
            row.latency_us = res.latency;
            latencies.push_back(res.latency);
            cell.max_admission_delay_us =
                std::max(cell.max_admission_delay_us, res.admitted_at - res.arrival_ts);
            arrivals[i] = res.arrival_ts;
            util_sum += utilization(res.events).utilization;
            ++util_n;
            events.insert(events.end(), res.events.begin(), res.events.end());
          } catch (const Error& e) {
            ++cell.failed;
            if (cell.error.empty()) cell.error = e.what();
          }
          report.requests.push_back(row);
        }
        if (rep == 0) {
          cell.requests = idx.size();
          cell.peak_memory = st.peak_resident;
          cell.peak_placeholder_payload = st.peak_placeholder_payload;
          cell.peak_registration_bytes = st.peak_registration_bytes;
          if (!events.empty()) {
            const auto u = utilization(events, arrivals);
            cell.utilization = u.utilization;
            cell.working = u.per_stage_working;
            cell.waiting = u.per_stage_waiting;
          }
          cell.mean_request_utilization = util_n ? util_sum / static_cast<double>(util_n) : 0.0;
          cell.events = std::move(events);
        }
      }
      if (!latencies.empty()) {
        long double sum = 0;
        for (auto l : latencies) sum += l;
        cell.mean_latency_us = static_cast<double>(sum / static_cast<long double>(latencies.size()));
        cell.p50_latency_us = percentile(latencies, 50);
        cell.p99_latency_us = percentile(latencies, 99);
      }
      if (!strategy.enable_miniloader)
        for (const auto& l : model->layers)
          cell.allocation_by_layer.push_back(
              static_cast<Micros>(std::llround(static_cast<double>(l.allocate_cost) * scale)));
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

namespace {
constexpr std::array<Stage, 4> kStages{Stage::L, Stage::R, Stage::A, Stage::E};

Micros at_or_zero(const std::map<Stage, Micros>& m, Stage s) {
  auto it = m.find(s);
  return it == m.end() ? 0 : it->second;
}
}  // namespace

std::string report_to_csv(const ComparisonReport& report) {
  std::ostringstream out;
  out << "strategy,model,requests,failed,mean_latency_us,p50_latency_us,p99_latency_us,utilization,"
         "mean_request_utilization,peak_memory_bytes,peak_placeholder_bytes,peak_registration_bytes";
  for (auto s : kStages) out << ",working_" << to_string(s) << "_us";
  for (auto s : kStages) out << ",waiting_" << to_string(s) << "_us";
  out << ",max_admission_delay_us\n";
  for (const auto& c : report.cells) {
    out << c.strategy << ',' << c.model_id << ',' << c.requests << ',' << c.failed << ','
        << fmt(c.mean_latency_us, 3) << ',' << c.p50_latency_us << ',' << c.p99_latency_us << ','
        << fmt(c.utilization) << ',' << fmt(c.mean_request_utilization) << ',' << c.peak_memory
        << ',' << c.peak_placeholder_payload << ',' << c.peak_registration_bytes;
    for (auto s : kStages) out << ',' << at_or_zero(c.working, s);
    for (auto s : kStages) out << ',' << at_or_zero(c.waiting, s);
    out << ',' << c.max_admission_delay_us << '\n';
  }
  return out.str();
}

std::string requests_to_csv(const ComparisonReport& report) {
  std::ostringstream out;
  out << "strategy,model,repeat,request_id,arrival_us,admitted_us,latency_us,ok\n";
  for (const auto& r : report.requests)
    out << r.strategy << ',' << r.model_id << ',' << r.repeat << ',' << r.request_id << ','
        << r.arrival_us << ',' << r.admitted_us << ',' << r.latency_us << ',' << (r.ok ? 1 : 0)
        << '\n';
  return out.str();
}

nlohmann::json report_to_json(const ComparisonReport& report, std::uint64_t seed) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : report.cells) {
    nlohmann::json working, waiting;
    for (auto s : kStages) {
      working[std::string(to_string(s))] = at_or_zero(c.working, s);
      waiting[std::string(to_string(s))] = at_or_zero(c.waiting, s);
    }
    cells.push_back({{"strategy", c.strategy},
                     {"model", c.model_id},
                     {"requests", c.requests},
                     {"failed", c.failed},
                     {"mean_latency_us", fmt(c.mean_latency_us, 3)},
                     {"p50_latency_us", c.p50_latency_us},
                     {"p99_latency_us", c.p99_latency_us},
                     {"utilization", fmt(c.utilization)},
                     {"mean_request_utilization", fmt(c.mean_request_utilization)},
                     {"peak_memory_bytes", c.peak_memory},
                     {"peak_placeholder_bytes", c.peak_placeholder_payload},
                     {"peak_registration_bytes", c.peak_registration_bytes},
                     {"working_us", working},
                     {"waiting_us", waiting},
                     {"max_admission_delay_us", c.max_admission_delay_us},
                     {"error", c.error}});
  }
  return {{"seed", seed}, {"cells", cells}};
}

void write_report(const ComparisonReport& report, std::uint64_t seed, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  auto write = [&](const std::filesystem::path& p, const std::string& body) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + p.string());
    out << body;
    if (!out) throw Error(ErrorKind::Io, "write failed for " + p.string());
  };
  write(dir / "report.csv", report_to_csv(report));
  write(dir / "report.json", report_to_json(report, seed).dump(2) + "\n");
  write(dir / "requests.csv", requests_to_csv(report));
  for (const auto& c : report.cells) {
    if (c.events.empty()) continue;
    auto sorted = c.events;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
      return std::tie(a.start, a.request_id, a.stage, a.layer_index) <
             std::tie(b.start, b.request_id, b.stage, b.layer_index);
    });
    const std::string stem = c.strategy + "_" + c.model_id;
    write(dir / ("events_" + stem + ".csv"), events_to_csv(sorted));
    GanttStyle style;
    style.hatch_allocation = !c.allocation_by_layer.empty();
    style.allocation_by_layer = c.allocation_by_layer;
    style.header = RunHeader{c.strategy, c.model_id, seed, 1.0, "virtual"};
    write(dir / ("gantt_" + stem + ".svg"), render_gantt_svg(sorted, style));
  }
}

Scenario delayed_retrieval_scenario(Micros delay) {
  auto m = std::make_shared<ModelDescriptor>();
  m->model_id = "delayed-r1";
  m->family = ModelFamily::Custom;
  for (LayerIndex i = 0; i < 4; ++i) {
    LayerSpec l;
    l.layer_index = i;
    l.name = "dense" + std::to_string(i);
    l.kernel_rows = l.kernel_cols = 16;
    l.param_count = 16 * 16 + 16;
    l.weight_bytes = 4 * l.param_count;
    l.instantiate_cost = 500;
    l.allocate_cost = 500;
    l.retrieval_cost = i == 0 ? 500 : 3000;
    l.apply_cost = 100;
    l.compute_cost = 800;
    m->layers.push_back(l);
    m->total_weight_bytes += l.weight_bytes;
  }
  m->retrieval_bandwidth = static_cast<double>(m->layers[1].weight_bytes) / 3000.0;
  Scenario s;
  s.model = std::move(m);
  // three reads share the disk so R_1 competes with R_2 and R_3
  s.config.engine.max_parallel_reads = 3;
  s.config.engine.disk.extra_by_layer[1] = delay;
  return s;
}

}  // namespace cicada
