#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <regex>

#include "cicada/catalog.hpp"
#include "cicada/invariants.hpp"
#include "cicada/metrics.hpp"
#include "cicada/pipeline.hpp"

using namespace cicada;
namespace fs = std::filesystem;

namespace {

// covered ticks over [0, 1000): brute force union length
Micros tick_union(const std::vector<Interval>& ivs) {
  std::vector<bool> on(1000, false);
  for (const auto& iv : ivs)
    for (Micros t = iv.start; t < iv.end; ++t) on[t] = true;
  return std::count(on.begin(), on.end(), true);
}

StageInterval ev(Stage s, LayerIndex i, Micros a, Micros b, RequestId r = 0) { return {r, s, i, a, b}; }

// two layers, hand-laid
std::vector<StageInterval> two_layer_run() {
  return {
      ev(Stage::L, 0, 0, 100),   ev(Stage::R, 0, 100, 300), ev(Stage::A, 0, 300, 310), ev(Stage::E, 0, 310, 400),
      ev(Stage::L, 1, 100, 200), ev(Stage::R, 1, 300, 450), ev(Stage::A, 1, 450, 460), ev(Stage::E, 1, 460, 500),
  };
}

}  // namespace

TEST(MergeIntervals, Basics) {
  EXPECT_EQ(merge_intervals({{0, 5}, {5, 9}}), (std::vector<Interval>{{0, 9}}));
  EXPECT_EQ(merge_intervals({{7, 9}, {0, 2}, {1, 3}}), (std::vector<Interval>{{0, 3}, {7, 9}}));
  EXPECT_TRUE(merge_intervals({}).empty());
  try {
    merge_intervals({{5, 4}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InvalidInterval);
  }
}

TEST(MergeIntervals, MatchesTickBitmap) {
  std::mt19937 gen(3);
  for (int round = 0; round < 300; ++round) {
    std::vector<Interval> ivs(gen() % 20);
    for (auto& iv : ivs) {
      iv.start = gen() % 900;
      iv.end = iv.start + gen() % 100;
    }
    const auto merged = merge_intervals(ivs);
    ASSERT_EQ(union_length(merged), tick_union(ivs));
    for (std::size_t i = 1; i < merged.size(); ++i) ASSERT_GT(merged[i].start, merged[i - 1].end);
  }
}

TEST(Utilization, HandExample) {
  const auto rep = utilization(two_layer_run(), {{0, 0}});
  // active L/A/E: [0,200) [300,310) [310,400) [450,460) [460,500) = 200 + 100 + 50
  EXPECT_EQ(rep.total_active, 350);
  EXPECT_EQ(rep.total_pipeline, 500);
  EXPECT_DOUBLE_EQ(rep.utilization, 0.7);
  EXPECT_EQ(rep.per_stage_working.at(Stage::R), 350);
  EXPECT_EQ(rep.per_stage_working.at(Stage::L), 200);
  // L1 after L0: 0. R0 after L0: 0, R1 after L1: 100. A after max(L,R): 0, 0. E: 0, 0.
  EXPECT_EQ(rep.per_stage_waiting.at(Stage::L), 0);
  EXPECT_EQ(rep.per_stage_waiting.at(Stage::R), 100);
  EXPECT_EQ(rep.per_stage_waiting.at(Stage::A), 0);
  EXPECT_EQ(rep.per_stage_waiting.at(Stage::E), 0);
}

TEST(Utilization, ArrivalCountsAsLWait) {
  auto run = two_layer_run();
  for (auto& e : run) {
    e.start += 40;
    e.end += 40;
  }
  EXPECT_EQ(utilization(run, {{0, 0}}).per_stage_waiting.at(Stage::L), 40);
  EXPECT_EQ(utilization(run).per_stage_waiting.at(Stage::L), 0);
}

TEST(Utilization, RetrievalIsNotActive) {
  const auto rep = utilization({ev(Stage::L, 0, 0, 10), ev(Stage::R, 0, 0, 90), ev(Stage::A, 0, 90, 100)});
  EXPECT_EQ(rep.total_active, 20);
  EXPECT_DOUBLE_EQ(rep.utilization, 0.2);
}

TEST(Utilization, Errors) {
  try {
    utilization({});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyRun);
  }
  EXPECT_THROW(utilization({ev(Stage::L, 0, 5, 1)}), Error);
}

TEST(MemoryAccountant, Lifecycle) {
  MemoryAccountant m;
  m.add_block(1, 0, 128, 64);
  m.add_block(1, 1, 32, 64);
  EXPECT_EQ(m.bucket(MemoryBucket::Placeholders), 288u);
  EXPECT_EQ(m.sample(0).placeholder_payload, 160u);
  m.add_shard(1, 0, 4096);
  m.apply_block(1, 0, 4096);
  EXPECT_EQ(m.bucket(MemoryBucket::Placeholders), 96u);
  EXPECT_EQ(m.bucket(MemoryBucket::FullParams), 4160u);
  EXPECT_EQ(m.resident(), 96u + 4160u + 4096u);
  EXPECT_EQ(m.request_bytes(1), m.resident());
  EXPECT_EQ(m.release_layer(1, 0), 4160u + 4096u);
  EXPECT_EQ(m.release_layer(1, 0), 0u);
  m.add_block(2, 0, 8, 64);
  EXPECT_EQ(m.release_request(1), 96u);
  EXPECT_EQ(m.request_bytes(1), 0u);
  EXPECT_EQ(m.resident(), 72u);
  EXPECT_EQ(m.peak_resident(), 96u + 4160u + 4096u);
  EXPECT_EQ(m.peak_placeholder_payload(), 160u);
  EXPECT_EQ(m.peak(MemoryBucket::Placeholders), 288u);
  const auto s = m.sample(77);
  EXPECT_EQ(s.ts, 77);
  EXPECT_EQ(s.breakdown.at(MemoryBucket::Placeholders), 72u);
}

TEST(EventLog, CsvRoundTrip) {
  const auto run = two_layer_run();
  const auto csv = events_to_csv(run);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "request_id,stage,layer,start_us,end_us");
  EXPECT_EQ(events_from_csv(csv), run);
  EXPECT_THROW(events_from_csv("request_id,stage,layer,start_us,end_us\n0,L,0\n"), Error);
  EXPECT_THROW(events_from_csv("0,Q,0,1,2\n"), Error);
}

TEST(EventLog, FileRoundTrip) {
  const auto dir = fs::temp_directory_path() / "metrics_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto run = two_layer_run();
  export_gantt(run, GanttFormat::Csv, dir / "e.csv");
  export_gantt(run, GanttFormat::Json, dir / "e.json");
  EXPECT_EQ(load_events(dir / "e.csv"), run);
  EXPECT_EQ(load_events(dir / "e.json"), run);
  const auto j = events_to_json(run, RunHeader{"Cicada", "m", 3, 1.0, "virtual"});
  EXPECT_EQ(j.at("run").at("strategy"), "Cicada");
  EXPECT_EQ(j.at("events").size(), run.size());
  try {
    export_gantt({}, GanttFormat::Svg, dir / "x.svg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyRun);
  }
  EXPECT_FALSE(fs::exists(dir / "x.svg"));
  EXPECT_THROW(gantt_format_from_string("png"), Error);
  fs::remove_all(dir);
}

TEST(Gantt, ShowsRetrievalOverlappingConstruction) {
  CostProfile p;
  p.size_factor = 1.0 / 4096.0;
  const auto m = std::make_shared<const ModelDescriptor>(generate_model(ModelFamily::VGGLike, 5, 1, p));
  GeneratedWeightStore store(1);
  InferenceRequest req;
  req.model = m;
  req.input = make_input(*m, 1);
  req.strategy = StrategyConfig::of(StrategyName::Cicada);
  const auto res = run_request(req, {}, store);

  GanttStyle style;
  style.hatch_allocation = true;
  for (const auto& l : m->layers) style.allocation_by_layer.push_back(l.allocate_cost);
  const auto svg = render_gantt_svg(res.events, style);

  const std::regex bar(R"re(class="bar" data-stage="(\w)" data-layer="(\d+)" data-request="\d+" x="([\d.]+)" y="[\d.]+" width="([\d.]+)")re");
  std::map<std::pair<char, int>, std::pair<double, double>> bars;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), bar); it != std::sregex_iterator(); ++it) {
    const auto& mt = *it;
    bars[{mt[1].str()[0], std::stoi(mt[2].str())}] = {std::stod(mt[3].str()), std::stod(mt[4].str())};
  }
  ASSERT_EQ(bars.size(), 20u);
  int overlapping = 0;
  for (int i = 1; i < 5; ++i) {
    const auto [lx, lw] = bars.at({'L', i});
    const auto [rx, rw] = bars.at({'R', i});
    if (rx < lx + lw) ++overlapping;
  }
  EXPECT_EQ(overlapping, 4);
  const std::regex hatch(R"(class="hatch")");
  EXPECT_EQ(std::distance(std::sregex_iterator(svg.begin(), svg.end(), hatch), std::sregex_iterator()), 5);
  EXPECT_NE(svg.find("url(#hatch)"), std::string::npos);
}

TEST(CheckOrdering, CleanRunPasses) {
  EXPECT_TRUE(check_ordering(two_layer_run()).empty());
  OrderingOptions o;
  o.sequential_retrieval = true;
  EXPECT_TRUE(check_ordering(two_layer_run(), o).empty());
}

TEST(CheckOrdering, FlagsEachRule) {
  auto rules = [](const std::vector<StageInterval>& run, OrderingOptions o = {}) {
    std::vector<std::string> out;
    for (const auto& v : check_ordering(run, o)) out.push_back(v.rule);
    return out;
  };
  auto run = two_layer_run();
  run[6] = ev(Stage::A, 1, 440, 460);  // before R1 ends at 450
  EXPECT_EQ(rules(run), (std::vector<std::string>{"A before R end"}));

  run = two_layer_run();
  run[2] = ev(Stage::A, 0, 300, 470);  // overlaps A1
  const auto r = rules(run);
  EXPECT_NE(std::find(r.begin(), r.end(), "A before previous A end"), r.end());

  run = two_layer_run();
  run[3] = ev(Stage::E, 0, 305, 400);
  EXPECT_EQ(rules(run), (std::vector<std::string>{"E before A end"}));

  run = two_layer_run();
  run[5] = ev(Stage::R, 1, 150, 450);
  OrderingOptions seq;
  seq.sequential_retrieval = true;
  EXPECT_EQ(rules(run, seq), (std::vector<std::string>{"R overlaps L in sequential mode"}));
  EXPECT_TRUE(rules(run).empty());

  run = two_layer_run();
  run.erase(run.begin() + 5);
  EXPECT_EQ(rules(run), (std::vector<std::string>{"R count 0"}));
  OrderingOptions lax;
  lax.require_retrieval = false;
  EXPECT_TRUE(rules(run, lax).empty());

  run = two_layer_run();
  run.push_back(ev(Stage::E, 1, 500, 510));
  EXPECT_EQ(rules(run), (std::vector<std::string>{"E count 2"}));

  OrderingOptions three;
  three.layers = 3;
  EXPECT_EQ(rules(two_layer_run(), three), (std::vector<std::string>{"no events"}));

  const auto v = check_ordering({ev(Stage::L, 0, 9, 3)});
  ASSERT_FALSE(v.empty());
  EXPECT_EQ(describe(v.front()).rfind("request 0 layer 0: end < start", 0), 0u);
}
