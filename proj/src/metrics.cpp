#include "cicada/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

namespace cicada {

std::vector<Interval> merge_intervals(std::vector<Interval> intervals) {
  for (const auto& iv : intervals) {
    if (iv.end < iv.start)
      throw Error(ErrorKind::InvalidInterval,
                  "[" + std::to_string(iv.start) + "," + std::to_string(iv.end) + "]");
  }
  std::sort(intervals.begin(), intervals.end(),
            [](const Interval& a, const Interval& b) { return a.start < b.start; });
  std::vector<Interval> out;
  for (const auto& iv : intervals) {
    if (!out.empty() && iv.start <= out.back().end) {
      out.back().end = std::max(out.back().end, iv.end);
    } else {
      out.push_back(iv);
    }
  }
  return out;
}

Micros union_length(const std::vector<Interval>& merged) noexcept {
  Micros total = 0;
  for (const auto& iv : merged) total += iv.end - iv.start;
  return total;
}

UtilizationReport utilization(const std::vector<StageInterval>& events,
                              const std::map<RequestId, Micros>& arrivals) {
  if (events.empty()) throw Error(ErrorKind::EmptyRun, "no stage intervals recorded");

  UtilizationReport rep;
  Micros lo = std::numeric_limits<Micros>::max();
  Micros hi = std::numeric_limits<Micros>::min();
  std::vector<Interval> active;
  using Key = std::tuple<RequestId, Stage, LayerIndex>;
  std::map<Key, const StageInterval*> by_key;
  for (const auto& e : events) {
    if (e.end < e.start) throw Error(ErrorKind::InvalidInterval, "stage interval ends before start");
    lo = std::min(lo, e.start);
    hi = std::max(hi, e.end);
    rep.per_stage_working[e.stage] += e.duration();
    if (std::find(kUnitStages.begin(), kUnitStages.end(), e.stage) != kUnitStages.end())
      active.push_back({e.start, e.end});
    by_key[{e.request_id, e.stage, e.layer_index}] = &e;
  }
  for (Stage s : {Stage::L, Stage::R, Stage::A, Stage::E}) {
    rep.per_stage_working.try_emplace(s, 0);
    rep.per_stage_waiting.try_emplace(s, 0);
  }

  auto find = [&](RequestId r, Stage s, LayerIndex i) -> const StageInterval* {
    auto it = by_key.find({r, s, i});
    return it == by_key.end() ? nullptr : it->second;
  };
  auto add_wait = [&](Stage s, Micros start, std::optional<Micros> ready) {
    if (ready) rep.per_stage_waiting[s] += std::max<Micros>(0, start - *ready);
  };
  for (const auto& [key, e] : by_key) {
    const auto [r, stage, i] = key;
    std::optional<Micros> ready;
    switch (stage) {
      case Stage::L:
        if (i > 0) {
          if (const auto* p = find(r, Stage::L, i - 1)) ready = p->end;
        } else if (auto it = arrivals.find(r); it != arrivals.end()) {
          ready = it->second;
        }
        break;
      case Stage::R:
        if (const auto* p = find(r, Stage::L, i)) ready = p->end;
        break;
      case Stage::A: {
        const auto* l = find(r, Stage::L, i);
        const auto* rr = find(r, Stage::R, i);
        if (l || rr) ready = std::max(l ? l->end : lo, rr ? rr->end : lo);
        break;
      }
      case Stage::E:
        if (const auto* p = find(r, Stage::A, i)) ready = p->end;
        break;
    }
    add_wait(stage, e->start, ready);
  }

  rep.total_pipeline = hi - lo;
  rep.total_active = union_length(merge_intervals(std::move(active)));
  rep.utilization = rep.total_pipeline > 0
                        ? static_cast<double>(rep.total_active) / static_cast<double>(rep.total_pipeline)
                        : 1.0;
  return rep;
}

// ---------------------------------------------------------------------------
// MemoryAccountant

MemoryAccountant::Entry& MemoryAccountant::entry(RequestId r, LayerIndex layer) {
  return entries_[{r, layer}];
}

void MemoryAccountant::adjust(MemoryBucket b, std::int64_t delta) {
  auto& v = buckets_[static_cast<std::size_t>(b)];
  v = static_cast<std::uint64_t>(static_cast<std::int64_t>(v) + delta);
}

void MemoryAccountant::note_peaks() {
  for (std::size_t b = 0; b < buckets_.size(); ++b) peaks_[b] = std::max(peaks_[b], buckets_[b]);
  peak_resident_ = std::max(peak_resident_, resident());
  peak_placeholder_payload_ = std::max(peak_placeholder_payload_, placeholder_payload_);
}

void MemoryAccountant::add_block(RequestId r, LayerIndex layer, std::uint64_t payload,
                                 std::uint64_t header) {
  auto& e = entry(r, layer);
  e.block_payload = payload;
  e.block_header = header;
  e.applied = false;
  e.released = false;
  adjust(MemoryBucket::Placeholders, static_cast<std::int64_t>(payload + header));
  placeholder_payload_ += payload;
  note_peaks();
}

void MemoryAccountant::apply_block(RequestId r, LayerIndex layer, std::uint64_t payload) {
  auto& e = entry(r, layer);
  if (e.released || e.applied) return;
  adjust(MemoryBucket::Placeholders, -static_cast<std::int64_t>(e.block_payload + e.block_header));
  placeholder_payload_ -= e.block_payload;
  e.block_payload = payload;
  e.applied = true;
  adjust(MemoryBucket::FullParams, static_cast<std::int64_t>(payload + e.block_header));
  note_peaks();
}

void MemoryAccountant::add_shard(RequestId r, LayerIndex layer, std::uint64_t bytes) {
  auto& e = entry(r, layer);
  e.shard += bytes;
  adjust(MemoryBucket::ShardBuffers, static_cast<std::int64_t>(bytes));
  note_peaks();
}

std::uint64_t MemoryAccountant::release_layer(RequestId r, LayerIndex layer) {
  auto it = entries_.find({r, layer});
  if (it == entries_.end() || it->second.released) return 0;
  auto& e = it->second;
  const std::uint64_t block = e.block_payload + e.block_header;
  if (e.applied) {
    adjust(MemoryBucket::FullParams, -static_cast<std::int64_t>(block));
  } else {
    adjust(MemoryBucket::Placeholders, -static_cast<std::int64_t>(block));
    placeholder_payload_ -= e.block_payload;
  }
  adjust(MemoryBucket::ShardBuffers, -static_cast<std::int64_t>(e.shard));
  const std::uint64_t freed = block + e.shard;
  e = Entry{};
  e.released = true;
  return freed;
}

std::uint64_t MemoryAccountant::release_request(RequestId r) {
  std::uint64_t freed = 0;
  for (auto it = entries_.lower_bound({r, 0}); it != entries_.end() && it->first.first == r; ++it)
    freed += release_layer(r, it->first.second);
  return freed;
}

std::uint64_t MemoryAccountant::resident() const noexcept {
  return buckets_[0] + buckets_[1] + buckets_[2];
}

std::uint64_t MemoryAccountant::bucket(MemoryBucket b) const noexcept {
  return buckets_[static_cast<std::size_t>(b)];
}

std::uint64_t MemoryAccountant::peak(MemoryBucket b) const noexcept {
  return peaks_[static_cast<std::size_t>(b)];
}

std::uint64_t MemoryAccountant::request_bytes(RequestId r) const {
  std::uint64_t total = 0;
  for (auto it = entries_.lower_bound({r, 0}); it != entries_.end() && it->first.first == r; ++it) {
    if (!it->second.released)
      total += it->second.block_payload + it->second.block_header + it->second.shard;
  }
  return total;
}

MemorySample MemoryAccountant::sample(Micros ts) const {
  MemorySample s;
  s.ts = ts;
  s.breakdown[MemoryBucket::Placeholders] = bucket(MemoryBucket::Placeholders);
  s.breakdown[MemoryBucket::FullParams] = bucket(MemoryBucket::FullParams);
  s.breakdown[MemoryBucket::ShardBuffers] = bucket(MemoryBucket::ShardBuffers);
  s.resident_bytes = resident();
  s.placeholder_payload = placeholder_payload_;
  return s;
}

// ---------------------------------------------------------------------------
// Event log I/O

void to_json(nlohmann::json& j, const StageInterval& e) {
  j = nlohmann::json{{"request_id", e.request_id},
                     {"stage", std::string(to_string(e.stage))},
                     {"layer", e.layer_index},
                     {"start_us", e.start},
                     {"end_us", e.end}};
}

void from_json(const nlohmann::json& j, StageInterval& e) {
  j.at("request_id").get_to(e.request_id);
  e.stage = stage_from_string(j.at("stage").get<std::string>());
  j.at("layer").get_to(e.layer_index);
  j.at("start_us").get_to(e.start);
  j.at("end_us").get_to(e.end);
}

std::string events_to_csv(const std::vector<StageInterval>& events) {
  std::ostringstream out;
  out << "request_id,stage,layer,start_us,end_us\n";
  for (const auto& e : events) {
    out << e.request_id << ',' << to_string(e.stage) << ',' << e.layer_index << ',' << e.start
        << ',' << e.end << '\n';
  }
  return out.str();
}

std::vector<StageInterval> events_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<StageInterval> events;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("request_id", 0) == 0)) continue;
    std::istringstream row(line);
    std::string f[5];
    for (auto& field : f) {
      if (!std::getline(row, field, ','))
        throw Error(ErrorKind::FormatError, "events line " + std::to_string(lineno) + ": expected 5 fields");
    }
    try {
      events.push_back({std::stoull(f[0]), stage_from_string(f[1]),
                        static_cast<LayerIndex>(std::stoul(f[2])), std::stoll(f[3]), std::stoll(f[4])});
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::FormatError, "events line " + std::to_string(lineno) + ": bad number");
    }
  }
  return events;
}

nlohmann::json events_to_json(const std::vector<StageInterval>& events, const RunHeader& header) {
  return nlohmann::json{{"run",
                         {{"strategy", header.strategy},
                          {"model_id", header.model_id},
                          {"seed", header.seed},
                          {"time_scale", header.time_scale},
                          {"mode", header.mode}}},
                        {"events", events}};
}

GanttFormat gantt_format_from_string(const std::string& s) {
  if (s == "svg") return GanttFormat::Svg;
  if (s == "csv") return GanttFormat::Csv;
  if (s == "json") return GanttFormat::Json;
  throw Error(ErrorKind::Config, "unknown gantt format '" + s + "'");
}

namespace {

constexpr std::array<const char*, 10> kPalette{"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                               "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};

}  // namespace

std::string render_gantt_svg(const std::vector<StageInterval>& events, const GanttStyle& style) {
  if (events.empty()) throw Error(ErrorKind::EmptyRun, "nothing to draw");
  Micros lo = events.front().start;
  Micros hi = events.front().end;
  for (const auto& e : events) {
    lo = std::min(lo, e.start);
    hi = std::max(hi, e.end);
  }
  constexpr double kLeft = 40.0;
  constexpr double kTop = 30.0;
  constexpr double kRowHeight = 28.0;
  constexpr double kBarHeight = 20.0;
  const double span = static_cast<double>(std::max<Micros>(1, hi - lo));
  const double scale = style.pixels_per_us > 0.0 ? style.pixels_per_us : 1200.0 / span;
  const double width = kLeft + span * scale + 20.0;
  const double height = kTop + 4 * kRowHeight + 30.0;

  auto x_of = [&](Micros t) { return kLeft + static_cast<double>(t - lo) * scale; };

  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(3);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  svg << "<defs><pattern id=\"hatch\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" "
         "patternTransform=\"rotate(45)\"><line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"6\" "
         "stroke=\"#000\" stroke-width=\"1.5\"/></pattern></defs>\n";
  if (style.header) {
    svg << "<text x=\"" << kLeft << "\" y=\"18\" font-family=\"sans-serif\" font-size=\"12\">"
        << style.header->strategy << ' ' << style.header->model_id << "</text>\n";
  }
  // Rows top to bottom: L, R, A, E.
  const std::array<Stage, 4> rows{Stage::L, Stage::R, Stage::A, Stage::E};
  for (std::size_t r = 0; r < rows.size(); ++r) {
    svg << "<text class=\"row-label\" x=\"8\" y=\"" << kTop + r * kRowHeight + 15.0
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << to_string(rows[r]) << "</text>\n";
  }
  for (const auto& e : events) {
    const auto row = static_cast<double>(static_cast<int>(e.stage));
    const double y = kTop + row * kRowHeight;
    const double x0 = x_of(e.start);
    const double w = std::max(0.5, static_cast<double>(e.duration()) * scale);
    svg << "<rect class=\"bar\" data-stage=\"" << to_string(e.stage) << "\" data-layer=\""
        << e.layer_index << "\" data-request=\"" << e.request_id << "\" x=\"" << x0 << "\" y=\"" << y
        << "\" width=\"" << w << "\" height=\"" << kBarHeight << "\" fill=\""
        << kPalette[e.layer_index % kPalette.size()] << "\" stroke=\"#333\" stroke-width=\"0.5\"/>\n";
    if (style.hatch_allocation && e.stage == Stage::L && e.layer_index < style.allocation_by_layer.size()) {
      const Micros alloc = std::min(style.allocation_by_layer[e.layer_index], e.duration());
      const double hx = x_of(e.end - alloc);
      svg << "<rect class=\"hatch\" x=\"" << hx << "\" y=\"" << y << "\" width=\""
          << static_cast<double>(alloc) * scale << "\" height=\"" << kBarHeight
          << "\" fill=\"url(#hatch)\" fill-opacity=\"0.6\"/>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

void export_gantt(const std::vector<StageInterval>& events, GanttFormat format,
                  const std::filesystem::path& path, const GanttStyle& style) {
  if (events.empty()) throw Error(ErrorKind::EmptyRun, "no events to export");
  std::string body;
  switch (format) {
    case GanttFormat::Svg: body = render_gantt_svg(events, style); break;
    case GanttFormat::Csv: body = events_to_csv(events); break;
    case GanttFormat::Json:
      body = events_to_json(events, style.header.value_or(RunHeader{})).dump(2) + "\n";
      break;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << body;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::vector<StageInterval> load_events(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  if (path.extension() == ".json") {
    try {
      const auto j = nlohmann::json::parse(buf.str());
      const auto& arr = j.is_array() ? j : j.at("events");
      return arr.get<std::vector<StageInterval>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::FormatError, path.string() + ": " + e.what());
    }
  }
  return events_from_csv(buf.str());
}

}  // namespace cicada
