#include "qexplain/trace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qexplain/error.hpp"

namespace qx {

using nlohmann::json;

std::string to_string(TraceKind kind) { return kind == TraceKind::abr ? "abr" : "cc"; }

TraceKind trace_kind_from_string(const std::string& s) {
  if (s == "abr") return TraceKind::abr;
  if (s == "cc") return TraceKind::cc;
  throw UserError("unknown trace kind '" + s + "' (expected abr or cc)");
}

void Trace::validate() const {
  if (id.empty()) throw UserError("trace has empty id");
  if (samples.empty()) throw UserError("trace " + id + " has no samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!std::isfinite(s.t) || s.t < 0.0)
      throw UserError("trace " + id + ": negative or non-finite timestamp at sample " +
                      std::to_string(i));
    if (!std::isfinite(s.bw_mbps) || s.bw_mbps <= 0.0)
      throw UserError("trace " + id + ": bandwidth must be positive at sample " +
                      std::to_string(i));
    if (i > 0 && s.t <= samples[i - 1].t)
      throw UserError("trace " + id + ": timestamps not strictly increasing at sample " +
                      std::to_string(i));
  }
  if ((kind == TraceKind::cc) != link.has_value())
    throw UserError("trace " + id + ": cc link parameters must be present iff kind is cc");
  if (link) {
    if (!(link->base_rtt_ms > 0.0)) throw UserError("trace " + id + ": base_rtt_ms must be > 0");
    if (!(link->queue_pkts >= 0.0)) throw UserError("trace " + id + ": queue_pkts must be >= 0");
    if (!(link->loss_rate >= 0.0 && link->loss_rate <= 1.0))
      throw UserError("trace " + id + ": loss_rate must be in [0,1]");
  }
}

double Trace::duration() const {
  if (samples.empty()) return 0.0;
  const double last = samples.back().t;
  const double gap = samples.size() > 1 ? last - samples[samples.size() - 2].t : 1.0;
  return last + gap;
}

namespace {

// Index of the sample in effect at time t.
std::size_t segment_index(const std::vector<TraceSample>& samples, double t) {
  auto it = std::upper_bound(samples.begin(), samples.end(), t,
                             [](double v, const TraceSample& s) { return v < s.t; });
  if (it == samples.begin()) return 0;
  return static_cast<std::size_t>(std::distance(samples.begin(), it) - 1);
}

}  // namespace

double Trace::bandwidth_at(double t) const { return samples[segment_index(samples, t)].bw_mbps; }

double Trace::transfer_time(double start, double megabits) const {
  if (megabits <= 0.0) return 0.0;
  std::size_t i = segment_index(samples, start);
  double now = std::max(start, 0.0);
  double remaining = megabits;
  double elapsed = 0.0;
  while (true) {
    const double bw = samples[i].bw_mbps;
    const bool last = i + 1 >= samples.size();
    if (last) return elapsed + remaining / bw;
    const double seg_end = samples[i + 1].t;
    const double capacity = (seg_end - now) * bw;
    if (capacity >= remaining) return elapsed + remaining / bw;
    remaining -= capacity;
    elapsed += seg_end - now;
    now = seg_end;
    ++i;
  }
}

double Trace::min_bandwidth() const {
  double m = samples.front().bw_mbps;
  for (const auto& s : samples) m = std::min(m, s.bw_mbps);
  return m;
}

const Trace* TraceSet::find(const std::string& id) const {
  for (const auto& t : traces)
    if (t.id == id) return &t;
  return nullptr;
}

void TraceSet::validate() const {
  std::set<std::string> ids;
  for (const auto& t : traces) {
    t.validate();
    if (t.kind != kind) throw UserError("trace " + t.id + " has kind " + to_string(t.kind) +
                                        ", set is " + to_string(kind));
    if (!ids.insert(t.id).second) throw UserError("duplicate trace id " + t.id);
  }
}

void CcTraceSpec::validate() const {
  auto check = [](const Range& r, const char* name, bool allow_zero) {
    if (!(r.min <= r.max)) throw UserError(std::string("spec range ") + name + " has min > max");
    if (allow_zero ? r.min < 0.0 : r.min <= 0.0)
      throw UserError(std::string("spec range ") + name + " must have a positive minimum");
  };
  check(mean_mbps, "mean_mbps", false);
  check(base_rtt_ms, "base_rtt_ms", false);
  check(queue_pkts, "queue_pkts", false);
  check(loss_rate, "loss_rate", true);
  if (loss_rate.max > 1.0) throw UserError("spec loss_rate max must be <= 1");
  if (!(segment_length > 0.0)) throw UserError("segment_length must be > 0");
  if (!(wander >= 0.0 && wander < 1.0)) throw UserError("wander must be in [0,1)");
  if (!(duration >= segment_length)) throw UserError("duration must be >= segment_length");
}

std::string trace_to_jsonl(const Trace& trace) {
  json j;
  j["id"] = trace.id;
  j["kind"] = to_string(trace.kind);
  json samples = json::array();
  for (const auto& s : trace.samples) samples.push_back({{"t", s.t}, {"bw_mbps", s.bw_mbps}});
  j["samples"] = std::move(samples);
  if (trace.link) {
    j["base_rtt_ms"] = trace.link->base_rtt_ms;
    j["queue_pkts"] = trace.link->queue_pkts;
    j["loss_rate"] = trace.link->loss_rate;
  }
  return j.dump();
}

Trace trace_from_jsonl(const std::string& line) {
  const json j = json::parse(line);
  Trace t;
  t.id = j.at("id").get<std::string>();
  t.kind = trace_kind_from_string(j.at("kind").get<std::string>());
  for (const auto& s : j.at("samples"))
    t.samples.push_back({s.at("t").get<double>(), s.at("bw_mbps").get<double>()});
  const bool has_link = j.contains("base_rtt_ms") || j.contains("queue_pkts") ||
                        j.contains("loss_rate");
  if (has_link) {
    t.link = CcLink{j.at("base_rtt_ms").get<double>(), j.at("queue_pkts").get<double>(),
                    j.at("loss_rate").get<double>()};
  }
  t.validate();
  return t;
}

TraceSet load_traces(const std::filesystem::path& path, TraceKind kind) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open trace file " + path.string());
  TraceSet set;
  set.kind = kind;
  set.provenance = Provenance::ingested;
  std::set<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Trace t;
    try {
      t = trace_from_jsonl(line);
    } catch (const std::exception& e) {
      throw UserError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (t.kind != kind)
      throw UserError(path.string() + ":" + std::to_string(line_no) + ": kind mismatch, expected " +
                      to_string(kind) + " got " + to_string(t.kind));
    if (!ids.insert(t.id).second)
      throw UserError(path.string() + ":" + std::to_string(line_no) + ": duplicate id " + t.id);
    set.traces.push_back(std::move(t));
  }
  if (set.traces.empty()) throw UserError(path.string() + ": no traces");
  return set;
}

void save_traces(const TraceSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path.string());
  for (const auto& t : set.traces) out << trace_to_jsonl(t) << '\n';
}

TraceSet generate_cc_traces(const CcTraceSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  TraceSet set;
  set.kind = TraceKind::cc;
  set.provenance = Provenance::synthetic;
  std::mt19937_64 rng(seed);
  auto draw = [&rng](const Range& r) {
    if (r.min == r.max) return r.min;
    return std::uniform_real_distribution<double>(r.min, r.max)(rng);
  };
  const auto segments =
      static_cast<std::size_t>(std::ceil(spec.duration / spec.segment_length - 1e-12));
  for (std::size_t i = 0; i < n; ++i) {
    Trace t;
    char id[32];
    std::snprintf(id, sizeof id, "t-%04zu", i);
    t.id = id;
    t.kind = TraceKind::cc;
    const double mean = draw(spec.mean_mbps);
    CcLink link;
    link.base_rtt_ms = draw(spec.base_rtt_ms);
    link.queue_pkts = std::round(draw(spec.queue_pkts));
    link.loss_rate = draw(spec.loss_rate);
    t.link = link;
    std::uniform_real_distribution<double> drift(-spec.wander, spec.wander);
    for (std::size_t s = 0; s < segments; ++s) {
      const double factor = spec.wander > 0.0 ? 1.0 + drift(rng) : 1.0;
      t.samples.push_back({static_cast<double>(s) * spec.segment_length, mean * factor});
    }
    set.traces.push_back(std::move(t));
  }
  return set;
}

TraceSet as_abr(TraceSet set) {
  set.kind = TraceKind::abr;
  for (auto& t : set.traces) {
    t.kind = TraceKind::abr;
    t.link.reset();
  }
  return set;
}

TraceStats trace_stats(const Trace& trace) {
  if (trace.samples.empty()) throw UserError("trace_stats: empty trace");
  const double n = static_cast<double>(trace.samples.size());
  double sum = 0.0;
  for (const auto& s : trace.samples) sum += s.bw_mbps;
  const double first = trace.samples.front().bw_mbps;
  const bool constant = std::all_of(trace.samples.begin(), trace.samples.end(),
                                    [&](const TraceSample& s) { return s.bw_mbps == first; });
  // Summation rounding would otherwise leave a residue for constant traces.
  const double mean = constant ? first : sum / n;
  double ss = 0.0;
  for (const auto& s : trace.samples) ss += (s.bw_mbps - mean) * (s.bw_mbps - mean);
  TraceStats st;
  st.mean_bw = mean;
  st.cov_bw = std::sqrt(ss / n) / mean;
  st.duration = trace.duration();
  return st;
}

std::pair<TraceSet, TraceSet> split_holdout(const TraceSet& set, double holdout_fraction,
                                            std::uint64_t seed) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0))
    throw UserError("holdout fraction must be in (0,1)");
  const std::size_t n = set.size();
  if (n < 2) throw UserError("split_holdout needs at least 2 traces");
  auto holdout = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(n)));
  holdout = std::clamp<std::size_t>(holdout, 1, n - 1);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> in_holdout(n, false);
  for (std::size_t i = 0; i < holdout; ++i) in_holdout[order[i]] = true;

  TraceSet train{set.kind, set.provenance, {}};
  TraceSet held{set.kind, set.provenance, {}};
  for (std::size_t i = 0; i < n; ++i)
    (in_holdout[i] ? held : train).traces.push_back(set.traces[i]);
  return {std::move(train), std::move(held)};
}

}  // namespace qx
