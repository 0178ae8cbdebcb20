#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace qx {

enum class TraceKind { abr, cc };

std::string to_string(TraceKind kind);
TraceKind trace_kind_from_string(const std::string& s);

struct TraceSample {
  double t = 0.0;        // seconds from trace start
  double bw_mbps = 0.0;  // megabits per second
};

// Link parameters carried only by congestion-control traces.
struct CcLink {
  double base_rtt_ms = 50.0;
  double queue_pkts = 100.0;
  double loss_rate = 0.0;
};

// A time series of exogenous network conditions replayed by the simulators.
// Bandwidth is piecewise constant: sample i holds on [t_i, t_{i+1}) and the
// last sample holds until duration() and beyond.
struct Trace {
  std::string id;
  TraceKind kind = TraceKind::abr;
  std::vector<TraceSample> samples;
  std::optional<CcLink> link;  // present iff kind == cc

  // Throws UserError when an invariant is violated.
  void validate() const;

  // Last timestamp plus the last sampling interval (1 s for a single sample).
  double duration() const;

  // Bandwidth in effect at trace time `t` (clamped into the trace).
  double bandwidth_at(double t) const;

  // Seconds needed to move `megabits` starting at trace time `start`,
  // integrating the piecewise-constant bandwidth. Bandwidth past the end of
  // the trace is held at the last sample.
  double transfer_time(double start, double megabits) const;

  double min_bandwidth() const;
};

enum class Provenance { ingested, synthetic };

struct TraceSet {
  TraceKind kind = TraceKind::abr;
  Provenance provenance = Provenance::synthetic;
  std::vector<Trace> traces;

  bool empty() const { return traces.empty(); }
  std::size_t size() const { return traces.size(); }
  const Trace* find(const std::string& id) const;
  void validate() const;
};

struct TraceStats {
  double mean_bw = 0.0;
  double cov_bw = 0.0;
  double duration = 0.0;
};

struct Range {
  double min = 0.0;
  double max = 0.0;
};

// Parameters of the synthetic generator. The four key values of each trace
// (mean throughput, base RTT, queue size, random loss) are drawn uniformly
// from these ranges.
struct CcTraceSpec {
  Range mean_mbps{1.0, 10.0};
  Range base_rtt_ms{20.0, 200.0};
  Range queue_pkts{10.0, 200.0};
  Range loss_rate{0.0, 0.02};
  double segment_length = 5.0;
  double wander = 0.2;
  double duration = 60.0;

  void validate() const;
};

TraceSet load_traces(const std::filesystem::path& path, TraceKind kind);
void save_traces(const TraceSet& set, const std::filesystem::path& path);

// One JSONL record <-> Trace. Exact key names: id, kind, samples[{t, bw_mbps}],
// and for cc base_rtt_ms, queue_pkts, loss_rate.
std::string trace_to_jsonl(const Trace& trace);
Trace trace_from_jsonl(const std::string& line);

TraceSet generate_cc_traces(const CcTraceSpec& spec, std::size_t n, std::uint64_t seed);

// Relabels a generated set as ABR traces, dropping the link parameters.
TraceSet as_abr(TraceSet set);

TraceStats trace_stats(const Trace& trace);

std::pair<TraceSet, TraceSet> split_holdout(const TraceSet& set, double holdout_fraction,
                                            std::uint64_t seed);

}  // namespace qx
