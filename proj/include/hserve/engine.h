#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hserve/latency_models.h"
#include "hserve/metrics.h"
#include "hserve/profiles.h"
#include "hserve/scheduler.h"
#include "hserve/workload.h"

namespace hserve {

// --- computation traces -------------------------------------------------------

enum class TraceModule : std::uint8_t {
  kQkv = 0,
  kAttn = 1,
  kProj = 2,
  kAdd = 3,
  kMlp = 4,
  kPut = 5,         // residual saved before an offloaded QKV
  kGet = 6,         // residual retrieved at the piggyback
  kGetMissing = 7,  // piggyback found no residual
};

const char* to_string(TraceModule m);

// Packed entry: bits 0-11 layer, bits 12-14 module, bit 15 set when the
// module ran on a CPU host.
using TraceEntry = std::uint16_t;

constexpr std::int64_t kMaxTraceLayer = 4095;

TraceEntry encode_trace(std::int64_t layer, TraceModule m, bool on_cpu);
std::int64_t trace_layer(TraceEntry e);
TraceModule trace_module(TraceEntry e);
bool trace_on_cpu(TraceEntry e);

// One pass of the GPU-only reference execution: per layer
// QKV, Attn, Proj, Add, MLP, Add, all on the GPU.
std::vector<TraceEntry> reference_pass(std::int64_t layers);

struct TraceDivergence {
  RequestId id = 0;
  std::int64_t pass = 0;  // 0-based
  std::int64_t layer = 0;
  std::string detail;
};

// Streaming checker: every pass must equal the reference pass except that an
// Attn entry may run on a CPU host, in which case it is bracketed by a
// residual Put before that layer's QKV and a Get before its Proj.
class TraceVerifier {
 public:
  explicit TraceVerifier(std::int64_t layers = 1, RequestId id = 0)
      : layers_(layers), id_(id) {}

  void feed(TraceEntry e);
  const std::optional<TraceDivergence>& divergence() const { return div_; }
  std::int64_t passes() const { return passes_; }
  bool at_pass_boundary() const { return layer_ == 1 && stage_ == 0; }

 private:
  void fail(const std::string& what, TraceEntry got);

  std::int64_t layers_;
  RequestId id_;
  std::int64_t layer_ = 1;
  int stage_ = 0;
  bool cpu_ = false;
  bool put_ = false;
  std::int64_t passes_ = 0;
  std::optional<TraceDivergence> div_;
};

struct RequestTrace {
  RequestId id = 0;
  std::vector<TraceEntry> entries;
};

struct TraceCheck {
  std::optional<TraceDivergence> divergence;
  std::int64_t passes = 0;
  bool complete = true;  // ends on a pass boundary
};

TraceCheck verify_trace(const RequestTrace& t, std::int64_t layers);

// --- residual store -------------------------------------------------------------

// Residual markers of offloaded requests keyed by (request, layer).
class ResidualStore {
 public:
  // Throws IntegrityFault when (id, layer) is already present.
  void put(RequestId id, std::int64_t layer, std::int64_t tokens);
  // Removes and returns the marker; throws IntegrityFault when absent.
  std::int64_t get(RequestId id, std::int64_t layer);
  bool contains(RequestId id, std::int64_t layer) const;
  std::size_t size() const { return store_.size(); }
  std::int64_t entries_for(RequestId id) const;
  std::int64_t puts() const { return puts_; }
  std::int64_t gets() const { return gets_; }

 private:
  static std::uint64_t key(RequestId id, std::int64_t layer);
  std::unordered_map<std::uint64_t, std::int64_t> store_;
  std::unordered_map<RequestId, std::int64_t> per_request_;
  std::int64_t puts_ = 0;
  std::int64_t gets_ = 0;
};

// --- engine ----------------------------------------------------------------------

// Drops the residual put of (id, layer) the first time it happens.
struct FaultInjection {
  RequestId id = 0;
  std::int64_t layer = 1;
};

struct EngineConfig {
  SchedulerConfig sched;
  double horizon_s = 60.0;
  std::uint64_t seed = 1;          // profile-noise streams
  bool swap_in_delay = true;       // swap back only after a full CPU token
  bool verify_traces = true;       // streaming trace verification
  bool keep_traces = false;        // retain full per-request traces
  std::ostream* events = nullptr;  // JSONL event log
  bool digest_events = false;      // hash the event log even without a sink
  std::ostream* audit = nullptr;   // JSONL scheduling-decision log
  bool record_layer_starts = false;
  bool check_invariants = false;   // KV/queue invariants at every event
  std::optional<FaultInjection> fault;
};

struct LayerRun {
  std::int64_t iteration = 0;
  std::int64_t layer = 0;
  double start = 0.0;  // s
  double duration = 0.0;
  std::int64_t tokens = 0;       // dense token count
  std::int64_t piggybacked = 0;  // merged CPU results
};

struct IntegrityFaultRecord {
  RequestId id = 0;
  std::int64_t layer = 0;
  double time = 0.0;
  std::string what;
};

struct RunResult {
  std::vector<RequestRecord> records;  // in request-id order
  std::vector<RequestTrace> traces;    // keep_traces only
  std::vector<TraceDivergence> divergences;
  std::vector<IntegrityFaultRecord> faults;
  std::vector<LayerRun> layer_runs;    // record_layer_starts only
  std::map<std::string, double> counters;
  std::uint64_t event_digest = 0;      // FNV-1a over event-log lines
  std::int64_t event_lines = 0;
};

// Simulates the GPU instance and its CPU hosts over `requests` up to the
// horizon. Throws ScenarioError when a request can never fit the GPU.
RunResult run_engine(const ProfileSet& profiles, const ModelsDoc& models,
                     const std::vector<RequestSpec>& requests,
                     const EngineConfig& cfg);

}  // namespace hserve
