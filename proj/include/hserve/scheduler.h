#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hserve/latency_models.h"
#include "hserve/workload.h"
#include "json.hpp"

namespace hserve {

struct SloConfig {
  double ttft_s = 2.0;  // S_p
  double tpot_s = 0.2;  // S_d
  std::int64_t layers = 1;
  double omega_s = 0.0;  // per-layer piggyback overhead reserve

  double layer_budget_us() const { return tpot_s * 1e6 / layers; }
  double prefill_layer_budget_us() const { return ttft_s * 1e6 / layers; }
  double omega_us() const { return omega_s * 1e6; }
  // max{0, S_d/d - omega}
  double reserved_budget_us() const;
};

void validate(const SloConfig& s);

// Piggyback bookkeeping cost of one layer with `merged` results consumed and
// `offloaded` q/k/v emissions (µs).
double piggyback_overhead_us(const ClusterProfile& c, std::int64_t merged,
                             std::int64_t offloaded);

// Reserve covering the bookkeeping of `max_piggyback` merges and emissions.
double default_omega_us(const ClusterProfile& c, std::int64_t max_piggyback);

enum class PolicyKind { kPiggyback, kHeadroom, kNoAdmissionControl, kGpuOnly };

struct PolicyConfig {
  PolicyKind kind = PolicyKind::kPiggyback;
  double headroom_frac = 0.2;
  std::int64_t headroom_chunk_tokens = 2048;

  bool offload_enabled() const { return kind == PolicyKind::kPiggyback ||
                                        kind == PolicyKind::kNoAdmissionControl; }
  bool latency_checks() const { return kind != PolicyKind::kHeadroom; }
};

// "piggyback", "headroom", "headroom:0.3", "no_admission_control", "gpu_only"
PolicyConfig parse_policy(const std::string& text);
std::string to_string(const PolicyConfig& p);

// --- state views and loads --------------------------------------------------

struct PrefillView {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  std::int64_t l = 0;  // prompt tokens already processed
  std::int64_t p = 1;  // prompt length
  double arrival = 0.0;
};

struct DecodeView {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  std::int64_t l = 0;  // context tokens
  double arrival = 0.0;
};

struct SchedulerState {
  std::vector<PrefillView> prefill;
  std::vector<DecodeView> decode;
};

struct Loads {
  double c_pa = 0.0;
  double c_da = 0.0;
  std::int64_t g = 0;
  std::int64_t n = 0;
};

// Sum of i for i in (l, l + q].
double pairwise_units(std::int64_t l, std::int64_t q);

// Admission-form loads over decode ∪ prefill ∪ {candidate}.
Loads compute_loads(const SchedulerState& s,
                    const PrefillView* candidate = nullptr);

enum class Phase { kDecode, kPrefill };

struct PendingItem {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  Phase phase = Phase::kDecode;
  double arrival = 0.0;
};

// LS decode < LS prefill < BE prefill < BE decode; FCFS within a class;
// equal arrivals by id.
int class_priority(ServiceClass cls, Phase phase);
std::vector<PendingItem> schedule_order(std::vector<PendingItem> pending);

// --- decisions --------------------------------------------------------------

struct AdmitDecision {
  bool admit = false;
  double lhs_us = 0.0;
  double rhs_us = 0.0;
  Loads loads;
};

AdmitDecision admit_ls(const PrefillView& k, const SchedulerState& s,
                       const LatencyModelSet& m, const SloConfig& slo);

// Chunk budget for a class: S_d/d for LS; for BE, max{0, S_d/d - omega}
// while CPU attention results are waiting, else S_d/d.
double chunk_budget_us(const SloConfig& slo, ServiceClass cls,
                       bool output_queue_nonempty);

// Left side of the chunk inequality for a chunk of q tokens (including the
// communication term evaluated at the widened token count).
double chunk_cost_us(const LatencyModelSet& m, const Loads& batch,
                     std::int64_t l, std::int64_t q);

// Largest q in [0, min(p - l, q_cap)] whose chunk cost fits `budget_us`.
std::int64_t chunk_prefill_budget(std::int64_t l, std::int64_t p,
                                  const Loads& batch, const LatencyModelSet& m,
                                  double budget_us, std::int64_t q_cap);

enum class BeDecodeAction { kOnGpu, kOffloadCpu, kSwapBackIn };

const char* to_string(BeDecodeAction a);

struct BeDecodeDecision {
  BeDecodeAction action = BeDecodeAction::kOffloadCpu;
  double lhs_us = 0.0;
  double rhs_us = 0.0;
  bool kv_ok = false;
};

// `gpu_kv_free` counts the request's own tokens when it is GPU resident.
BeDecodeDecision be_decode_admit(std::int64_t l, bool on_gpu,
                                 const Loads& batch, const LatencyModelSet& m,
                                 const SloConfig& slo,
                                 std::int64_t gpu_kv_free);

// Largest p <= min(ready, cap) such that layer `layer` (1-based) with
// n_base + extra + p tokens, and the next layer with n_base + p tokens
// (the carried QKV), both fit max{0, S_d/d - omega}.
std::int64_t piggyback_layer_admit(std::int64_t layer, std::int64_t ready,
                                   const Loads& base, std::int64_t extra,
                                   const LatencyModelSet& m,
                                   const SloConfig& slo, std::int64_t cap);

// Greedy ascending admission over all layers; index 0 is layer 1.
std::vector<std::int64_t> piggyback_budget(
    const std::vector<std::int64_t>& ready, const Loads& base,
    std::int64_t starts, const LatencyModelSet& m, const SloConfig& slo,
    std::int64_t cap);

// --- iteration planning ------------------------------------------------------

struct AuditRecord {
  std::string kind;
  RequestId id = 0;
  double lhs_us = 0.0;
  double rhs_us = 0.0;
  std::string outcome;
  std::int64_t value = 0;
};

void to_json(nlohmann::json& j, const AuditRecord& r);

enum class DecodeLoc { kGpu, kCpuBoundary, kCpuMidToken, kParked };

struct LsArrival {
  RequestId id = 0;
  double arrival = 0.0;
  std::int64_t p = 1;
  std::int64_t o = 1;
};

struct PrefillCand {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  double arrival = 0.0;
  std::int64_t l = 0;
  std::int64_t p = 1;
  std::int64_t o = 1;
  bool reserved = false;  // KV for this request is committed on the GPU
  std::int64_t gpu_footprint = 0;  // committed GPU tokens when reserved
};

struct DecodeCand {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  double arrival = 0.0;
  std::int64_t l = 0;          // context tokens
  std::int64_t remaining = 0;  // tokens still to generate
  DecodeLoc loc = DecodeLoc::kGpu;
  int host = -1;
  bool swap_in_eligible = true;
  std::int64_t gpu_footprint = 0;  // committed GPU tokens when on the GPU
};

struct KvView {
  std::int64_t gpu_capacity = 0;
  std::int64_t gpu_committed = 0;
  std::vector<std::int64_t> host_capacity;
  std::vector<std::int64_t> host_committed;
  std::int64_t gpu_free() const { return gpu_capacity - gpu_committed; }
};

struct PlanInput {
  std::vector<LsArrival> ls_arrivals;  // awaiting the admission decision
  std::vector<PrefillCand> prefills;   // admitted LS and waiting/running BE
  std::vector<DecodeCand> decodes;
  KvView kv;
  bool output_queue_nonempty = false;
};

struct ChunkPlan {
  RequestId id = 0;
  std::int64_t l = 0;
  std::int64_t q = 0;
};

enum class EvictKind { kToCpu, kPark, kDrop };

struct Eviction {
  RequestId id = 0;
  EvictKind kind = EvictKind::kDrop;
  int host = -1;
};

struct Offload {
  RequestId id = 0;
  int host = 0;
};

struct BatchPlan {
  std::vector<RequestId> ls_admitted;
  std::vector<RequestId> ls_rejected;
  std::vector<RequestId> reserved;  // prefills that newly committed KV
  std::vector<Eviction> evictions;
  std::vector<RequestId> ls_decode;
  std::vector<ChunkPlan> ls_prefill;
  std::vector<ChunkPlan> be_prefill;
  std::vector<RequestId> be_decode_gpu;
  std::vector<Offload> be_offload;   // GPU -> CPU swap-outs
  std::vector<RequestId> swap_in;    // CPU -> GPU
  std::vector<RequestId> cpu_starts; // CPU-resident tokens starting at layer 1
  // GPU KV commitments made by this plan (tokens, per request); evictions,
  // offloads and swap-ins carry their own sizes.
  std::vector<std::pair<RequestId, std::int64_t>> gpu_commit;
  std::vector<std::pair<RequestId, std::int64_t>> swap_in_commit;
  KvView kv_after;
  Loads loads;                       // GPU batch loads (piggyback excluded)
  std::vector<AuditRecord> audit;

  bool has_gpu_work() const;
};

// First host that can hold `tokens`: the local host (0) while it has room,
// else the least-committed remote host (ties to the lowest id). -1 if none.
int distribute_offload(const KvView& kv, std::int64_t tokens);

struct SchedulerConfig {
  SloConfig slo;
  PolicyConfig policy;
  std::int64_t max_piggyback = 256;
  bool audit = false;
};

class Scheduler {
 public:
  Scheduler(SchedulerConfig cfg, LatencyModelSet gpu_models);

  BatchPlan plan(const PlanInput& in) const;

  const SchedulerConfig& config() const { return cfg_; }
  const LatencyModelSet& models() const { return models_; }

  // Per-layer piggyback admission used by the engine at each layer start.
  std::int64_t admit_piggyback(std::int64_t layer, std::int64_t ready,
                               const Loads& base, std::int64_t extra) const;

 private:
  SchedulerConfig cfg_;
  LatencyModelSet models_;
};

}  // namespace hserve
