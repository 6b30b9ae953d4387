#include "hserve/scheduler.h"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "hserve/error.h"

namespace hserve {

double SloConfig::reserved_budget_us() const {
  return std::max(0.0, layer_budget_us() - omega_us());
}

void validate(const SloConfig& s) {
  if (!(s.ttft_s > 0.0) || !(s.tpot_s > 0.0)) {
    throw InvalidConfig("SLOs must be > 0");
  }
  if (s.layers < 1) throw InvalidConfig("layer count must be >= 1");
  if (!(s.omega_s >= 0.0)) throw InvalidConfig("omega must be >= 0");
}

double piggyback_overhead_us(const ClusterProfile& c, std::int64_t merged,
                             std::int64_t offloaded) {
  if (merged == 0 && offloaded == 0) return 0.0;
  return c.piggyback_base_us +
         c.piggyback_merge_us * static_cast<double>(merged) +
         c.piggyback_offload_us * static_cast<double>(offloaded);
}

double default_omega_us(const ClusterProfile& c, std::int64_t max_piggyback) {
  return piggyback_overhead_us(c, max_piggyback, max_piggyback);
}

PolicyConfig parse_policy(const std::string& text) {
  PolicyConfig p;
  const auto colon = text.find(':');
  const std::string name = text.substr(0, colon);
  const std::string param =
      colon == std::string::npos ? std::string{} : text.substr(colon + 1);
  if (name == "piggyback") {
    p.kind = PolicyKind::kPiggyback;
  } else if (name == "headroom") {
    p.kind = PolicyKind::kHeadroom;
    if (!param.empty()) {
      try {
        std::size_t used = 0;
        p.headroom_frac = std::stod(param, &used);
        if (used != param.size()) throw std::invalid_argument(param);
      } catch (const std::exception&) {
        throw InvalidConfig("bad headroom fraction '" + param + "'");
      }
    }
    if (!(p.headroom_frac > 0.0 && p.headroom_frac < 1.0)) {
      throw InvalidConfig("headroom fraction must be in (0, 1)");
    }
    return p;
  } else if (name == "no_admission_control") {
    p.kind = PolicyKind::kNoAdmissionControl;
  } else if (name == "gpu_only") {
    p.kind = PolicyKind::kGpuOnly;
  } else {
    throw InvalidConfig("unknown policy '" + name + "'");
  }
  if (!param.empty()) {
    throw InvalidConfig("policy '" + name + "' takes no parameter");
  }
  return p;
}

std::string to_string(const PolicyConfig& p) {
  switch (p.kind) {
    case PolicyKind::kPiggyback: return "piggyback";
    case PolicyKind::kHeadroom: {
      nlohmann::json f = p.headroom_frac;
      return "headroom:" + f.dump();
    }
    case PolicyKind::kNoAdmissionControl: return "no_admission_control";
    case PolicyKind::kGpuOnly: return "gpu_only";
  }
  return "?";
}

double pairwise_units(std::int64_t l, std::int64_t q) {
  const double a = static_cast<double>(l);
  const double b = static_cast<double>(l + q);
  return (b * (b + 1.0) - a * (a + 1.0)) / 2.0;
}

Loads compute_loads(const SchedulerState& s, const PrefillView* candidate) {
  Loads out;
  auto add_prefill = [&out](const PrefillView& r) {
    out.c_pa += pairwise_units(r.l, r.p - r.l);
    out.c_da += static_cast<double>(r.l + 1);
    out.g += 1;
    out.n += r.p - r.l;
  };
  for (const auto& r : s.prefill) add_prefill(r);
  if (candidate) add_prefill(*candidate);
  for (const auto& r : s.decode) {
    out.c_da += static_cast<double>(r.l + 1);
    out.g += 1;
    out.n += 1;
  }
  return out;
}

int class_priority(ServiceClass cls, Phase phase) {
  if (cls == ServiceClass::kLS) return phase == Phase::kDecode ? 0 : 1;
  return phase == Phase::kPrefill ? 2 : 3;
}

std::vector<PendingItem> schedule_order(std::vector<PendingItem> pending) {
  std::stable_sort(pending.begin(), pending.end(),
                   [](const PendingItem& a, const PendingItem& b) {
                     return std::tuple(class_priority(a.cls, a.phase),
                                       a.arrival, a.id) <
                            std::tuple(class_priority(b.cls, b.phase),
                                       b.arrival, b.id);
                   });
  return pending;
}

AdmitDecision admit_ls(const PrefillView& k, const SchedulerState& s,
                       const LatencyModelSet& m, const SloConfig& slo) {
  AdmitDecision d;
  d.loads = compute_loads(s, &k);
  const auto lat =
      per_layer_latency(m, d.loads.c_pa, d.loads.c_da, d.loads.g, d.loads.n);
  d.lhs_us = lat.compute;
  d.rhs_us = slo.prefill_layer_budget_us() - lat.gamma;
  d.admit = d.lhs_us <= d.rhs_us;
  return d;
}

double chunk_budget_us(const SloConfig& slo, ServiceClass cls,
                       bool output_queue_nonempty) {
  if (cls == ServiceClass::kBE && output_queue_nonempty) {
    return slo.reserved_budget_us();
  }
  return slo.layer_budget_us();
}

double chunk_cost_us(const LatencyModelSet& m, const Loads& batch,
                     std::int64_t l, std::int64_t q) {
  return per_layer_latency(m, batch.c_pa + pairwise_units(l, q), batch.c_da,
                           batch.g, batch.n + q)
      .total();
}

std::int64_t chunk_prefill_budget(std::int64_t l, std::int64_t p,
                                  const Loads& batch, const LatencyModelSet& m,
                                  double budget_us, std::int64_t q_cap) {
  if (l < 0 || l > p) throw InvalidInput("prefill progress out of range");
  const std::int64_t hi_limit = std::min(p - l, std::max<std::int64_t>(q_cap, 0));
  auto fits = [&](std::int64_t q) {
    return chunk_cost_us(m, batch, l, q) <= budget_us;
  };
  if (hi_limit == 0 || !fits(1)) return 0;
  std::int64_t lo = 1, hi = hi_limit;  // fits(lo) holds
  while (lo < hi) {
    const std::int64_t mid = lo + (hi - lo + 1) / 2;
    if (fits(mid)) {
      lo = mid;
    } else {
      hi = mid - 1;
    }
  }
  return lo;
}

const char* to_string(BeDecodeAction a) {
  switch (a) {
    case BeDecodeAction::kOnGpu: return "on_gpu";
    case BeDecodeAction::kOffloadCpu: return "offload_cpu";
    case BeDecodeAction::kSwapBackIn: return "swap_back_in";
  }
  return "?";
}

BeDecodeDecision be_decode_admit(std::int64_t l, bool on_gpu,
                                 const Loads& batch, const LatencyModelSet& m,
                                 const SloConfig& slo,
                                 std::int64_t gpu_kv_free) {
  BeDecodeDecision d;
  const auto lat = per_layer_latency(m, batch.c_pa,
                                     batch.c_da + static_cast<double>(l + 1),
                                     batch.g + 1, batch.n + 1);
  d.lhs_us = lat.compute;
  d.rhs_us = slo.reserved_budget_us() - lat.gamma;
  d.kv_ok = l + 1 <= gpu_kv_free;
  const bool fits = d.lhs_us <= d.rhs_us && d.kv_ok;
  if (!fits) {
    d.action = BeDecodeAction::kOffloadCpu;
  } else {
    d.action = on_gpu ? BeDecodeAction::kOnGpu : BeDecodeAction::kSwapBackIn;
  }
  return d;
}

namespace {

double layer_cost(const LatencyModelSet& m, const Loads& base,
                  std::int64_t n) {
  return per_layer_latency(m, base.c_pa, base.c_da, base.g, n).total();
}

// Largest x in [0, hi] with pred(x), assuming pred is monotone decreasing
// in x (true then false). Returns 0 when pred(1) fails.
template <typename Pred>
std::int64_t largest_fitting(std::int64_t hi, Pred&& pred) {
  if (hi <= 0 || !pred(1)) return 0;
  std::int64_t lo = 1;
  while (lo < hi) {
    const std::int64_t mid = lo + (hi - lo + 1) / 2;
    if (pred(mid)) {
      lo = mid;
    } else {
      hi = mid - 1;
    }
  }
  return lo;
}

}  // namespace

std::int64_t piggyback_layer_admit(std::int64_t layer, std::int64_t ready,
                                   const Loads& base, std::int64_t extra,
                                   const LatencyModelSet& m,
                                   const SloConfig& slo, std::int64_t cap) {
  const double budget = slo.reserved_budget_us();
  const bool carries = layer < slo.layers;
  return largest_fitting(std::min(ready, cap), [&](std::int64_t p) {
    if (layer_cost(m, base, base.n + extra + p) > budget) return false;
    return !carries || layer_cost(m, base, base.n + p) <= budget;
  });
}

std::vector<std::int64_t> piggyback_budget(
    const std::vector<std::int64_t>& ready, const Loads& base,
    std::int64_t starts, const LatencyModelSet& m, const SloConfig& slo,
    std::int64_t cap) {
  if (static_cast<std::int64_t>(ready.size()) != slo.layers) {
    throw InvalidInput("ready counts must cover every layer");
  }
  std::vector<std::int64_t> out(ready.size(), 0);
  std::int64_t carry = 0;
  for (std::size_t i = 0; i < ready.size(); ++i) {
    if (ready[i] < 0) throw InvalidInput("ready counts must be >= 0");
    const auto layer = static_cast<std::int64_t>(i) + 1;
    const std::int64_t extra = (layer == 1 ? starts : 0) + carry;
    out[i] = piggyback_layer_admit(layer, ready[i], base, extra, m, slo, cap);
    carry = out[i];
  }
  return out;
}

void to_json(nlohmann::json& j, const AuditRecord& r) {
  j = {{"kind", r.kind},       {"id", r.id},           {"lhs_us", r.lhs_us},
       {"rhs_us", r.rhs_us},   {"outcome", r.outcome}, {"value", r.value}};
}

bool BatchPlan::has_gpu_work() const {
  return !ls_decode.empty() || !ls_prefill.empty() || !be_prefill.empty() ||
         !be_decode_gpu.empty() || !cpu_starts.empty();
}

int distribute_offload(const KvView& kv, std::int64_t tokens) {
  const auto hosts = kv.host_capacity.size();
  if (hosts == 0) return -1;
  if (kv.host_committed[0] + tokens <= kv.host_capacity[0]) return 0;
  int best = -1;
  for (std::size_t h = 1; h < hosts; ++h) {
    if (kv.host_committed[h] + tokens > kv.host_capacity[h]) continue;
    if (best < 0 || kv.host_committed[h] < kv.host_committed[best]) {
      best = static_cast<int>(h);
    }
  }
  return best;
}

Scheduler::Scheduler(SchedulerConfig cfg, LatencyModelSet gpu_models)
    : cfg_(std::move(cfg)), models_(std::move(gpu_models)) {
  validate(cfg_.slo);
  if (cfg_.slo.layers != models_.layers) {
    throw InvalidConfig("SLO layer count differs from the model set");
  }
  if (cfg_.max_piggyback < 0) {
    throw InvalidConfig("max_piggyback must be >= 0");
  }
}

std::int64_t Scheduler::admit_piggyback(std::int64_t layer, std::int64_t ready,
                                        const Loads& base,
                                        std::int64_t extra) const {
  return piggyback_layer_admit(layer, ready, base, extra, models_, cfg_.slo,
                               cfg_.max_piggyback);
}

namespace {

template <typename T>
void fcfs(std::vector<T*>& v) {
  std::stable_sort(v.begin(), v.end(), [](const T* a, const T* b) {
    return std::tie(a->arrival, a->id) < std::tie(b->arrival, b->id);
  });
}

}  // namespace

BatchPlan Scheduler::plan(const PlanInput& in) const {
  const auto& slo = cfg_.slo;
  const auto& pol = cfg_.policy;
  const auto& m = models_;
  BatchPlan out;
  KvView kv = in.kv;
  auto audit = [&](const char* kind, RequestId id, double lhs, double rhs,
                   std::string outcome, std::int64_t value = 0) {
    if (cfg_.audit) {
      out.audit.push_back({kind, id, lhs, rhs, std::move(outcome), value});
    }
  };

  std::vector<PrefillCand> prefills = in.prefills;
  std::vector<DecodeCand> decodes = in.decodes;
  std::vector<char> prefill_gone(prefills.size() + in.ls_arrivals.size(), 0);
  std::vector<char> decode_gone(decodes.size(), 0);

  // 1. LS admission.
  SchedulerState st;
  for (const auto& r : prefills) {
    if (r.cls == ServiceClass::kLS) st.prefill.push_back({r.id, r.cls, r.l, r.p, r.arrival});
  }
  for (const auto& r : decodes) {
    if (r.loc == DecodeLoc::kGpu) st.decode.push_back({r.id, r.cls, r.l, r.arrival});
  }
  std::vector<const LsArrival*> arrivals;
  for (const auto& a : in.ls_arrivals) arrivals.push_back(&a);
  fcfs(arrivals);
  const bool admission_control = pol.kind == PolicyKind::kPiggyback ||
                                 pol.kind == PolicyKind::kGpuOnly;
  for (const auto* a : arrivals) {
    PrefillView v{a->id, ServiceClass::kLS, 0, a->p, a->arrival};
    if (admission_control) {
      const auto d = admit_ls(v, st, m, slo);
      audit("admit_ls", a->id, d.lhs_us, d.rhs_us, d.admit ? "admit" : "reject");
      if (!d.admit) {
        out.ls_rejected.push_back(a->id);
        continue;
      }
    } else {
      audit("admit_ls", a->id, 0.0, 0.0, "admit");
    }
    out.ls_admitted.push_back(a->id);
    st.prefill.push_back(v);
    PrefillCand c;
    c.id = a->id;
    c.cls = ServiceClass::kLS;
    c.arrival = a->arrival;
    c.p = a->p;
    c.o = a->o;
    prefills.push_back(c);
  }

  std::vector<PrefillCand*> ls_pre, be_pre;
  for (auto& r : prefills) {
    (r.cls == ServiceClass::kLS ? ls_pre : be_pre).push_back(&r);
  }
  fcfs(ls_pre);
  fcfs(be_pre);
  std::vector<DecodeCand*> ls_dec, be_dec;
  for (auto& r : decodes) {
    (r.cls == ServiceClass::kLS ? ls_dec : be_dec).push_back(&r);
  }
  fcfs(ls_dec);
  fcfs(be_dec);

  auto prefill_index = [&](const PrefillCand* r) {
    return static_cast<std::size_t>(r - prefills.data());
  };
  auto decode_index = [&](const DecodeCand* r) {
    return static_cast<std::size_t>(r - decodes.data());
  };

  // 2. GPU KV for admitted LS prefills, evicting BE work (latest first).
  auto evict_for = [&](std::int64_t need) {
    std::int64_t reclaimable = kv.gpu_free();
    for (auto* r : be_dec) {
      if (!decode_gone[decode_index(r)] && r->loc == DecodeLoc::kGpu) {
        reclaimable += r->gpu_footprint;
      }
    }
    for (auto* r : be_pre) {
      if (!prefill_gone[prefill_index(r)] && r->reserved) {
        reclaimable += r->gpu_footprint;
      }
    }
    if (reclaimable < need) return false;
    // Swaps first, then dropping prefills, and dropping decodes last since
    // they carry the most finished work.
    auto evict_decodes = [&](bool allow_drop) {
      for (auto it = be_dec.rbegin(); it != be_dec.rend() && kv.gpu_free() < need;
           ++it) {
        auto* r = *it;
        if (decode_gone[decode_index(r)] || r->loc != DecodeLoc::kGpu) continue;
        Eviction e{r->id, EvictKind::kDrop, -1};
        const std::int64_t host_need =
            pol.offload_enabled() ? r->l + r->remaining : r->l;
        const int host = distribute_offload(kv, host_need);
        if (host < 0 && !allow_drop) continue;
        if (host >= 0) {
          e.kind = pol.offload_enabled() ? EvictKind::kToCpu : EvictKind::kPark;
          e.host = host;
          kv.host_committed[host] += host_need;
        }
        kv.gpu_committed -= r->gpu_footprint;
        decode_gone[decode_index(r)] = 1;
        out.evictions.push_back(e);
        audit("evict", r->id, 0.0, 0.0,
              e.kind == EvictKind::kToCpu ? "to_cpu"
              : e.kind == EvictKind::kPark ? "park" : "drop",
              r->gpu_footprint);
      }
    };
    evict_decodes(false);
    for (auto it = be_pre.rbegin(); it != be_pre.rend() && kv.gpu_free() < need;
         ++it) {
      auto* r = *it;
      if (prefill_gone[prefill_index(r)] || !r->reserved) continue;
      kv.gpu_committed -= r->gpu_footprint;
      prefill_gone[prefill_index(r)] = 1;
      out.evictions.push_back({r->id, EvictKind::kDrop, -1});
      audit("evict", r->id, 0.0, 0.0, "drop", r->gpu_footprint);
    }
    evict_decodes(true);
    return kv.gpu_free() >= need;
  };

  for (auto* r : ls_pre) {
    if (r->reserved) continue;
    const std::int64_t need = r->p + r->o;
    if (kv.gpu_free() < need && !evict_for(need)) break;
    kv.gpu_committed += need;
    r->reserved = true;
    r->gpu_footprint = need;
    out.reserved.push_back(r->id);
    out.gpu_commit.emplace_back(r->id, need);
    audit("reserve", r->id, 0.0, 0.0, "ls", need);
  }

  // 3. LS decodes always run.
  Loads loads;
  for (auto* r : ls_dec) {
    if (r->loc != DecodeLoc::kGpu) continue;
    out.ls_decode.push_back(r->id);
    loads.c_da += static_cast<double>(r->l + 1);
    loads.g += 1;
    loads.n += 1;
  }

  // 4. Prefill chunks.
  std::int64_t fixed_left = pol.headroom_chunk_tokens;
  auto size_chunk = [&](PrefillCand* r, double budget) -> std::int64_t {
    if (!pol.latency_checks()) return std::min(r->p - r->l, fixed_left);
    return chunk_prefill_budget(r->l, r->p, loads, m, budget, r->p - r->l);
  };
  auto take_chunk = [&](PrefillCand* r, std::int64_t q, double budget,
                        std::vector<ChunkPlan>& dst) {
    if (pol.latency_checks()) {
      audit("chunk", r->id, chunk_cost_us(m, loads, r->l, std::max<std::int64_t>(q, 1)),
            budget, q > 0 ? "chunk" : "defer", q);
    } else {
      audit("chunk", r->id, 0.0, 0.0, q > 0 ? "chunk" : "defer", q);
    }
    if (q <= 0) return;
    if (!pol.latency_checks()) fixed_left -= q;
    dst.push_back({r->id, r->l, q});
    loads.c_pa += pairwise_units(r->l, q);
    loads.n += q;
  };
  const double ls_budget = chunk_budget_us(slo, ServiceClass::kLS, false);
  for (auto* r : ls_pre) {
    if (r->reserved) take_chunk(r, size_chunk(r, ls_budget), ls_budget, out.ls_prefill);
  }
  const double be_budget =
      chunk_budget_us(slo, ServiceClass::kBE, in.output_queue_nonempty);
  const std::int64_t headroom_cap = static_cast<std::int64_t>(
      std::floor((1.0 - pol.headroom_frac) *
                 static_cast<double>(kv.gpu_capacity)));
  for (auto* r : be_pre) {
    if (prefill_gone[prefill_index(r)]) continue;
    const std::int64_t q = size_chunk(r, be_budget);
    if (!r->reserved) {
      // KV is claimed only by prefills that make progress now.
      if (q <= 0) break;
      const std::int64_t need =
          pol.offload_enabled() ? r->p - r->l : r->p - r->l + r->o;
      bool ok = kv.gpu_free() >= need;
      if (pol.kind == PolicyKind::kHeadroom) {
        ok = ok && kv.gpu_committed + need <= headroom_cap;
      }
      if (!ok) break;
      kv.gpu_committed += need;
      r->reserved = true;
      r->gpu_footprint = need;
      out.reserved.push_back(r->id);
      out.gpu_commit.emplace_back(r->id, need);
      audit("reserve", r->id, 0.0, 0.0, "be", need);
    }
    take_chunk(r, q, be_budget, out.be_prefill);
  }

  // 5. BE decodes.
  Loads check = loads;  // includes swap-in shadows
  std::vector<DecodeCand*> start_cands;
  for (auto* r : be_dec) {
    if (decode_gone[decode_index(r)]) continue;
    switch (r->loc) {
      case DecodeLoc::kGpu: {
        if (!pol.latency_checks()) {
          out.be_decode_gpu.push_back(r->id);
          break;
        }
        const std::int64_t free_with_own =
            pol.offload_enabled() ? kv.gpu_free() + r->l : r->l + 1;
        const auto d = be_decode_admit(r->l, true, check, m, slo, free_with_own);
        audit("be_decode", r->id, d.lhs_us, d.rhs_us, to_string(d.action));
        if (d.action == BeDecodeAction::kOnGpu) {
          out.be_decode_gpu.push_back(r->id);
          if (pol.offload_enabled()) {
            const std::int64_t growth = r->l + 1 - r->gpu_footprint;
            if (growth > 0) {
              kv.gpu_committed += growth;
              out.gpu_commit.emplace_back(r->id, growth);
            }
          }
        } else if (pol.offload_enabled()) {
          const std::int64_t host_need = r->l + r->remaining;
          const int host = distribute_offload(kv, host_need);
          audit("offload", r->id, 0.0, 0.0, host >= 0 ? "to_cpu" : "wait", host);
          if (host >= 0) {
            kv.host_committed[host] += host_need;
            kv.gpu_committed -= r->gpu_footprint;
            out.be_offload.push_back({r->id, host});
          }
          continue;  // not in this iteration's GPU batch
        } else {
          continue;  // waits on the GPU
        }
        break;
      }
      case DecodeLoc::kCpuBoundary:
      case DecodeLoc::kCpuMidToken: {
        const bool boundary = r->loc == DecodeLoc::kCpuBoundary;
        if (r->swap_in_eligible) {
          const std::int64_t size = boundary ? r->l : r->l + 1;
          const auto d = be_decode_admit(size, false, check, m, slo, kv.gpu_free());
          audit("be_decode", r->id, d.lhs_us, d.rhs_us, to_string(d.action));
          if (d.action == BeDecodeAction::kSwapBackIn) {
            kv.gpu_committed += size;
            out.swap_in.push_back(r->id);
            out.swap_in_commit.emplace_back(r->id, size);
            check.c_da += static_cast<double>(size + 1);
            check.g += 1;
            check.n += 1;
            break;
          }
        }
        if (boundary) start_cands.push_back(r);
        break;
      }
      case DecodeLoc::kParked: {
        const std::int64_t size = r->l + r->remaining;
        if (kv.gpu_free() >= size) {
          kv.gpu_committed += size;
          out.swap_in.push_back(r->id);
          out.swap_in_commit.emplace_back(r->id, size);
          audit("resume", r->id, 0.0, 0.0, "swap_back_in", size);
        }
        break;
      }
    }
    if (r->loc == DecodeLoc::kGpu && !out.be_decode_gpu.empty() &&
        out.be_decode_gpu.back() == r->id) {
      loads.c_da += static_cast<double>(r->l + 1);
      loads.g += 1;
      loads.n += 1;
      check.c_da += static_cast<double>(r->l + 1);
      check.g += 1;
      check.n += 1;
    }
  }

  // 6. CPU-resident tokens starting at layer 1.
  if (pol.offload_enabled() && !start_cands.empty()) {
    const double budget = slo.reserved_budget_us();
    const auto s = largest_fitting(
        std::min<std::int64_t>(static_cast<std::int64_t>(start_cands.size()),
                               cfg_.max_piggyback),
        [&](std::int64_t k) {
          return layer_cost(m, loads, loads.n + k) <= budget;
        });
    for (std::int64_t i = 0; i < s; ++i) out.cpu_starts.push_back(start_cands[i]->id);
    audit("start", 0, s > 0 ? layer_cost(m, loads, loads.n + s) : 0.0, budget,
          "start", s);
  }

  out.loads = loads;
  out.kv_after = kv;
  return out;
}

}  // namespace hserve
