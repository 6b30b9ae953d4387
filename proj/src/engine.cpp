#include "hserve/engine.h"

#include <algorithm>
#include <charconv>
#include <deque>
#include <ostream>
#include <queue>
#include <tuple>

#include "hserve/error.h"

namespace hserve {
namespace {

enum class EvKind : std::uint8_t {
  kArrival,       // RequestArrival
  kLayerDone,     // GpuLayerDone
  kQkvArrive,     // TransferDone, GPU -> host
  kCpuDone,       // CpuAttnDone
  kResultArrive,  // TransferDone, host -> GPU
  kSwapDone,
};

struct Event {
  double t = 0.0;
  std::uint64_t seq = 0;
  EvKind kind = EvKind::kArrival;
  std::uint64_t ref = 0;  // request index or batch id
  bool flag = false;      // swap direction: true = into the GPU
};

struct EventAfter {
  bool operator()(const Event& a, const Event& b) const {
    return std::tie(a.t, a.seq) > std::tie(b.t, b.seq);
  }
};

enum class St : std::uint8_t {
  kNotArrived,
  kAwaitAdmit,
  kPrefill,
  kGpuDecode,
  kSwapOut,
  kCpu,
  kSwapIn,
  kParking,
  kParked,
  kDone,
  kRejected,
};

struct Req {
  RequestSpec spec;
  St st = St::kNotArrived;
  std::int64_t l = 0;       // prefill progress
  std::int64_t target = 0;  // prefill length (prompt, or context on recompute)
  bool recompute = false;
  bool reserved = false;
  std::int64_t ctx = 0;  // tokens with KV written
  std::int64_t generated = 0;
  std::int64_t gpu_fp = 0;  // committed GPU KV
  int host = -1;
  std::int64_t host_fp = 0;  // committed host KV
  // offloaded token progress
  bool token_active = false;
  bool swap_in_pending = false;
  bool swap_in_started = false;
  std::int64_t tokens_since_swap_out = 0;
  std::int64_t passes = 0;  // GPU or piggyback passes begun
  TraceVerifier verifier;
  std::vector<TraceEntry> trace;
  RequestRecord rec;

  std::int64_t remaining() const { return spec.output_len - generated; }
};

struct Item {
  std::size_t req = 0;
  std::int64_t layer = 1;
};

struct Batch {
  int host = 0;
  std::vector<Item> items;
};

// Line-oriented JSON writer for the event log; also folds each line into an
// FNV-1a digest.
class EventLog {
 public:
  EventLog(std::ostream* os, bool digest) : os_(os), on_(os || digest) {}
  bool on() const { return on_; }

  EventLog& begin(double t, const char* kind) {
    buf_.clear();
    buf_ += "{\"t\":";
    num(t);
    buf_ += ",\"ev\":\"";
    buf_ += kind;
    buf_ += '"';
    return *this;
  }
  EventLog& f(const char* k, std::int64_t v) {
    key(k);
    char tmp[24];
    auto r = std::to_chars(tmp, tmp + sizeof tmp, v);
    buf_.append(tmp, r.ptr);
    return *this;
  }
  EventLog& f(const char* k, std::uint64_t v) {
    key(k);
    char tmp[24];
    auto r = std::to_chars(tmp, tmp + sizeof tmp, v);
    buf_.append(tmp, r.ptr);
    return *this;
  }
  EventLog& f(const char* k, int v) { return f(k, std::int64_t{v}); }
  EventLog& f(const char* k, bool v) {
    key(k);
    buf_ += v ? "true" : "false";
    return *this;
  }
  EventLog& fd(const char* k, double v) {
    key(k);
    num(v);
    return *this;
  }
  EventLog& fs(const char* k, const char* v) {
    key(k);
    buf_ += '"';
    buf_ += v;
    buf_ += '"';
    return *this;
  }
  void end() {
    buf_ += "}\n";
    for (unsigned char c : buf_) {
      hash_ ^= c;
      hash_ *= 1099511628211ull;
    }
    ++lines_;
    if (os_) os_->write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  }
  std::uint64_t digest() const { return hash_; }
  std::int64_t lines() const { return lines_; }

 private:
  void key(const char* k) {
    buf_ += ",\"";
    buf_ += k;
    buf_ += "\":";
  }
  void num(double v) {
    char tmp[32];
    auto r = std::to_chars(tmp, tmp + sizeof tmp, v);
    buf_.append(tmp, r.ptr);
  }

  std::ostream* os_;
  bool on_;
  std::string buf_;
  std::uint64_t hash_ = 14695981039346656037ull;
  std::int64_t lines_ = 0;
};

class Engine {
 public:
  Engine(const ProfileSet& profiles, const ModelsDoc& models,
         const std::vector<RequestSpec>& requests, const EngineConfig& cfg);
  RunResult run();

 private:
  // events
  void push(double t, EvKind kind, std::uint64_t ref, bool flag = false);
  void on_arrival(std::size_t i);
  void on_layer_done();
  void on_qkv_arrive(std::uint64_t batch);
  void on_cpu_done(std::uint64_t batch);
  void on_result_arrive(std::uint64_t batch);
  void on_swap_done(std::size_t i, bool into_gpu);

  // GPU stream
  void try_start_iteration();
  PlanInput build_plan_input();
  void apply_plan(const BatchPlan& plan);
  void run_layers();
  void end_iteration();
  void go_idle();

  // helpers
  void start_swap_out(std::size_t i, int host, std::int64_t host_need,
                      bool park);
  void start_swap_in(std::size_t i, std::int64_t tokens, bool deferred = false);
  void start_cpu(int host);
  double link_us(int host, double tokens);
  void trace(std::size_t i, std::int64_t layer, TraceModule m, bool cpu = false);
  void gpu_pass_layer(std::size_t i, std::int64_t layer);
  void complete_token(std::size_t i, double t);
  void finish(std::size_t i, double t);
  void fault(std::size_t i, std::int64_t layer, const std::string& what);
  void check_invariants() const;
  std::size_t index_of(RequestId id) const;

  const ProfileSet& prof_;
  const EngineConfig& cfg_;
  Scheduler sched_;
  std::int64_t d_;
  NoiseSource gpu_noise_, cpu_noise_, link_noise_;

  std::vector<Req> reqs_;
  std::unordered_map<RequestId, std::size_t> index_;
  std::vector<std::size_t> active_;

  std::priority_queue<Event, std::vector<Event>, EventAfter> evq_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;

  KvView kv_;
  ResidualStore residuals_;
  bool fault_fired_ = false;

  struct Host {
    std::deque<Item> in_q;
    bool busy = false;
  };
  std::vector<Host> hosts_;
  std::unordered_map<std::uint64_t, Batch> batches_;
  std::uint64_t next_batch_ = 0;
  std::vector<std::deque<std::size_t>> out_q_;  // index = layer
  std::int64_t out_q_total_ = 0;
  std::int64_t tokens_in_flight_ = 0;  // offloaded tokens begun, not merged

  // current iteration
  bool gpu_busy_ = false;
  std::int64_t iter_ = 0;
  std::int64_t layer_ = 0;
  double iter_work_ = 0.0;
  double layer_dur_ = 0.0;
  Loads base_;
  std::vector<std::size_t> pass_reqs_;  // full GPU passes (decode tokens)
  std::vector<std::pair<std::size_t, std::int64_t>> chunks_;
  std::vector<std::size_t> starts_;
  std::vector<std::size_t> carry_;
  std::vector<std::size_t> finishing_;  // merged at the last layer

  EventLog log_;
  RunResult res_;
  std::map<std::string, double>& ctr_;
};

Engine::Engine(const ProfileSet& profiles, const ModelsDoc& models,
               const std::vector<RequestSpec>& requests,
               const EngineConfig& cfg)
    : prof_(profiles),
      cfg_(cfg),
      sched_(
          [&] {
            auto s = cfg.sched;
            s.audit = cfg.audit != nullptr;
            return s;
          }(),
          models.gpu),
      d_(profiles.cluster.layers),
      gpu_noise_(derive_seed(cfg.seed, 0xE1)),
      cpu_noise_(derive_seed(cfg.seed, 0xE2)),
      link_noise_(derive_seed(cfg.seed, 0xE3)),
      log_(cfg.events, cfg.digest_events),
      ctr_(res_.counters) {
  validate(profiles.cluster);
  if (models.gpu.layers != d_) {
    throw InvalidConfig("model document layer count differs from the cluster");
  }
  if (d_ > kMaxTraceLayer) throw InvalidConfig("too many layers");
  if (!(cfg.horizon_s > 0)) throw InvalidConfig("horizon must be positive");
  const auto& c = profiles.cluster;
  kv_.gpu_capacity = c.gpu_kv_capacity;
  kv_.host_capacity.assign(static_cast<std::size_t>(c.cpu_hosts),
                           c.cpu_mem_tokens);
  kv_.host_committed.assign(static_cast<std::size_t>(c.cpu_hosts), 0);
  hosts_.resize(static_cast<std::size_t>(c.cpu_hosts));
  out_q_.resize(static_cast<std::size_t>(d_ + 1));

  const bool offload = cfg.sched.policy.offload_enabled();
  reqs_.reserve(requests.size());
  for (const auto& s : requests) {
    if (s.prompt_len < 1 || s.output_len < 1) {
      throw ScenarioError("request " + std::to_string(s.id) +
                          " needs prompt and output lengths >= 1");
    }
    const std::int64_t need = s.cls == ServiceClass::kLS || !offload
                                  ? s.prompt_len + s.output_len
                                  : s.prompt_len + 1;
    if (need > c.gpu_kv_capacity) {
      throw ScenarioError("request " + std::to_string(s.id) + " needs " +
                          std::to_string(need) +
                          " KV tokens, more than the GPU capacity of " +
                          std::to_string(c.gpu_kv_capacity));
    }
    if (index_.count(s.id)) {
      throw ScenarioError("duplicate request id " + std::to_string(s.id));
    }
    Req r;
    r.spec = s;
    r.target = s.prompt_len;
    r.verifier = TraceVerifier(d_, s.id);
    r.rec.id = s.id;
    r.rec.cls = s.cls;
    r.rec.prompt_len = s.prompt_len;
    r.rec.output_len = s.output_len;
    r.rec.arrival = s.arrival_time;
    if (s.cls == ServiceClass::kBE) r.rec.admission = Admission::kAdmitted;
    index_[s.id] = reqs_.size();
    reqs_.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < reqs_.size(); ++i) {
    push(reqs_[i].spec.arrival_time, EvKind::kArrival, i);
  }
}

std::size_t Engine::index_of(RequestId id) const { return index_.at(id); }

void Engine::push(double t, EvKind kind, std::uint64_t ref, bool flag) {
  evq_.push({t, seq_++, kind, ref, flag});
}

RunResult Engine::run() {
  while (!evq_.empty()) {
    const Event ev = evq_.top();
    if (ev.t > cfg_.horizon_s) break;
    evq_.pop();
    now_ = ev.t;
    switch (ev.kind) {
      case EvKind::kArrival: on_arrival(ev.ref); break;
      case EvKind::kLayerDone: on_layer_done(); break;
      case EvKind::kQkvArrive: on_qkv_arrive(ev.ref); break;
      case EvKind::kCpuDone: on_cpu_done(ev.ref); break;
      case EvKind::kResultArrive: on_result_arrive(ev.ref); break;
      case EvKind::kSwapDone: on_swap_done(ev.ref, ev.flag); break;
    }
    if (cfg_.check_invariants) check_invariants();
  }

  ctr_["iterations"] = double(iter_);
  ctr_["residual_puts"] = double(residuals_.puts());
  ctr_["residual_gets"] = double(residuals_.gets());
  ctr_["residual_live"] = double(residuals_.size());
  ctr_["integrity_faults"] = double(res_.faults.size());
  ctr_["events_pending"] = double(evq_.size());
  std::int64_t tokens = 0;
  for (auto& r : reqs_) {
    tokens += static_cast<std::int64_t>(r.rec.token_times.size());
    if (cfg_.verify_traces && r.spec.cls == ServiceClass::kBE) {
      if (r.verifier.divergence()) res_.divergences.push_back(*r.verifier.divergence());
    }
    if (cfg_.keep_traces) res_.traces.push_back({r.spec.id, std::move(r.trace)});
    res_.records.push_back(std::move(r.rec));
  }
  ctr_["tokens"] = double(tokens);
  ctr_["trace_divergences"] = double(res_.divergences.size());
  std::sort(res_.records.begin(), res_.records.end(),
            [](const RequestRecord& a, const RequestRecord& b) { return a.id < b.id; });
  res_.event_digest = log_.digest();
  res_.event_lines = log_.lines();
  return std::move(res_);
}

// --- arrivals and admission -------------------------------------------------------

void Engine::on_arrival(std::size_t i) {
  auto& r = reqs_[i];
  r.st = r.spec.cls == ServiceClass::kLS ? St::kAwaitAdmit : St::kPrefill;
  active_.push_back(i);
  if (log_.on()) {
    log_.begin(now_, "RequestArrival").f("id", r.spec.id)
        .fs("cls", to_string(r.spec.cls)).f("p", r.spec.prompt_len)
        .f("o", r.spec.output_len).end();
  }
  try_start_iteration();
}

PlanInput Engine::build_plan_input() {
  PlanInput in;
  in.kv = kv_;
  in.output_queue_nonempty = tokens_in_flight_ > 0;
  std::size_t keep = 0;
  for (std::size_t k = 0; k < active_.size(); ++k) {
    const std::size_t i = active_[k];
    auto& r = reqs_[i];
    if (r.st == St::kDone || r.st == St::kRejected) continue;
    active_[keep++] = i;
    const auto& s = r.spec;
    switch (r.st) {
      case St::kAwaitAdmit:
        in.ls_arrivals.push_back({s.id, s.arrival_time, s.prompt_len, s.output_len});
        break;
      case St::kPrefill: {
        PrefillCand c;
        c.id = s.id;
        c.cls = s.cls;
        c.arrival = s.arrival_time;
        c.l = r.l;
        c.p = r.target;
        c.o = r.remaining();
        c.reserved = r.reserved;
        c.gpu_footprint = r.gpu_fp;
        in.prefills.push_back(c);
        break;
      }
      case St::kGpuDecode:
      case St::kCpu:
      case St::kParked: {
        if (r.st == St::kCpu && r.swap_in_pending) break;
        DecodeCand c;
        c.id = s.id;
        c.cls = s.cls;
        c.arrival = s.arrival_time;
        c.l = r.ctx;
        c.remaining = r.remaining();
        c.host = r.host;
        c.gpu_footprint = r.gpu_fp;
        c.swap_in_eligible = !cfg_.swap_in_delay || r.tokens_since_swap_out >= 1;
        c.loc = r.st == St::kGpuDecode ? DecodeLoc::kGpu
                : r.st == St::kParked  ? DecodeLoc::kParked
                : r.token_active       ? DecodeLoc::kCpuMidToken
                                       : DecodeLoc::kCpuBoundary;
        in.decodes.push_back(c);
        break;
      }
      default:
        break;
    }
  }
  active_.resize(keep);
  return in;
}

void Engine::apply_plan(const BatchPlan& plan) {
  for (auto id : plan.ls_admitted) {
    auto& r = reqs_[index_of(id)];
    r.st = St::kPrefill;
    r.rec.admission = Admission::kAdmitted;
    if (log_.on()) log_.begin(now_, "admit").f("id", id).f("ok", true).end();
  }
  for (auto id : plan.ls_rejected) {
    auto& r = reqs_[index_of(id)];
    r.st = St::kRejected;
    r.rec.admission = Admission::kRejected;
    if (log_.on()) log_.begin(now_, "admit").f("id", id).f("ok", false).end();
  }
  for (auto id : plan.reserved) reqs_[index_of(id)].reserved = true;
  for (auto [id, n] : plan.gpu_commit) reqs_[index_of(id)].gpu_fp += n;

  for (const auto& e : plan.evictions) {
    const std::size_t i = index_of(e.id);
    auto& r = reqs_[i];
    ctr_["evictions"] += 1;
    if (e.kind == EvictKind::kDrop) {
      if (r.st == St::kGpuDecode) {
        r.target = r.ctx + 1;  // prompt plus every generated token
        r.recompute = true;
        r.rec.recomputes += 1;
        r.st = St::kPrefill;
      }
      r.l = 0;
      r.reserved = false;
      r.gpu_fp = 0;
      ctr_["drops"] += 1;
      if (log_.on()) log_.begin(now_, "evict").f("id", e.id).fs("kind", "drop").end();
    } else {
      const bool park = e.kind == EvictKind::kPark;
      start_swap_out(i, e.host, park ? r.ctx : r.ctx + r.remaining(), park);
    }
  }
  for (const auto& o : plan.be_offload) {
    const std::size_t i = index_of(o.id);
    start_swap_out(i, o.host, reqs_[i].ctx + reqs_[i].remaining(), false);
  }
  for (auto [id, size] : plan.swap_in_commit) {
    const std::size_t i = index_of(id);
    auto& r = reqs_[i];
    r.gpu_fp = size;
    if (r.st == St::kCpu && r.token_active) {
      r.swap_in_pending = true;
      r.swap_in_started = false;
    } else {
      r.st = St::kSwapIn;
      start_swap_in(i, r.ctx);
    }
  }
  for (auto id : plan.cpu_starts) {
    const std::size_t i = index_of(id);
    auto& r = reqs_[i];
    r.token_active = true;
    ++tokens_in_flight_;
    starts_.push_back(i);
  }
  kv_ = plan.kv_after;

  if (cfg_.audit) {
    for (const auto& a : plan.audit) {
      nlohmann::json j = a;
      j["t"] = now_;
      *cfg_.audit << j.dump() << '\n';
    }
  }
}

// --- GPU stream --------------------------------------------------------------------

void Engine::try_start_iteration() {
  if (gpu_busy_) return;
  const auto plan = sched_.plan(build_plan_input());
  starts_.clear();
  apply_plan(plan);
  if (!plan.has_gpu_work() && out_q_total_ == 0) {
    go_idle();
    return;
  }
  gpu_busy_ = true;
  ++iter_;
  iter_work_ = 0.0;
  base_ = plan.loads;
  pass_reqs_.clear();
  chunks_.clear();
  carry_.clear();
  for (auto id : plan.ls_decode) pass_reqs_.push_back(index_of(id));
  for (auto id : plan.be_decode_gpu) pass_reqs_.push_back(index_of(id));
  for (const auto& c : plan.ls_prefill) chunks_.emplace_back(index_of(c.id), c.q);
  for (const auto& c : plan.be_prefill) chunks_.emplace_back(index_of(c.id), c.q);
  for (auto i : pass_reqs_) ++reqs_[i].passes;
  for (auto& [i, q] : chunks_) ++reqs_[i].passes;
  for (auto i : starts_) ++reqs_[i].passes;
  if (log_.on()) {
    log_.begin(now_, "iteration").f("iter", iter_)
        .f("ls_decode", std::int64_t(plan.ls_decode.size()))
        .f("ls_chunks", std::int64_t(plan.ls_prefill.size()))
        .f("be_chunks", std::int64_t(plan.be_prefill.size()))
        .f("be_gpu", std::int64_t(plan.be_decode_gpu.size()))
        .f("cpu_starts", std::int64_t(starts_.size()))
        .f("n", base_.n).end();
  }
  layer_ = 1;
  run_layers();
}

void Engine::go_idle() {
  gpu_busy_ = false;
  // Work the GPU could run right now without any policy decision.
  bool schedulable = false;
  for (auto i : active_) {
    const auto& r = reqs_[i];
    if (r.spec.cls == ServiceClass::kLS &&
        (r.st == St::kGpuDecode || (r.st == St::kPrefill && r.reserved))) {
      schedulable = true;
    }
    if (r.st == St::kPrefill && r.reserved && r.l < r.target) schedulable = true;
  }
  for (std::int64_t l = 1; l <= d_ && !schedulable; ++l) {
    const auto ready = static_cast<std::int64_t>(out_q_[l].size());
    if (ready > 0 && sched_.admit_piggyback(l, ready, Loads{}, 0) > 0) {
      schedulable = true;
    }
  }
  ctr_["idle_intervals"] += 1;
  if (schedulable) ctr_["blocked_idle"] += 1;
  if (log_.on()) log_.begin(now_, "idle").f("schedulable", schedulable).end();
}

void Engine::gpu_pass_layer(std::size_t i, std::int64_t layer) {
  for (auto m : {TraceModule::kQkv, TraceModule::kAttn, TraceModule::kProj,
                 TraceModule::kAdd, TraceModule::kMlp, TraceModule::kAdd}) {
    trace(i, layer, m);
  }
}

void Engine::run_layers() {
  const auto& gp = prof_.gpu;
  const auto& c = prof_.cluster;
  const bool offload = cfg_.sched.policy.offload_enabled();
  while (layer_ <= d_) {
    const std::int64_t l = layer_;
    auto& oq = out_q_[static_cast<std::size_t>(l)];
    std::vector<std::size_t> emit = carry_;
    if (l == 1) emit.insert(emit.end(), starts_.begin(), starts_.end());
    const auto extra = static_cast<std::int64_t>(emit.size());
    const auto ready = static_cast<std::int64_t>(oq.size());
    const std::int64_t p =
        offload && ready > 0 ? sched_.admit_piggyback(l, ready, base_, extra) : 0;
    const std::int64_t n = base_.n + extra + p;

    double dense = 0, pa = 0, da = 0, comm = 0;
    if (n > 0) dense = probe_dense(gp, n, &gpu_noise_);
    if (!chunks_.empty()) {
      pa = probe_attention(gp, AttnPhase::kPrefill, base_.c_pa, 0, &gpu_noise_);
    }
    if (base_.g > 0) {
      da = probe_attention(gp, AttnPhase::kDecode, base_.c_da, base_.g, &gpu_noise_);
    }
    if (n > 0 && c.tp_degree > 1) {
      comm += probe_link(c.tp_comm, double(n), &gpu_noise_, gp.noise_rel);
    }
    if (n > 0 && c.pp_degree > 1) {
      comm += probe_link(c.pp_comm, double(n), &gpu_noise_, gp.noise_rel) *
              double(c.pp_degree - 1) / double(d_);
    }
    const double over = piggyback_overhead_us(c, p, extra);
    const double dur_us = dense + pa + da + comm + over;
    const double dur = dur_us / 1e6;

    for (auto i : pass_reqs_) gpu_pass_layer(i, l);
    for (auto& ch : chunks_) gpu_pass_layer(ch.first, l);

    // Offloaded q/k/v: residual saved, QKV on the GPU, then shipped per host.
    std::map<int, std::vector<Item>> per_host;
    for (auto i : emit) {
      auto& r = reqs_[i];
      trace(i, l, TraceModule::kPut);
      const bool drop = cfg_.fault && !fault_fired_ &&
                        cfg_.fault->id == r.spec.id && cfg_.fault->layer == l;
      if (drop) {
        fault_fired_ = true;
      } else {
        try {
          residuals_.put(r.spec.id, l, 1);
        } catch (const IntegrityFault& e) {
          fault(i, l, e.what());
        }
      }
      trace(i, l, TraceModule::kQkv);
      per_host[r.host].push_back({i, l});
    }
    const double emit_at = now_ + c.qkv_fraction * dense / 1e6;
    for (auto& [h, items] : per_host) {
      const double t = emit_at + link_us(h, c.activation_token_equiv *
                                                double(items.size())) / 1e6;
      const auto id = next_batch_++;
      ctr_["qkv_transfers"] += 1;
      batches_[id] = Batch{h, std::move(items)};
      push(t, EvKind::kQkvArrive, id);
    }

    // Piggybacked results merge at this layer's projection.
    std::vector<std::size_t> next_carry;
    for (std::int64_t k = 0; k < p; ++k) {
      const std::size_t i = oq.front();
      oq.pop_front();
      --out_q_total_;
      auto& r = reqs_[i];
      try {
        residuals_.get(r.spec.id, l);
        trace(i, l, TraceModule::kGet);
      } catch (const IntegrityFault& e) {
        trace(i, l, TraceModule::kGetMissing);
        fault(i, l, e.what());
      }
      for (auto m : {TraceModule::kProj, TraceModule::kAdd, TraceModule::kMlp,
                     TraceModule::kAdd}) {
        trace(i, l, m);
      }
      if (l < d_) next_carry.push_back(i);
      else finishing_.push_back(i);
    }
    ctr_["queue_out"] += double(p);
    carry_ = std::move(next_carry);

    if (cfg_.record_layer_starts && dur > 0) {
      res_.layer_runs.push_back({iter_, l, now_, dur, n, p});
    }
    if (log_.on() && dur > 0) {
      log_.begin(now_, "GpuLayerStart").f("iter", iter_).f("layer", l)
          .fd("dur", dur).f("n", n).f("p", p).f("e", extra).end();
    }
    iter_work_ += dur;
    layer_dur_ = dur;
    if (dur > 0) {
      push(now_ + dur, EvKind::kLayerDone, 0);
      return;
    }
    on_layer_done();
    return;
  }
}

void Engine::on_layer_done() {
  if (layer_ == d_) {
    for (auto i : finishing_) complete_token(i, now_);
    finishing_.clear();
  }
  if (log_.on() && layer_dur_ > 0) {
    log_.begin(now_, "GpuLayerDone").f("iter", iter_).f("layer", layer_).end();
  }
  ++layer_;
  if (layer_ <= d_) {
    run_layers();
  } else {
    end_iteration();
  }
}

void Engine::end_iteration() {
  ctr_["gpu_busy_s"] += iter_work_;
  for (auto i : pass_reqs_) {
    auto& r = reqs_[i];
    r.ctx += 1;
    r.generated += 1;
    r.rec.token_times.push_back(now_);
    if (log_.on()) log_.begin(now_, "token").f("id", r.spec.id).f("k", r.generated).end();
    if (r.generated >= r.spec.output_len) finish(i, now_);
  }
  for (auto [i, q] : chunks_) {
    auto& r = reqs_[i];
    r.l += q;
    if (r.l < r.target) continue;
    r.ctx = r.target;
    r.generated += 1;
    if (!r.recompute) r.rec.prefill_counted = true;
    r.recompute = false;
    r.reserved = false;
    r.rec.token_times.push_back(now_);
    if (log_.on()) log_.begin(now_, "token").f("id", r.spec.id).f("k", r.generated).end();
    if (r.generated >= r.spec.output_len) {
      finish(i, now_);
    } else {
      r.st = St::kGpuDecode;
    }
  }
  const bool worked = iter_work_ > 0;
  gpu_busy_ = false;
  pass_reqs_.clear();
  chunks_.clear();
  starts_.clear();
  if (worked) {
    try_start_iteration();
  } else {
    go_idle();
  }
}

// --- CPU hosts and transfers --------------------------------------------------------

double Engine::link_us(int host, double tokens) {
  const auto& c = prof_.cluster;
  return probe_link(host == 0 ? c.pcie : c.network, tokens, &link_noise_,
                    prof_.gpu.noise_rel);
}

void Engine::on_qkv_arrive(std::uint64_t id) {
  auto node = batches_.extract(id);
  Batch& b = node.mapped();
  auto& h = hosts_[static_cast<std::size_t>(b.host)];
  for (const auto& it : b.items) h.in_q.push_back(it);
  ctr_["queue_in"] += double(b.items.size());
  if (log_.on()) {
    log_.begin(now_, "TransferDone").fs("dir", "to_host").f("host", b.host)
        .f("items", std::int64_t(b.items.size())).end();
  }
  if (!h.busy) start_cpu(b.host);
}

void Engine::start_cpu(int host) {
  auto& h = hosts_[static_cast<std::size_t>(host)];
  Batch b{host, {}};
  double c_load = 0.0;
  while (!h.in_q.empty()) {
    const Item it = h.in_q.front();
    h.in_q.pop_front();
    c_load += double(reqs_[it.req].ctx + 1);
    b.items.push_back(it);
  }
  const double dur_us =
      probe_attention(prof_.cpu, AttnPhase::kDecode, c_load,
                      std::int64_t(b.items.size()), &cpu_noise_) *
      cpu_core_scale(prof_.cluster);
  h.busy = true;
  ctr_["cpu_busy_s"] += dur_us / 1e6;
  const auto id = next_batch_++;
  batches_[id] = std::move(b);
  push(now_ + dur_us / 1e6, EvKind::kCpuDone, id);
}

void Engine::on_cpu_done(std::uint64_t id) {
  auto node = batches_.extract(id);
  Batch b = std::move(node.mapped());
  for (const auto& it : b.items) {
    trace(it.req, it.layer, TraceModule::kAttn, true);
  }
  if (log_.on()) {
    log_.begin(now_, "CpuAttnDone").f("host", b.host)
        .f("items", std::int64_t(b.items.size())).end();
  }
  const double t =
      now_ + link_us(b.host, prof_.cluster.activation_token_equiv *
                                 double(b.items.size())) / 1e6;
  const int host = b.host;
  const auto rid = next_batch_++;
  batches_[rid] = std::move(b);
  push(t, EvKind::kResultArrive, rid);
  auto& h = hosts_[static_cast<std::size_t>(host)];
  h.busy = false;
  if (!h.in_q.empty()) start_cpu(host);
}

void Engine::on_result_arrive(std::uint64_t id) {
  auto node = batches_.extract(id);
  const Batch& b = node.mapped();
  for (const auto& it : b.items) {
    out_q_[static_cast<std::size_t>(it.layer)].push_back(it.req);
    ++out_q_total_;
  }
  ctr_["max_output_queue"] = std::max(ctr_["max_output_queue"], double(out_q_total_));
  if (log_.on()) {
    log_.begin(now_, "TransferDone").fs("dir", "to_gpu").f("host", b.host)
        .f("items", std::int64_t(b.items.size())).end();
  }
  try_start_iteration();
}

// --- swaps ---------------------------------------------------------------------------

void Engine::start_swap_out(std::size_t i, int host, std::int64_t host_need,
                            bool park) {
  auto& r = reqs_[i];
  r.gpu_fp = 0;
  r.host = host;
  r.host_fp = host_need;
  r.st = park ? St::kParking : St::kSwapOut;
  r.tokens_since_swap_out = 0;
  r.rec.swaps += 1;
  ctr_[park ? "parks" : "swaps_out"] += 1;
  const double t = now_ + link_us(host, double(r.ctx)) / 1e6;
  if (log_.on()) {
    log_.begin(now_, "SwapStart").f("id", r.spec.id).fs("dir", "out")
        .f("host", host).f("tokens", r.ctx).end();
  }
  push(t, EvKind::kSwapDone, i, false);
}

void Engine::start_swap_in(std::size_t i, std::int64_t tokens, bool deferred) {
  auto& r = reqs_[i];
  r.swap_in_started = true;
  r.rec.swaps += 1;
  ctr_["swaps_in"] += 1;
  const double t = now_ + link_us(r.host, double(tokens)) / 1e6;
  if (log_.on()) {
    log_.begin(now_, "SwapStart").f("id", r.spec.id).fs("dir", "in")
        .f("host", r.host).f("tokens", tokens)
        .f("deferred", deferred).end();
  }
  push(t, EvKind::kSwapDone, i, true);
}

void Engine::on_swap_done(std::size_t i, bool into_gpu) {
  auto& r = reqs_[i];
  if (log_.on()) {
    log_.begin(now_, "SwapDone").f("id", r.spec.id)
        .fs("dir", into_gpu ? "in" : "out").end();
  }
  if (r.st == St::kDone) return;
  if (!into_gpu) {
    r.st = r.st == St::kParking ? St::kParked : St::kCpu;
    r.token_active = false;
    try_start_iteration();
    return;
  }
  kv_.host_committed[static_cast<std::size_t>(r.host)] -= r.host_fp;
  r.host = -1;
  r.host_fp = 0;
  r.st = St::kGpuDecode;
  r.swap_in_pending = false;
  try_start_iteration();
}

// --- request lifecycle ------------------------------------------------------------

void Engine::trace(std::size_t i, std::int64_t layer, TraceModule m, bool cpu) {
  if (!cfg_.verify_traces && !cfg_.keep_traces) return;
  auto& r = reqs_[i];
  const auto e = encode_trace(layer, m, cpu);
  if (cfg_.verify_traces) r.verifier.feed(e);
  if (cfg_.keep_traces) r.trace.push_back(e);
}

void Engine::complete_token(std::size_t i, double t) {
  auto& r = reqs_[i];
  --tokens_in_flight_;
  r.ctx += 1;
  r.generated += 1;
  r.tokens_since_swap_out += 1;
  r.token_active = false;
  r.rec.offloaded_tokens += 1;
  r.rec.token_times.push_back(t);
  ctr_["offloaded_tokens"] += 1;
  if (log_.on()) {
    log_.begin(t, "token").f("id", r.spec.id).f("k", r.generated)
        .f("cpu", true).end();
  }
  if (r.generated >= r.spec.output_len) {
    finish(i, t);
    return;
  }
  // A swap-in ordered mid-token starts once the GPU has merged the token.
  if (r.swap_in_pending && !r.swap_in_started) {
    r.st = St::kSwapIn;
    start_swap_in(i, r.ctx, true);
  }
}

void Engine::finish(std::size_t i, double t) {
  auto& r = reqs_[i];
  r.st = St::kDone;
  r.rec.completion = t;
  kv_.gpu_committed -= r.gpu_fp;
  r.gpu_fp = 0;
  if (r.host >= 0) {
    kv_.host_committed[static_cast<std::size_t>(r.host)] -= r.host_fp;
    r.host = -1;
    r.host_fp = 0;
  }
  if (residuals_.entries_for(r.spec.id) != 0) {
    fault(i, 0, "dangling residual at completion");
  }
  if (cfg_.verify_traces && !r.verifier.divergence()) {
    const std::int64_t passes = r.verifier.passes();
    if (!r.verifier.at_pass_boundary() || passes != r.passes) {
      r.verifier = TraceVerifier(d_, r.spec.id);
      ctr_["trace_pass_mismatch"] += 1;
      res_.divergences.push_back({r.spec.id, passes, 0,
                                  "expected " + std::to_string(r.passes) +
                                      " complete passes"});
    }
  }
  if (log_.on()) log_.begin(t, "done").f("id", r.spec.id).end();
}

void Engine::fault(std::size_t i, std::int64_t layer, const std::string& what) {
  res_.faults.push_back({reqs_[i].spec.id, layer, now_, what});
  if (log_.on()) {
    log_.begin(now_, "integrity_fault").f("id", reqs_[i].spec.id)
        .f("layer", layer).end();
  }
}

void Engine::check_invariants() const {
  std::int64_t gpu = 0;
  std::vector<std::int64_t> host(hosts_.size(), 0);
  for (const auto& r : reqs_) {
    gpu += r.gpu_fp;
    if (r.host >= 0) host[static_cast<std::size_t>(r.host)] += r.host_fp;
    const bool on_gpu = r.st == St::kGpuDecode ||
                        (r.st == St::kPrefill && r.reserved);
    if (on_gpu && std::max(r.ctx, r.l) > r.gpu_fp) {
      throw IntegrityFault("request " + std::to_string(r.spec.id) +
                           " exceeds its GPU KV commitment");
    }
    if ((r.st == St::kCpu || r.st == St::kSwapOut) && r.host >= 0 &&
        r.ctx + 1 > r.host_fp) {
      throw IntegrityFault("request " + std::to_string(r.spec.id) +
                           " exceeds its host KV commitment");
    }
  }
  if (gpu != kv_.gpu_committed || gpu > kv_.gpu_capacity) {
    throw IntegrityFault("GPU KV accounting drifted");
  }
  for (std::size_t h = 0; h < host.size(); ++h) {
    if (host[h] != kv_.host_committed[h] || host[h] > kv_.host_capacity[h]) {
      throw IntegrityFault("host KV accounting drifted on host " +
                           std::to_string(h));
    }
  }
}

}  // namespace

RunResult run_engine(const ProfileSet& profiles, const ModelsDoc& models,
                     const std::vector<RequestSpec>& requests,
                     const EngineConfig& cfg) {
  Engine e(profiles, models, requests, cfg);
  return e.run();
}

}  // namespace hserve
