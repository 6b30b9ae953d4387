#include <string>

#include "hserve/engine.h"
#include "hserve/error.h"

namespace hserve {

const char* to_string(TraceModule m) {
  switch (m) {
    case TraceModule::kQkv: return "QKV";
    case TraceModule::kAttn: return "Attn";
    case TraceModule::kProj: return "Proj";
    case TraceModule::kAdd: return "Add";
    case TraceModule::kMlp: return "MLP";
    case TraceModule::kPut: return "Put";
    case TraceModule::kGet: return "Get";
    case TraceModule::kGetMissing: return "GetMissing";
  }
  return "?";
}

TraceEntry encode_trace(std::int64_t layer, TraceModule m, bool on_cpu) {
  if (layer < 1 || layer > kMaxTraceLayer) {
    throw InvalidInput("trace layer out of range: " + std::to_string(layer));
  }
  return static_cast<TraceEntry>(static_cast<unsigned>(layer) |
                                 (static_cast<unsigned>(m) << 12) |
                                 (on_cpu ? 0x8000u : 0u));
}

std::int64_t trace_layer(TraceEntry e) { return e & 0x0FFF; }
TraceModule trace_module(TraceEntry e) {
  return static_cast<TraceModule>((e >> 12) & 0x7);
}
bool trace_on_cpu(TraceEntry e) { return (e & 0x8000) != 0; }

std::vector<TraceEntry> reference_pass(std::int64_t layers) {
  std::vector<TraceEntry> out;
  out.reserve(static_cast<std::size_t>(layers) * 6);
  for (std::int64_t l = 1; l <= layers; ++l) {
    for (auto m : {TraceModule::kQkv, TraceModule::kAttn, TraceModule::kProj,
                   TraceModule::kAdd, TraceModule::kMlp, TraceModule::kAdd}) {
      out.push_back(encode_trace(l, m, false));
    }
  }
  return out;
}

static std::string describe(TraceEntry e) {
  return std::string(to_string(trace_module(e))) + "@" +
         std::to_string(trace_layer(e)) + (trace_on_cpu(e) ? "/cpu" : "/gpu");
}

void TraceVerifier::fail(const std::string& what, TraceEntry got) {
  div_ = TraceDivergence{id_, passes_, layer_, what + " (found " + describe(got) + ")"};
}

// Stages within a layer:
//   0 Put or QKV, 1 QKV after Put, 2 Attn, 3 Get (CPU) or Proj,
//   4 Proj after Get, 5 Add, 6 MLP, 7 Add.
void TraceVerifier::feed(TraceEntry e) {
  if (div_) return;
  const auto m = trace_module(e);
  if (trace_layer(e) != layer_) {
    return fail("expected layer " + std::to_string(layer_), e);
  }
  if (m != TraceModule::kAttn && trace_on_cpu(e)) {
    return fail("only attention may run on a CPU host", e);
  }
  auto expect = [&](TraceModule want, int next) {
    if (m != want) {
      fail(std::string("expected ") + to_string(want), e);
      return;
    }
    stage_ = next;
  };
  switch (stage_) {
    case 0:
      if (m == TraceModule::kPut) {
        put_ = true;
        stage_ = 1;
      } else {
        put_ = false;
        expect(TraceModule::kQkv, 2);
      }
      break;
    case 1: expect(TraceModule::kQkv, 2); break;
    case 2:
      expect(TraceModule::kAttn, 3);
      if (div_) break;
      cpu_ = trace_on_cpu(e);
      if (cpu_ && !put_) fail("CPU attention without a residual put", e);
      if (!cpu_ && put_) fail("residual put without CPU attention", e);
      break;
    case 3:
      if (!cpu_) {
        expect(TraceModule::kProj, 5);
      } else if (m == TraceModule::kGetMissing) {
        fail("residual missing at piggyback", e);
      } else {
        expect(TraceModule::kGet, 4);
      }
      break;
    case 4: expect(TraceModule::kProj, 5); break;
    case 5: expect(TraceModule::kAdd, 6); break;
    case 6: expect(TraceModule::kMlp, 7); break;
    case 7:
      expect(TraceModule::kAdd, 0);
      if (div_) break;
      if (++layer_ > layers_) {
        layer_ = 1;
        ++passes_;
      }
      break;
  }
}

TraceCheck verify_trace(const RequestTrace& t, std::int64_t layers) {
  TraceVerifier v(layers, t.id);
  for (auto e : t.entries) {
    v.feed(e);
    if (v.divergence()) break;
  }
  return {v.divergence(), v.passes(), v.at_pass_boundary()};
}

// --- residual store -------------------------------------------------------------

std::uint64_t ResidualStore::key(RequestId id, std::int64_t layer) {
  return (static_cast<std::uint64_t>(id) << 12) |
         static_cast<std::uint64_t>(layer & 0x0FFF);
}

void ResidualStore::put(RequestId id, std::int64_t layer, std::int64_t tokens) {
  auto [it, fresh] = store_.emplace(key(id, layer), tokens);
  if (!fresh) {
    throw IntegrityFault("duplicate residual for request " + std::to_string(id) +
                         " layer " + std::to_string(layer));
  }
  ++per_request_[id];
  ++puts_;
}

std::int64_t ResidualStore::get(RequestId id, std::int64_t layer) {
  auto it = store_.find(key(id, layer));
  if (it == store_.end()) {
    throw IntegrityFault("missing residual for request " + std::to_string(id) +
                         " layer " + std::to_string(layer));
  }
  const auto tokens = it->second;
  store_.erase(it);
  if (--per_request_[id] == 0) per_request_.erase(id);
  ++gets_;
  return tokens;
}

bool ResidualStore::contains(RequestId id, std::int64_t layer) const {
  return store_.count(key(id, layer)) != 0;
}

std::int64_t ResidualStore::entries_for(RequestId id) const {
  auto it = per_request_.find(id);
  return it == per_request_.end() ? 0 : it->second;
}

}  // namespace hserve
