#include "hserve/profiles.h"

#include <algorithm>
#include <cmath>

#include "hserve/error.h"

namespace hserve {

const char* to_string(DeviceClass d) {
  return d == DeviceClass::kGPU ? "GPU" : "CPU";
}

void validate(const DeviceProfile& p) {
  const double coeffs[] = {p.dense_base,           p.dense_per_token,
                           p.dense_step,           p.attn_prefill_per_unit,
                           p.attn_prefill_base,    p.attn_decode_per_unit,
                           p.attn_decode_per_req,  p.attn_decode_base};
  for (double c : coeffs) {
    if (!(c >= 0.0)) throw InvalidConfig("profile coefficients must be >= 0");
  }
  if (p.dense_tile < 1) throw InvalidConfig("dense_tile must be >= 1");
  if (!(p.noise_rel >= 0.0 && p.noise_rel < 0.1)) {
    throw InvalidConfig("noise_rel must be in [0, 0.1)");
  }
}

void validate(const ClusterProfile& c) {
  if (c.gpu_count < 1 || c.tp_degree < 1 || c.pp_degree < 1) {
    throw InvalidConfig("gpu_count, tp_degree and pp_degree must be >= 1");
  }
  if (c.tp_degree * c.pp_degree != c.gpu_count) {
    throw InvalidConfig("tp_degree * pp_degree must equal gpu_count");
  }
  if (c.layers < 1 || c.layers % c.pp_degree != 0) {
    throw InvalidConfig("layers must be >= 1 and divisible by pp_degree");
  }
  if (c.cpu_hosts < 1 || c.cpu_cores_per_host < 1 ||
      c.cpu_reference_cores < 1) {
    throw InvalidConfig("cpu_hosts and core counts must be >= 1");
  }
  if (c.cpu_mem_tokens <= 0 || c.gpu_kv_capacity <= 0) {
    throw InvalidConfig("KV capacities must be > 0");
  }
  for (const auto* l : {&c.pcie, &c.network, &c.tp_comm, &c.pp_comm}) {
    if (!(l->alpha >= 0.0 && l->beta >= 0.0)) {
      throw InvalidConfig("link alpha/beta must be >= 0");
    }
  }
  if (!(c.activation_token_equiv >= 0.0)) {
    throw InvalidConfig("activation_token_equiv must be >= 0");
  }
  if (!(c.qkv_fraction > 0.0 && c.qkv_fraction < 1.0)) {
    throw InvalidConfig("qkv_fraction must be in (0, 1)");
  }
  if (!(c.piggyback_base_us >= 0.0 && c.piggyback_merge_us >= 0.0 &&
        c.piggyback_offload_us >= 0.0)) {
    throw InvalidConfig("piggyback costs must be >= 0");
  }
}

double NoiseSource::factor(double noise_rel) {
  if (noise_rel <= 0.0) return 1.0;
  std::normal_distribution<double> z(0.0, noise_rel / 2.0);
  const double f = std::exp(z(rng_));
  return std::clamp(f, 1.0 - noise_rel, 1.0 + noise_rel);
}

double probe_dense(const DeviceProfile& p, std::int64_t n_tokens,
                   NoiseSource* noise) {
  if (n_tokens < 1) throw InvalidInput("probe_dense needs n_tokens >= 1");
  const auto tiles = (n_tokens + p.dense_tile - 1) / p.dense_tile;
  const double t = p.dense_base + p.dense_per_token * n_tokens +
                   p.dense_step * static_cast<double>(tiles);
  return noise ? t * noise->factor(p.noise_rel) : t;
}

double probe_attention(const DeviceProfile& p, AttnPhase phase, double c_load,
                       std::int64_t g_reqs, NoiseSource* noise) {
  if (c_load < 0.0 || g_reqs < 0) {
    throw InvalidInput("probe_attention needs c_load >= 0 and g_reqs >= 0");
  }
  const double t =
      phase == AttnPhase::kPrefill
          ? p.attn_prefill_per_unit * c_load + p.attn_prefill_base
          : p.attn_decode_per_unit * c_load +
                p.attn_decode_per_req * static_cast<double>(g_reqs) +
                p.attn_decode_base;
  return noise ? t * noise->factor(p.noise_rel) : t;
}

double probe_link(const LinkProfile& link, double tokens, NoiseSource* noise,
                  double noise_rel) {
  if (tokens < 0.0) throw InvalidInput("link payload must be >= 0");
  if (tokens == 0.0) return 0.0;
  const double t = link.alpha + link.beta * tokens;
  return noise ? t * noise->factor(noise_rel) : t;
}

double cpu_core_scale(const ClusterProfile& c) {
  return static_cast<double>(c.cpu_reference_cores) /
         static_cast<double>(c.cpu_cores_per_host);
}

// Coefficients are per layer and per GPU-instance (TP group). GPU:CPU ratios
// at the measurement points (context / prefill length 1000, 1 vs 10
// requests) follow the published CPU/GPU gap table: decode attention 2.34x
// and 7.58x, prefill attention 184.6x and 393.75x, decode dense 65.2x and
// 498.1x.
ProfileSet default_profiles(ModelSize model) {
  ProfileSet s;
  auto& g = s.gpu;
  auto& c = s.cpu;
  auto& k = s.cluster;
  g.device_class = DeviceClass::kGPU;
  c.device_class = DeviceClass::kCPU;
  g.noise_rel = 0.02;
  c.noise_rel = 0.02;
  c.dense_tile = 1;
  c.dense_step = 0.0;
  g.dense_tile = 64;

  if (model == ModelSize::k70B) {
    g.dense_base = 168.8;
    g.dense_per_token = 1.2;
    g.dense_step = 30.0;
    c.dense_base = 2822.0;
    c.dense_per_token = 10218.0;

    g.attn_prefill_per_unit = 6.66e-5;
    g.attn_prefill_base = 66.667;
    c.attn_prefill_per_unit = 0.0308671;
    c.attn_prefill_base = 3011.0;

    g.attn_decode_per_unit = 0.003;
    g.attn_decode_per_req = 0.2;
    g.attn_decode_base = 14.0;
    c.attn_decode_per_unit = 0.03327;
    c.attn_decode_per_req = 1.0;
    c.attn_decode_base = 5.98;

    k.gpu_count = 4;
    k.tp_degree = 4;
    k.pp_degree = 1;
    k.layers = 80;
    k.cpu_mem_tokens = 1'200'000;
    k.gpu_kv_capacity = 400'000;
    k.pcie = {10.0, 13.0};
    k.network = {20.0, 26.0};
    k.tp_comm = {20.0, 0.5};
    k.pp_comm = {10.0, 0.5};
  } else {
    g.dense_base = 126.0;
    g.dense_per_token = 0.9;
    g.dense_step = 22.0;
    c.dense_base = 2097.6;
    c.dense_per_token = 7610.4;

    g.attn_prefill_per_unit = 5.328e-5;
    g.attn_prefill_base = 53.333;
    c.attn_prefill_per_unit = 0.0246935;
    c.attn_prefill_base = 2408.9;

    g.attn_decode_per_unit = 0.0025;
    g.attn_decode_per_req = 0.15;
    g.attn_decode_base = 12.0;
    c.attn_decode_per_unit = 0.027817;
    c.attn_decode_per_req = 0.8;
    c.attn_decode_base = 5.663;

    k.gpu_count = 2;
    k.tp_degree = 2;
    k.pp_degree = 1;
    k.layers = 60;
    k.cpu_mem_tokens = 1'600'000;
    k.gpu_kv_capacity = 250'000;
    k.pcie = {10.0, 9.8};
    k.network = {20.0, 19.6};
    k.tp_comm = {15.0, 0.35};
    k.pp_comm = {10.0, 0.35};
  }
  k.cpu_hosts = 5;
  k.cpu_cores_per_host = 24;
  k.cpu_reference_cores = 24;
  validate(g);
  validate(c);
  validate(k);
  return s;
}

ModelSize parse_model_size(const std::string& s) {
  if (s == "34B" || s == "34b") return ModelSize::k34B;
  if (s == "70B" || s == "70b") return ModelSize::k70B;
  throw InvalidConfig("unknown model '" + s + "' (expected 34B or 70B)");
}

const char* to_string(ModelSize m) {
  return m == ModelSize::k34B ? "34B" : "70B";
}

// --- JSON ------------------------------------------------------------------

void to_json(nlohmann::json& j, const DeviceProfile& p) {
  j = {{"device_class", to_string(p.device_class)},
       {"dense_base", p.dense_base},
       {"dense_per_token", p.dense_per_token},
       {"dense_tile", p.dense_tile},
       {"dense_step", p.dense_step},
       {"attn_prefill_per_unit", p.attn_prefill_per_unit},
       {"attn_prefill_base", p.attn_prefill_base},
       {"attn_decode_per_unit", p.attn_decode_per_unit},
       {"attn_decode_per_req", p.attn_decode_per_req},
       {"attn_decode_base", p.attn_decode_base},
       {"noise_rel", p.noise_rel}};
}

void from_json(const nlohmann::json& j, DeviceProfile& p) {
  const auto cls = j.at("device_class").get<std::string>();
  if (cls != "GPU" && cls != "CPU") {
    throw InvalidConfig("device_class must be GPU or CPU");
  }
  p.device_class = cls == "GPU" ? DeviceClass::kGPU : DeviceClass::kCPU;
  p.dense_base = j.at("dense_base").get<double>();
  p.dense_per_token = j.at("dense_per_token").get<double>();
  p.dense_tile = j.at("dense_tile").get<std::int64_t>();
  p.dense_step = j.at("dense_step").get<double>();
  p.attn_prefill_per_unit = j.at("attn_prefill_per_unit").get<double>();
  p.attn_prefill_base = j.at("attn_prefill_base").get<double>();
  p.attn_decode_per_unit = j.at("attn_decode_per_unit").get<double>();
  p.attn_decode_per_req = j.at("attn_decode_per_req").get<double>();
  p.attn_decode_base = j.at("attn_decode_base").get<double>();
  p.noise_rel = j.at("noise_rel").get<double>();
  validate(p);
}

void to_json(nlohmann::json& j, const LinkProfile& l) {
  j = {{"alpha", l.alpha}, {"beta", l.beta}};
}

void from_json(const nlohmann::json& j, LinkProfile& l) {
  l.alpha = j.at("alpha").get<double>();
  l.beta = j.at("beta").get<double>();
}

void to_json(nlohmann::json& j, const ClusterProfile& c) {
  j = {{"gpu_count", c.gpu_count},
       {"tp_degree", c.tp_degree},
       {"pp_degree", c.pp_degree},
       {"layers", c.layers},
       {"cpu_hosts", c.cpu_hosts},
       {"cpu_cores_per_host", c.cpu_cores_per_host},
       {"cpu_reference_cores", c.cpu_reference_cores},
       {"cpu_mem_tokens", c.cpu_mem_tokens},
       {"gpu_kv_capacity", c.gpu_kv_capacity},
       {"pcie", c.pcie},
       {"network", c.network},
       {"tp_comm", c.tp_comm},
       {"pp_comm", c.pp_comm},
       {"activation_token_equiv", c.activation_token_equiv},
       {"qkv_fraction", c.qkv_fraction},
       {"piggyback_base_us", c.piggyback_base_us},
       {"piggyback_merge_us", c.piggyback_merge_us},
       {"piggyback_offload_us", c.piggyback_offload_us}};
}

void from_json(const nlohmann::json& j, ClusterProfile& c) {
  c.gpu_count = j.at("gpu_count").get<std::int64_t>();
  c.tp_degree = j.at("tp_degree").get<std::int64_t>();
  c.pp_degree = j.at("pp_degree").get<std::int64_t>();
  c.layers = j.at("layers").get<std::int64_t>();
  c.cpu_hosts = j.at("cpu_hosts").get<std::int64_t>();
  c.cpu_cores_per_host = j.at("cpu_cores_per_host").get<std::int64_t>();
  c.cpu_reference_cores = j.at("cpu_reference_cores").get<std::int64_t>();
  c.cpu_mem_tokens = j.at("cpu_mem_tokens").get<std::int64_t>();
  c.gpu_kv_capacity = j.at("gpu_kv_capacity").get<std::int64_t>();
  c.pcie = j.at("pcie").get<LinkProfile>();
  c.network = j.at("network").get<LinkProfile>();
  c.tp_comm = j.at("tp_comm").get<LinkProfile>();
  c.pp_comm = j.at("pp_comm").get<LinkProfile>();
  c.activation_token_equiv = j.at("activation_token_equiv").get<double>();
  c.qkv_fraction = j.at("qkv_fraction").get<double>();
  c.piggyback_base_us = j.at("piggyback_base_us").get<double>();
  c.piggyback_merge_us = j.at("piggyback_merge_us").get<double>();
  c.piggyback_offload_us = j.at("piggyback_offload_us").get<double>();
  validate(c);
}

ProfileSet apply_overrides(const ProfileSet& base,
                           const nlohmann::json& overrides) {
  nlohmann::json doc = {
      {"gpu", base.gpu}, {"cpu", base.cpu}, {"cluster", base.cluster}};
  doc.merge_patch(overrides);
  ProfileSet out;
  out.gpu = doc.at("gpu").get<DeviceProfile>();
  out.cpu = doc.at("cpu").get<DeviceProfile>();
  out.cluster = doc.at("cluster").get<ClusterProfile>();
  if (out.gpu.device_class != DeviceClass::kGPU ||
      out.cpu.device_class != DeviceClass::kCPU) {
    throw InvalidConfig("profiles.gpu/cpu device_class mismatch");
  }
  return out;
}

}  // namespace hserve
