#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "json.hpp"

namespace hserve {

// All durations in this module are microseconds.

enum class DeviceClass { kGPU, kCPU };
enum class AttnPhase { kPrefill, kDecode };

const char* to_string(DeviceClass d);

// Synthetic ground-truth cost oracle for one device class. The engine
// charges simulated time against it and the profiler fits models to it.
struct DeviceProfile {
  DeviceClass device_class = DeviceClass::kGPU;
  // Dense (QKV + proj + MLP of one layer), ladder shaped:
  //   base + per_token * n + step * ceil(n / tile)
  double dense_base = 0.0;
  double dense_per_token = 0.0;
  std::int64_t dense_tile = 1;
  double dense_step = 0.0;
  // Prefill attention: per_unit * c + base, c in pairwise-token units.
  double attn_prefill_per_unit = 0.0;
  double attn_prefill_base = 0.0;
  // Decode attention: per_unit * c + per_req * g + base.
  double attn_decode_per_unit = 0.0;
  double attn_decode_per_req = 0.0;
  double attn_decode_base = 0.0;
  double noise_rel = 0.0;
};

// Alpha-beta link: alpha + beta * tokens.
struct LinkProfile {
  double alpha = 0.0;  // µs
  double beta = 0.0;   // µs / token
};

struct ClusterProfile {
  std::int64_t gpu_count = 1;
  std::int64_t tp_degree = 1;
  std::int64_t pp_degree = 1;
  std::int64_t layers = 1;
  std::int64_t cpu_hosts = 1;  // host 0 is the GPU server's own CPU
  std::int64_t cpu_cores_per_host = 24;
  std::int64_t cpu_reference_cores = 24;  // cores the CPU profile was built at
  std::int64_t cpu_mem_tokens = 1;        // KV capacity per host
  std::int64_t gpu_kv_capacity = 1;       // KV capacity of the GPU instance
  LinkProfile pcie;      // GPU <-> local host, per KV token
  LinkProfile network;   // GPU server <-> remote host, per KV token
  LinkProfile tp_comm;   // per-layer collective, per query token
  LinkProfile pp_comm;   // per stage boundary, per query token
  // Size of one token's per-layer q/k/v (or attention output) payload,
  // expressed in KV-token equivalents for the link models.
  double activation_token_equiv = 0.06;
  // Fraction of a layer's dense time spent in the QKV projection.
  double qkv_fraction = 0.2;
  // Piggyback bookkeeping on the GPU stream: a fixed cost per active layer,
  // residual load + dequeue per merged result, residual save + enqueue per
  // offloaded q/k/v.
  double piggyback_base_us = 5.0;
  double piggyback_merge_us = 1.2;
  double piggyback_offload_us = 0.2;
};

struct ProfileSet {
  DeviceProfile gpu;
  DeviceProfile cpu;
  ClusterProfile cluster;
};

enum class ModelSize { k34B, k70B };

void validate(const DeviceProfile& p);
void validate(const ClusterProfile& c);

// Seeded multiplicative log-normal jitter clamped to [1 - rel, 1 + rel].
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : rng_(seed) {}
  double factor(double noise_rel);

 private:
  std::mt19937_64 rng_;
};

double probe_dense(const DeviceProfile& p, std::int64_t n_tokens,
                   NoiseSource* noise = nullptr);

double probe_attention(const DeviceProfile& p, AttnPhase phase, double c_load,
                       std::int64_t g_reqs, NoiseSource* noise = nullptr);

// Link transfer; zero tokens issues no transfer.
double probe_link(const LinkProfile& link, double tokens,
                  NoiseSource* noise = nullptr, double noise_rel = 0.0);

// Ratio of CPU service time to the reference CPU profile.
double cpu_core_scale(const ClusterProfile& c);

ProfileSet default_profiles(ModelSize model);

ModelSize parse_model_size(const std::string& s);
const char* to_string(ModelSize m);

void to_json(nlohmann::json& j, const DeviceProfile& p);
void from_json(const nlohmann::json& j, DeviceProfile& p);
void to_json(nlohmann::json& j, const LinkProfile& l);
void from_json(const nlohmann::json& j, LinkProfile& l);
void to_json(nlohmann::json& j, const ClusterProfile& c);
void from_json(const nlohmann::json& j, ClusterProfile& c);

// Applies a partial override document on top of `base` (keys absent from
// `overrides` keep their base values) and validates the result.
ProfileSet apply_overrides(const ProfileSet& base,
                           const nlohmann::json& overrides);

}  // namespace hserve
