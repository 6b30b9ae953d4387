#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hserve/profiles.h"
#include "json.hpp"

namespace hserve {

// Residual statistics of a least-squares fit (durations in µs).
struct FitResiduals {
  std::size_t samples = 0;
  double rmse = 0.0;
  double max_abs = 0.0;
  double mean_rel = 0.0;
};

// duration = a * c_PA + b
struct PrefillAttnModel {
  double a = 0.0;
  double b = 0.0;
  FitResiduals residuals;
};

// duration = a * c_DA + h * g + b. The sign of h is left to the data.
struct DecodeAttnModel {
  double a = 0.0;
  double h = 0.0;
  double b = 0.0;
  FitResiduals residuals;
};

struct DenseSegment {
  std::int64_t n_start = 1;
  std::int64_t n_end = 1;  // inclusive
  double slope = 0.0;
  double intercept = 0.0;
};

struct DenseBuildDiagnostics {
  std::int64_t probe_calls = 0;
  bool non_monotone = false;
};

struct DenseLatencyTable {
  std::vector<DenseSegment> segments;
  std::int64_t min_n = 1;
  std::int64_t max_n = 1;
  double threshold = 0.0;
  DenseBuildDiagnostics diagnostics;
};

enum class CommKind { kTensorParallel, kPipeline, kPcie, kNetwork };

const char* to_string(CommKind k);
CommKind parse_comm_kind(const std::string& s);

struct CommModel {
  double alpha = 0.0;
  double beta = 0.0;
  CommKind kind = CommKind::kTensorParallel;
};

struct LatencyModelSet {
  DeviceClass device_class = DeviceClass::kGPU;
  PrefillAttnModel prefill_attn;
  DecodeAttnModel decode_attn;
  DenseLatencyTable dense;
  std::vector<CommModel> comm;
  std::int64_t tp_degree = 1;
  std::int64_t pp_degree = 1;
  std::int64_t layers = 1;
};

struct PrefillSample {
  double c = 0.0;
  double duration = 0.0;
};

struct DecodeSample {
  double c = 0.0;
  std::int64_t g = 0;
  double duration = 0.0;
};

struct CommSample {
  double tokens = 0.0;
  double duration = 0.0;
};

PrefillAttnModel fit_prefill_attn(const std::vector<PrefillSample>& samples);
DecodeAttnModel fit_decode_attn(const std::vector<DecodeSample>& samples);
CommModel fit_comm(const std::vector<CommSample>& samples, CommKind kind);

using DenseProbe = std::function<double(std::int64_t)>;

// Recursive interpolation: an interval whose endpoint difference is within
// `threshold` (probe(16) - probe(1)) becomes one affine segment, otherwise
// it is split at floor((min + max) / 2). Probe calls are memoized.
DenseLatencyTable build_dense_table(const DenseProbe& probe, std::int64_t min_n,
                                    std::int64_t max_n);

double predict_prefill_attn(const PrefillAttnModel& m, double c_pa);
double predict_decode_attn(const DecodeAttnModel& m, double c_da,
                           std::int64_t g);
// n = 0 returns 0. Above max_n the last segment's slope is extrapolated and
// `*extrapolated` (if given) is set.
double predict_dense(const DenseLatencyTable& t, std::int64_t n,
                     bool* extrapolated = nullptr);

double comm_latency(const CommModel& m, double tokens);

const CommModel* find_comm(const LatencyModelSet& s, CommKind kind);

// Per-layer communication budget: gamma_T(n) under tensor parallelism plus
// gamma_P(n) amortized over the layers of a stage under pipelining.
double gamma(const LatencyModelSet& s, std::int64_t n_tokens);

struct LayerLatency {
  double compute = 0.0;  // f_PA + f_DA + f_D
  double gamma = 0.0;
  double total() const { return compute + gamma; }
};

LayerLatency per_layer_latency(const LatencyModelSet& s, double c_pa,
                               double c_da, std::int64_t g,
                               std::int64_t n_tokens);

struct FitOptions {
  std::size_t samples = 100;
  std::uint64_t seed = 1;
  std::int64_t gpu_dense_max_n = 16384;
  std::int64_t cpu_dense_max_n = 64;
  std::int64_t max_prefill_len = 16384;
  double max_decode_context = 0.0;  // 0: GPU KV capacity
  std::int64_t max_decode_reqs = 256;
};

struct ModelsDoc {
  static constexpr int kVersion = 1;
  std::string model;
  LatencyModelSet gpu;
  LatencyModelSet cpu;
};

// Profiles both device classes with the given sample budget and fits every
// model.
ModelsDoc fit_all(const ProfileSet& profiles, const std::string& model_name,
                  const FitOptions& opts = {});

struct AccuracyReport {
  double prefill_attn = 0.0;  // 1 - mean relative error
  double decode_attn = 0.0;
  double dense = 0.0;
};

// Held-out accuracy of `set` against fresh noisy probes of `profile`.
AccuracyReport evaluate_accuracy(const LatencyModelSet& set,
                                 const DeviceProfile& profile,
                                 const FitOptions& opts, std::size_t points,
                                 std::uint64_t seed);

void to_json(nlohmann::json& j, const LatencyModelSet& s);
void from_json(const nlohmann::json& j, LatencyModelSet& s);
void to_json(nlohmann::json& j, const ModelsDoc& d);
void from_json(const nlohmann::json& j, ModelsDoc& d);

}  // namespace hserve
