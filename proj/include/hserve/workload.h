#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace hserve {

using RequestId = std::uint64_t;

enum class ServiceClass { kLS, kBE };

const char* to_string(ServiceClass cls);

struct RequestSpec {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  std::int64_t prompt_len = 1;
  std::int64_t output_len = 1;
  double arrival_time = 0.0;  // seconds
};

struct RateChange {
  double time = 0.0;  // seconds
  double rate = 0.0;  // requests / second
};

// Per-class prompt/output length distribution.
struct LengthDist {
  enum class Kind { kFixed, kUniform, kEmpirical };
  Kind kind = Kind::kFixed;
  std::int64_t prompt = 1;  // kFixed
  std::int64_t output = 1;
  std::int64_t prompt_min = 1, prompt_max = 1;  // kUniform, inclusive
  std::int64_t output_min = 1, output_max = 1;
  std::vector<std::pair<std::int64_t, std::int64_t>> empirical;

  static LengthDist fixed(std::int64_t prompt, std::int64_t output);
  static LengthDist uniform(std::int64_t prompt_min, std::int64_t prompt_max,
                            std::int64_t output_min, std::int64_t output_max);
  static LengthDist from_list(
      std::vector<std::pair<std::int64_t, std::int64_t>> pairs);
};

// Synthetic stand-ins for the benchmark datasets: deterministic empirical
// lists whose means equal the published averages.
//   "longbench":  8952 / 136, prompts capped at 12K
//   "dailymails": 1964 / 397
//   "sharegpt":   short chat prompts (no published means; see README)
LengthDist preset_lengths(const std::string& name);

// Random rate-change schedule: every `interval` seconds a new rate drawn
// uniformly from [min_rate, max_rate].
struct RandomSchedule {
  double interval = 5.0;
  double min_rate = 1.0;
  double max_rate = 8.0;
};

struct ClassLoad {
  std::optional<double> rate;                   // constant Poisson rate
  std::vector<RateChange> schedule;             // piecewise Poisson
  std::optional<RandomSchedule> random_schedule;
  std::vector<double> trace;                    // replayed timestamps
  std::int64_t backlog = 0;                     // requests present at t=0
  LengthDist lengths;
  bool enabled() const;
};

struct WorkloadConfig {
  ClassLoad ls;
  ClassLoad be;
  std::uint64_t seed = 1;
};

void validate(const WorkloadConfig& cfg);

std::vector<double> gen_poisson_arrivals(double rate, double horizon,
                                         std::uint64_t seed);

std::vector<double> gen_dynamic_rate_arrivals(
    const std::vector<RateChange>& schedule, double horizon,
    std::uint64_t seed);

std::vector<RateChange> gen_random_rate_schedule(const RandomSchedule& spec,
                                                 double horizon,
                                                 std::uint64_t seed);

std::vector<std::pair<std::int64_t, std::int64_t>> sample_lengths(
    const LengthDist& dist, std::size_t count, std::uint64_t seed);

// Merges both classes into one stream ordered by (arrival, class, draw
// order); ids are assigned in that order.
std::vector<RequestSpec> build_requests(const WorkloadConfig& cfg,
                                        double horizon);

// Derives an independent sub-seed (splitmix64 over seed ^ salt).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt);

void to_json(nlohmann::json& j, const LengthDist& d);
void from_json(const nlohmann::json& j, LengthDist& d);
void to_json(nlohmann::json& j, const WorkloadConfig& cfg);
void from_json(const nlohmann::json& j, WorkloadConfig& cfg);

}  // namespace hserve
