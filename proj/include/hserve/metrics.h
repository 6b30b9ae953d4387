#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hserve/workload.h"
#include "json.hpp"

namespace hserve {

enum class Admission { kPending, kAdmitted, kRejected };

const char* to_string(Admission a);

struct RequestRecord {
  RequestId id = 0;
  ServiceClass cls = ServiceClass::kLS;
  std::int64_t prompt_len = 1;
  std::int64_t output_len = 1;
  double arrival = 0.0;
  Admission admission = Admission::kPending;
  std::vector<double> token_times;  // seconds; first entry is the first token
  std::optional<double> completion;
  bool prefill_counted = false;  // prompt tokens count toward prefill throughput
  std::int64_t offloaded_tokens = 0;
  std::int64_t swaps = 0;
  std::int64_t recomputes = 0;

  std::optional<double> first_token() const;
};

// Time to first token; empty when the request produced no token.
std::optional<double> ttft(const RequestRecord& r);
// Successive token-time differences.
std::vector<double> tpot_series(const RequestRecord& r);

// Comparisons absorb floating-point rounding below the simulator's time
// resolution.
constexpr double kTimeResolution = 1e-9;

struct Attainment {
  double ttft_frac = 1.0;
  double tpot_frac = 1.0;
  std::int64_t ttft_total = 0;
  std::int64_t ttft_met = 0;
  std::int64_t tpot_total = 0;
  std::int64_t tpot_met = 0;
  std::int64_t ls_admitted = 0;
  std::int64_t ls_rejected = 0;
  std::int64_t ls_unserved = 0;  // admitted, no token, still within S_p
};

// LS requests only. An admitted request with no token at the horizon counts
// as a TTFT miss once its wait exceeds S_p, otherwise it is excluded.
Attainment attainment(const std::vector<RequestRecord>& records, double ttft_s,
                      double tpot_s, double horizon_s);

struct Throughput {
  double prefill = 0.0;  // tokens / s
  double decode = 0.0;
};

Throughput be_throughput(const std::vector<RequestRecord>& records,
                         double horizon_s);
Throughput ls_throughput(const std::vector<RequestRecord>& records,
                         double horizon_s);

// Nearest-rank percentile (q in [0, 100]); empty input gives 0.
double percentile(std::vector<double> v, double q);

struct SimReport {
  static constexpr int kSchemaVersion = 1;
  std::string scenario;
  std::string policy;
  std::uint64_t seed = 0;
  double horizon_s = 0.0;
  double ttft_slo_s = 0.0;
  double tpot_slo_s = 0.0;
  std::vector<RequestRecord> records;
  Attainment attain;
  Throughput be;
  Throughput ls;
  double tpot_p99_s = 0.0;  // over all LS tokens
  std::map<std::string, double> counters;
  nlohmann::json config;  // echo of the effective scenario
};

SimReport make_report(std::vector<RequestRecord> records, double horizon_s,
                      double ttft_s, double tpot_s);

void to_json(nlohmann::json& j, const RequestRecord& r);
void from_json(const nlohmann::json& j, RequestRecord& r);
void to_json(nlohmann::json& j, const SimReport& r);
void from_json(const nlohmann::json& j, SimReport& r);

// One row per request.
void write_requests_csv(std::ostream& os, const SimReport& r);
// One row per aggregate metric: metric,value.
void write_summary_csv(std::ostream& os, const SimReport& r);

}  // namespace hserve
