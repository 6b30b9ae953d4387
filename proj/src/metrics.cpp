#include "hserve/metrics.h"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "hserve/error.h"

namespace hserve {

using nlohmann::json;

const char* to_string(Admission a) {
  switch (a) {
    case Admission::kPending: return "pending";
    case Admission::kAdmitted: return "admitted";
    case Admission::kRejected: return "rejected";
  }
  return "?";
}

static Admission parse_admission(const std::string& s) {
  if (s == "pending") return Admission::kPending;
  if (s == "admitted") return Admission::kAdmitted;
  if (s == "rejected") return Admission::kRejected;
  throw InvalidInput("unknown admission state: " + s);
}

std::optional<double> RequestRecord::first_token() const {
  if (token_times.empty()) return std::nullopt;
  return token_times.front();
}

std::optional<double> ttft(const RequestRecord& r) {
  if (r.token_times.empty()) return std::nullopt;
  return r.token_times.front() - r.arrival;
}

std::vector<double> tpot_series(const RequestRecord& r) {
  std::vector<double> out;
  for (std::size_t i = 1; i < r.token_times.size(); ++i)
    out.push_back(r.token_times[i] - r.token_times[i - 1]);
  return out;
}

Attainment attainment(const std::vector<RequestRecord>& records, double ttft_s,
                      double tpot_s, double horizon_s) {
  Attainment a;
  for (const auto& r : records) {
    if (r.cls != ServiceClass::kLS) continue;
    if (r.admission == Admission::kRejected) {
      ++a.ls_rejected;
      continue;
    }
    if (r.admission != Admission::kAdmitted) continue;
    ++a.ls_admitted;
    if (auto t = ttft(r)) {
      ++a.ttft_total;
      if (*t <= ttft_s + kTimeResolution) ++a.ttft_met;
    } else if (horizon_s - r.arrival > ttft_s + kTimeResolution) {
      ++a.ttft_total;
    } else {
      ++a.ls_unserved;
    }
    for (double d : tpot_series(r)) {
      ++a.tpot_total;
      if (d <= tpot_s + kTimeResolution) ++a.tpot_met;
    }
  }
  a.ttft_frac = a.ttft_total ? double(a.ttft_met) / a.ttft_total : 1.0;
  a.tpot_frac = a.tpot_total ? double(a.tpot_met) / a.tpot_total : 1.0;
  return a;
}

static Throughput class_throughput(const std::vector<RequestRecord>& records,
                                   double horizon_s, ServiceClass cls) {
  if (!(horizon_s > 0)) throw InvalidInput("horizon must be positive");
  double prefill = 0, decode = 0;
  for (const auto& r : records) {
    if (r.cls != cls) continue;
    if (r.prefill_counted) prefill += double(r.prompt_len);
    if (!r.token_times.empty()) decode += double(r.token_times.size() - 1);
  }
  return {prefill / horizon_s, decode / horizon_s};
}

Throughput be_throughput(const std::vector<RequestRecord>& records,
                         double horizon_s) {
  return class_throughput(records, horizon_s, ServiceClass::kBE);
}

Throughput ls_throughput(const std::vector<RequestRecord>& records,
                         double horizon_s) {
  return class_throughput(records, horizon_s, ServiceClass::kLS);
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * double(v.size())));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

SimReport make_report(std::vector<RequestRecord> records, double horizon_s,
                      double ttft_s, double tpot_s) {
  SimReport r;
  r.horizon_s = horizon_s;
  r.ttft_slo_s = ttft_s;
  r.tpot_slo_s = tpot_s;
  r.records = std::move(records);
  r.attain = attainment(r.records, ttft_s, tpot_s, horizon_s);
  r.be = be_throughput(r.records, horizon_s);
  r.ls = ls_throughput(r.records, horizon_s);
  std::vector<double> all;
  for (const auto& rec : r.records) {
    if (rec.cls != ServiceClass::kLS) continue;
    auto s = tpot_series(rec);
    all.insert(all.end(), s.begin(), s.end());
  }
  r.tpot_p99_s = percentile(std::move(all), 99.0);
  return r;
}

// --- JSON --------------------------------------------------------------------

void to_json(json& j, const RequestRecord& r) {
  j = json{{"id", r.id},
           {"class", to_string(r.cls)},
           {"prompt_len", r.prompt_len},
           {"output_len", r.output_len},
           {"arrival", r.arrival},
           {"admission", to_string(r.admission)},
           {"token_times", r.token_times},
           {"completion", r.completion ? json(*r.completion) : json(nullptr)},
           {"prefill_counted", r.prefill_counted},
           {"offloaded_tokens", r.offloaded_tokens},
           {"swaps", r.swaps},
           {"recomputes", r.recomputes}};
}

void from_json(const json& j, RequestRecord& r) {
  r.id = j.at("id").get<RequestId>();
  const auto cls = j.at("class").get<std::string>();
  if (cls == "LS") r.cls = ServiceClass::kLS;
  else if (cls == "BE") r.cls = ServiceClass::kBE;
  else throw InvalidInput("unknown class: " + cls);
  r.prompt_len = j.at("prompt_len").get<std::int64_t>();
  r.output_len = j.at("output_len").get<std::int64_t>();
  r.arrival = j.at("arrival").get<double>();
  r.admission = parse_admission(j.at("admission").get<std::string>());
  r.token_times = j.at("token_times").get<std::vector<double>>();
  if (j.at("completion").is_null()) r.completion.reset();
  else r.completion = j.at("completion").get<double>();
  r.prefill_counted = j.at("prefill_counted").get<bool>();
  r.offloaded_tokens = j.at("offloaded_tokens").get<std::int64_t>();
  r.swaps = j.at("swaps").get<std::int64_t>();
  r.recomputes = j.at("recomputes").get<std::int64_t>();
}

void to_json(json& j, const SimReport& r) {
  const auto& a = r.attain;
  j = json{{"kind", "hserve-report"},
           {"schema_version", SimReport::kSchemaVersion},
           {"scenario", r.scenario},
           {"policy", r.policy},
           {"seed", r.seed},
           {"horizon_s", r.horizon_s},
           {"slo", {{"ttft_s", r.ttft_slo_s}, {"tpot_s", r.tpot_slo_s}}},
           {"attainment",
            {{"ttft", a.ttft_frac},
             {"tpot", a.tpot_frac},
             {"ttft_total", a.ttft_total},
             {"ttft_met", a.ttft_met},
             {"tpot_total", a.tpot_total},
             {"tpot_met", a.tpot_met},
             {"ls_admitted", a.ls_admitted},
             {"ls_rejected", a.ls_rejected},
             {"ls_unserved", a.ls_unserved}}},
           {"be_prefill_tput", r.be.prefill},
           {"be_decode_tput", r.be.decode},
           {"ls_prefill_tput", r.ls.prefill},
           {"ls_decode_tput", r.ls.decode},
           {"tpot_p99_s", r.tpot_p99_s},
           {"counters", r.counters},
           {"config", r.config},
           {"records", r.records}};
}

void from_json(const json& j, SimReport& r) {
  if (j.value("kind", "") != "hserve-report")
    throw InvalidInput("not a report document");
  if (j.at("schema_version").get<int>() != SimReport::kSchemaVersion)
    throw InvalidInput("unsupported report schema version");
  r.scenario = j.at("scenario").get<std::string>();
  r.policy = j.at("policy").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.horizon_s = j.at("horizon_s").get<double>();
  r.ttft_slo_s = j.at("slo").at("ttft_s").get<double>();
  r.tpot_slo_s = j.at("slo").at("tpot_s").get<double>();
  const auto& a = j.at("attainment");
  r.attain.ttft_frac = a.at("ttft").get<double>();
  r.attain.tpot_frac = a.at("tpot").get<double>();
  r.attain.ttft_total = a.at("ttft_total").get<std::int64_t>();
  r.attain.ttft_met = a.at("ttft_met").get<std::int64_t>();
  r.attain.tpot_total = a.at("tpot_total").get<std::int64_t>();
  r.attain.tpot_met = a.at("tpot_met").get<std::int64_t>();
  r.attain.ls_admitted = a.at("ls_admitted").get<std::int64_t>();
  r.attain.ls_rejected = a.at("ls_rejected").get<std::int64_t>();
  r.attain.ls_unserved = a.at("ls_unserved").get<std::int64_t>();
  r.be = {j.at("be_prefill_tput").get<double>(),
          j.at("be_decode_tput").get<double>()};
  r.ls = {j.at("ls_prefill_tput").get<double>(),
          j.at("ls_decode_tput").get<double>()};
  r.tpot_p99_s = j.at("tpot_p99_s").get<double>();
  r.counters = j.at("counters").get<std::map<std::string, double>>();
  r.config = j.at("config");
  r.records = j.at("records").get<std::vector<RequestRecord>>();
}

// --- CSV ---------------------------------------------------------------------

static std::string num(double v) {
  json j = v;
  return j.dump();
}

void write_requests_csv(std::ostream& os, const SimReport& r) {
  os << "id,class,prompt_len,output_len,arrival,admission,first_token,ttft,"
        "tokens,completion,tpot_mean,tpot_p99,offloaded_tokens,swaps,"
        "recomputes\n";
  for (const auto& rec : r.records) {
    os << rec.id << ',' << to_string(rec.cls) << ',' << rec.prompt_len << ','
       << rec.output_len << ',' << num(rec.arrival) << ','
       << to_string(rec.admission) << ',';
    if (auto f = rec.first_token()) os << num(*f);
    os << ',';
    if (auto t = ttft(rec)) os << num(*t);
    os << ',' << rec.token_times.size() << ',';
    if (rec.completion) os << num(*rec.completion);
    os << ',';
    auto s = tpot_series(rec);
    if (!s.empty()) {
      double sum = 0;
      for (double d : s) sum += d;
      os << num(sum / double(s.size())) << ',' << num(percentile(s, 99.0));
    } else {
      os << ',';
    }
    os << ',' << rec.offloaded_tokens << ',' << rec.swaps << ','
       << rec.recomputes << '\n';
  }
}

void write_summary_csv(std::ostream& os, const SimReport& r) {
  const auto& a = r.attain;
  os << "metric,value\n";
  os << "schema_version," << SimReport::kSchemaVersion << '\n';
  os << "horizon_s," << num(r.horizon_s) << '\n';
  os << "ttft_attainment," << num(a.ttft_frac) << '\n';
  os << "tpot_attainment," << num(a.tpot_frac) << '\n';
  os << "ttft_total," << a.ttft_total << '\n';
  os << "ttft_met," << a.ttft_met << '\n';
  os << "tpot_total," << a.tpot_total << '\n';
  os << "tpot_met," << a.tpot_met << '\n';
  os << "ls_admitted," << a.ls_admitted << '\n';
  os << "ls_rejected," << a.ls_rejected << '\n';
  os << "ls_unserved," << a.ls_unserved << '\n';
  os << "be_prefill_tput," << num(r.be.prefill) << '\n';
  os << "be_decode_tput," << num(r.be.decode) << '\n';
  os << "ls_prefill_tput," << num(r.ls.prefill) << '\n';
  os << "ls_decode_tput," << num(r.ls.decode) << '\n';
  os << "tpot_p99_s," << num(r.tpot_p99_s) << '\n';
  for (const auto& [k, v] : r.counters) os << k << ',' << num(v) << '\n';
}

}  // namespace hserve
