#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <random>
#include <sstream>

#include "hserve/error.h"
#include "hserve/metrics.h"

using namespace hserve;

namespace {

RequestRecord ls(RequestId id, double arrival, std::vector<double> tokens) {
  RequestRecord r;
  r.id = id;
  r.cls = ServiceClass::kLS;
  r.arrival = arrival;
  r.admission = Admission::kAdmitted;
  r.token_times = std::move(tokens);
  r.output_len = static_cast<std::int64_t>(r.token_times.size());
  if (!r.token_times.empty()) r.completion = r.token_times.back();
  return r;
}

}  // namespace

TEST_CASE("ttft and tpot of a simple record") {
  auto r = ls(1, 0.0, {1.5, 1.7, 1.9});
  CHECK(*ttft(r) == doctest::Approx(1.5));
  auto s = tpot_series(r);
  REQUIRE(s.size() == 2);
  CHECK(s[0] == doctest::Approx(0.2));
  CHECK(s[1] == doctest::Approx(0.2));
  CHECK_FALSE(ttft(ls(2, 0.0, {})).has_value());
}

TEST_CASE("attainment: all tokens under the SLO") {
  std::vector<RequestRecord> recs{ls(1, 0.0, {1.0, 1.1, 1.2}),
                                  ls(2, 0.5, {1.0, 1.15})};
  auto a = attainment(recs, 2.0, 0.2, 10.0);
  CHECK(a.ttft_frac == 1.0);
  CHECK(a.tpot_frac == 1.0);
  CHECK(a.ttft_total == 2);
  CHECK(a.tpot_total == 3);
}

TEST_CASE("attainment: half the tokens at twice S_d") {
  // Gaps alternate S_d and 2*S_d.
  std::vector<double> t{1.0};
  for (int i = 0; i < 10; ++i) t.push_back(t.back() + (i % 2 ? 0.4 : 0.2));
  auto a = attainment({ls(1, 0.0, t)}, 2.0, 0.2, 100.0);
  CHECK(a.tpot_frac == doctest::Approx(0.5));
}

TEST_CASE("attainment: rejected and unserved requests") {
  auto rej = ls(1, 0.0, {});
  rej.admission = Admission::kRejected;
  auto waiting_long = ls(2, 0.0, {});   // waited 10 s > S_p
  auto waiting_short = ls(3, 9.5, {});  // waited 0.5 s
  auto be = ls(4, 0.0, {50.0});
  be.cls = ServiceClass::kBE;
  auto a = attainment({rej, waiting_long, waiting_short, be}, 2.0, 0.2, 10.0);
  CHECK(a.ls_rejected == 1);
  CHECK(a.ls_admitted == 2);
  CHECK(a.ttft_total == 1);
  CHECK(a.ttft_met == 0);
  CHECK(a.ls_unserved == 1);
  CHECK(a.ttft_frac == 0.0);
  CHECK(a.tpot_total == 0);
  CHECK(a.tpot_frac == 1.0);
}

TEST_CASE("attainment tolerates rounding at the boundary") {
  double sd = 0.2;
  std::vector<double> t{0.3};
  for (int i = 0; i < 50; ++i) t.push_back(t.back() + sd);
  auto a = attainment({ls(1, 0.0, t)}, 2.0, sd, 100.0);
  CHECK(a.tpot_frac == 1.0);
  t.push_back(t.back() + sd + 1e-6);
  a = attainment({ls(1, 0.0, t)}, 2.0, sd, 100.0);
  CHECK(a.tpot_met == 50);
}

TEST_CASE("attainment is invariant under record reordering") {
  std::mt19937_64 rng(3);
  std::vector<RequestRecord> recs;
  for (int i = 0; i < 60; ++i) {
    std::vector<double> t;
    double at = double(i) * 0.1;
    double x = at + std::uniform_real_distribution<>(0.5, 3.0)(rng);
    int n = int(rng() % 6);
    for (int k = 0; k < n; ++k) {
      t.push_back(x);
      x += std::uniform_real_distribution<>(0.1, 0.3)(rng);
    }
    auto r = ls(RequestId(i), at, t);
    if (i % 7 == 0) r.admission = Admission::kRejected;
    recs.push_back(r);
  }
  auto a = attainment(recs, 2.0, 0.2, 20.0);
  for (int round = 0; round < 5; ++round) {
    std::shuffle(recs.begin(), recs.end(), rng);
    auto b = attainment(recs, 2.0, 0.2, 20.0);
    CHECK(a.ttft_frac == b.ttft_frac);
    CHECK(a.tpot_frac == b.tpot_frac);
    CHECK(a.ttft_total == b.ttft_total);
    CHECK(a.tpot_total == b.tpot_total);
  }
  CHECK(a.ttft_frac >= 0.0);
  CHECK(a.ttft_frac <= 1.0);
  CHECK(a.tpot_frac >= 0.0);
  CHECK(a.tpot_frac <= 1.0);
}

TEST_CASE("BE throughput") {
  CHECK(be_throughput({}, 10.0).prefill == 0.0);
  CHECK(be_throughput({}, 10.0).decode == 0.0);
  CHECK_THROWS_AS(be_throughput({}, 0.0), InvalidInput);

  RequestRecord b;
  b.cls = ServiceClass::kBE;
  b.prompt_len = 100;
  b.prefill_counted = true;
  b.token_times = {1.0, 2.0, 3.0, 4.0};
  RequestRecord recomputed = b;
  recomputed.prefill_counted = false;  // prompt re-processed after eviction
  auto t = be_throughput({b, recomputed}, 10.0);
  CHECK(t.prefill == doctest::Approx(10.0));
  CHECK(t.decode == doctest::Approx(0.6));
}

TEST_CASE("nearest-rank percentile") {
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  CHECK(percentile(v, 99) == 99.0);
  CHECK(percentile(v, 100) == 100.0);
  CHECK(percentile(v, 0) == 1.0);
  CHECK(percentile({}, 50) == 0.0);
}

TEST_CASE("report JSON round-trips losslessly") {
  std::vector<RequestRecord> recs{ls(1, 0.1, {1.0 / 3.0, 0.5 + 1e-12}),
                                  ls(2, 0.2, {})};
  recs[1].admission = Admission::kRejected;
  RequestRecord b;
  b.id = 3;
  b.cls = ServiceClass::kBE;
  b.prompt_len = 77;
  b.output_len = 9;
  b.token_times = {2.0, 2.25};
  b.offloaded_tokens = 1;
  b.swaps = 2;
  b.recomputes = 1;
  recs.push_back(b);
  auto r = make_report(recs, 12.5, 2.0, 0.2);
  r.scenario = "x";
  r.policy = "piggyback";
  r.seed = 18446744073709551615ull;
  r.counters["iterations"] = 42;
  r.config = {{"a", 1}};

  nlohmann::json j = r;
  auto back = j.get<SimReport>();
  CHECK(nlohmann::json(back).dump() == j.dump());
  CHECK(back.records[0].token_times[0] == recs[0].token_times[0]);
  CHECK(back.seed == r.seed);
  CHECK_FALSE(back.records[1].completion.has_value());

  j["schema_version"] = 99;
  CHECK_THROWS_AS(j.get<SimReport>(), InvalidInput);
}

TEST_CASE("CSV exports") {
  auto r = make_report({ls(1, 0.0, {1.5, 1.7, 1.9})}, 10.0, 2.0, 0.2);
  std::ostringstream req, sum;
  write_requests_csv(req, r);
  write_summary_csv(sum, r);
  std::string rows = req.str();
  CHECK(std::count(rows.begin(), rows.end(), '\n') == 2);
  auto header = rows.substr(0, rows.find('\n'));
  auto line = rows.substr(rows.find('\n') + 1);
  CHECK(std::count(header.begin(), header.end(), ',') ==
        std::count(line.begin(), line.end(), ','));
  CHECK(line.rfind("1,LS,", 0) == 0);
  CHECK(sum.str().find("tpot_attainment,1") != std::string::npos);
}
