#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "hserve/error.h"
#include "hserve/latency_models.h"

using namespace hserve;

namespace {

// Staircase with `spikes` evenly spaced jumps over [1, 4096] and flat
// plateaus in between.
double plateau_ladder(std::int64_t n, int spikes) {
  const std::int64_t width = 4096 / (spikes + 1);
  const auto k = std::min<std::int64_t>((n - 1) / width, spikes);
  return 100.0 + 200.0 * static_cast<double>(k);
}

}  // namespace

TEST_CASE("prefill fit recovers an exact line") {
  std::vector<PrefillSample> s;
  for (double c : {0.0, 10.0, 1000.0, 123456.0, 7.0e7}) {
    s.push_back({c, 0.5 * c + 20.0});
  }
  const auto m = fit_prefill_attn(s);
  CHECK(m.a == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(m.b == doctest::Approx(20.0).epsilon(1e-9));
  CHECK(m.residuals.samples == 5);
  CHECK(m.residuals.max_abs < 1e-6);
  CHECK(predict_prefill_attn(m, 0.0) == doctest::Approx(m.b));
}

TEST_CASE("prefill fit rejects degenerate samples") {
  CHECK_THROWS_AS(fit_prefill_attn({{5.0, 1.0}, {5.0, 2.0}}), FitDegenerate);
  CHECK_THROWS_AS(fit_prefill_attn({}), FitDegenerate);
}

TEST_CASE("decode fit recovers an exact plane") {
  std::vector<DecodeSample> s;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> c(0.0, 5e5);
  std::uniform_int_distribution<std::int64_t> g(1, 200);
  for (int i = 0; i < 50; ++i) {
    const double ci = c(rng);
    const auto gi = g(rng);
    s.push_back({ci, gi, 0.1 * ci + 5.0 * gi + 30.0});
  }
  const auto m = fit_decode_attn(s);
  CHECK(m.a == doctest::Approx(0.1).epsilon(1e-9));
  CHECK(m.h == doctest::Approx(5.0).epsilon(1e-9));
  CHECK(m.b == doctest::Approx(30.0).epsilon(1e-9));
}

TEST_CASE("decode fit: per-request term at fixed context") {
  std::vector<DecodeSample> s;
  for (std::int64_t g = 1; g <= 8; ++g) {
    for (double c : {1000.0, 4000.0, 9000.0}) {
      s.push_back({c, g, 0.02 * c - 0.7 * g + 40.0});
    }
  }
  const auto m = fit_decode_attn(s);
  CHECK(m.h == doctest::Approx(-0.7).epsilon(1e-9));
  for (std::int64_t g = 1; g < 8; ++g) {
    CHECK(predict_decode_attn(m, 5000.0, g + 1) -
              predict_decode_attn(m, 5000.0, g) ==
          doctest::Approx(m.h));
  }
}

TEST_CASE("decode fit rejects collinear designs") {
  CHECK_THROWS_AS(fit_decode_attn({{1.0, 1, 2.0}, {2.0, 1, 3.0}, {3.0, 1, 4.0}}),
                  FitDegenerate);
  // c proportional to g
  CHECK_THROWS_AS(fit_decode_attn({{10.0, 1, 2.0}, {20.0, 2, 3.0}, {30.0, 3, 4.0}}),
                  FitDegenerate);
  CHECK_THROWS_AS(fit_decode_attn({{10.0, 1, 2.0}, {20.0, 2, 3.0}}),
                  FitDegenerate);
}

TEST_CASE("predictions reject negative inputs") {
  const PrefillAttnModel p{1.0, 1.0, {}};
  const DecodeAttnModel d{1.0, 1.0, 1.0, {}};
  CHECK_THROWS_AS(predict_prefill_attn(p, -1.0), InvalidInput);
  CHECK_THROWS_AS(predict_decode_attn(d, -1.0, 1), InvalidInput);
  CHECK_THROWS_AS(predict_decode_attn(d, 1.0, -1), InvalidInput);
}

TEST_CASE("dense table: flat probe is one segment") {
  int calls = 0;
  const auto t = build_dense_table(
      [&](std::int64_t) {
        ++calls;
        return 42.0;
      },
      1, 4096);
  REQUIRE(t.segments.size() == 1);
  CHECK(t.threshold == 0.0);
  CHECK(calls == 3);
  CHECK(t.diagnostics.probe_calls == 3);
  CHECK(predict_dense(t, 2000) == doctest::Approx(42.0));
}

TEST_CASE("dense table: linear probe inside the threshold window") {
  const auto t = build_dense_table(
      [](std::int64_t n) { return 3.0 * static_cast<double>(n) + 7.0; }, 1, 16);
  REQUIRE(t.segments.size() == 1);
  CHECK(t.diagnostics.probe_calls == 2);
  CHECK(t.segments[0].slope == doctest::Approx(3.0));
  CHECK(t.segments[0].intercept == doctest::Approx(7.0));
}

TEST_CASE("dense table isolates every tile boundary of a ladder") {
  DeviceProfile p;
  p.dense_base = 50.0;
  p.dense_per_token = 0.25;
  p.dense_tile = 256;
  p.dense_step = 200.0;
  const auto t = build_dense_table(
      [&](std::int64_t n) { return probe_dense(p, n); }, 1, 4096);
  CHECK(t.threshold == doctest::Approx(15 * 0.25));
  CHECK(t.threshold < p.dense_step);
  double worst = 0.0;
  for (std::int64_t n = 1; n <= 4096; ++n) {
    worst = std::max(worst, std::abs(predict_dense(t, n) - probe_dense(p, n)));
  }
  CHECK(worst <= t.threshold);
  // no segment spans a tile boundary
  for (const auto& s : t.segments) {
    CHECK((s.n_start - 1) / 256 == (s.n_end - 1) / 256);
  }
  // contiguous cover
  std::int64_t next = 1;
  for (const auto& s : t.segments) {
    CHECK(s.n_start == next);
    next = s.n_end + 1;
  }
  CHECK(next == 4097);
}

TEST_CASE("dense table probe count is logarithmic per spike") {
  for (int spikes : {1, 4, 16}) {
    CAPTURE(spikes);
    const auto t = build_dense_table(
        [spikes](std::int64_t n) { return plateau_ladder(n, spikes); }, 1,
        4096);
    CHECK(t.diagnostics.probe_calls <= 4 * spikes * 12);
    for (std::int64_t n = 1; n <= 4096; ++n) {
      CHECK(std::abs(predict_dense(t, n) - plateau_ladder(n, spikes)) <=
            t.threshold);
    }
  }
}

TEST_CASE("dense table is deterministic and monotone for monotone probes") {
  DeviceProfile p;
  p.dense_base = 10.0;
  p.dense_per_token = 1.0;
  p.dense_tile = 64;
  p.dense_step = 40.0;
  auto probe = [&](std::int64_t n) { return probe_dense(p, n); };
  const auto a = build_dense_table(probe, 1, 2048);
  const auto b = build_dense_table(probe, 1, 2048);
  CHECK(nlohmann::json(LatencyModelSet{DeviceClass::kGPU, {}, {}, a, {}, 1, 1, 1}) ==
        nlohmann::json(LatencyModelSet{DeviceClass::kGPU, {}, {}, b, {}, 1, 1, 1}));
  for (std::int64_t n = 1; n < 2048; ++n) {
    CHECK(predict_dense(a, n + 1) >= predict_dense(a, n));
  }
  CHECK_FALSE(a.diagnostics.non_monotone);
}

TEST_CASE("dense table flags non-monotone probes") {
  const auto t = build_dense_table(
      [](std::int64_t n) { return n % 2 ? 10.0 : 5.0; }, 1, 64);
  CHECK(t.diagnostics.non_monotone);
}

TEST_CASE("dense prediction edges") {
  const auto t = build_dense_table(
      [](std::int64_t n) { return 2.0 * static_cast<double>(n) + 1.0; }, 1, 16);
  CHECK(predict_dense(t, 0) == 0.0);
  bool flag = false;
  CHECK(predict_dense(t, 10, &flag) == doctest::Approx(21.0));
  CHECK_FALSE(flag);
  CHECK(predict_dense(t, 20, &flag) == doctest::Approx(41.0));
  CHECK(flag);
  CHECK_THROWS_AS(predict_dense(t, -1), InvalidInput);
  CHECK_THROWS_AS(build_dense_table([](std::int64_t) { return 1.0; }, 0, 5),
                  InvalidInput);
  CHECK_THROWS_AS(build_dense_table([](std::int64_t) { return 1.0; }, 5, 5),
                  InvalidInput);
}

TEST_CASE("comm latency and gamma") {
  const CommModel m{5.0, 0.01, CommKind::kTensorParallel};
  CHECK(comm_latency(m, 0.0) == 0.0);
  CHECK(comm_latency(m, 1000.0) == doctest::Approx(15.0));

  LatencyModelSet s;
  s.comm = {m, {2.0, 0.1, CommKind::kPipeline}};
  s.tp_degree = 4;
  s.pp_degree = 1;
  s.layers = 80;
  CHECK(gamma(s, 300) == doctest::Approx(comm_latency(m, 300)));
  CHECK(gamma(s, 0) == 0.0);
  s.tp_degree = 1;
  CHECK(gamma(s, 300) == 0.0);
  s.tp_degree = 2;
  s.pp_degree = 2;
  CHECK(gamma(s, 100) == doctest::Approx(6.0 + 12.0 * 1.0 / 80.0));
  s.comm.pop_back();
  CHECK_THROWS_AS(gamma(s, 100), InvalidConfig);
}

TEST_CASE("per-layer latency sums the three predictions") {
  LatencyModelSet s;
  s.prefill_attn = {0.001, 60.0, {}};
  s.decode_attn = {0.003, 0.2, 14.0, {}};
  s.dense = build_dense_table(
      [](std::int64_t n) { return 100.0 + static_cast<double>(n); }, 1, 1024);
  s.comm = {{20.0, 0.5, CommKind::kTensorParallel}};
  s.tp_degree = 4;
  const auto idle = per_layer_latency(s, 0.0, 0.0, 0, 0);
  CHECK(idle.compute == doctest::Approx(60.0 + 14.0));
  CHECK(idle.gamma == 0.0);
  const auto l = per_layer_latency(s, 5000.0, 20000.0, 7, 300);
  CHECK(l.compute == predict_prefill_attn(s.prefill_attn, 5000.0) +
                         predict_decode_attn(s.decode_attn, 20000.0, 7) +
                         predict_dense(s.dense, 300));
  CHECK(l.gamma == doctest::Approx(20.0 + 150.0));
  CHECK(l.total() == doctest::Approx(l.compute + l.gamma));
}

TEST_CASE("fit_all on default profiles meets the accuracy floor") {
  for (auto model : {ModelSize::k34B, ModelSize::k70B}) {
    const std::string name = to_string(model);
    CAPTURE(name);
    const auto prof = default_profiles(model);
    FitOptions o;
    o.seed = 5;
    const auto doc = fit_all(prof, to_string(model), o);
    CHECK(doc.gpu.prefill_attn.residuals.samples == 100);
    const auto acc = evaluate_accuracy(doc.gpu, prof.gpu, o, 1000, 77);
    CHECK(acc.prefill_attn >= 0.93);
    CHECK(acc.decode_attn >= 0.93);
    CHECK(acc.dense >= 0.93);
    const double probe =
        probe_attention(prof.gpu, AttnPhase::kDecode, 10000.0, 10);
    CHECK(std::abs(predict_decode_attn(doc.gpu.decode_attn, 10000.0, 10) -
                   probe) <= 0.03 * probe);
  }
}

TEST_CASE("noise-free fit reproduces probes") {
  auto prof = default_profiles(ModelSize::k70B);
  prof.gpu.noise_rel = 0.0;
  prof.cpu.noise_rel = 0.0;
  const auto doc = fit_all(prof, "70B");
  const FitOptions o;
  const auto g = evaluate_accuracy(doc.gpu, prof.gpu, o, 1000, 3);
  CHECK(g.prefill_attn >= 0.99999);
  CHECK(g.decode_attn >= 0.99999);
  CHECK(g.dense >= 0.99999);
  for (std::int64_t n : {1, 63, 64, 65, 1000, 4097, 16384}) {
    CHECK(predict_dense(doc.gpu.dense, n) ==
          doctest::Approx(probe_dense(prof.gpu, n)).epsilon(1e-9));
  }
}

TEST_CASE("models document round trip") {
  const auto doc = fit_all(default_profiles(ModelSize::k34B), "34B");
  nlohmann::json j = doc;
  const auto back = j.get<ModelsDoc>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.gpu.dense.segments.size() == doc.gpu.dense.segments.size());
  CHECK(back.gpu.decode_attn.a == doc.gpu.decode_attn.a);

  auto bad = j;
  bad["version"] = 2;
  CHECK_THROWS_AS(bad.get<ModelsDoc>(), InvalidConfig);
  bad = j;
  bad["gpu"]["dense"]["segments"].erase(1);
  CHECK_THROWS_AS(bad.get<ModelsDoc>(), InvalidConfig);
}
