#include "hserve/latency_models.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "hserve/error.h"
#include "hserve/workload.h"

namespace hserve {

namespace {

// Least squares on column-normalized design; throws on rank deficiency.
// Least squares on relative residuals: probe noise is multiplicative, so each
// row is weighted by 1/y and short probes count as much as long ones.
Eigen::VectorXd solve_ls(Eigen::MatrixXd x, Eigen::VectorXd y, const char* what) {
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (y(i) > 0.0) {
      x.row(i) /= y(i);
      y(i) = 1.0;
    }
  }
  Eigen::VectorXd scale(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const double m = x.col(j).cwiseAbs().maxCoeff();
    if (m == 0.0) throw FitDegenerate(std::string(what) + ": zero column");
    scale(j) = m;
    x.col(j) /= m;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < x.cols()) {
    throw FitDegenerate(std::string(what) + ": rank-deficient design");
  }
  Eigen::VectorXd beta = qr.solve(y);
  return beta.cwiseQuotient(scale);
}

template <typename Predict>
FitResiduals residuals_of(std::size_t n, Predict&& residual_and_target) {
  FitResiduals r;
  r.samples = n;
  double sq = 0.0, rel = 0.0;
  std::size_t rel_n = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [res, y] = residual_and_target(i);
    sq += res * res;
    r.max_abs = std::max(r.max_abs, std::abs(res));
    if (y != 0.0) {
      rel += std::abs(res / y);
      ++rel_n;
    }
  }
  r.rmse = n ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
  r.mean_rel = rel_n ? rel / static_cast<double>(rel_n) : 0.0;
  return r;
}

}  // namespace

const char* to_string(CommKind k) {
  switch (k) {
    case CommKind::kTensorParallel: return "tensor_parallel";
    case CommKind::kPipeline: return "pipeline";
    case CommKind::kPcie: return "pcie";
    case CommKind::kNetwork: return "network";
  }
  return "?";
}

CommKind parse_comm_kind(const std::string& s) {
  for (auto k : {CommKind::kTensorParallel, CommKind::kPipeline,
                 CommKind::kPcie, CommKind::kNetwork}) {
    if (s == to_string(k)) return k;
  }
  throw InvalidConfig("unknown comm kind '" + s + "'");
}

PrefillAttnModel fit_prefill_attn(const std::vector<PrefillSample>& samples) {
  std::set<double> distinct;
  for (const auto& s : samples) distinct.insert(s.c);
  if (distinct.size() < 2) {
    throw FitDegenerate("prefill fit needs >= 2 distinct c_PA values");
  }
  const auto m = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd x(m, 2);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    x(i, 0) = samples[i].c;
    x(i, 1) = 1.0;
    y(i) = samples[i].duration;
  }
  PrefillAttnModel out;
  const auto beta = solve_ls(x, y, "prefill attention");
  out.a = beta(0);
  out.b = beta(1);
  if (out.a < 0.0) {
    out.a = 0.0;
    out.b = y.mean();
  }
  out.residuals = residuals_of(samples.size(), [&](std::size_t i) {
    const double yi = samples[i].duration;
    return std::pair{yi - predict_prefill_attn(out, samples[i].c), yi};
  });
  return out;
}

DecodeAttnModel fit_decode_attn(const std::vector<DecodeSample>& samples) {
  std::set<std::int64_t> gs;
  for (const auto& s : samples) gs.insert(s.g);
  if (samples.size() < 3 || gs.size() < 2) {
    throw FitDegenerate("decode fit needs >= 3 samples over >= 2 g values");
  }
  const auto m = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd x(m, 3);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    x(i, 0) = samples[i].c;
    x(i, 1) = static_cast<double>(samples[i].g);
    x(i, 2) = 1.0;
    y(i) = samples[i].duration;
  }
  DecodeAttnModel out;
  const auto beta = solve_ls(x, y, "decode attention");
  out.a = beta(0);
  out.h = beta(1);
  out.b = beta(2);
  if (out.a < 0.0) {
    const auto b2 = solve_ls(x.rightCols(2), y, "decode attention");
    out.a = 0.0;
    out.h = b2(0);
    out.b = b2(1);
  }
  out.residuals = residuals_of(samples.size(), [&](std::size_t i) {
    const double yi = samples[i].duration;
    return std::pair{yi - predict_decode_attn(out, samples[i].c, samples[i].g),
                     yi};
  });
  return out;
}

CommModel fit_comm(const std::vector<CommSample>& samples, CommKind kind) {
  std::set<double> distinct;
  for (const auto& s : samples) distinct.insert(s.tokens);
  if (distinct.size() < 2) {
    throw FitDegenerate("comm fit needs >= 2 distinct token counts");
  }
  const auto m = static_cast<Eigen::Index>(samples.size());
  Eigen::MatrixXd x(m, 2);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    x(i, 0) = samples[i].tokens;
    x(i, 1) = 1.0;
    y(i) = samples[i].duration;
  }
  const auto beta = solve_ls(x, y, "communication");
  return CommModel{std::max(0.0, beta(1)), std::max(0.0, beta(0)), kind};
}

DenseLatencyTable build_dense_table(const DenseProbe& probe, std::int64_t min_n,
                                    std::int64_t max_n) {
  if (min_n < 1 || max_n <= min_n) {
    throw InvalidInput("dense table needs 1 <= min_n < max_n");
  }
  DenseLatencyTable t;
  t.min_n = min_n;
  t.max_n = max_n;
  std::map<std::int64_t, double> memo;
  auto p = [&](std::int64_t n) {
    auto it = memo.find(n);
    if (it != memo.end()) return it->second;
    ++t.diagnostics.probe_calls;
    const double v = probe(n);
    memo.emplace(n, v);
    return v;
  };
  t.threshold = p(16) - p(1);

  std::function<void(std::int64_t, std::int64_t)> interpolate =
      [&](std::int64_t lo, std::int64_t hi) {
        if (lo == hi) {
          t.segments.push_back({lo, hi, 0.0, p(lo)});
          return;
        }
        const double plo = p(lo);
        const double phi = p(hi);
        if (phi - plo <= t.threshold) {
          const double slope = (phi - plo) / static_cast<double>(hi - lo);
          t.segments.push_back(
              {lo, hi, slope, plo - slope * static_cast<double>(lo)});
          return;
        }
        const std::int64_t mid = lo + (hi - lo) / 2;
        interpolate(lo, mid);
        interpolate(mid + 1, hi);
      };
  interpolate(min_n, max_n);

  double prev = -INFINITY;
  for (const auto& [n, v] : memo) {
    if (v < prev) t.diagnostics.non_monotone = true;
    prev = v;
  }
  return t;
}

double predict_prefill_attn(const PrefillAttnModel& m, double c_pa) {
  if (c_pa < 0.0) throw InvalidInput("c_PA must be >= 0");
  return m.a * c_pa + m.b;
}

double predict_decode_attn(const DecodeAttnModel& m, double c_da,
                           std::int64_t g) {
  if (c_da < 0.0 || g < 0) throw InvalidInput("c_DA and g must be >= 0");
  return m.a * c_da + m.h * static_cast<double>(g) + m.b;
}

double predict_dense(const DenseLatencyTable& t, std::int64_t n,
                     bool* extrapolated) {
  if (n < 0) throw InvalidInput("dense token count must be >= 0");
  if (extrapolated) *extrapolated = false;
  if (n == 0) return 0.0;
  if (t.segments.empty()) throw InvalidInput("dense table is empty");
  auto eval = [](const DenseSegment& s, std::int64_t x) {
    return s.slope * static_cast<double>(x) + s.intercept;
  };
  if (n > t.max_n || n < t.min_n) {
    if (extrapolated) *extrapolated = true;
    const bool above = n > t.max_n;
    const auto& edge = above ? t.segments.back() : t.segments.front();
    double slope = edge.slope;
    if (edge.n_start == edge.n_end) {
      // Single-point edge segment: borrow the nearest sloped segment.
      auto sloped = [](const DenseSegment& s) { return s.n_end > s.n_start; };
      if (above) {
        auto it = std::find_if(t.segments.rbegin(), t.segments.rend(), sloped);
        if (it != t.segments.rend()) slope = it->slope;
      } else {
        auto it = std::find_if(t.segments.begin(), t.segments.end(), sloped);
        if (it != t.segments.end()) slope = it->slope;
      }
    }
    const std::int64_t anchor = above ? t.max_n : t.min_n;
    const double v = eval(edge, anchor) +
                     slope * static_cast<double>(n - anchor);
    return std::max(v, 0.0);
  }
  auto it = std::upper_bound(
      t.segments.begin(), t.segments.end(), n,
      [](std::int64_t x, const DenseSegment& s) { return x < s.n_start; });
  return eval(*std::prev(it), n);
}

double comm_latency(const CommModel& m, double tokens) {
  if (tokens < 0.0) throw InvalidInput("token count must be >= 0");
  if (tokens == 0.0) return 0.0;
  return m.alpha + m.beta * tokens;
}

const CommModel* find_comm(const LatencyModelSet& s, CommKind kind) {
  for (const auto& c : s.comm) {
    if (c.kind == kind) return &c;
  }
  return nullptr;
}

double gamma(const LatencyModelSet& s, std::int64_t n_tokens) {
  if (n_tokens < 0) throw InvalidInput("token count must be >= 0");
  double g = 0.0;
  const double n = static_cast<double>(n_tokens);
  if (s.tp_degree > 1) {
    const auto* tp = find_comm(s, CommKind::kTensorParallel);
    if (!tp) throw InvalidConfig("tensor-parallel comm model missing");
    g += comm_latency(*tp, n);
  }
  if (s.pp_degree > 1) {
    const auto* pp = find_comm(s, CommKind::kPipeline);
    if (!pp) throw InvalidConfig("pipeline comm model missing");
    g += comm_latency(*pp, n) * static_cast<double>(s.pp_degree - 1) /
         static_cast<double>(s.layers);
  }
  return g;
}

LayerLatency per_layer_latency(const LatencyModelSet& s, double c_pa,
                               double c_da, std::int64_t g,
                               std::int64_t n_tokens) {
  LayerLatency l;
  l.compute = predict_prefill_attn(s.prefill_attn, c_pa) +
              predict_decode_attn(s.decode_attn, c_da, g) +
              predict_dense(s.dense, n_tokens);
  l.gamma = gamma(s, n_tokens);
  return l;
}

// --- profiling -------------------------------------------------------------

namespace {

struct SampleDraws {
  std::vector<std::int64_t> prefill_len;
  std::vector<std::pair<double, std::int64_t>> decode;  // (c, g)
  std::vector<std::int64_t> dense_n;
  std::vector<double> comm_tokens;
};

SampleDraws draw_points(const FitOptions& o, std::int64_t dense_max,
                        double max_ctx, std::size_t count,
                        std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int64_t> len(1, o.max_prefill_len);
  std::uniform_int_distribution<std::int64_t> reqs(1, o.max_decode_reqs);
  std::uniform_int_distribution<std::int64_t> dense(1, dense_max);
  std::uniform_int_distribution<std::int64_t> toks(1, 8192);
  SampleDraws d;
  for (std::size_t i = 0; i < count; ++i) {
    d.prefill_len.push_back(len(rng));
    const auto g = reqs(rng);
    // Log-uniform context sweep so small batches are covered as densely as
    // large ones.
    std::uniform_real_distribution<double> log_ctx(
        std::log(static_cast<double>(g)),
        std::log(std::max<double>(g, max_ctx)));
    d.decode.emplace_back(std::floor(std::exp(log_ctx(rng))), g);
    d.dense_n.push_back(dense(rng));
    d.comm_tokens.push_back(static_cast<double>(toks(rng)));
  }
  return d;
}

double pairwise_units(std::int64_t len) {
  return static_cast<double>(len) * static_cast<double>(len + 1) / 2.0;
}

LatencyModelSet fit_device(const DeviceProfile& dev,
                           const ClusterProfile& cluster,
                           const FitOptions& o, std::int64_t dense_max,
                           double max_ctx, std::uint64_t seed) {
  NoiseSource noise(derive_seed(seed, 0xA1));
  const auto pts = draw_points(o, dense_max, max_ctx, o.samples,
                               derive_seed(seed, 0xA2));
  std::vector<PrefillSample> pre;
  std::vector<DecodeSample> dec;
  for (std::size_t i = 0; i < o.samples; ++i) {
    const double c = pairwise_units(pts.prefill_len[i]);
    pre.push_back({c, probe_attention(dev, AttnPhase::kPrefill, c, 1, &noise)});
    const auto [dc, g] = pts.decode[i];
    dec.push_back(
        {dc, g, probe_attention(dev, AttnPhase::kDecode, dc, g, &noise)});
  }
  LatencyModelSet s;
  s.device_class = dev.device_class;
  s.prefill_attn = fit_prefill_attn(pre);
  s.decode_attn = fit_decode_attn(dec);
  s.dense = build_dense_table(
      [&dev](std::int64_t n) { return probe_dense(dev, n); }, 1, dense_max);
  s.tp_degree = cluster.tp_degree;
  s.pp_degree = cluster.pp_degree;
  s.layers = cluster.layers;

  const std::pair<CommKind, const LinkProfile*> links[] = {
      {CommKind::kTensorParallel, &cluster.tp_comm},
      {CommKind::kPipeline, &cluster.pp_comm},
      {CommKind::kPcie, &cluster.pcie},
      {CommKind::kNetwork, &cluster.network}};
  for (const auto& [kind, link] : links) {
    std::vector<CommSample> cs;
    for (double t : pts.comm_tokens) {
      cs.push_back({t, probe_link(*link, t, &noise, dev.noise_rel)});
    }
    s.comm.push_back(fit_comm(cs, kind));
  }
  return s;
}

}  // namespace

ModelsDoc fit_all(const ProfileSet& profiles, const std::string& model_name,
                  const FitOptions& opts) {
  if (opts.samples < 3) throw InvalidConfig("fit needs >= 3 samples");
  ModelsDoc doc;
  doc.model = model_name;
  const double gpu_ctx =
      opts.max_decode_context > 0.0
          ? opts.max_decode_context
          : static_cast<double>(profiles.cluster.gpu_kv_capacity);
  const double cpu_ctx =
      opts.max_decode_context > 0.0
          ? opts.max_decode_context
          : static_cast<double>(profiles.cluster.cpu_mem_tokens);
  doc.gpu = fit_device(profiles.gpu, profiles.cluster, opts,
                       opts.gpu_dense_max_n, gpu_ctx,
                       derive_seed(opts.seed, 0x61));
  doc.cpu = fit_device(profiles.cpu, profiles.cluster, opts,
                       opts.cpu_dense_max_n, cpu_ctx,
                       derive_seed(opts.seed, 0x62));
  return doc;
}

AccuracyReport evaluate_accuracy(const LatencyModelSet& set,
                                 const DeviceProfile& profile,
                                 const FitOptions& opts, std::size_t points,
                                 std::uint64_t seed) {
  if (points == 0) throw InvalidInput("accuracy evaluation needs points");
  NoiseSource noise(derive_seed(seed, 0xB1));
  const double max_ctx = opts.max_decode_context > 0.0
                             ? opts.max_decode_context
                             : 400000.0;
  const auto pts =
      draw_points(opts, set.dense.max_n, max_ctx, points, derive_seed(seed, 0xB2));
  double e_pre = 0.0, e_dec = 0.0, e_dense = 0.0;
  for (std::size_t i = 0; i < points; ++i) {
    const double c = pairwise_units(pts.prefill_len[i]);
    const double mp = probe_attention(profile, AttnPhase::kPrefill, c, 1, &noise);
    e_pre += std::abs(predict_prefill_attn(set.prefill_attn, c) - mp) / mp;
    const auto [dc, g] = pts.decode[i];
    const double md = probe_attention(profile, AttnPhase::kDecode, dc, g, &noise);
    e_dec += std::abs(predict_decode_attn(set.decode_attn, dc, g) - md) / md;
    const auto n = pts.dense_n[i];
    const double mn = probe_dense(profile, n, &noise);
    e_dense += std::abs(predict_dense(set.dense, n) - mn) / mn;
  }
  const double k = static_cast<double>(points);
  return {1.0 - e_pre / k, 1.0 - e_dec / k, 1.0 - e_dense / k};
}

// --- JSON ------------------------------------------------------------------

namespace {

nlohmann::json residuals_json(const FitResiduals& r) {
  return {{"samples", r.samples},
          {"rmse", r.rmse},
          {"max_abs", r.max_abs},
          {"mean_rel", r.mean_rel}};
}

FitResiduals residuals_from(const nlohmann::json& j) {
  FitResiduals r;
  if (!j.is_object()) return r;
  r.samples = j.value("samples", std::size_t{0});
  r.rmse = j.value("rmse", 0.0);
  r.max_abs = j.value("max_abs", 0.0);
  r.mean_rel = j.value("mean_rel", 0.0);
  return r;
}

}  // namespace

void to_json(nlohmann::json& j, const LatencyModelSet& s) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& g : s.dense.segments) {
    segs.push_back({g.n_start, g.n_end, g.slope, g.intercept});
  }
  nlohmann::json comm = nlohmann::json::array();
  for (const auto& c : s.comm) {
    comm.push_back(
        {{"kind", to_string(c.kind)}, {"alpha", c.alpha}, {"beta", c.beta}});
  }
  j = {{"device_class", to_string(s.device_class)},
       {"prefill_attn",
        {{"a", s.prefill_attn.a},
         {"b", s.prefill_attn.b},
         {"residuals", residuals_json(s.prefill_attn.residuals)}}},
       {"decode_attn",
        {{"a", s.decode_attn.a},
         {"h", s.decode_attn.h},
         {"b", s.decode_attn.b},
         {"residuals", residuals_json(s.decode_attn.residuals)}}},
       {"dense",
        {{"min_n", s.dense.min_n},
         {"max_n", s.dense.max_n},
         {"threshold", s.dense.threshold},
         {"probe_calls", s.dense.diagnostics.probe_calls},
         {"non_monotone", s.dense.diagnostics.non_monotone},
         {"segments", segs}}},
       {"comm", comm},
       {"tp_degree", s.tp_degree},
       {"pp_degree", s.pp_degree},
       {"layers", s.layers}};
}

void from_json(const nlohmann::json& j, LatencyModelSet& s) {
  const auto cls = j.at("device_class").get<std::string>();
  if (cls != "GPU" && cls != "CPU") {
    throw InvalidConfig("device_class must be GPU or CPU");
  }
  s.device_class = cls == "GPU" ? DeviceClass::kGPU : DeviceClass::kCPU;
  const auto& pa = j.at("prefill_attn");
  s.prefill_attn.a = pa.at("a").get<double>();
  s.prefill_attn.b = pa.at("b").get<double>();
  s.prefill_attn.residuals = residuals_from(pa.value("residuals", nlohmann::json{}));
  const auto& da = j.at("decode_attn");
  s.decode_attn.a = da.at("a").get<double>();
  s.decode_attn.h = da.at("h").get<double>();
  s.decode_attn.b = da.at("b").get<double>();
  s.decode_attn.residuals = residuals_from(da.value("residuals", nlohmann::json{}));
  if (s.prefill_attn.a < 0.0 || s.decode_attn.a < 0.0) {
    throw InvalidConfig("attention load coefficients must be >= 0");
  }
  const auto& d = j.at("dense");
  s.dense = DenseLatencyTable{};
  s.dense.min_n = d.at("min_n").get<std::int64_t>();
  s.dense.max_n = d.at("max_n").get<std::int64_t>();
  s.dense.threshold = d.at("threshold").get<double>();
  s.dense.diagnostics.probe_calls = d.value("probe_calls", std::int64_t{0});
  s.dense.diagnostics.non_monotone = d.value("non_monotone", false);
  std::int64_t expect = s.dense.min_n;
  for (const auto& e : d.at("segments")) {
    DenseSegment g{e.at(0).get<std::int64_t>(), e.at(1).get<std::int64_t>(),
                   e.at(2).get<double>(), e.at(3).get<double>()};
    if (g.n_start != expect || g.n_end < g.n_start) {
      throw InvalidConfig("dense segments must be contiguous");
    }
    expect = g.n_end + 1;
    s.dense.segments.push_back(g);
  }
  if (s.dense.segments.empty() || expect != s.dense.max_n + 1) {
    throw InvalidConfig("dense segments must cover [min_n, max_n]");
  }
  s.comm.clear();
  for (const auto& c : j.at("comm")) {
    CommModel m{c.at("alpha").get<double>(), c.at("beta").get<double>(),
                parse_comm_kind(c.at("kind").get<std::string>())};
    if (m.alpha < 0.0 || m.beta < 0.0) {
      throw InvalidConfig("comm alpha/beta must be >= 0");
    }
    s.comm.push_back(m);
  }
  s.tp_degree = j.at("tp_degree").get<std::int64_t>();
  s.pp_degree = j.at("pp_degree").get<std::int64_t>();
  s.layers = j.at("layers").get<std::int64_t>();
}

void to_json(nlohmann::json& j, const ModelsDoc& d) {
  j = {{"kind", "hserve-models"},
       {"version", ModelsDoc::kVersion},
       {"model", d.model},
       {"gpu", d.gpu},
       {"cpu", d.cpu}};
}

void from_json(const nlohmann::json& j, ModelsDoc& d) {
  if (j.value("kind", std::string{}) != "hserve-models") {
    throw InvalidConfig("not a models document");
  }
  const int v = j.at("version").get<int>();
  if (v != ModelsDoc::kVersion) {
    throw InvalidConfig("unsupported models document version " +
                        std::to_string(v));
  }
  d.model = j.at("model").get<std::string>();
  d.gpu = j.at("gpu").get<LatencyModelSet>();
  d.cpu = j.at("cpu").get<LatencyModelSet>();
  if (d.gpu.device_class != DeviceClass::kGPU ||
      d.cpu.device_class != DeviceClass::kCPU) {
    throw InvalidConfig("models document device classes mismatch");
  }
}

}  // namespace hserve
