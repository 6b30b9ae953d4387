#include "hserve/workload.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "hserve/error.h"

namespace hserve {

namespace {

constexpr std::uint64_t kSaltLsArrivals = 0x11;
constexpr std::uint64_t kSaltBeArrivals = 0x22;
constexpr std::uint64_t kSaltLsLengths = 0x33;
constexpr std::uint64_t kSaltBeLengths = 0x44;
constexpr std::uint64_t kSaltLsSchedule = 0x55;

std::vector<std::pair<std::int64_t, std::int64_t>> symmetric_pairs(
    std::int64_t prompt_mean, std::int64_t prompt_spread,
    std::int64_t output_mean, std::int64_t output_spread, int count) {
  // Offsets are symmetric around zero so the list mean is exactly the
  // requested mean; outputs are permuted so lengths are not co-monotone.
  auto offset = [count](std::int64_t spread, int k) {
    const double x =
        -static_cast<double>(spread) + 2.0 * spread * k / (count - 1);
    return static_cast<std::int64_t>(std::round(x));
  };
  std::vector<std::pair<std::int64_t, std::int64_t>> pairs;
  pairs.reserve(count);
  for (int k = 0; k < count; ++k) {
    const int out_k = (k * 37) % count;
    pairs.emplace_back(prompt_mean + offset(prompt_spread, k),
                       output_mean + offset(output_spread, out_k));
  }
  return pairs;
}

}  // namespace

const char* to_string(ServiceClass cls) {
  return cls == ServiceClass::kLS ? "LS" : "BE";
}

LengthDist LengthDist::fixed(std::int64_t prompt, std::int64_t output) {
  LengthDist d;
  d.kind = Kind::kFixed;
  d.prompt = prompt;
  d.output = output;
  return d;
}

LengthDist LengthDist::uniform(std::int64_t prompt_min,
                               std::int64_t prompt_max,
                               std::int64_t output_min,
                               std::int64_t output_max) {
  LengthDist d;
  d.kind = Kind::kUniform;
  d.prompt_min = prompt_min;
  d.prompt_max = prompt_max;
  d.output_min = output_min;
  d.output_max = output_max;
  return d;
}

LengthDist LengthDist::from_list(
    std::vector<std::pair<std::int64_t, std::int64_t>> pairs) {
  LengthDist d;
  d.kind = Kind::kEmpirical;
  d.empirical = std::move(pairs);
  return d;
}

LengthDist preset_lengths(const std::string& name) {
  if (name == "longbench") {
    return LengthDist::from_list(symmetric_pairs(8952, 3048, 136, 64, 64));
  }
  if (name == "dailymails") {
    return LengthDist::from_list(symmetric_pairs(1964, 1200, 397, 250, 64));
  }
  if (name == "sharegpt") {
    return LengthDist::from_list(symmetric_pairs(520, 504, 264, 248, 64));
  }
  throw InvalidConfig("unknown length preset '" + name + "'");
}

bool ClassLoad::enabled() const {
  return rate.has_value() || !schedule.empty() || random_schedule.has_value() ||
         !trace.empty() || backlog > 0;
}

namespace {

void validate_lengths(const LengthDist& d) {
  switch (d.kind) {
    case LengthDist::Kind::kFixed:
      if (d.prompt < 1 || d.output < 1) {
        throw InvalidConfig("fixed lengths must be >= 1");
      }
      break;
    case LengthDist::Kind::kUniform:
      if (d.prompt_min < 1 || d.output_min < 1 || d.prompt_max < d.prompt_min ||
          d.output_max < d.output_min) {
        throw InvalidConfig("uniform length bounds must satisfy 1 <= min <= max");
      }
      break;
    case LengthDist::Kind::kEmpirical:
      if (d.empirical.empty()) {
        throw InvalidConfig("empirical length list is empty");
      }
      for (const auto& [p, o] : d.empirical) {
        if (p < 1 || o < 1) {
          throw InvalidConfig("empirical lengths must be >= 1");
        }
      }
      break;
  }
}

void validate_schedule(const std::vector<RateChange>& schedule) {
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i].rate > 0.0)) {
      throw InvalidConfig("schedule rates must be > 0");
    }
    if (schedule[i].time < 0.0) {
      throw InvalidConfig("schedule times must be >= 0");
    }
    if (i > 0 && !(schedule[i].time > schedule[i - 1].time)) {
      throw InvalidConfig("schedule change-points must be strictly increasing");
    }
  }
}

void validate_class(const ClassLoad& c, const char* name) {
  if (!c.enabled()) return;
  if (c.rate && !(*c.rate > 0.0)) {
    throw InvalidConfig(std::string(name) + " rate must be > 0");
  }
  validate_schedule(c.schedule);
  if (c.random_schedule) {
    const auto& r = *c.random_schedule;
    if (!(r.interval > 0.0) || !(r.min_rate > 0.0) || r.max_rate < r.min_rate) {
      throw InvalidConfig(std::string(name) + " random schedule is malformed");
    }
  }
  for (double t : c.trace) {
    if (t < 0.0) throw InvalidConfig("trace timestamps must be >= 0");
  }
  if (c.backlog < 0) throw InvalidConfig("backlog must be >= 0");
  validate_lengths(c.lengths);
}

}  // namespace

void validate(const WorkloadConfig& cfg) {
  validate_class(cfg.ls, "ls");
  validate_class(cfg.be, "be");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (salt * 0x9E3779B97F4A7C15ull);
  z += 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::vector<double> gen_poisson_arrivals(double rate, double horizon,
                                         std::uint64_t seed) {
  if (!(rate > 0.0)) throw InvalidConfig("poisson rate must be > 0");
  if (!(horizon > 0.0)) throw InvalidConfig("horizon must be > 0");
  return gen_dynamic_rate_arrivals({{0.0, rate}}, horizon, seed);
}

std::vector<double> gen_dynamic_rate_arrivals(
    const std::vector<RateChange>& schedule, double horizon,
    std::uint64_t seed) {
  if (schedule.empty()) throw InvalidConfig("rate schedule is empty");
  if (!(horizon > 0.0)) throw InvalidConfig("horizon must be > 0");
  validate_schedule(schedule);

  std::mt19937_64 rng(seed);
  std::vector<double> out;
  for (std::size_t s = 0; s < schedule.size(); ++s) {
    const double begin = schedule[s].time;
    const double end =
        s + 1 < schedule.size() ? std::min(schedule[s + 1].time, horizon)
                                : horizon;
    if (begin >= horizon) break;
    // Memorylessness: restarting the clock at each change-point yields the
    // piecewise-Poisson process.
    std::exponential_distribution<double> gap(schedule[s].rate);
    double t = begin;
    while (true) {
      t += gap(rng);
      if (t >= end) break;
      out.push_back(t);
    }
  }
  return out;
}

std::vector<RateChange> gen_random_rate_schedule(const RandomSchedule& spec,
                                                 double horizon,
                                                 std::uint64_t seed) {
  if (!(spec.interval > 0.0) || !(spec.min_rate > 0.0) ||
      spec.max_rate < spec.min_rate) {
    throw InvalidConfig("random schedule is malformed");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> rate(spec.min_rate, spec.max_rate);
  std::vector<RateChange> out;
  for (double t = 0.0; t < horizon; t += spec.interval) {
    out.push_back({t, rate(rng)});
  }
  return out;
}

std::vector<std::pair<std::int64_t, std::int64_t>> sample_lengths(
    const LengthDist& dist, std::size_t count, std::uint64_t seed) {
  validate_lengths(dist);
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  out.reserve(count);
  switch (dist.kind) {
    case LengthDist::Kind::kFixed:
      out.assign(count, {dist.prompt, dist.output});
      break;
    case LengthDist::Kind::kUniform: {
      std::uniform_int_distribution<std::int64_t> p(dist.prompt_min,
                                                    dist.prompt_max);
      std::uniform_int_distribution<std::int64_t> o(dist.output_min,
                                                    dist.output_max);
      for (std::size_t i = 0; i < count; ++i) {
        const auto prompt = p(rng);
        out.emplace_back(prompt, o(rng));
      }
      break;
    }
    case LengthDist::Kind::kEmpirical: {
      std::uniform_int_distribution<std::size_t> pick(
          0, dist.empirical.size() - 1);
      for (std::size_t i = 0; i < count; ++i) {
        out.push_back(dist.empirical[pick(rng)]);
      }
      break;
    }
  }
  return out;
}

namespace {

std::vector<double> class_arrivals(const ClassLoad& c, double horizon,
                                   std::uint64_t seed,
                                   std::uint64_t schedule_seed) {
  std::vector<double> times(static_cast<std::size_t>(c.backlog), 0.0);
  if (!c.trace.empty()) {
    for (double t : c.trace) {
      if (t < horizon) times.push_back(t);
    }
    std::sort(times.begin(), times.end());
    return times;
  }
  std::vector<double> generated;
  if (c.random_schedule) {
    generated = gen_dynamic_rate_arrivals(
        gen_random_rate_schedule(*c.random_schedule, horizon, schedule_seed),
        horizon, seed);
  } else if (!c.schedule.empty()) {
    generated = gen_dynamic_rate_arrivals(c.schedule, horizon, seed);
  } else if (c.rate) {
    generated = gen_poisson_arrivals(*c.rate, horizon, seed);
  }
  times.insert(times.end(), generated.begin(), generated.end());
  return times;
}

}  // namespace

std::vector<RequestSpec> build_requests(const WorkloadConfig& cfg,
                                        double horizon) {
  validate(cfg);
  if (!(horizon > 0.0)) throw InvalidConfig("horizon must be > 0");

  struct Draft {
    RequestSpec spec;
    std::size_t order;
  };
  std::vector<Draft> drafts;
  auto add_class = [&](const ClassLoad& c, ServiceClass cls,
                       std::uint64_t arrival_salt,
                       std::uint64_t length_salt) {
    if (!c.enabled()) return;
    const auto times =
        class_arrivals(c, horizon, derive_seed(cfg.seed, arrival_salt),
                       derive_seed(cfg.seed, kSaltLsSchedule + arrival_salt));
    const auto lengths = sample_lengths(c.lengths, times.size(),
                                        derive_seed(cfg.seed, length_salt));
    for (std::size_t i = 0; i < times.size(); ++i) {
      RequestSpec r;
      r.cls = cls;
      r.arrival_time = times[i];
      r.prompt_len = lengths[i].first;
      r.output_len = lengths[i].second;
      drafts.push_back({r, i});
    }
  };
  add_class(cfg.ls, ServiceClass::kLS, kSaltLsArrivals, kSaltLsLengths);
  add_class(cfg.be, ServiceClass::kBE, kSaltBeArrivals, kSaltBeLengths);

  std::stable_sort(drafts.begin(), drafts.end(),
                   [](const Draft& a, const Draft& b) {
                     if (a.spec.arrival_time != b.spec.arrival_time) {
                       return a.spec.arrival_time < b.spec.arrival_time;
                     }
                     if (a.spec.cls != b.spec.cls) {
                       return a.spec.cls == ServiceClass::kLS;
                     }
                     return a.order < b.order;
                   });
  std::vector<RequestSpec> out;
  out.reserve(drafts.size());
  for (std::size_t i = 0; i < drafts.size(); ++i) {
    drafts[i].spec.id = i;
    out.push_back(drafts[i].spec);
  }
  return out;
}

// --- JSON ------------------------------------------------------------------

void to_json(nlohmann::json& j, const LengthDist& d) {
  switch (d.kind) {
    case LengthDist::Kind::kFixed:
      j = {{"kind", "fixed"}, {"prompt", d.prompt}, {"output", d.output}};
      break;
    case LengthDist::Kind::kUniform:
      j = {{"kind", "uniform"},
           {"prompt_min", d.prompt_min},
           {"prompt_max", d.prompt_max},
           {"output_min", d.output_min},
           {"output_max", d.output_max}};
      break;
    case LengthDist::Kind::kEmpirical:
      j = {{"kind", "empirical"}, {"pairs", d.empirical}};
      break;
  }
}

void from_json(const nlohmann::json& j, LengthDist& d) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "fixed") {
    d = LengthDist::fixed(j.at("prompt").get<std::int64_t>(),
                          j.at("output").get<std::int64_t>());
  } else if (kind == "uniform") {
    d = LengthDist::uniform(j.at("prompt_min").get<std::int64_t>(),
                            j.at("prompt_max").get<std::int64_t>(),
                            j.at("output_min").get<std::int64_t>(),
                            j.at("output_max").get<std::int64_t>());
  } else if (kind == "empirical") {
    d = LengthDist::from_list(
        j.at("pairs")
            .get<std::vector<std::pair<std::int64_t, std::int64_t>>>());
  } else if (kind == "preset") {
    d = preset_lengths(j.at("name").get<std::string>());
  } else {
    throw InvalidConfig("unknown length distribution kind '" + kind + "'");
  }
}

namespace {

void class_to_json(nlohmann::json& j, const ClassLoad& c) {
  j = nlohmann::json::object();
  if (c.rate) j["rate"] = *c.rate;
  if (!c.schedule.empty()) {
    auto& s = j["schedule"] = nlohmann::json::array();
    for (const auto& rc : c.schedule) s.push_back({rc.time, rc.rate});
  }
  if (c.random_schedule) {
    j["random_schedule"] = {{"interval_s", c.random_schedule->interval},
                            {"min_rate", c.random_schedule->min_rate},
                            {"max_rate", c.random_schedule->max_rate}};
  }
  if (!c.trace.empty()) j["trace"] = c.trace;
  if (c.backlog > 0) j["backlog"] = c.backlog;
  j["lengths"] = c.lengths;
}

void class_from_json(const nlohmann::json& j, ClassLoad& c) {
  c = ClassLoad{};
  if (j.contains("rate")) c.rate = j.at("rate").get<double>();
  if (j.contains("schedule")) {
    for (const auto& e : j.at("schedule")) {
      c.schedule.push_back({e.at(0).get<double>(), e.at(1).get<double>()});
    }
  }
  if (j.contains("random_schedule")) {
    const auto& r = j.at("random_schedule");
    c.random_schedule = RandomSchedule{r.value("interval_s", 5.0),
                                       r.value("min_rate", 1.0),
                                       r.value("max_rate", 8.0)};
  }
  if (j.contains("trace")) c.trace = j.at("trace").get<std::vector<double>>();
  c.backlog = j.value("backlog", std::int64_t{0});
  if (j.contains("lengths")) c.lengths = j.at("lengths").get<LengthDist>();
}

}  // namespace

void to_json(nlohmann::json& j, const WorkloadConfig& cfg) {
  nlohmann::json ls, be;
  class_to_json(ls, cfg.ls);
  class_to_json(be, cfg.be);
  j = {{"ls", ls}, {"be", be}, {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, WorkloadConfig& cfg) {
  cfg = WorkloadConfig{};
  if (j.contains("ls")) class_from_json(j.at("ls"), cfg.ls);
  if (j.contains("be")) class_from_json(j.at("be"), cfg.be);
  cfg.seed = j.value("seed", std::uint64_t{1});
  validate(cfg);
}

}  // namespace hserve
