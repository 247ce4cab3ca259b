#include "efi/synthetic_csi.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "efi/errors.hpp"
#include "efi/parallel.hpp"

namespace efi {

using nlohmann::json;

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr int kStaticPaths = 3;
}  // namespace

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
  // splitmix64 over base xor a stream offset
  std::uint64_t z = base ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void ActivityProfile::validate() const {
  if (name.empty()) throw ConfigError("activity profile needs a name");
  if (dynamic_paths < 1) throw ConfigError("profile '" + name + "': dynamic_paths must be >= 1");
  if (!(doppler_min_hz < doppler_max_hz)) {
    throw ConfigError("profile '" + name + "': doppler_min must be < doppler_max");
  }
  if (amp_min < 0 || amp_max < amp_min) throw ConfigError("profile '" + name + "': bad amp range");
  if (delay_min_s < 0 || delay_max_s < delay_min_s) {
    throw ConfigError("profile '" + name + "': bad delay range");
  }
}

std::vector<ActivityProfile> default_profiles() {
  auto mk = [](const char* name, int paths, double f0, double f1, double a0, double a1,
               ActivityProfile::Envelope env) {
    ActivityProfile p;
    p.name = name;
    p.dynamic_paths = paths;
    p.doppler_min_hz = f0;
    p.doppler_max_hz = f1;
    p.amp_min = a0;
    p.amp_max = a1;
    p.envelope = env;
    return p;
  };
  using E = ActivityProfile::Envelope;
  return {
      mk("running", 3, 30.0, 42.0, 0.30, 0.50, E::constant),
      mk("walking", 2, 14.0, 20.0, 0.25, 0.45, E::constant),
      mk("falling", 2, 6.0, 10.0, 0.35, 0.60, E::burst),
      mk("boxing", 2, 22.0, 28.0, 0.25, 0.45, E::burst),
      mk("circling", 1, 10.0, 13.0, 0.30, 0.50, E::ramp),
      mk("cleaning", 2, 3.0, 5.0, 0.25, 0.50, E::ramp),
  };
}

DatasetConfig DatasetConfig::preset_config(const std::string& name) {
  DatasetConfig cfg;
  if (name == "paper") {
    cfg.preset = "paper";
    cfg.subcarriers = 114;
    cfg.time_steps = 500;
    cfg.sample_rate_hz = 500.0;
  } else if (name == "desk") {
    cfg.preset = "desk";
    cfg.subcarriers = 30;
    cfg.time_steps = 100;
    cfg.sample_rate_hz = 100.0;
  } else {
    throw ConfigError("unknown dataset preset '" + name + "'");
  }
  return cfg;
}

void DatasetConfig::validate() const {
  if (antenna_pairs <= 0 || subcarriers <= 0 || time_steps <= 0) {
    throw ConfigError("dataset dims must be positive");
  }
  if (sample_rate_hz <= 0 || bandwidth_hz <= 0) throw ConfigError("bad sampling parameters");
  if (classes.empty()) throw ConfigError("dataset needs at least one class");
  for (const auto& c : classes) c.validate();
  if (samples_per_class < 5) throw ConfigError("samples_per_class must be >= 5");
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must be in (0,1)");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
}

namespace {

// Subcarrier frequency offsets on a uniform grid across the band.
std::vector<double> subcarrier_offsets(const DatasetConfig& cfg) {
  std::vector<double> f(static_cast<std::size_t>(cfg.subcarriers));
  const double half = cfg.bandwidth_hz / 2.0;
  const double step = cfg.subcarriers > 1 ? cfg.bandwidth_hz / (cfg.subcarriers - 1) : 0.0;
  for (int i = 0; i < cfg.subcarriers; ++i) f[static_cast<std::size_t>(i)] = -half + i * step;
  return f;
}

}  // namespace

StaticEnvironment make_environment(const DatasetConfig& cfg) {
  cfg.validate();
  StaticEnvironment env;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0xE57A71C5ULL));
  std::uniform_real_distribution<double> gain(0.6, 1.2);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  std::uniform_real_distribution<double> delay(10e-9, 80e-9);

  const auto freqs = subcarrier_offsets(cfg);
  env.paths_per_pair.resize(static_cast<std::size_t>(cfg.antenna_pairs));
  env.response.resize(static_cast<std::size_t>(cfg.antenna_pairs));
  double amp_sum = 0.0;
  for (int p = 0; p < cfg.antenna_pairs; ++p) {
    auto& paths = env.paths_per_pair[static_cast<std::size_t>(p)];
    for (int s = 0; s < kStaticPaths; ++s) paths.push_back({gain(rng), phase(rng), delay(rng)});
    auto& resp = env.response[static_cast<std::size_t>(p)];
    resp.resize(freqs.size());
    for (std::size_t i = 0; i < freqs.size(); ++i) {
      std::complex<double> h(0.0, 0.0);
      for (const auto& path : paths) {
        h += std::polar(path.gain, path.phase - kTwoPi * freqs[i] * path.delay_s);
      }
      resp[i] = h;
      amp_sum += std::abs(h);
    }
  }
  env.mean_static_amplitude = amp_sum / (cfg.antenna_pairs * cfg.subcarriers);
  return env;
}

CSIFrame gen_sample(const ActivityProfile& profile, const DatasetConfig& cfg,
                    const StaticEnvironment& env, std::mt19937_64& rng) {
  const int pairs = cfg.antenna_pairs;
  const int subs = cfg.subcarriers;
  const int steps = cfg.time_steps;
  const auto freqs = subcarrier_offsets(cfg);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);

  struct DynPath {
    double amp;
    double doppler_hz;
    double delay_s;
    double burst_center;  // as a fraction of the frame
    double burst_width;
  };
  std::vector<DynPath> dyn(static_cast<std::size_t>(profile.dynamic_paths));
  for (auto& d : dyn) {
    d.amp = profile.amp_min + (profile.amp_max - profile.amp_min) * unit(rng);
    d.doppler_hz = profile.doppler_min_hz + (profile.doppler_max_hz - profile.doppler_min_hz) * unit(rng);
    d.delay_s = profile.delay_min_s + (profile.delay_max_s - profile.delay_min_s) * unit(rng);
    d.burst_center = 0.25 + 0.5 * unit(rng);
    d.burst_width = 0.08 + 0.07 * unit(rng);
  }
  // per (pair, path) initial phase; small per-pair static jitter
  std::vector<double> init_phase(static_cast<std::size_t>(pairs * profile.dynamic_paths));
  for (auto& v : init_phase) v = phase(rng);
  std::vector<double> jitter(static_cast<std::size_t>(pairs));
  for (auto& v : jitter) v = 0.97 + 0.06 * unit(rng);

  const double sigma = cfg.noise_sigma * env.mean_static_amplitude;
  std::normal_distribution<double> noise(0.0, 1.0);

  CSIFrame frame;
  frame.amplitude = Tensor({pairs, subs, steps});
  frame.label = -1;

  // envelope over time, shared by construction across pairs
  std::vector<double> envelope(static_cast<std::size_t>(profile.dynamic_paths) *
                               static_cast<std::size_t>(steps));
  for (int l = 0; l < profile.dynamic_paths; ++l) {
    const auto& d = dyn[static_cast<std::size_t>(l)];
    for (int t = 0; t < steps; ++t) {
      const double frac = steps > 1 ? static_cast<double>(t) / (steps - 1) : 0.0;
      double e = 1.0;
      switch (profile.envelope) {
        case ActivityProfile::Envelope::constant: e = 1.0; break;
        case ActivityProfile::Envelope::ramp: e = frac; break;
        case ActivityProfile::Envelope::burst: {
          const double z = (frac - d.burst_center) / d.burst_width;
          e = std::exp(-0.5 * z * z);
          break;
        }
      }
      envelope[static_cast<std::size_t>(l) * steps + t] = e;
    }
  }

  // per-path per-subcarrier phase factor exp(-j 2 pi f_i tau_l)
  std::vector<std::complex<double>> sub_factor(static_cast<std::size_t>(profile.dynamic_paths) *
                                               static_cast<std::size_t>(subs));
  for (int l = 0; l < profile.dynamic_paths; ++l) {
    for (int i = 0; i < subs; ++i) {
      sub_factor[static_cast<std::size_t>(l) * subs + i] =
          std::polar(1.0, -kTwoPi * freqs[static_cast<std::size_t>(i)] * dyn[static_cast<std::size_t>(l)].delay_s);
    }
  }

  std::vector<std::complex<double>> time_factor(static_cast<std::size_t>(steps));
  float* out = frame.amplitude.data();
  for (int p = 0; p < pairs; ++p) {
    // accumulate dynamic contribution per (subcarrier, time)
    std::vector<std::complex<double>> dynamic(static_cast<std::size_t>(subs) *
                                              static_cast<std::size_t>(steps));
    for (int l = 0; l < profile.dynamic_paths; ++l) {
      const auto& d = dyn[static_cast<std::size_t>(l)];
      const double phi0 = init_phase[static_cast<std::size_t>(p * profile.dynamic_paths + l)];
      for (int t = 0; t < steps; ++t) {
        const double tt = t / cfg.sample_rate_hz;
        const double env_t = envelope[static_cast<std::size_t>(l) * steps + t];
        time_factor[static_cast<std::size_t>(t)] =
            std::polar(d.amp * env_t, kTwoPi * d.doppler_hz * tt + phi0);
      }
      for (int i = 0; i < subs; ++i) {
        const std::complex<double> sf = sub_factor[static_cast<std::size_t>(l) * subs + i];
        std::complex<double>* row = dynamic.data() + static_cast<std::size_t>(i) * steps;
        for (int t = 0; t < steps; ++t) row[t] += sf * time_factor[static_cast<std::size_t>(t)];
      }
    }
    const auto& resp = env.response[static_cast<std::size_t>(p)];
    for (int i = 0; i < subs; ++i) {
      const std::complex<double> stat = jitter[static_cast<std::size_t>(p)] * resp[static_cast<std::size_t>(i)];
      const std::complex<double>* row = dynamic.data() + static_cast<std::size_t>(i) * steps;
      float* orow = out + (static_cast<std::int64_t>(p) * subs + i) * steps;
      for (int t = 0; t < steps; ++t) {
        double a = std::abs(stat + row[t]);
        if (sigma > 0.0) a += sigma * noise(rng);
        orow[t] = static_cast<float>(a > 0.0 ? a : 0.0);
      }
    }
  }
  return frame;
}

Dataset gen_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  const auto env = make_environment(cfg);
  const int n_classes = static_cast<int>(cfg.classes.size());
  const int total = n_classes * cfg.samples_per_class;
  ds.frames.resize(static_cast<std::size_t>(total));

  // deterministic per-sample child seeds allow parallel generation
  parallel_for(total, 8, [&](std::int64_t b0, std::int64_t b1) {
    for (std::int64_t g = b0; g < b1; ++g) {
      const int cls = static_cast<int>(g) / cfg.samples_per_class;
      std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(g) + 1));
      CSIFrame f = gen_sample(cfg.classes[static_cast<std::size_t>(cls)], cfg, env, rng);
      f.label = cls;
      f.subject_id = static_cast<int>(g) % cfg.samples_per_class;
      ds.frames[static_cast<std::size_t>(g)] = std::move(f);
    }
  });

  // stratified split: seeded shuffle within each class
  std::mt19937_64 split_rng(mix_seed(cfg.seed, 0x5B117ULL));
  for (int c = 0; c < n_classes; ++c) {
    std::vector<int> idx(static_cast<std::size_t>(cfg.samples_per_class));
    for (int i = 0; i < cfg.samples_per_class; ++i) idx[static_cast<std::size_t>(i)] = c * cfg.samples_per_class + i;
    std::shuffle(idx.begin(), idx.end(), split_rng);
    const int n_train = static_cast<int>(std::lround(cfg.split_ratio * cfg.samples_per_class));
    for (int i = 0; i < cfg.samples_per_class; ++i) {
      (i < n_train ? ds.train_indices : ds.test_indices).push_back(idx[static_cast<std::size_t>(i)]);
    }
  }
  std::sort(ds.train_indices.begin(), ds.train_indices.end());
  std::sort(ds.test_indices.begin(), ds.test_indices.end());
  return ds;
}

namespace {

json profile_to_json(const ActivityProfile& p) {
  const char* env = p.envelope == ActivityProfile::Envelope::constant ? "constant"
                    : p.envelope == ActivityProfile::Envelope::ramp   ? "ramp"
                                                                      : "burst";
  return json{{"name", p.name},
              {"dynamic_paths", p.dynamic_paths},
              {"doppler_hz", {p.doppler_min_hz, p.doppler_max_hz}},
              {"amp", {p.amp_min, p.amp_max}},
              {"delay_s", {p.delay_min_s, p.delay_max_s}},
              {"envelope", env}};
}

ActivityProfile profile_from_json(const json& j) {
  ActivityProfile p;
  p.name = j.at("name").get<std::string>();
  p.dynamic_paths = j.at("dynamic_paths").get<int>();
  p.doppler_min_hz = j.at("doppler_hz")[0].get<double>();
  p.doppler_max_hz = j.at("doppler_hz")[1].get<double>();
  p.amp_min = j.at("amp")[0].get<double>();
  p.amp_max = j.at("amp")[1].get<double>();
  p.delay_min_s = j.at("delay_s")[0].get<double>();
  p.delay_max_s = j.at("delay_s")[1].get<double>();
  const std::string env = j.at("envelope").get<std::string>();
  p.envelope = env == "constant" ? ActivityProfile::Envelope::constant
               : env == "ramp"   ? ActivityProfile::Envelope::ramp
                                 : ActivityProfile::Envelope::burst;
  return p;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  json j;
  j["format"] = "efi-dataset";
  j["version"] = 1;
  j["preset"] = ds.config.preset;
  j["dims"] = {ds.config.antenna_pairs, ds.config.subcarriers, ds.config.time_steps};
  j["sample_rate_hz"] = ds.config.sample_rate_hz;
  j["bandwidth_hz"] = ds.config.bandwidth_hz;
  json classes = json::array();
  for (const auto& c : ds.config.classes) classes.push_back(profile_to_json(c));
  j["classes"] = classes;
  j["samples_per_class"] = ds.config.samples_per_class;
  j["split_ratio"] = ds.config.split_ratio;
  j["noise_sigma"] = ds.config.noise_sigma;
  j["seed"] = ds.config.seed;
  j["n_samples"] = ds.frames.size();
  json labels = json::array();
  json subjects = json::array();
  for (const auto& f : ds.frames) {
    labels.push_back(f.label);
    subjects.push_back(f.subject_id);
  }
  j["labels"] = labels;
  j["subjects"] = subjects;
  j["train_indices"] = ds.train_indices;
  j["test_indices"] = ds.test_indices;
  j["blob"] = "data.f32";

  {
    std::ofstream mf(dir + "/manifest.json", std::ios::trunc);
    if (!mf) throw LoadError("cannot write " + dir + "/manifest.json");
    mf << j.dump(2) << "\n";
  }
  std::ofstream bf(dir + "/data.f32", std::ios::binary | std::ios::trunc);
  if (!bf) throw LoadError("cannot write " + dir + "/data.f32");
  for (const auto& f : ds.frames) {
    bf.write(reinterpret_cast<const char*>(f.amplitude.data()),
             static_cast<std::streamsize>(f.amplitude.numel()) * 4);
  }
  if (!bf) throw LoadError("short write to " + dir + "/data.f32");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw LoadError("cannot open " + dir + "/manifest.json");
  json j;
  try {
    mf >> j;
  } catch (const json::exception& e) {
    throw LoadError(dir + ": bad manifest: " + e.what());
  }
  if (j.value("format", "") != "efi-dataset") throw LoadError(dir + ": not a dataset manifest");

  Dataset ds;
  ds.config.preset = j.at("preset").get<std::string>();
  ds.config.antenna_pairs = j.at("dims")[0].get<int>();
  ds.config.subcarriers = j.at("dims")[1].get<int>();
  ds.config.time_steps = j.at("dims")[2].get<int>();
  ds.config.sample_rate_hz = j.at("sample_rate_hz").get<double>();
  ds.config.bandwidth_hz = j.at("bandwidth_hz").get<double>();
  ds.config.classes.clear();
  for (const auto& c : j.at("classes")) ds.config.classes.push_back(profile_from_json(c));
  ds.config.samples_per_class = j.at("samples_per_class").get<int>();
  ds.config.split_ratio = j.at("split_ratio").get<double>();
  ds.config.noise_sigma = j.at("noise_sigma").get<double>();
  ds.config.seed = j.at("seed").get<std::uint64_t>();
  ds.train_indices = j.at("train_indices").get<std::vector<int>>();
  ds.test_indices = j.at("test_indices").get<std::vector<int>>();

  const auto labels = j.at("labels").get<std::vector<int>>();
  const auto subjects = j.at("subjects").get<std::vector<int>>();
  const std::size_t n = j.at("n_samples").get<std::size_t>();
  if (labels.size() != n || subjects.size() != n) throw LoadError(dir + ": label table mismatch");

  const std::string blob = dir + "/" + j.at("blob").get<std::string>();
  std::ifstream bf(blob, std::ios::binary);
  if (!bf) throw LoadError("cannot open " + blob);
  const std::int64_t per =
      static_cast<std::int64_t>(ds.config.antenna_pairs) * ds.config.subcarriers * ds.config.time_steps;
  ds.frames.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> data(static_cast<std::size_t>(per));
    bf.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(per) * 4);
    if (!bf) throw LoadError(blob + ": truncated blob");
    CSIFrame f;
    f.amplitude = Tensor({ds.config.antenna_pairs, ds.config.subcarriers, ds.config.time_steps},
                         std::move(data));
    f.amplitude.ensure_finite(blob);
    f.label = labels[i];
    f.subject_id = subjects[i];
    ds.frames[i] = std::move(f);
  }
  for (int idx : ds.train_indices) {
    if (idx < 0 || idx >= static_cast<int>(n)) throw LoadError(dir + ": bad train index");
  }
  for (int idx : ds.test_indices) {
    if (idx < 0 || idx >= static_cast<int>(n)) throw LoadError(dir + ": bad test index");
  }
  return ds;
}

}  // namespace efi
