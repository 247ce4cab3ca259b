#pragma once

#include <complex>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "efi/tensor.hpp"

namespace efi {

// One labeled CSI sample: nonnegative linear amplitudes of shape
// (antenna pairs, subcarriers, time steps).
struct CSIFrame {
  Tensor amplitude;
  int label = -1;
  int subject_id = -1;
};

// Synthetic stand-in for one activity class: a set of moving scatterers
// with a characteristic Doppler band and amplitude envelope.
struct ActivityProfile {
  std::string name;
  int dynamic_paths = 1;
  double doppler_min_hz = 0.0;
  double doppler_max_hz = 0.0;
  double amp_min = 0.0;
  double amp_max = 0.0;
  double delay_min_s = 5e-9;
  double delay_max_s = 60e-9;
  enum class Envelope { constant, ramp, burst } envelope = Envelope::constant;

  void validate() const;
};

// Six profiles with pairwise-distinct Doppler bands; the class names follow
// common HAR categories, the parameters are synthetic.
std::vector<ActivityProfile> default_profiles();

struct DatasetConfig {
  std::string preset = "paper";  // paper: 3x114x500 @ 500 Hz, desk: 3x30x100 @ 100 Hz
  int antenna_pairs = 3;
  int subcarriers = 114;
  int time_steps = 500;
  double sample_rate_hz = 500.0;
  double bandwidth_hz = 40e6;
  std::vector<ActivityProfile> classes = default_profiles();
  int samples_per_class = 100;
  double split_ratio = 0.8;
  double noise_sigma = 0.05;  // relative to the mean static amplitude
  std::uint64_t seed = 1;

  static DatasetConfig preset_config(const std::string& name);
  void validate() const;
};

// Frequency-selective static multipath shared by every sample of a dataset
// (one "room"); independent per antenna pair.
struct StaticEnvironment {
  struct Path {
    double gain;
    double phase;
    double delay_s;
  };
  std::vector<std::vector<Path>> paths_per_pair;
  // |H_static| per (pair, subcarrier), plus its mean (sets the noise scale)
  std::vector<std::vector<std::complex<double>>> response;
  double mean_static_amplitude = 0.0;
};

StaticEnvironment make_environment(const DatasetConfig& cfg);

// Multipath render: static response plus per-path rotating phasors with the
// profile's Doppler, delay and envelope; output is |H| plus clipped Gaussian
// noise. Phase is internal only.
CSIFrame gen_sample(const ActivityProfile& profile, const DatasetConfig& cfg,
                    const StaticEnvironment& env, std::mt19937_64& rng);

struct Dataset {
  DatasetConfig config;
  std::vector<CSIFrame> frames;
  std::vector<int> train_indices;
  std::vector<int> test_indices;

  int num_classes() const { return static_cast<int>(config.classes.size()); }
};

// Class-balanced generation with a per-class seeded shuffle split.
Dataset gen_dataset(const DatasetConfig& cfg);

// Dataset directory: manifest.json + data.f32 (float32 LE, sample-major).
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Deterministic per-sample child seed.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream);

}  // namespace efi
