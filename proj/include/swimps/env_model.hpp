#pragma once

#include "swimps/noise.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>

namespace swimps {

/// Soil-water bucket and diurnal weather parameters. JSON keys used by the
/// scenario loader are noted next to each field.
struct EnvParams {
  double base_drying_rate = 0.05;     ///< e0, % moisture per minute at 25 °C / 50 % RH
  double temp_sensitivity = 0.02;     ///< aT, per °C
  double humidity_sensitivity = 0.5;  ///< aH
  double irrigation_rate = 0.5;       ///< irr_rate, % moisture per minute while pumping
  double temp_mean = 28.0;            ///< t_mean, °C
  double temp_amplitude = 5.0;        ///< t_amp, °C
  double rh_mean = 70.0;              ///< rh_mean, %
  double rh_amplitude = 15.0;         ///< rh_amp, %
  double noise_sigma = 0.5;           ///< noise_sigma
  std::uint64_t seed = 1;

  friend bool operator==(const EnvParams&, const EnvParams&) = default;
};

/// Throws std::invalid_argument naming the offending field.
inline void validate(const EnvParams& p) {
  auto fail = [](const char* field, const char* what) {
    throw std::invalid_argument(std::string(field) + ": " + what);
  };
  if (!(p.base_drying_rate >= 0)) fail("e0", "must be >= 0");
  if (!(p.irrigation_rate > 0)) fail("irr_rate", "must be > 0");
  if (!(p.temp_amplitude >= 0)) fail("t_amp", "must be >= 0");
  if (!(p.rh_amplitude >= 0)) fail("rh_amp", "must be >= 0");
  if (!(p.rh_mean - p.rh_amplitude >= 0 && p.rh_mean + p.rh_amplitude <= 100))
    fail("rh_mean", "rh_mean +/- rh_amp must stay within [0, 100]");
  if (!(p.noise_sigma >= 0)) fail("noise_sigma", "must be >= 0");
}

struct SoilState {
  double moisture = 45.0; ///< volumetric water content, percent

  friend bool operator==(const SoilState&, const SoilState&) = default;
};

struct Weather {
  double temp_c = 25.0;
  double rh_pct = 50.0;

  friend bool operator==(const Weather&, const Weather&) = default;
};

inline constexpr double seconds_per_day = 86400.0;

/// Diurnal sinusoid plus Gaussian noise. The noise for time t is drawn from a
/// SplitMix64 stream keyed by (seed, t), so the function is pure.
inline Weather weather_at(std::int64_t t_s, const EnvParams& p) {
  const double phase = std::sin(2.0 * std::numbers::pi * static_cast<double>(t_s) / seconds_per_day);
  double temp_noise = 0.0;
  double rh_noise = 0.0;
  if (p.noise_sigma > 0) {
    auto rng = NoiseSource::keyed(p.seed, static_cast<std::uint64_t>(t_s));
    temp_noise = rng.gaussian(p.noise_sigma);
    rh_noise = rng.gaussian(p.noise_sigma);
  }
  return Weather{
      .temp_c = p.temp_mean + p.temp_amplitude * phase + temp_noise,
      .rh_pct = std::clamp(p.rh_mean - p.rh_amplitude * phase + rh_noise, 0.0, 100.0),
  };
}

/// First-order evapotranspiration proxy, % moisture per minute.
inline double et_rate(const Weather& w, const EnvParams& p) {
  const double rate = p.base_drying_rate * (1.0 + p.temp_sensitivity * (w.temp_c - 25.0)) *
                      (1.0 - p.humidity_sensitivity * (w.rh_pct - 50.0) / 100.0);
  return std::max(0.0, rate);
}

/// Advances the bucket by dt_min minutes.
inline SoilState step_soil(SoilState s, double drying_rate, bool pump_on, double dt_min,
                           const EnvParams& p) {
  const double wetting = pump_on ? p.irrigation_rate * dt_min : 0.0;
  s.moisture = std::clamp(s.moisture - drying_rate * dt_min + wetting, 0.0, 100.0);
  return s;
}

} // namespace swimps
