#pragma once

#include "swimps/env_model.hpp"
#include "swimps/noise.hpp"
#include "swimps/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace swimps {

constexpr std::string_view to_string(OverrideMode m) noexcept {
  switch (m) {
  case OverrideMode::Auto: return "AUTO";
  case OverrideMode::ForceOn: return "FORCE_ON";
  case OverrideMode::ForceOff: return "FORCE_OFF";
  }
  return "AUTO";
}

inline std::optional<OverrideMode> parse_override_mode(std::string_view s) noexcept {
  if (s == "AUTO") return OverrideMode::Auto;
  if (s == "FORCE_ON") return OverrideMode::ForceOn;
  if (s == "FORCE_OFF") return OverrideMode::ForceOff;
  return std::nullopt;
}

struct DeviceConfig {
  std::uint32_t device_id = 1;
  std::uint16_t low_threshold = 3000;  ///< centi-percent, pump-on trigger
  std::uint16_t high_threshold = 3500; ///< centi-percent, pump-off trigger
  std::uint32_t sample_interval_s = 60;
  OverrideMode mode = OverrideMode::Auto;

  friend bool operator==(const DeviceConfig&, const DeviceConfig&) = default;
};

inline bool thresholds_valid(std::uint32_t low, std::uint32_t high) noexcept {
  return 0 < low && low < high && high < 10000;
}

inline void validate(const DeviceConfig& c) {
  if (!thresholds_valid(c.low_threshold, c.high_threshold))
    throw std::invalid_argument("low_threshold: requires 0 < low_threshold < high_threshold < 10000");
  if (c.sample_interval_s < 1) throw std::invalid_argument("sample_interval_s: must be >= 1");
}

struct SensorReading {
  std::uint16_t moisture_cpct = 0;
  std::int16_t temp_cdegc = 0;
  std::uint16_t rh_cpct = 2000;
  std::int64_t timestamp_ms = 0;

  friend bool operator==(const SensorReading&, const SensorReading&) = default;
};

/// Electrical constants of the device. Defaults describe a small 12 V panel
/// behind a single-cell Li-ion charger.
struct PowerConstants {
  double mcu_ma = 80.0;
  double pump_ma = 500.0;
  double charge_cap_ma = 1000.0;
  double capacity_mah = 2000.0;

  friend bool operator==(const PowerConstants&, const PowerConstants&) = default;
};

inline std::uint16_t battery_mv_for(double soc) noexcept {
  return static_cast<std::uint16_t>(3000 + std::lround(1200.0 * soc));
}

struct PowerState {
  double soc = 0.8;
  double capacity_mah = 2000.0;
  bool charging = false;
  std::uint16_t battery_mv = battery_mv_for(0.8);

  static PowerState with_soc(double soc, double capacity_mah = 2000.0) noexcept {
    return {soc, capacity_mah, false, battery_mv_for(soc)};
  }

  friend bool operator==(const PowerState&, const PowerState&) = default;
};

struct DeviceState {
  bool pump_on = false;
  bool low_latch = false;
  PowerState power;
  std::optional<SensorReading> last_reading;
  std::uint32_t seq = 0; ///< last emitted telemetry sequence number

  friend bool operator==(const DeviceState&, const DeviceState&) = default;
};

struct DisplayFrame {
  std::string line1;
  std::string line2;

  static constexpr std::size_t width = 16;

  friend bool operator==(const DisplayFrame&, const DisplayFrame&) = default;
};

enum class DeviceEventKind { LowMoisture };

struct DeviceEvent {
  DeviceEventKind kind = DeviceEventKind::LowMoisture;
  std::int64_t timestamp_ms = 0;
  std::uint16_t moisture_cpct = 0;

  friend bool operator==(const DeviceEvent&, const DeviceEvent&) = default;
};

/// DHT11-class quantization: integer °C in [0, 50], integer %RH in [20, 90].
/// The noise source is always advanced, so streams stay aligned whether or
/// not noise is enabled.
inline SensorReading sample_sensors(const SoilState& soil, const Weather& w, NoiseSource& noise,
                                    double moisture_sigma_cpct, std::int64_t timestamp_ms) {
  const double moisture_noise = noise.gaussian(moisture_sigma_cpct);
  const auto temp = std::clamp<long>(std::lround(w.temp_c), 0, 50);
  const auto rh = std::clamp<long>(std::lround(w.rh_pct), 20, 90);
  const auto moisture = std::clamp<long>(std::lround(soil.moisture * 100.0 + moisture_noise), 0, 10000);
  return SensorReading{
      .moisture_cpct = static_cast<std::uint16_t>(moisture),
      .temp_cdegc = static_cast<std::int16_t>(temp * 100),
      .rh_cpct = static_cast<std::uint16_t>(rh * 100),
      .timestamp_ms = timestamp_ms,
  };
}

struct ControlResult {
  DeviceState state;
  std::vector<DeviceEvent> events;
};

/// Two-threshold pump control with a low-moisture latch. Overrides replace
/// the pump decision but leave the latch running.
inline ControlResult control_step(DeviceState state, const SensorReading& r, const DeviceConfig& cfg) {
  ControlResult out;
  const auto m = r.moisture_cpct;

  bool pump = state.pump_on;
  if (!pump && m < cfg.low_threshold)
    pump = true;
  else if (pump && m >= cfg.high_threshold)
    pump = false;

  if (!state.low_latch && m < cfg.low_threshold) {
    state.low_latch = true;
    out.events.push_back({DeviceEventKind::LowMoisture, r.timestamp_ms, m});
  } else if (state.low_latch && m >= cfg.high_threshold) {
    state.low_latch = false;
  }

  switch (cfg.mode) {
  case OverrideMode::Auto: state.pump_on = pump; break;
  case OverrideMode::ForceOn: state.pump_on = true; break;
  case OverrideMode::ForceOff: state.pump_on = false; break;
  }
  state.last_reading = r;
  out.state = std::move(state);
  return out;
}

/// Integrates battery charge over dt_s seconds. The charge controller caps
/// solar input at `charge_cap_ma`; the MCU always draws, the pump when on.
inline PowerState power_step(PowerState p, bool pump_on, double solar_ma, double dt_s,
                             const PowerConstants& k = {}) {
  if (dt_s <= 0) return p;
  const double load_ma = k.mcu_ma + (pump_on ? k.pump_ma : 0.0);
  const double net_ma = std::min(solar_ma, k.charge_cap_ma) - load_ma;
  p.soc = std::clamp(p.soc + net_ma * (dt_s / 3600.0) / p.capacity_mah, 0.0, 1.0);
  p.charging = net_ma > 0 && p.soc < 1.0;
  p.battery_mv = battery_mv_for(p.soc);
  return p;
}

/// Two-line OLED rendering, at most 16 columns each.
inline DisplayFrame render_display(const SensorReading& r, bool pump_on) {
  char buf[32];
  DisplayFrame frame;
  std::snprintf(buf, sizeof buf, "T:%dC H:%d%%", r.temp_cdegc / 100, r.rh_cpct / 100);
  frame.line1 = buf;

  const int tenths = (r.moisture_cpct + 5) / 10;
  const char* pump = pump_on ? "ON" : "OFF";
  // "M:100.0% PUMP:OFF" is 17 columns; saturation drops the decimal.
  if (tenths >= 1000)
    std::snprintf(buf, sizeof buf, "M:100%% PUMP:%s", pump);
  else
    std::snprintf(buf, sizeof buf, "M:%d.%d%% PUMP:%s", tenths / 10, tenths % 10, pump);
  frame.line2 = buf;
  return frame;
}

struct Telemetry {
  std::uint32_t seq = 0;
  TelemetryPayload payload;
};

/// Builds the next telemetry payload and advances the sequence counter.
inline Telemetry make_telemetry(DeviceState& state, const SensorReading& r, std::uint16_t solar_mv) {
  std::uint8_t flags = 0;
  if (state.pump_on) flags |= flag::pump_on;
  if (state.power.charging) flags |= flag::charging;
  if (state.low_latch) flags |= flag::low_latch;
  return Telemetry{
      .seq = ++state.seq,
      .payload =
          TelemetryPayload{
              .moisture_cpct = r.moisture_cpct,
              .temp_cdegc = r.temp_cdegc,
              .rh_cpct = r.rh_cpct,
              .battery_mv = state.power.battery_mv,
              .solar_mv = solar_mv,
              .flags = flags,
          },
  };
}

/// Device-side handling of a command frame. Takes effect at the next
/// control step, since the config is read there.
inline AckStatus apply_command(DeviceConfig& cfg, const CommandPayload& cmd) {
  if (!cmd.valid()) return AckStatus::Rejected;
  switch (cmd.cmd) {
  case CommandKind::SetThresholds:
    if (!thresholds_valid(cmd.low_cpct, cmd.high_cpct)) return AckStatus::Rejected;
    cfg.low_threshold = cmd.low_cpct;
    cfg.high_threshold = cmd.high_cpct;
    return AckStatus::Ok;
  case CommandKind::PumpOverride:
    cfg.mode = cmd.mode;
    return AckStatus::Ok;
  }
  return AckStatus::Rejected;
}

} // namespace swimps
