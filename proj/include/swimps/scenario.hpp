#pragma once

// Deterministic closed-loop simulation: env-model + device-sim + gateway.
//
// Tick k (k = 1..N, t = k * time_step_s, scenario time 0 = 06:00 local)
// integrates the interval (t - dt, t] and then acts at t:
//   1. weather     w = weather_at(t)
//   2. soil        step_soil over dt with the pump state held during the interval
//   3. sample      if t is a multiple of sample_interval_s
//   4. control     apply inbox commands, control_step
//   5. power       power_step over dt with the interval's pump state, solar(t)
//   6. telemetry   make_telemetry, encode
//   7. ingest      gateway ingest (in-process call or loopback socket + ack)
//   8. alerts      evaluated inside ingest
// Scheduled commands with at_s <= t are dispatched after step 8.

#include "swimps/device.hpp"
#include "swimps/env_model.hpp"
#include "swimps/gateway.hpp"
#include "swimps/noise.hpp"
#include "swimps/protocol.hpp"
#include "swimps/transport.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

namespace swimps {

enum class TransportMode { InProcess, Loopback };

struct SolarParams {
  double peak_ma = 600.0;           ///< panel current at solar noon
  std::uint16_t panel_mv = 12000;   ///< panel voltage at full sun

  friend bool operator==(const SolarParams&, const SolarParams&) = default;
};

/// Panel current at scenario time t: a half-sine between 06:00 and 18:00.
inline double solar_ma_at(std::int64_t t_s, const SolarParams& s) {
  const double x = std::sin(2.0 * std::numbers::pi * static_cast<double>(t_s) / seconds_per_day);
  return s.peak_ma * std::max(0.0, x);
}

inline std::uint16_t solar_mv_at(std::int64_t t_s, const SolarParams& s) {
  const double x = std::sin(2.0 * std::numbers::pi * static_cast<double>(t_s) / seconds_per_day);
  return static_cast<std::uint16_t>(std::lround(s.panel_mv * std::max(0.0, x)));
}

struct ScheduledCommand {
  std::int64_t at_s = 0;
  std::uint32_t device_id = 0;
  CommandPayload cmd;

  friend bool operator==(const ScheduledCommand&, const ScheduledCommand&) = default;
};

struct ScenarioConfig {
  std::int64_t duration_s = 7 * 86400;
  std::int64_t time_step_s = 60;
  std::uint64_t seed = 42;
  std::int64_t start_epoch_ms = 1700000000000;
  double initial_moisture = 45.0;  ///< percent
  double initial_soc = 0.8;
  bool control_enabled = true;
  double sensor_noise_cpct = 20.0; ///< std-dev of additive moisture sensor noise
  double frame_corruption_rate = 0.0;
  double realtime_speedup = 60.0;  ///< simulated seconds per wall second with --realtime
  bool fsync = false;
  TransportMode transport = TransportMode::InProcess;
  EnvParams env;
  PowerConstants power;
  SolarParams solar;
  AlertConfig alerts;
  std::vector<DeviceConfig> devices{DeviceConfig{}};
  std::vector<ScheduledCommand> commands;

  friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

class ScenarioError : public std::runtime_error {
public:
  enum class Kind { NotFound, Parse, Invalid };

  ScenarioError(Kind kind, std::string source, std::string field, std::size_t line, const std::string& message)
      : std::runtime_error(format(source, field, line, message)),
        kind(kind), source(std::move(source)), field(std::move(field)), line(line) {}

  Kind kind;
  std::string source;
  std::string field; ///< dotted path, e.g. "devices[0].low_threshold"
  std::size_t line;  ///< 1-based; 0 when the field is absent from the file

private:
  static std::string format(const std::string& source, const std::string& field, std::size_t line,
                            const std::string& message) {
    std::string out = source;
    if (line > 0) out += ":" + std::to_string(line);
    out += ": ";
    if (!field.empty()) out += field + ": ";
    return out + message;
  }
};

namespace detail {

/// Maps JSON paths ("devices[1].low_threshold") back to source lines for
/// error messages. nlohmann::json keeps no positions, so the text is scanned
/// once for its structure.
class KeyLines {
public:
  explicit KeyLines(std::string_view text) : text_(text) { scan(); }

  /// Line of the path, or of its nearest enclosing element; 0 if unknown.
  std::size_t line_of(std::string path) const {
    while (!path.empty()) {
      if (auto it = lines_.find(path); it != lines_.end()) return it->second;
      const auto cut = path.find_last_of(".[");
      path.resize(cut == std::string::npos ? 0 : cut);
    }
    return 0;
  }

  std::size_t line_at(std::size_t byte) const {
    byte = std::min(byte, text_.size());
    return 1 + static_cast<std::size_t>(std::count(text_.begin(), text_.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
  }

private:
  struct Level {
    bool array;
    std::string path;
    std::size_t index = 0;
    bool want_key = true;
    std::string key_path;
  };

  void scan() {
    std::vector<Level> stack;
    std::size_t line = 1;
    auto value_path = [&]() -> std::string {
      if (stack.empty()) return "";
      auto& top = stack.back();
      return top.array ? top.path + "[" + std::to_string(top.index) + "]" : top.key_path;
    };
    for (std::size_t i = 0; i < text_.size(); ++i) {
      const char ch = text_[i];
      switch (ch) {
      case '\n': ++line; break;
      case '"': {
        std::string s;
        for (++i; i < text_.size() && text_[i] != '"'; ++i) {
          if (text_[i] == '\\' && i + 1 < text_.size()) ++i;
          if (text_[i] == '\n') ++line;
          s += text_[i];
        }
        if (!stack.empty() && !stack.back().array && stack.back().want_key) {
          auto& top = stack.back();
          top.key_path = top.path.empty() ? s : top.path + "." + s;
          lines_.emplace(top.key_path, line);
        }
        break;
      }
      case '{':
      case '[': {
        auto path = value_path();
        if (!path.empty()) lines_.emplace(path, line);
        stack.push_back(Level{ch == '[', std::move(path), 0, true, {}});
        break;
      }
      case '}':
      case ']':
        if (!stack.empty()) stack.pop_back();
        break;
      case ',':
        if (!stack.empty()) {
          if (stack.back().array) ++stack.back().index;
          else stack.back().want_key = true;
        }
        break;
      case ':':
        if (!stack.empty()) stack.back().want_key = false;
        break;
      default: break;
      }
    }
  }

  std::string_view text_;
  std::map<std::string, std::size_t> lines_;
};

/// Reads one JSON object's fields with type checks; unknown keys are errors.
class FieldReader {
public:
  FieldReader(const ojson& obj, std::string path, const KeyLines& lines, const std::string& source)
      : obj_(obj), path_(std::move(path)), lines_(lines), source_(source) {
    if (!obj_.is_object()) fail("", "expected a JSON object");
  }

  [[noreturn]] void fail(const std::string& key, const std::string& message) const {
    const auto field = key.empty() ? path_ : (path_.empty() ? key : path_ + "." + key);
    const auto line = lines_.line_of(field);
    throw ScenarioError(ScenarioError::Kind::Invalid, source_, field, line, message);
  }

  bool has(const char* key) {
    seen_.insert(key);
    return obj_.contains(key);
  }

  const ojson& at(const char* key) const { return obj_.at(key); }

  void number(const char* key, double& dst) {
    if (!has(key)) return;
    if (!obj_.at(key).is_number()) fail(key, "expected a number");
    dst = obj_.at(key).get<double>();
  }

  template <class Int>
  void integer(const char* key, Int& dst) {
    if (!has(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    if (v.is_number_unsigned()) {
      const auto u = v.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(std::numeric_limits<Int>::max())) fail(key, "out of range");
      dst = static_cast<Int>(u);
    } else {
      const auto s = v.get<std::int64_t>();
      if constexpr (std::is_unsigned_v<Int>) {
        if (s < 0) fail(key, "must be non-negative");
      } else {
        if (s < static_cast<std::int64_t>(std::numeric_limits<Int>::min())) fail(key, "out of range");
      }
      if (s > static_cast<std::int64_t>(std::numeric_limits<Int>::max())) fail(key, "out of range");
      dst = static_cast<Int>(s);
    }
  }

  void boolean(const char* key, bool& dst) {
    if (!has(key)) return;
    if (!obj_.at(key).is_boolean()) fail(key, "expected true or false");
    dst = obj_.at(key).get<bool>();
  }

  std::optional<std::string> string(const char* key) {
    if (!has(key)) return std::nullopt;
    if (!obj_.at(key).is_string()) fail(key, "expected a string");
    return obj_.at(key).get<std::string>();
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it)
      if (!seen_.contains(it.key())) fail(it.key(), "unknown field");
  }

private:
  const ojson& obj_;
  std::string path_;
  const KeyLines& lines_;
  const std::string& source_;
  std::set<std::string> seen_;
};

} // namespace detail

/// Defaults as loaded from an empty scenario file ("{}").
inline ScenarioConfig default_scenario() {
  ScenarioConfig c;
  c.env.seed = c.seed;
  return c;
}

inline ojson to_json(const ScenarioConfig& c) {
  ojson j;
  j["duration_s"] = c.duration_s;
  j["time_step_s"] = c.time_step_s;
  j["seed"] = c.seed;
  j["start_epoch_ms"] = c.start_epoch_ms;
  j["initial_moisture"] = c.initial_moisture;
  j["control_enabled"] = c.control_enabled;
  j["sensor_noise_cpct"] = c.sensor_noise_cpct;
  j["frame_corruption_rate"] = c.frame_corruption_rate;
  j["realtime_speedup"] = c.realtime_speedup;
  j["fsync"] = c.fsync;
  j["transport"] = c.transport == TransportMode::InProcess ? "in-process" : "loopback";
  ojson env;
  env["e0"] = c.env.base_drying_rate;
  env["aT"] = c.env.temp_sensitivity;
  env["aH"] = c.env.humidity_sensitivity;
  env["irr_rate"] = c.env.irrigation_rate;
  env["t_mean"] = c.env.temp_mean;
  env["t_amp"] = c.env.temp_amplitude;
  env["rh_mean"] = c.env.rh_mean;
  env["rh_amp"] = c.env.rh_amplitude;
  env["noise_sigma"] = c.env.noise_sigma;
  j["env"] = env;
  ojson power;
  power["mcu_ma"] = c.power.mcu_ma;
  power["pump_ma"] = c.power.pump_ma;
  power["charge_cap_ma"] = c.power.charge_cap_ma;
  power["capacity_mah"] = c.power.capacity_mah;
  power["initial_soc"] = c.initial_soc;
  power["solar_peak_ma"] = c.solar.peak_ma;
  power["panel_mv"] = c.solar.panel_mv;
  j["power"] = power;
  ojson alerts;
  if (c.alerts.clear_cpct) alerts["clear_cpct"] = *c.alerts.clear_cpct;
  alerts["cooldown_s"] = c.alerts.cooldown_s;
  j["alerts"] = alerts;
  j["devices"] = ojson::array();
  for (const auto& d : c.devices) j["devices"].push_back(to_json(d));
  j["commands"] = ojson::array();
  for (const auto& sc : c.commands) {
    ojson cmd = to_json(sc.cmd);
    ojson entry;
    entry["at_s"] = sc.at_s;
    entry["device"] = sc.device_id;
    for (auto& [k, v] : cmd.items()) entry[k] = v;
    j["commands"].push_back(entry);
  }
  return j;
}

/// Checks every cross-field invariant; throws ScenarioError naming the field.
inline void validate(const ScenarioConfig& c, const std::string& source = "<scenario>",
                     const detail::KeyLines* lines = nullptr) {
  auto fail = [&](const std::string& field, const std::string& message) -> void {
    throw ScenarioError(ScenarioError::Kind::Invalid, source, field, lines ? lines->line_of(field) : 0, message);
  };
  if (c.duration_s <= 0) fail("duration_s", "must be > 0");
  if (c.time_step_s <= 0) fail("time_step_s", "must be > 0");
  if (!(c.initial_moisture >= 0 && c.initial_moisture <= 100))
    fail("initial_moisture", "must be within [0, 100]");
  if (!(c.sensor_noise_cpct >= 0)) fail("sensor_noise_cpct", "must be >= 0");
  if (!(c.frame_corruption_rate >= 0 && c.frame_corruption_rate <= 1))
    fail("frame_corruption_rate", "must be within [0, 1]");
  if (c.frame_corruption_rate > 0 && c.transport == TransportMode::Loopback)
    fail("frame_corruption_rate", "frame corruption requires the in-process transport");
  if (!(c.realtime_speedup > 0)) fail("realtime_speedup", "must be > 0");
  try {
    validate(c.env);
  } catch (const std::invalid_argument& e) {
    const std::string what = e.what();
    const auto key = what.substr(0, what.find(':'));
    fail("env." + key, what.substr(what.find(':') + 2));
  }
  if (!(c.initial_soc >= 0 && c.initial_soc <= 1)) fail("power.initial_soc", "must be within [0, 1]");
  if (!(c.power.capacity_mah > 0)) fail("power.capacity_mah", "must be > 0");
  if (!(c.power.mcu_ma >= 0)) fail("power.mcu_ma", "must be >= 0");
  if (!(c.power.pump_ma >= 0)) fail("power.pump_ma", "must be >= 0");
  if (!(c.power.charge_cap_ma >= 0)) fail("power.charge_cap_ma", "must be >= 0");
  if (!(c.solar.peak_ma >= 0)) fail("power.solar_peak_ma", "must be >= 0");
  if (c.alerts.cooldown_s < 0) fail("alerts.cooldown_s", "must be >= 0");
  if (c.devices.empty()) fail("devices", "at least one device is required");

  std::set<std::uint32_t> ids;
  for (std::size_t i = 0; i < c.devices.size(); ++i) {
    const auto& d = c.devices[i];
    const auto at = "devices[" + std::to_string(i) + "].";
    if (!ids.insert(d.device_id).second) fail(at + "device_id", "duplicate device id");
    if (d.low_threshold == 0 || d.low_threshold >= 10000)
      fail(at + "low_threshold", "must be within (0, 10000)");
    if (d.low_threshold >= d.high_threshold)
      fail(at + "low_threshold", "must be less than high_threshold");
    if (d.high_threshold >= 10000) fail(at + "high_threshold", "must be less than 10000");
    if (d.sample_interval_s < 1) fail(at + "sample_interval_s", "must be >= 1");
    if (c.alerts.clear_cpct && *c.alerts.clear_cpct <= d.low_threshold)
      fail("alerts.clear_cpct", "must exceed every device's low_threshold");
  }
  for (std::size_t i = 0; i < c.commands.size(); ++i) {
    const auto& sc = c.commands[i];
    const auto at = "commands[" + std::to_string(i) + "].";
    if (sc.at_s < 0 || sc.at_s > c.duration_s) fail(at + "at_s", "must be within [0, duration_s]");
    if (!ids.contains(sc.device_id)) fail(at + "device", "not a device of this scenario");
    if (!sc.cmd.valid() || (sc.cmd.cmd == CommandKind::SetThresholds && !thresholds_valid(sc.cmd.low_cpct, sc.cmd.high_cpct)))
      fail(at + "cmd", "invalid command payload");
  }
}

/// Parses scenario JSON text over the documented defaults and validates it.
inline ScenarioConfig parse_scenario(std::string_view text, const std::string& source = "<scenario>") {
  const detail::KeyLines lines(text);
  ojson root;
  try {
    root = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ScenarioError(ScenarioError::Kind::Parse, source, "", lines.line_at(e.byte > 0 ? e.byte - 1 : 0),
                        "JSON parse error");
  }

  ScenarioConfig c;
  detail::FieldReader top(root, "", lines, source);
  top.integer("duration_s", c.duration_s);
  top.integer("time_step_s", c.time_step_s);
  top.integer("seed", c.seed);
  top.integer("start_epoch_ms", c.start_epoch_ms);
  top.number("initial_moisture", c.initial_moisture);
  top.boolean("control_enabled", c.control_enabled);
  top.number("sensor_noise_cpct", c.sensor_noise_cpct);
  top.number("frame_corruption_rate", c.frame_corruption_rate);
  top.number("realtime_speedup", c.realtime_speedup);
  top.boolean("fsync", c.fsync);
  if (auto t = top.string("transport")) {
    if (*t == "in-process")
      c.transport = TransportMode::InProcess;
    else if (*t == "loopback")
      c.transport = TransportMode::Loopback;
    else
      top.fail("transport", "expected \"in-process\" or \"loopback\"");
  }

  if (top.has("env")) {
    detail::FieldReader env(top.at("env"), "env", lines, source);
    env.number("e0", c.env.base_drying_rate);
    env.number("aT", c.env.temp_sensitivity);
    env.number("aH", c.env.humidity_sensitivity);
    env.number("irr_rate", c.env.irrigation_rate);
    env.number("t_mean", c.env.temp_mean);
    env.number("t_amp", c.env.temp_amplitude);
    env.number("rh_mean", c.env.rh_mean);
    env.number("rh_amp", c.env.rh_amplitude);
    env.number("noise_sigma", c.env.noise_sigma);
    env.finish();
  }

  if (top.has("power")) {
    detail::FieldReader power(top.at("power"), "power", lines, source);
    power.number("mcu_ma", c.power.mcu_ma);
    power.number("pump_ma", c.power.pump_ma);
    power.number("charge_cap_ma", c.power.charge_cap_ma);
    power.number("capacity_mah", c.power.capacity_mah);
    power.number("initial_soc", c.initial_soc);
    power.number("solar_peak_ma", c.solar.peak_ma);
    power.integer("panel_mv", c.solar.panel_mv);
    power.finish();
  }

  if (top.has("alerts")) {
    detail::FieldReader alerts(top.at("alerts"), "alerts", lines, source);
    if (alerts.has("clear_cpct")) {
      std::uint16_t clear = 0;
      alerts.integer("clear_cpct", clear);
      c.alerts.clear_cpct = clear;
    }
    alerts.integer("cooldown_s", c.alerts.cooldown_s);
    alerts.finish();
  }

  if (top.has("devices")) {
    const auto& arr = top.at("devices");
    if (!arr.is_array()) top.fail("devices", "expected an array");
    c.devices.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::FieldReader d(arr[i], "devices[" + std::to_string(i) + "]", lines, source);
      DeviceConfig cfg;
      cfg.device_id = static_cast<std::uint32_t>(i + 1);
      d.integer("device_id", cfg.device_id);
      d.integer("low_threshold", cfg.low_threshold);
      d.integer("high_threshold", cfg.high_threshold);
      d.integer("sample_interval_s", cfg.sample_interval_s);
      if (auto m = d.string("override")) {
        auto mode = parse_override_mode(*m);
        if (!mode) d.fail("override", "expected AUTO, FORCE_ON or FORCE_OFF");
        cfg.mode = *mode;
      }
      d.finish();
      c.devices.push_back(cfg);
    }
  }

  if (top.has("commands")) {
    const auto& arr = top.at("commands");
    if (!arr.is_array()) top.fail("commands", "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::FieldReader r(arr[i], "commands[" + std::to_string(i) + "]", lines, source);
      ScheduledCommand sc;
      r.integer("at_s", sc.at_s);
      r.integer("device", sc.device_id);
      r.string("cmd");
      r.has("low_cpct");
      r.has("high_cpct");
      r.has("mode");
      try {
        sc.cmd = command_from_json(arr[i]);
      } catch (const std::invalid_argument& e) {
        r.fail("cmd", e.what());
      }
      r.finish();
      c.commands.push_back(sc);
    }
    std::stable_sort(c.commands.begin(), c.commands.end(),
                     [](const auto& a, const auto& b) { return a.at_s < b.at_s; });
  }
  top.finish();

  c.env.seed = c.seed;
  validate(c, source, &lines);
  return c;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ScenarioError(ScenarioError::Kind::NotFound, path.string(), "", 0, "scenario file not found");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), path.string());
}

// -- Running ---------------------------------------------------------------------

struct Metrics {
  double pump_duty_cycle = 0;  ///< pump-on device-steps / total device-steps
  double water_applied = 0;    ///< moisture points delivered: sum of irr_rate * pump-on minutes
  double min_moisture = 0;     ///< percent, true soil state
  double max_moisture = 0;
  double mean_moisture = 0;
  std::uint64_t notification_count = 0;
  double final_soc = 0;        ///< mean over devices
  std::uint64_t frames_sent = 0;
  std::uint64_t frames_accepted = 0;
  std::uint64_t frames_rejected = 0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline ojson to_json(const Metrics& m) {
  ojson j;
  j["pump_duty_cycle"] = m.pump_duty_cycle;
  j["water_applied"] = m.water_applied;
  j["min_moisture"] = m.min_moisture;
  j["max_moisture"] = m.max_moisture;
  j["mean_moisture"] = m.mean_moisture;
  j["notification_count"] = m.notification_count;
  j["final_soc"] = m.final_soc;
  j["frames_sent"] = m.frames_sent;
  j["frames_accepted"] = m.frames_accepted;
  j["frames_rejected"] = m.frames_rejected;
  return j;
}

/// Writes metrics.json (two-space indented, trailing newline).
inline void emit_metrics(const Metrics& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << to_json(m).dump(2) << '\n';
  if (!out) throw StorageError("write " + path.string());
}

/// Accumulates Metrics from per-step observations.
class MetricsAccumulator {
public:
  void step(double moisture, bool pump_on, double irrigation_rate, double dt_min) {
    ++steps_;
    if (pump_on) {
      ++pump_steps_;
      water_ += irrigation_rate * dt_min;
    }
    min_ = std::min(min_, moisture);
    max_ = std::max(max_, moisture);
    sum_ += moisture;
  }

  Metrics finish(std::uint64_t notifications, double final_soc, std::uint64_t sent, std::uint64_t accepted,
                 std::uint64_t rejected) const {
    Metrics m;
    if (steps_ > 0) {
      m.pump_duty_cycle = static_cast<double>(pump_steps_) / static_cast<double>(steps_);
      m.min_moisture = min_;
      m.max_moisture = max_;
      m.mean_moisture = sum_ / static_cast<double>(steps_);
    }
    m.water_applied = water_;
    m.notification_count = notifications;
    m.final_soc = final_soc;
    m.frames_sent = sent;
    m.frames_accepted = accepted;
    m.frames_rejected = rejected;
    return m;
  }

private:
  std::uint64_t steps_ = 0;
  std::uint64_t pump_steps_ = 0;
  double water_ = 0;
  double min_ = std::numeric_limits<double>::infinity();
  double max_ = -std::numeric_limits<double>::infinity();
  double sum_ = 0;
};

/// One device at one tick.
struct TraceStep {
  std::int64_t t_s = 0;
  std::uint32_t device_id = 0;
  double moisture = 0;       ///< true soil moisture at t, percent
  bool pump_active = false;  ///< pump state during (t - dt, t]
  std::optional<SensorReading> reading;
  bool pump_on = false;      ///< pump state after control at t
  OverrideMode mode = OverrideMode::Auto;
  std::uint16_t low_threshold = 0;
  std::uint16_t high_threshold = 0;
  double solar_ma = 0;
  PowerState power;          ///< after power_step at t
  std::optional<std::uint32_t> telemetry_seq;
  std::optional<TelemetryPayload> telemetry;
};

struct RunOptions {
  std::optional<std::filesystem::path> out_dir; ///< metrics.json + gateway.log; temp dir when unset
  bool realtime = false;
  bool record_trace = false;
  std::optional<Endpoint> external_gateway; ///< loopback transport to a running `swimps serve`
};

struct RunResult {
  Metrics metrics;
  std::vector<TraceStep> trace;
  std::vector<DeviceEvent> device_events;
  std::vector<TimelineEntry> notifications;
};

namespace detail {

struct SimDevice {
  DeviceConfig cfg;
  DeviceState state;
  SoilState soil;
  NoiseSource sensor_noise;
  std::mutex inbox_mutex;
  std::deque<CommandPayload> inbox;

  /// Runs on a transport thread: accept and queue for the next control step.
  AckStatus receive(const CommandPayload& cmd) {
    DeviceConfig probe = cfg;
    if (apply_command(probe, cmd) != AckStatus::Ok) return AckStatus::Rejected;
    std::lock_guard lock(inbox_mutex);
    inbox.push_back(cmd);
    return AckStatus::Ok;
  }

  void apply_inbox() {
    std::lock_guard lock(inbox_mutex);
    while (!inbox.empty()) {
      apply_command(cfg, inbox.front());
      inbox.pop_front();
    }
  }
};

class InProcessLink : public DeviceLink {
public:
  explicit InProcessLink(SimDevice& dev) : dev_(dev) {}

  std::optional<std::vector<std::uint8_t>> exchange(std::span<const std::uint8_t> frame, std::uint32_t seq) override {
    auto f = decode_frame(frame);
    if (!f || f->msg_type() != MsgType::Command) return std::nullopt;
    const auto status = dev_.receive(std::get<CommandPayload>(f->payload));
    return encode_frame(Frame{protocol_version, f->device_id, seq, f->timestamp_ms, AckPayload{seq, status}});
  }

private:
  SimDevice& dev_;
};

class TempDir {
public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("swimps-run-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

private:
  std::filesystem::path path_;
};

} // namespace detail

/// Runs the closed loop. Identical (config, seed) produce byte-identical
/// metrics.json and gateway.log.
inline RunResult run_scenario(const ScenarioConfig& cfg, const RunOptions& opts = {}) {
  validate(cfg);
  if (opts.external_gateway && cfg.transport != TransportMode::Loopback)
    throw std::invalid_argument("an external gateway requires the loopback transport");
  if (opts.external_gateway && !cfg.commands.empty())
    throw std::invalid_argument("scheduled commands need the run's own gateway");

  std::optional<detail::TempDir> temp;
  std::filesystem::path dir;
  if (opts.out_dir) {
    dir = *opts.out_dir;
    std::filesystem::create_directories(dir);
    for (const char* name : {"gateway.log", "registry.json", "metrics.json"}) std::filesystem::remove(dir / name);
  } else {
    temp.emplace();
    dir = temp->path();
  }

  std::atomic<std::int64_t> sim_now_ms{cfg.start_epoch_ms};
  std::unique_ptr<Gateway> gw;
  if (!opts.external_gateway) {
    GatewayOptions go;
    go.data_dir = dir;
    go.durability = cfg.fsync ? Durability::Fsync : Durability::Buffered;
    go.alerts = cfg.alerts;
    go.queue_when_offline = true;
    go.clock = [&sim_now_ms] { return sim_now_ms.load(); };
    gw = std::make_unique<Gateway>(std::move(go));
  }

  std::vector<std::unique_ptr<detail::SimDevice>> devices;
  for (const auto& dc : cfg.devices) {
    auto d = std::make_unique<detail::SimDevice>();
    d->cfg = dc;
    d->soil.moisture = cfg.initial_moisture;
    d->state.power = PowerState::with_soc(cfg.initial_soc, cfg.power.capacity_mah);
    d->sensor_noise = NoiseSource::keyed(cfg.seed, dc.device_id);
    if (gw) gw->register_device(dc);
    devices.push_back(std::move(d));
  }

  std::unique_ptr<DeviceServer> server;
  std::vector<std::unique_ptr<DeviceClient>> clients;
  if (cfg.transport == TransportMode::InProcess) {
    for (auto& d : devices) gw->attach_link(d->cfg.device_id, std::make_shared<detail::InProcessLink>(*d));
  } else {
    Endpoint ep;
    if (opts.external_gateway) {
      ep = *opts.external_gateway;
    } else {
      server = std::make_unique<DeviceServer>(*gw);
      server->start(Endpoint{"127.0.0.1", 0});
      ep = Endpoint{"127.0.0.1", server->port()};
    }
    for (auto& d : devices) {
      auto* dev = d.get();
      clients.push_back(std::make_unique<DeviceClient>(
          ep, [dev](const Frame&, const CommandPayload& cmd) { return dev->receive(cmd); }));
    }
  }

  RunResult result;
  MetricsAccumulator acc;
  std::uint64_t sent = 0, accepted = 0, rejected = 0;
  auto corruption = NoiseSource::keyed(cfg.seed, 0xC0FFEEULL);
  EnvParams env = cfg.env;
  env.seed = cfg.seed; // the scenario seed drives weather noise too
  const double dt_s = static_cast<double>(cfg.time_step_s);
  const double dt_min = dt_s / 60.0;
  const std::int64_t steps = cfg.duration_s / cfg.time_step_s;
  std::size_t next_command = 0;
  const auto wall_start = std::chrono::steady_clock::now();

  for (std::int64_t k = 1; k <= steps; ++k) {
    const std::int64_t t = k * cfg.time_step_s;
    const std::int64_t now_ms = cfg.start_epoch_ms + t * 1000;
    sim_now_ms = now_ms;
    const Weather w = weather_at(t, env);
    const double drying = et_rate(w, env);
    const double solar_ma = solar_ma_at(t, cfg.solar);

    for (std::size_t di = 0; di < devices.size(); ++di) {
      auto& d = *devices[di];
      const bool pump_active = d.state.pump_on;
      d.soil = step_soil(d.soil, drying, pump_active, dt_min, env);
      acc.step(d.soil.moisture, pump_active, env.irrigation_rate, dt_min);

      TraceStep ts;
      ts.t_s = t;
      ts.device_id = d.cfg.device_id;
      ts.moisture = d.soil.moisture;
      ts.pump_active = pump_active;
      ts.solar_ma = solar_ma;

      const bool sample_due = t % static_cast<std::int64_t>(d.cfg.sample_interval_s) == 0;
      std::optional<SensorReading> reading;
      if (sample_due) {
        reading = sample_sensors(d.soil, w, d.sensor_noise, cfg.sensor_noise_cpct, now_ms);
        d.apply_inbox();
        auto cr = control_step(d.state, *reading, d.cfg);
        d.state = std::move(cr.state);
        if (!cfg.control_enabled) d.state.pump_on = false;
        for (auto& ev : cr.events) result.device_events.push_back(ev);
      }
      d.state.power = power_step(d.state.power, pump_active, solar_ma, dt_s, cfg.power);

      if (sample_due) {
        const auto tel = make_telemetry(d.state, *reading, solar_mv_at(t, cfg.solar));
        auto bytes = encode_frame(Frame{protocol_version, d.cfg.device_id, tel.seq,
                                        static_cast<std::uint64_t>(now_ms), tel.payload});
        const bool corrupt = cfg.frame_corruption_rate > 0 && corruption.uniform() < cfg.frame_corruption_rate;
        if (corrupt) {
          const auto bit = static_cast<std::size_t>(corruption.uniform() * static_cast<double>(bytes.size() * 8));
          bytes[bit / 8] ^= static_cast<std::uint8_t>(1U << (bit % 8));
        }
        ++sent;
        if (cfg.transport == TransportMode::InProcess) {
          const auto outcome = gw->ingest_frame(bytes, now_ms);
          outcome.accepted() ? ++accepted : ++rejected;
          if (outcome.commands_pending) gw->flush_pending(d.cfg.device_id);
        } else {
          const auto ack = clients[di]->send_frame(bytes, tel.seq);
          if (!ack) throw std::runtime_error("no ack from gateway for device " + std::to_string(d.cfg.device_id));
          ack->status == AckStatus::Ok ? ++accepted : ++rejected;
          // Queued commands are flushed off-thread after the first frame;
          // wait so they land before the next control step.
          if (gw) gw->wait_commands_settled(d.cfg.device_id);
        }
        ts.telemetry_seq = tel.seq;
        ts.telemetry = tel.payload;
      }

      ts.reading = reading;
      ts.pump_on = d.state.pump_on;
      ts.mode = d.cfg.mode;
      ts.low_threshold = d.cfg.low_threshold;
      ts.high_threshold = d.cfg.high_threshold;
      ts.power = d.state.power;
      if (opts.record_trace) result.trace.push_back(std::move(ts));
    }

    while (next_command < cfg.commands.size() && cfg.commands[next_command].at_s <= t) {
      const auto& sc = cfg.commands[next_command++];
      gw->dispatch_command(sc.device_id, sc.cmd);
    }

    if (opts.realtime) {
      const auto due = wall_start + std::chrono::duration<double>(static_cast<double>(t) / cfg.realtime_speedup);
      std::this_thread::sleep_until(std::chrono::time_point_cast<std::chrono::steady_clock::duration>(due));
    }
  }

  clients.clear();
  if (server) server->stop();

  std::uint64_t notifications = 0;
  if (gw) {
    for (const auto& e : gw->log().entries())
      if (e.kind == EntryKind::Notification) result.notifications.push_back(e);
    notifications = result.notifications.size();
  } else {
    notifications = result.device_events.size();
  }
  double soc_sum = 0;
  for (const auto& d : devices) soc_sum += d->state.power.soc;
  result.metrics = acc.finish(notifications, soc_sum / static_cast<double>(devices.size()), sent, accepted, rejected);
  if (opts.out_dir) emit_metrics(result.metrics, dir / "metrics.json");
  return result;
}

} // namespace swimps
