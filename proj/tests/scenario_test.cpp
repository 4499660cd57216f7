#include "swimps/scenario.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace swimps {
namespace {

using testing::ScratchDir;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ScenarioConfig short_run(std::int64_t days = 2) {
  auto c = default_scenario();
  c.duration_s = days * 86400;
  return c;
}

TEST(LoadScenario, DefaultFileMatchesDocumentedDefaults) {
  const auto c = load_scenario(std::filesystem::path(SWIMPS_SCENARIOS) / "default.json");
  EXPECT_EQ(c, default_scenario());
  EXPECT_EQ(c.duration_s, 604800);
  EXPECT_EQ(c.time_step_s, 60);
  EXPECT_EQ(c.seed, 42u);
  ASSERT_EQ(c.devices.size(), 1u);
  EXPECT_EQ(c.devices[0].low_threshold, 3000);
  EXPECT_EQ(c.devices[0].high_threshold, 3500);
  EXPECT_EQ(c.devices[0].sample_interval_s, 60u);
}

TEST(LoadScenario, EmptyObjectIsTheDefault) { EXPECT_EQ(parse_scenario("{}"), default_scenario()); }

TEST(LoadScenario, EveryShippedScenarioLoads) {
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(SWIMPS_SCENARIOS)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_scenario(e.path())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 1);
}

TEST(LoadScenario, InvertedThresholdsNameTheFieldAndLine) {
  const std::string text = "{\n"
                           "  \"seed\": 3,\n"
                           "  \"devices\": [\n"
                           "    {\"device_id\": 1},\n"
                           "    {\"device_id\": 2,\n"
                           "     \"low_threshold\": 3600,\n"
                           "     \"high_threshold\": 3500}\n"
                           "  ]\n"
                           "}\n";
  try {
    parse_scenario(text, "farm.json");
    FAIL() << "expected a validation error";
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.kind, ScenarioError::Kind::Invalid);
    EXPECT_EQ(e.field, "devices[1].low_threshold");
    EXPECT_EQ(e.line, 6u);
    EXPECT_EQ(std::string(e.what()), "farm.json:6: devices[1].low_threshold: must be less than high_threshold");
  }
}

TEST(LoadScenario, MissingFileIsNotFound) {
  try {
    load_scenario("/nonexistent/scenario.json");
    FAIL();
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.kind, ScenarioError::Kind::NotFound);
  }
}

TEST(LoadScenario, SyntaxAndTypeErrors) {
  try {
    parse_scenario("{\n  \"seed\": 1,\n  \"duration_s\": ,\n}", "x.json");
    FAIL();
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.kind, ScenarioError::Kind::Parse);
    EXPECT_EQ(e.line, 3u);
  }
  try {
    parse_scenario("{\"env\": {\"e0\": \"fast\"}}");
    FAIL();
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.field, "env.e0");
  }
  try {
    parse_scenario("{\"sede\": 1}");
    FAIL();
  } catch (const ScenarioError& e) {
    EXPECT_EQ(e.field, "sede");
  }
  EXPECT_THROW(parse_scenario(R"({"transport":"carrier-pigeon"})"), ScenarioError);
  EXPECT_THROW(parse_scenario(R"({"transport":"loopback","frame_corruption_rate":0.1})"), ScenarioError);
  EXPECT_THROW(parse_scenario(R"({"env":{"irr_rate":0}})"), ScenarioError);
  EXPECT_THROW(parse_scenario(R"({"commands":[{"at_s":5,"device":9,"cmd":"override","mode":"AUTO"}]})"),
               ScenarioError);
  EXPECT_THROW(parse_scenario(R"({"commands":[{"at_s":5,"device":1,"cmd":"set_thresholds","low_cpct":4,"high_cpct":3}]})"),
               ScenarioError);
}

TEST(LoadScenario, JsonRoundTrip) {
  auto c = default_scenario();
  c.seed = 9;
  c.env.seed = 9;
  c.transport = TransportMode::Loopback;
  c.alerts.clear_cpct = 3400;
  c.devices.push_back(DeviceConfig{.device_id = 2, .low_threshold = 2000, .high_threshold = 2600,
                                   .sample_interval_s = 300, .mode = OverrideMode::ForceOff});
  c.commands.push_back({600, 2, CommandPayload::pump_override(OverrideMode::Auto)});
  c.commands.push_back({1200, 1, CommandPayload::set_thresholds(2500, 3000)});
  EXPECT_EQ(parse_scenario(to_json(c).dump(2)), c);
}

TEST(Solar, HalfSineDaylight) {
  SolarParams s;
  EXPECT_NEAR(solar_ma_at(0, s), 0.0, 1e-9);
  EXPECT_NEAR(solar_ma_at(21600, s), 600.0, 1e-9);
  EXPECT_EQ(solar_ma_at(64800, s), 0.0);
  EXPECT_EQ(solar_mv_at(21600, s), 12000);
  EXPECT_EQ(solar_mv_at(60000, s), 0);
}

TEST(RunScenario, SameSeedSameArtifacts) {
  ScratchDir a("run"), b("run");
  const auto cfg = short_run();
  RunOptions oa, ob;
  oa.out_dir = a.path();
  ob.out_dir = b.path();
  const auto ra = run_scenario(cfg, oa);
  const auto rb = run_scenario(cfg, ob);
  EXPECT_EQ(ra.metrics, rb.metrics);
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  EXPECT_EQ(slurp(a / "gateway.log"), slurp(b / "gateway.log"));
  EXPECT_FALSE(slurp(a / "gateway.log").empty());
}

TEST(RunScenario, DifferentSeedDiffers) {
  auto cfg = short_run();
  const auto m1 = run_scenario(cfg).metrics;
  cfg.seed = 43;
  EXPECT_NE(run_scenario(cfg).metrics, m1);
}

TEST(RunScenario, RerunIntoSameDirectoryStartsClean) {
  ScratchDir d("run");
  RunOptions o;
  o.out_dir = d.path();
  const auto cfg = short_run(1);
  run_scenario(cfg, o);
  const auto first = slurp(d / "gateway.log");
  run_scenario(cfg, o);
  EXPECT_EQ(slurp(d / "gateway.log"), first);
}

TEST(RunScenario, ControlDisabledDriesOut) {
  auto cfg = short_run(3);
  cfg.control_enabled = false;
  RunOptions o;
  o.record_trace = true;
  const auto r = run_scenario(cfg, o);
  EXPECT_EQ(r.metrics.pump_duty_cycle, 0.0);
  EXPECT_EQ(r.metrics.water_applied, 0.0);
  EXPECT_LT(r.trace.back().moisture, cfg.initial_moisture);
  EXPECT_LT(r.metrics.min_moisture, cfg.devices[0].low_threshold / 100.0);
}

TEST(RunScenario, ControlHoldsMoistureNearThreshold) {
  RunOptions o;
  o.record_trace = true;
  const auto r = run_scenario(default_scenario(), o);
  bool cycled = false;
  double min_after = 100;
  for (const auto& s : r.trace) {
    if (cycled) min_after = std::min(min_after, s.moisture);
    if (s.pump_active) cycled = true;
  }
  EXPECT_TRUE(cycled);
  EXPECT_GE(min_after, 28.0);
  EXPECT_GT(r.metrics.pump_duty_cycle, 0.0);
  EXPECT_LT(r.metrics.pump_duty_cycle, 1.0);
}

TEST(RunScenario, ForceOnCommandShowsInNextTelemetry) {
  auto cfg = short_run(1);
  cfg.initial_moisture = 60; // wet: AUTO would keep the pump off
  cfg.commands.push_back({3600, 1, CommandPayload::pump_override(OverrideMode::ForceOn)});
  RunOptions o;
  o.record_trace = true;
  const auto r = run_scenario(cfg, o);
  std::optional<TelemetryPayload> before, after;
  for (const auto& s : r.trace) {
    if (!s.telemetry) continue;
    if (s.t_s == 3600) before = s.telemetry;
    if (s.t_s == 3660) after = s.telemetry;
  }
  ASSERT_TRUE(before && after);
  EXPECT_FALSE(before->pump_on());
  EXPECT_TRUE(after->pump_on());
}

TEST(RunScenario, LoopbackMatchesInProcess) {
  auto cfg = short_run(1);
  cfg.commands.push_back({7200, 1, CommandPayload::set_thresholds(3200, 3800)});
  ScratchDir a("run"), b("run");
  RunOptions oa, ob;
  oa.out_dir = a.path();
  ob.out_dir = b.path();
  run_scenario(cfg, oa);
  cfg.transport = TransportMode::Loopback;
  run_scenario(cfg, ob);
  EXPECT_EQ(slurp(a / "metrics.json"), slurp(b / "metrics.json"));
  EXPECT_EQ(slurp(a / "gateway.log"), slurp(b / "gateway.log"));
}

TEST(RunScenario, CompositionMatchesSoilTrace) {
  auto cfg = short_run(1);
  cfg.sensor_noise_cpct = 0;
  cfg.devices[0].sample_interval_s = 300;
  ScratchDir d("run");
  RunOptions o;
  o.out_dir = d.path();
  o.record_trace = true;
  const auto r = run_scenario(cfg, o);

  std::vector<std::uint16_t> expected;
  for (const auto& s : r.trace)
    if (s.t_s % 300 == 0) expected.push_back(static_cast<std::uint16_t>(std::lround(s.moisture * 100.0)));
  std::vector<std::uint16_t> logged;
  std::ifstream in(d / "gateway.log");
  for (std::string line; std::getline(in, line);) {
    const auto e = entry_from_json(ojson::parse(line));
    if (e.kind == EntryKind::Telemetry) logged.push_back(e.body.at("moisture_cpct").get<std::uint16_t>());
  }
  EXPECT_EQ(logged, expected);
  EXPECT_EQ(logged.size(), 86400u / 300u);
}

TEST(RunScenario, CorruptedFramesAreCountedAndDropped) {
  auto cfg = short_run(1);
  cfg.frame_corruption_rate = 0.1;
  const auto m = run_scenario(cfg).metrics;
  EXPECT_EQ(m.frames_sent, 1440u);
  EXPECT_EQ(m.frames_accepted + m.frames_rejected, m.frames_sent);
  EXPECT_GT(m.frames_rejected, 100u);
  EXPECT_LT(m.frames_rejected, 200u);
}

TEST(RunScenario, NotificationsMirrorDeviceLatchCycles) {
  const auto r = run_scenario(short_run(7));
  EXPECT_GT(r.metrics.notification_count, 0u);
  EXPECT_EQ(r.metrics.notification_count, r.device_events.size());
}

// Three scripted dry spells, each ended by a forced watering.
TEST(RunScenario, ThreeExcursionsThreeNotifications) {
  auto cfg = default_scenario();
  cfg.duration_s = 34 * 3600;
  cfg.alerts.cooldown_s = 86400;
  cfg.devices[0].mode = OverrideMode::ForceOff;
  for (std::int64_t h : {8, 20, 32}) {
    cfg.commands.push_back({h * 3600, 1, CommandPayload::pump_override(OverrideMode::ForceOn)});
    cfg.commands.push_back({(h + 1) * 3600, 1, CommandPayload::pump_override(OverrideMode::ForceOff)});
  }
  RunOptions o;
  o.record_trace = true;
  const auto r = run_scenario(cfg, o);
  EXPECT_EQ(r.metrics.notification_count, 3u);
  // Each watering lifts the soil back above the high threshold.
  for (std::int64_t h : {8, 20, 32}) {
    double peak = 0;
    for (const auto& s : r.trace)
      if (s.t_s > h * 3600 && s.t_s <= (h + 1) * 3600) peak = std::max(peak, s.moisture);
    EXPECT_GT(peak, 35.0) << "watering at hour " << h;
  }
}

TEST(Metrics, DutyCycleEdges) {
  MetricsAccumulator never, always;
  for (int i = 0; i < 10; ++i) {
    never.step(40, false, 0.5, 1);
    always.step(40, true, 0.5, 1);
  }
  const auto n = never.finish(0, 0.5, 10, 10, 0);
  EXPECT_EQ(n.pump_duty_cycle, 0.0);
  EXPECT_EQ(n.water_applied, 0.0);
  const auto a = always.finish(0, 0.5, 10, 10, 0);
  EXPECT_EQ(a.pump_duty_cycle, 1.0);
  EXPECT_DOUBLE_EQ(a.water_applied, 5.0);
}

TEST(Metrics, FileHasExactlyTheMetricFields) {
  ScratchDir d("m");
  emit_metrics(Metrics{}, d / "metrics.json");
  const auto j = ojson::parse(slurp(d / "metrics.json"));
  std::vector<std::string> keys;
  for (auto& [k, _] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"pump_duty_cycle", "water_applied", "min_moisture", "max_moisture",
                                            "mean_moisture", "notification_count", "final_soc", "frames_sent",
                                            "frames_accepted", "frames_rejected"}));
  EXPECT_EQ(slurp(d / "metrics.json").back(), '\n');
}

} // namespace
} // namespace swimps
