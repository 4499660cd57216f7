// swimps: gateway service, closed-loop scenario runner and survey scorer.
//
//   swimps serve --listen <addr> --data <dir> [--fsync on|off] [--device-listen <addr>]
//   swimps run   --scenario <file> [--seed N] [--duration S] [--out <dir>] [--realtime]
//   swimps score --input <csv> [--out table.json]

#include "swimps/gateway.hpp"
#include "swimps/http_api.hpp"
#include "swimps/scenario.hpp"
#include "swimps/survey.hpp"
#include "swimps/transport.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

int cmd_serve(const std::string& listen, const std::string& device_listen, const std::string& data,
              const std::string& fsync, bool queue_offline, std::int64_t cooldown_s, const std::string& ui) {
  swimps::GatewayOptions opts;
  opts.data_dir = data;
  opts.durability = fsync == "off" ? swimps::Durability::Buffered : swimps::Durability::Fsync;
  opts.queue_when_offline = queue_offline;
  opts.alerts.cooldown_s = cooldown_s;

  swimps::Gateway gw(opts);
  swimps::ApiServer api(gw);
  if (!ui.empty() && !api.mount_ui(ui)) std::cerr << "swimps: ui directory " << ui << " not found, /ui disabled\n";
  const auto http = swimps::parse_endpoint(listen);
  api.start(http.host, http.port);

  swimps::DeviceServer devices(gw);
  devices.start(swimps::parse_endpoint(device_listen));

  std::cout << "swimps: api on " << http.host << ":" << api.port() << ", devices on port " << devices.port()
            << ", data in " << data << " (" << gw.log().size() << " entries recovered)" << std::endl;

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));

  devices.stop();
  api.stop();
  return 0;
}

int cmd_run(const std::string& scenario, std::optional<std::uint64_t> seed, std::optional<std::int64_t> duration,
            const std::string& out, bool realtime, const std::string& gateway) {
  auto cfg = swimps::load_scenario(scenario);
  if (seed) {
    cfg.seed = *seed;
    cfg.env.seed = *seed;
  }
  if (duration) cfg.duration_s = *duration;
  swimps::validate(cfg, scenario);

  swimps::RunOptions opts;
  opts.out_dir = out;
  opts.realtime = realtime;
  if (!gateway.empty()) {
    cfg.transport = swimps::TransportMode::Loopback;
    opts.external_gateway = swimps::parse_endpoint(gateway);
  }
  const auto result = swimps::run_scenario(cfg, opts);
  std::cout << swimps::to_json(result.metrics).dump(2) << std::endl;
  return 0;
}

int cmd_score(const std::string& input, const std::string& out) {
  std::ifstream in(input);
  if (!in) {
    std::cerr << "swimps: cannot open " << input << '\n';
    return 2;
  }
  const auto table = swimps::survey::score_sheet(swimps::survey::ResponseSheet::parse_csv(in));
  const auto json = swimps::survey::to_json(table).dump(2);
  if (!out.empty()) {
    std::ofstream o(out, std::ios::trunc);
    o << json << '\n';
    if (!o) {
      std::cerr << "swimps: cannot write " << out << '\n';
      return 2;
    }
  }
  for (const auto& r : table.rows) std::cout << r.characteristic << '\t' << r.mean.str() << '\t' << to_string(r.band) << '\n';
  std::cout << "Overall Weighted Mean\t" << table.overall.str() << '\t' << to_string(table.overall_band) << '\n';
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Smart water irrigation: gateway, simulator and survey scorer"};
  app.require_subcommand(1);

  auto* serve = app.add_subcommand("serve", "Run the gateway: HTTP API, device listener, timeline log");
  std::string listen = "127.0.0.1:8080";
  std::string device_listen = "127.0.0.1:7070";
  std::string data = "data";
  std::string fsync = "on";
  bool queue_offline = false;
  std::int64_t cooldown_s = 3600;
  std::string ui;
  serve->add_option("--listen", listen, "HTTP API address host:port")->capture_default_str();
  serve->add_option("--device-listen", device_listen, "Device transport address host:port")->capture_default_str();
  serve->add_option("--data", data, "Data directory (gateway.log, registry.json)")->capture_default_str();
  serve->add_option("--fsync", fsync, "fsync every log append")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
  serve->add_flag("--queue-offline", queue_offline, "Queue commands for offline devices instead of failing");
  serve->add_option("--cooldown", cooldown_s, "Low-moisture re-alert cooldown in seconds")->capture_default_str();
  serve->add_option("--ui", ui, "Static files served under /ui");

  auto* run = app.add_subcommand("run", "Run a closed-loop scenario");
  std::string scenario;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> duration;
  std::string out = "out";
  bool realtime = false;
  std::string gateway;
  run->add_option("--scenario", scenario, "Scenario JSON file")->required();
  run->add_option("--seed", seed, "Override the scenario seed");
  run->add_option("--duration", duration, "Override duration_s");
  run->add_option("--out", out, "Output directory for metrics.json and gateway.log")->capture_default_str();
  run->add_flag("--realtime", realtime, "Pace ticks against the wall clock (realtime_speedup)");
  run->add_option("--gateway", gateway, "Send telemetry to a running `swimps serve` device port instead");

  auto* score = app.add_subcommand("score", "Score ISO/IEC 25010 Likert responses");
  std::string input;
  std::string score_out;
  score->add_option("--input", input, "Response CSV")->required();
  score->add_option("--out", score_out, "Write the table as JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve) return cmd_serve(listen, device_listen, data, fsync, queue_offline, cooldown_s, ui);
    if (*run) return cmd_run(scenario, seed, duration, out, realtime, gateway);
    if (*score) return cmd_score(input, score_out);
  } catch (const std::exception& e) {
    std::cerr << "swimps: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
