#pragma once

// JSON-over-HTTP query/command API for the gateway.
//
//   GET  /devices
//   GET  /devices/{id}/latest
//   GET  /devices/{id}/timeline?since={seq}&kinds={csv}
//   GET  /devices/{id}/config
//   PUT  /devices/{id}/config
//   POST /devices/{id}/command
//   GET  /events                 newline-delimited JSON, one timeline entry per line
//
// Status codes: 400 malformed request, 404 unknown device or no telemetry
// yet, 422 invariant violation (e.g. low >= high), 409 device rejected the
// command, 503 device offline or ack timeout, 202 command queued.

#include "swimps/gateway.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <atomic>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <thread>

namespace swimps {

class ApiServer {
public:
  explicit ApiServer(Gateway& gw) : gw_(gw) { routes(); }

  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  ~ApiServer() { stop(); }

  /// Serves the directory's files under /ui when it exists.
  bool mount_ui(const std::filesystem::path& dir) { return server_.set_mount_point("/ui", dir.string()); }

  /// Binds (port 0 picks a free port) and serves on a background thread.
  void start(const std::string& host, int port) {
    if (port == 0)
      port_ = server_.bind_to_any_port(host);
    else
      port_ = server_.bind_to_port(host, port) ? port : -1;
    if (port_ < 0) throw std::runtime_error("cannot bind HTTP API to " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  int port() const noexcept { return port_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    gw_.events().close_all();
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  /// Interval at which an idle /events stream writes a blank keep-alive line.
  std::chrono::milliseconds keepalive = std::chrono::milliseconds(1000);

private:
  static void reply(httplib::Response& res, int status, const ojson& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void error(httplib::Response& res, int status, const std::string& message) {
    ojson body;
    body["error"] = message;
    reply(res, status, body);
  }

  static std::optional<std::uint32_t> parse_id(const std::string& s) {
    std::uint32_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
    return v;
  }

  static int status_code(DispatchStatus s) {
    switch (s) {
    case DispatchStatus::Ok: return 200;
    case DispatchStatus::Queued: return 202;
    case DispatchStatus::RejectedByDevice: return 409;
    case DispatchStatus::Offline:
    case DispatchStatus::Timeout: return 503;
    case DispatchStatus::Invalid: return 422;
    case DispatchStatus::UnknownDevice: return 404;
    }
    return 500;
  }

  static ojson dispatch_json(const DispatchResult& r) {
    ojson j;
    j["status"] = to_string(r.status);
    j["entry"] = r.entry ? to_json(*r.entry) : ojson(nullptr);
    return j;
  }

  /// Resolves {id} to an existing device or writes the error response.
  std::optional<DeviceRecord> lookup(const httplib::Request& req, httplib::Response& res) {
    const auto id = parse_id(req.matches[1]);
    if (!id) {
      error(res, 400, "device id must be an unsigned 32-bit integer");
      return std::nullopt;
    }
    auto rec = gw_.device(*id);
    if (!rec) error(res, 404, "unknown device");
    return rec;
  }

  static std::optional<ojson> parse_body(const httplib::Request& req, httplib::Response& res) {
    auto body = ojson::parse(req.body, nullptr, false);
    if (body.is_discarded() || !body.is_object()) {
      error(res, 400, "request body must be a JSON object");
      return std::nullopt;
    }
    return body;
  }

  void routes() {
    server_.Get("/devices", [this](const httplib::Request&, httplib::Response& res) {
      const auto now = gw_.now_ms();
      ojson list = ojson::array();
      for (const auto& r : gw_.devices()) list.push_back(to_json(r, now));
      reply(res, 200, list);
    });

    server_.Get(R"(/devices/([^/]+)/latest)", [this](const httplib::Request& req, httplib::Response& res) {
      auto rec = lookup(req, res);
      if (!rec) return;
      if (!rec->last_telemetry) return error(res, 404, "no telemetry received yet");
      const auto& t = *rec->last_telemetry;
      ojson j;
      j["device"] = rec->device_id;
      j["seq"] = t.seq;
      j["timestamp_ms"] = t.timestamp_ms;
      j["arrival_ms"] = t.arrival_ms;
      const auto fields = to_json(t.payload);
      for (auto& [k, v] : fields.items()) j[k] = v;
      j["pump_on"] = t.payload.pump_on();
      j["charging"] = t.payload.charging();
      j["low_latch"] = t.payload.low_latch();
      j["online"] = rec->online(gw_.now_ms());
      reply(res, 200, j);
    });

    server_.Get(R"(/devices/([^/]+)/timeline)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto id = parse_id(req.matches[1]);
      if (!id) return error(res, 400, "device id must be an unsigned 32-bit integer");
      std::uint64_t since = 0;
      if (req.has_param("since")) {
        const auto s = req.get_param_value("since");
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), since);
        if (ec != std::errc{} || ptr != s.data() + s.size()) return error(res, 400, "since must be a sequence number");
      }
      const auto kinds = KindFilter::parse_csv(req.has_param("kinds") ? req.get_param_value("kinds") : "");
      if (!kinds) return error(res, 400, "kinds must list telemetry, notification or command");
      ojson list = ojson::array();
      for (const auto& e : gw_.timeline(*id, since, *kinds)) list.push_back(to_json(e));
      reply(res, 200, list);
    });

    server_.Get(R"(/devices/([^/]+)/config)", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto rec = lookup(req, res)) reply(res, 200, to_json(rec->config));
    });

    server_.Put(R"(/devices/([^/]+)/config)", [this](const httplib::Request& req, httplib::Response& res) {
      auto rec = lookup(req, res);
      if (!rec) return;
      auto body = parse_body(req, res);
      if (!body) return;
      DeviceConfig wanted;
      try {
        body->erase("device_id");
        wanted = device_config_from_json(*body, rec->config);
      } catch (const std::exception& e) {
        return error(res, 422, e.what());
      }

      ojson results = ojson::array();
      int status = 200;
      auto run = [&](const DispatchResult& r) {
        results.push_back(dispatch_json(r));
        status = std::max(status, status_code(r.status));
      };
      const auto id = rec->device_id;
      if (wanted.low_threshold != rec->config.low_threshold || wanted.high_threshold != rec->config.high_threshold)
        run(gw_.dispatch_command(id, CommandPayload::set_thresholds(wanted.low_threshold, wanted.high_threshold)));
      if (wanted.mode != rec->config.mode) run(gw_.dispatch_command(id, CommandPayload::pump_override(wanted.mode)));
      if (wanted.sample_interval_s != rec->config.sample_interval_s)
        run(gw_.set_sample_interval(id, wanted.sample_interval_s));

      ojson j;
      j["config"] = to_json(gw_.device(id)->config);
      j["results"] = results;
      reply(res, status, j);
    });

    server_.Post(R"(/devices/([^/]+)/command)", [this](const httplib::Request& req, httplib::Response& res) {
      auto rec = lookup(req, res);
      if (!rec) return;
      auto body = parse_body(req, res);
      if (!body) return;
      CommandPayload cmd;
      try {
        cmd = command_from_json(*body);
      } catch (const std::exception& e) {
        return error(res, 422, e.what());
      }
      const auto r = gw_.dispatch_command(rec->device_id, cmd);
      if (r.status == DispatchStatus::Invalid)
        return error(res, 422, "thresholds must satisfy 0 < low_cpct < high_cpct < 10000");
      reply(res, status_code(r.status), dispatch_json(r));
    });

    server_.Get("/events", [this](const httplib::Request&, httplib::Response& res) {
      auto sub = gw_.events().subscribe();
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "application/x-ndjson",
          [this, sub](std::size_t, httplib::DataSink& sink) {
            if (stopping_ || sub->closed()) {
              sink.done();
              return true;
            }
            const auto batch = sub->wait(keepalive);
            std::string chunk;
            for (const auto& e : batch) chunk += to_line(e);
            if (chunk.empty()) chunk = "\n";
            return sink.write(chunk.data(), chunk.size());
          },
          [sub](bool) { sub->close(); });
    });
  }

  Gateway& gw_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<bool> stopping_{false};
};

} // namespace swimps
