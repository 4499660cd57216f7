#pragma once

#include "swimps/alerts.hpp"
#include "swimps/device.hpp"
#include "swimps/protocol.hpp"
#include "swimps/timeline_log.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace swimps {

// -- JSON mapping of device-facing types ---------------------------------------

inline ojson to_json(const DeviceConfig& c) {
  ojson j;
  j["device_id"] = c.device_id;
  j["low_threshold"] = c.low_threshold;
  j["high_threshold"] = c.high_threshold;
  j["sample_interval_s"] = c.sample_interval_s;
  j["override"] = to_string(c.mode);
  return j;
}

/// Reads the fields present in `j` over `base`. Throws std::invalid_argument
/// naming the first bad field; the result is validated.
inline DeviceConfig device_config_from_json(const ojson& j, DeviceConfig base) {
  auto read_uint = [&](const char* key, auto& dst, std::uint64_t max) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0 || v.get<std::uint64_t>() > max)
      throw std::invalid_argument(std::string(key) + ": expected an integer in [0, " + std::to_string(max) + "]");
    dst = static_cast<std::remove_reference_t<decltype(dst)>>(v.get<std::uint64_t>());
  };
  read_uint("device_id", base.device_id, 0xFFFFFFFFULL);
  read_uint("low_threshold", base.low_threshold, 0xFFFF);
  read_uint("high_threshold", base.high_threshold, 0xFFFF);
  read_uint("sample_interval_s", base.sample_interval_s, 0xFFFFFFFFULL);
  if (j.contains("override")) {
    const auto& v = j.at("override");
    std::optional<OverrideMode> mode;
    if (v.is_string()) mode = parse_override_mode(v.get<std::string>());
    if (!mode) throw std::invalid_argument("override: expected AUTO, FORCE_ON or FORCE_OFF");
    base.mode = *mode;
  }
  validate(base);
  return base;
}

inline ojson to_json(const TelemetryPayload& p) {
  ojson j;
  j["moisture_cpct"] = p.moisture_cpct;
  j["temp_cdegc"] = p.temp_cdegc;
  j["rh_cpct"] = p.rh_cpct;
  j["battery_mv"] = p.battery_mv;
  j["solar_mv"] = p.solar_mv;
  j["flags"] = p.flags;
  return j;
}

inline TelemetryPayload telemetry_from_json(const ojson& j) {
  return TelemetryPayload{
      .moisture_cpct = j.at("moisture_cpct").get<std::uint16_t>(),
      .temp_cdegc = j.at("temp_cdegc").get<std::int16_t>(),
      .rh_cpct = j.at("rh_cpct").get<std::uint16_t>(),
      .battery_mv = j.at("battery_mv").get<std::uint16_t>(),
      .solar_mv = j.at("solar_mv").get<std::uint16_t>(),
      .flags = j.at("flags").get<std::uint8_t>(),
  };
}

inline ojson to_json(const CommandPayload& c) {
  ojson j;
  if (c.cmd == CommandKind::SetThresholds) {
    j["cmd"] = "set_thresholds";
    j["low_cpct"] = c.low_cpct;
    j["high_cpct"] = c.high_cpct;
  } else {
    j["cmd"] = "override";
    j["mode"] = to_string(c.mode);
  }
  return j;
}

/// Parses the API/scenario command shape. Only checks structure; the
/// low < high invariant is left to the caller so it can answer 422.
inline CommandPayload command_from_json(const ojson& j) {
  if (!j.is_object() || !j.contains("cmd") || !j.at("cmd").is_string())
    throw std::invalid_argument("cmd: expected \"set_thresholds\" or \"override\"");
  const auto cmd = j.at("cmd").get<std::string>();
  if (cmd == "set_thresholds") {
    auto field = [&](const char* key) {
      if (!j.contains(key) || !j.at(key).is_number_integer() || j.at(key).get<std::int64_t>() < 0 ||
          j.at(key).get<std::int64_t>() > 0xFFFF)
        throw std::invalid_argument(std::string(key) + ": expected an integer in [0, 65535]");
      return j.at(key).get<std::uint16_t>();
    };
    return CommandPayload::set_thresholds(field("low_cpct"), field("high_cpct"));
  }
  if (cmd == "override") {
    std::optional<OverrideMode> mode;
    if (j.contains("mode") && j.at("mode").is_string()) mode = parse_override_mode(j.at("mode").get<std::string>());
    if (!mode) throw std::invalid_argument("mode: expected AUTO, FORCE_ON or FORCE_OFF");
    return CommandPayload::pump_override(*mode);
  }
  throw std::invalid_argument("cmd: expected \"set_thresholds\" or \"override\"");
}

// -- Live event stream ---------------------------------------------------------

/// One subscriber's queue. Bounded; the oldest entries are dropped when a
/// reader falls too far behind.
class EventSubscription {
public:
  static constexpr std::size_t max_queued = 65536;

  void push(const TimelineEntry& e) {
    {
      std::lock_guard lock(mutex_);
      if (closed_) return;
      if (queue_.size() == max_queued) queue_.pop_front();
      queue_.push_back(e);
    }
    cv_.notify_one();
  }

  /// Blocks until entries are available, the timeout passes, or the
  /// subscription closes.
  std::vector<TimelineEntry> wait(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || !queue_.empty(); });
    std::vector<TimelineEntry> out(queue_.begin(), queue_.end());
    queue_.clear();
    return out;
  }

  void close() {
    {
      std::lock_guard lock(mutex_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
  }

private:
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<TimelineEntry> queue_;
  bool closed_ = false;
};

class EventHub {
public:
  std::shared_ptr<EventSubscription> subscribe() {
    auto sub = std::make_shared<EventSubscription>();
    std::lock_guard lock(mutex_);
    subs_.push_back(sub);
    return sub;
  }

  void publish(const TimelineEntry& e) {
    std::lock_guard lock(mutex_);
    std::erase_if(subs_, [](const auto& w) { return w.expired(); });
    for (const auto& w : subs_)
      if (auto s = w.lock()) s->push(e);
  }

  void close_all() {
    std::lock_guard lock(mutex_);
    for (const auto& w : subs_)
      if (auto s = w.lock()) s->close();
    subs_.clear();
  }

private:
  std::mutex mutex_;
  std::vector<std::weak_ptr<EventSubscription>> subs_;
};

// -- Gateway -------------------------------------------------------------------

/// Transport to one device. `exchange` delivers an encoded command frame and
/// returns the device's encoded ack frame, or nullopt on timeout/loss.
class DeviceLink {
public:
  virtual ~DeviceLink() = default;
  virtual std::optional<std::vector<std::uint8_t>> exchange(std::span<const std::uint8_t> frame,
                                                            std::uint32_t seq) = 0;
};

struct TelemetrySnapshot {
  TelemetryPayload payload;
  std::uint32_t seq = 0;
  std::int64_t timestamp_ms = 0;
  std::int64_t arrival_ms = 0;

  friend bool operator==(const TelemetrySnapshot&, const TelemetrySnapshot&) = default;
};

struct DeviceRecord {
  std::uint32_t device_id = 0;
  DeviceConfig config;
  std::optional<std::int64_t> first_seen_ms;
  std::optional<TelemetrySnapshot> last_telemetry;
  std::uint32_t last_seq = 0;
  AlertState alert;

  /// Heard from within 3x the sample interval.
  bool online(std::int64_t now_ms) const noexcept {
    if (!last_telemetry) return false;
    return now_ms - last_telemetry->arrival_ms <= 3LL * config.sample_interval_s * 1000;
  }

  friend bool operator==(const DeviceRecord&, const DeviceRecord&) = default;
};

inline ojson to_json(const DeviceRecord& r, std::int64_t now_ms) {
  ojson j;
  j["device"] = r.device_id;
  j["online"] = r.online(now_ms);
  j["first_seen_ms"] = r.first_seen_ms ? ojson(*r.first_seen_ms) : ojson(nullptr);
  j["last_seq"] = r.last_seq;
  j["last_timestamp_ms"] = r.last_telemetry ? ojson(r.last_telemetry->timestamp_ms) : ojson(nullptr);
  j["config"] = to_json(r.config);
  return j;
}

struct IngestCounters {
  std::uint64_t accepted = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t unexpected_type = 0;
  std::map<DecodeError, std::uint64_t> decode_errors;

  std::uint64_t rejected() const noexcept {
    std::uint64_t n = unexpected_type;
    for (const auto& [_, c] : decode_errors) n += c;
    return n;
  }
};

struct IngestOutcome {
  enum class Status { Accepted, Duplicate, Rejected } status = Status::Rejected;
  std::optional<DecodeError> error;      ///< Rejected by the codec
  std::optional<Frame> frame;            ///< decoded frame, when decoding succeeded
  std::optional<TimelineEntry> telemetry;
  std::optional<TimelineEntry> notification;
  bool commands_pending = false; ///< queued commands are waiting for this device

  bool accepted() const noexcept { return status == Status::Accepted; }
};

enum class DispatchStatus { Ok, RejectedByDevice, Queued, Offline, Timeout, Invalid, UnknownDevice };

constexpr std::string_view to_string(DispatchStatus s) noexcept {
  switch (s) {
  case DispatchStatus::Ok: return "ok";
  case DispatchStatus::RejectedByDevice: return "rejected";
  case DispatchStatus::Queued: return "queued";
  case DispatchStatus::Offline: return "offline";
  case DispatchStatus::Timeout: return "timeout";
  case DispatchStatus::Invalid: return "invalid";
  case DispatchStatus::UnknownDevice: return "unknown_device";
  }
  return "invalid";
}

struct DispatchResult {
  DispatchStatus status = DispatchStatus::Invalid;
  std::optional<TimelineEntry> entry;
};

struct GatewayOptions {
  std::filesystem::path data_dir = ".";
  Durability durability = Durability::Fsync;
  AlertConfig alerts;
  DeviceConfig default_config; ///< mirror used for auto-registered devices
  bool queue_when_offline = false;
  std::function<std::int64_t()> clock; ///< unix ms; system clock when empty
};

inline std::int64_t system_clock_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

/// Ingestion and control service. Files in `data_dir`: `gateway.log`
/// (timeline) and `registry.json` (first-seen time and provisioned config
/// per device). Construction replays the log to rebuild device state.
///
/// Locking: each device has an ingest mutex (one writer per device); the
/// device map is guarded by a shared mutex and records are replaced
/// wholesale under it, so readers always see a completed ingest. Log
/// appends are serialized inside TimelineLog.
class Gateway {
public:
  explicit Gateway(GatewayOptions opts)
      : opts_(std::move(opts)),
        log_((std::filesystem::create_directories(opts_.data_dir), opts_.data_dir / "gateway.log"),
             opts_.durability) {
    if (!opts_.clock) opts_.clock = system_clock_ms;
    load_registry();
    replay();
  }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  ~Gateway() { events_.close_all(); }

  std::int64_t now_ms() const { return opts_.clock(); }
  const GatewayOptions& options() const noexcept { return opts_; }
  TimelineLog& log() noexcept { return log_; }
  const TimelineLog& log() const noexcept { return log_; }
  EventHub& events() noexcept { return events_; }

  /// Provisions a device's config mirror ahead of its first frame.
  void register_device(const DeviceConfig& cfg) {
    validate(cfg);
    auto& slot = slot_for(cfg.device_id);
    std::scoped_lock lock(slot.ingest_mutex);
    {
      std::unique_lock map_lock(map_mutex_);
      slot.record.config = cfg;
      slot.initial_config = cfg;
    }
    save_registry();
  }

  IngestOutcome ingest_frame(std::span<const std::uint8_t> bytes, std::int64_t arrival_ms) {
    IngestOutcome out;
    auto decoded = decode_frame(bytes);
    if (!decoded) {
      out.error = decoded.error();
      std::lock_guard lock(counters_mutex_);
      ++counters_.decode_errors[decoded.error()];
      return out;
    }
    out.frame = *decoded;
    const Frame& f = *decoded;
    if (f.msg_type() != MsgType::Telemetry) {
      std::lock_guard lock(counters_mutex_);
      ++counters_.unexpected_type;
      return out;
    }

    auto& slot = slot_for(f.device_id);
    std::scoped_lock ingest_lock(slot.ingest_mutex);
    DeviceRecord rec = snapshot(slot);
    if (f.seq <= rec.last_seq) {
      out.status = IngestOutcome::Status::Duplicate;
      std::lock_guard lock(counters_mutex_);
      ++counters_.duplicates;
      return out;
    }

    const bool first_frame = !rec.first_seen_ms;
    const auto& payload = std::get<TelemetryPayload>(f.payload);
    auto note = apply_telemetry(rec, payload, f.seq, static_cast<std::int64_t>(f.timestamp_ms), arrival_ms);
    if (first_frame) rec.first_seen_ms = arrival_ms;

    TimelineEntry entry{0, static_cast<std::int64_t>(f.timestamp_ms), EntryKind::Telemetry, f.device_id,
                        telemetry_body(payload, f.seq, arrival_ms)};
    out.telemetry = log_.append(std::move(entry));
    if (note) {
      ojson body;
      body["event"] = "LOW_MOISTURE";
      body["moisture_cpct"] = note->moisture_cpct;
      out.notification = log_.append({0, note->timestamp_ms, EntryKind::Notification, f.device_id, body});
    }

    {
      std::unique_lock map_lock(map_mutex_);
      slot.record = rec;
      out.commands_pending = !slot.pending.empty() && slot.link != nullptr;
    }
    if (first_frame) save_registry();
    {
      std::lock_guard lock(counters_mutex_);
      ++counters_.accepted;
    }
    events_.publish(*out.telemetry);
    if (out.notification) events_.publish(*out.notification);
    out.status = IngestOutcome::Status::Accepted;
    return out;
  }

  /// Sends a command to a device and waits for its ack. The device-side
  /// invariant (0 < low < high < 10000) is checked before anything is sent.
  DispatchResult dispatch_command(std::uint32_t device_id, const CommandPayload& cmd) {
    if (!command_valid(cmd)) return {DispatchStatus::Invalid, std::nullopt};
    DeviceSlot* slot = find_slot(device_id);
    if (!slot) return {DispatchStatus::UnknownDevice, std::nullopt};

    std::shared_ptr<DeviceLink> link;
    {
      std::unique_lock map_lock(map_mutex_);
      link = slot->link;
      if (!link) {
        if (!opts_.queue_when_offline) return {DispatchStatus::Offline, std::nullopt};
        slot->pending.push_back(cmd);
        return {DispatchStatus::Queued, std::nullopt};
      }
    }
    return deliver(*slot, link, cmd);
  }

  /// Delivers commands queued while the device had no link. Must not be
  /// called from a thread the link needs in order to receive acks.
  std::size_t flush_pending(std::uint32_t device_id) {
    DeviceSlot* slot = find_slot(device_id);
    if (!slot) return 0;
    std::size_t delivered = 0;
    for (;;) {
      std::shared_ptr<DeviceLink> link;
      CommandPayload cmd;
      {
        std::unique_lock map_lock(map_mutex_);
        if (!slot->link || slot->pending.empty()) break;
        link = slot->link;
        cmd = slot->pending.front();
        slot->pending.pop_front();
        ++slot->in_flight;
      }
      const auto r = deliver(*slot, link, cmd);
      {
        std::unique_lock map_lock(map_mutex_);
        --slot->in_flight;
      }
      if (r.status == DispatchStatus::Timeout) break;
      ++delivered;
    }
    return delivered;
  }

  /// True when no queued command is waiting for, or in, delivery.
  bool commands_settled(std::uint32_t device_id) const {
    DeviceSlot* slot = find_slot(device_id);
    if (!slot) return true;
    std::shared_lock map_lock(map_mutex_);
    return slot->in_flight == 0 && (slot->pending.empty() || !slot->link);
  }

  void wait_commands_settled(std::uint32_t device_id,
                             std::chrono::milliseconds timeout = std::chrono::seconds(5)) const {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (!commands_settled(device_id) && std::chrono::steady_clock::now() < deadline)
      std::this_thread::sleep_for(std::chrono::microseconds(200));
  }

  void attach_link(std::uint32_t device_id, std::shared_ptr<DeviceLink> link) {
    auto& slot = slot_for(device_id);
    std::unique_lock map_lock(map_mutex_);
    slot.link = std::move(link);
  }

  /// Detaches only if `link` is still the current one.
  void detach_link(std::uint32_t device_id, const DeviceLink* link) {
    DeviceSlot* slot = find_slot(device_id);
    if (!slot) return;
    std::unique_lock map_lock(map_mutex_);
    if (slot->link.get() == link) slot->link.reset();
  }

  /// Updates the gateway-side sample interval (used for liveness). The
  /// change is logged so replay reproduces it.
  DispatchResult set_sample_interval(std::uint32_t device_id, std::uint32_t interval_s) {
    if (interval_s < 1) return {DispatchStatus::Invalid, std::nullopt};
    DeviceSlot* slot = find_slot(device_id);
    if (!slot) return {DispatchStatus::UnknownDevice, std::nullopt};
    std::scoped_lock ingest_lock(slot->ingest_mutex);
    ojson body;
    body["cmd"] = "set_sample_interval";
    body["sample_interval_s"] = interval_s;
    body["status"] = "ok";
    auto entry = log_.append({0, now_ms(), EntryKind::Command, device_id, body});
    {
      std::unique_lock map_lock(map_mutex_);
      slot->record.config.sample_interval_s = interval_s;
    }
    events_.publish(entry);
    return {DispatchStatus::Ok, entry};
  }

  std::optional<DeviceRecord> device(std::uint32_t device_id) const {
    std::shared_lock lock(map_mutex_);
    auto it = slots_.find(device_id);
    if (it == slots_.end()) return std::nullopt;
    return it->second->record;
  }

  std::vector<DeviceRecord> devices() const {
    std::shared_lock lock(map_mutex_);
    std::vector<DeviceRecord> out;
    out.reserve(slots_.size());
    for (const auto& [_, slot] : slots_) out.push_back(slot->record);
    return out;
  }

  std::vector<TimelineEntry> timeline(std::uint32_t device_id, std::uint64_t since,
                                      KindFilter kinds = KindFilter::all()) const {
    return log_.query(device_id, since, kinds);
  }

  IngestCounters counters() const {
    std::lock_guard lock(counters_mutex_);
    return counters_;
  }

  static ojson telemetry_body(const TelemetryPayload& p, std::uint32_t frame_seq, std::int64_t arrival_ms) {
    ojson body;
    body["frame_seq"] = frame_seq;
    body["arrival_ms"] = arrival_ms;
    const auto fields = to_json(p);
    for (auto& [k, v] : fields.items()) body[k] = v;
    return body;
  }

private:
  struct DeviceSlot {
    std::mutex ingest_mutex;
    DeviceRecord record;         // guarded by map_mutex_ for reads
    DeviceConfig initial_config; // as provisioned or auto-registered
    std::deque<CommandPayload> pending;
    std::shared_ptr<DeviceLink> link;
    std::atomic<std::uint32_t> next_cmd_seq{0};
    int in_flight = 0; // guarded by map_mutex_
  };

  static bool command_valid(const CommandPayload& cmd) {
    if (!cmd.valid()) return false;
    return cmd.cmd != CommandKind::SetThresholds || thresholds_valid(cmd.low_cpct, cmd.high_cpct);
  }

  std::optional<NotificationEvent> apply_telemetry(DeviceRecord& rec, const TelemetryPayload& p, std::uint32_t seq,
                                                   std::int64_t ts_ms, std::int64_t arrival_ms) const {
    const auto levels = resolve_levels(opts_.alerts, rec.config.low_threshold, rec.config.high_threshold);
    auto note = evaluate_alerts(rec.alert, rec.device_id, p, levels, ts_ms);
    rec.last_seq = seq;
    rec.last_telemetry = TelemetrySnapshot{p, seq, ts_ms, arrival_ms};
    return note;
  }

  static void apply_command_entry(DeviceConfig& cfg, const ojson& body) {
    if (body.value("status", "") != "ok") return;
    const auto cmd = body.value("cmd", "");
    if (cmd == "set_sample_interval") {
      cfg.sample_interval_s = body.at("sample_interval_s").get<std::uint32_t>();
      return;
    }
    apply_command(cfg, command_from_json(body));
  }

  DispatchResult deliver(DeviceSlot& slot, const std::shared_ptr<DeviceLink>& link, const CommandPayload& cmd) {
    const auto device_id = slot.record.device_id;
    const auto seq = ++slot.next_cmd_seq;
    const auto ts = now_ms();
    const auto bytes = encode_frame(Frame{protocol_version, device_id, seq, static_cast<std::uint64_t>(ts), cmd});
    const auto reply = link->exchange(bytes, seq);

    DispatchStatus status = DispatchStatus::Timeout;
    if (reply) {
      auto ack = decode_frame(*reply);
      if (ack && ack->msg_type() == MsgType::Ack && std::get<AckPayload>(ack->payload).acked_seq == seq)
        status = std::get<AckPayload>(ack->payload).status == AckStatus::Ok ? DispatchStatus::Ok
                                                                             : DispatchStatus::RejectedByDevice;
    }

    ojson body = to_json(cmd);
    body["frame_seq"] = seq;
    body["status"] = to_string(status);

    std::scoped_lock ingest_lock(slot.ingest_mutex);
    auto entry = log_.append({0, ts, EntryKind::Command, device_id, body});
    if (status == DispatchStatus::Ok) {
      std::unique_lock map_lock(map_mutex_);
      apply_command(slot.record.config, cmd);
    }
    events_.publish(entry);
    return {status, entry};
  }

  DeviceRecord snapshot(const DeviceSlot& slot) const {
    std::shared_lock lock(map_mutex_);
    return slot.record;
  }

  DeviceSlot* find_slot(std::uint32_t device_id) const {
    std::shared_lock lock(map_mutex_);
    auto it = slots_.find(device_id);
    return it == slots_.end() ? nullptr : it->second.get();
  }

  DeviceSlot& slot_for(std::uint32_t device_id) {
    if (auto* s = find_slot(device_id)) return *s;
    std::unique_lock lock(map_mutex_);
    auto& ptr = slots_[device_id];
    if (!ptr) {
      ptr = std::make_unique<DeviceSlot>();
      auto cfg = opts_.default_config;
      cfg.device_id = device_id;
      ptr->record.device_id = device_id;
      ptr->record.config = cfg;
      ptr->initial_config = cfg;
    }
    return *ptr;
  }

  std::filesystem::path registry_path() const { return opts_.data_dir / "registry.json"; }

  void save_registry() {
    ojson doc;
    doc["devices"] = ojson::array();
    {
      std::shared_lock lock(map_mutex_);
      for (const auto& [id, slot] : slots_) {
        ojson d;
        d["device"] = id;
        d["first_seen_ms"] = slot->record.first_seen_ms ? ojson(*slot->record.first_seen_ms) : ojson(nullptr);
        d["config"] = to_json(slot->initial_config);
        doc["devices"].push_back(std::move(d));
      }
    }
    std::lock_guard lock(registry_mutex_);
    const auto tmp = registry_path().string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      out << doc.dump(2) << '\n';
      if (!out) throw StorageError("write " + tmp);
    }
    std::filesystem::rename(tmp, registry_path());
  }

  void load_registry() {
    std::ifstream in(registry_path());
    if (!in) return;
    const auto doc = ojson::parse(in);
    for (const auto& d : doc.at("devices")) {
      const auto id = d.at("device").get<std::uint32_t>();
      auto& slot = slot_for(id);
      auto cfg = device_config_from_json(d.at("config"), slot.record.config);
      cfg.device_id = id;
      slot.record.config = cfg;
      slot.initial_config = cfg;
      if (!d.at("first_seen_ms").is_null()) slot.record.first_seen_ms = d.at("first_seen_ms").get<std::int64_t>();
    }
  }

  /// Re-applies the persisted timeline. Notifications are recomputed (and
  /// discarded) so the debounce state matches an uninterrupted run.
  void replay() {
    for (const auto& e : log_.entries()) {
      auto& slot = slot_for(e.device);
      auto& rec = slot.record;
      if (e.kind == EntryKind::Telemetry) {
        const auto seq = e.body.at("frame_seq").get<std::uint32_t>();
        const auto arrival = e.body.at("arrival_ms").get<std::int64_t>();
        apply_telemetry(rec, telemetry_from_json(e.body), seq, e.ts_ms, arrival);
        if (!rec.first_seen_ms) rec.first_seen_ms = arrival;
      } else if (e.kind == EntryKind::Command) {
        apply_command_entry(rec.config, e.body);
        if (e.body.contains("frame_seq")) {
          const auto seq = e.body.at("frame_seq").get<std::uint32_t>();
          if (seq > slot.next_cmd_seq) slot.next_cmd_seq = seq;
        }
      }
    }
  }

  GatewayOptions opts_;
  TimelineLog log_;
  EventHub events_;

  mutable std::shared_mutex map_mutex_;
  std::map<std::uint32_t, std::unique_ptr<DeviceSlot>> slots_;

  std::mutex registry_mutex_;
  mutable std::mutex counters_mutex_;
  IngestCounters counters_;
};

} // namespace swimps
