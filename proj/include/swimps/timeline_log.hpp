#pragma once

// Append-only, line-delimited JSON timeline. One object per line:
//   {"seq":1,"ts":1700000060000,"kind":"telemetry","device":7,"body":{...}}
// Sequence numbers start at 1 and are gapless within a file.

#include <nlohmann/json.hpp>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

namespace swimps {

using ojson = nlohmann::ordered_json;

enum class EntryKind { Telemetry, Notification, Command };

constexpr std::string_view to_string(EntryKind k) noexcept {
  switch (k) {
  case EntryKind::Telemetry: return "telemetry";
  case EntryKind::Notification: return "notification";
  case EntryKind::Command: return "command";
  }
  return "telemetry";
}

inline std::optional<EntryKind> parse_entry_kind(std::string_view s) noexcept {
  if (s == "telemetry") return EntryKind::Telemetry;
  if (s == "notification") return EntryKind::Notification;
  if (s == "command") return EntryKind::Command;
  return std::nullopt;
}

/// Bit set over EntryKind, used as a query filter.
class KindFilter {
public:
  constexpr KindFilter() = default;

  static constexpr KindFilter all() noexcept { return KindFilter(0b111); }
  static constexpr KindFilter only(EntryKind k) noexcept { return KindFilter(bit(k)); }

  constexpr KindFilter& add(EntryKind k) noexcept {
    bits_ |= bit(k);
    return *this;
  }
  constexpr bool contains(EntryKind k) const noexcept { return (bits_ & bit(k)) != 0; }
  constexpr bool empty() const noexcept { return bits_ == 0; }

  /// Parses "telemetry,notification"; an empty string selects all kinds.
  static std::optional<KindFilter> parse_csv(std::string_view csv) {
    if (csv.empty()) return all();
    KindFilter f;
    while (!csv.empty()) {
      const auto comma = csv.find(',');
      const auto token = csv.substr(0, comma);
      const auto kind = parse_entry_kind(token);
      if (!kind) return std::nullopt;
      f.add(*kind);
      if (comma == std::string_view::npos) break;
      csv.remove_prefix(comma + 1);
    }
    return f;
  }

private:
  constexpr explicit KindFilter(unsigned bits) : bits_(bits) {}
  static constexpr unsigned bit(EntryKind k) noexcept { return 1U << static_cast<unsigned>(k); }
  unsigned bits_ = 0;
};

struct TimelineEntry {
  std::uint64_t seq = 0;
  std::int64_t ts_ms = 0;
  EntryKind kind = EntryKind::Telemetry;
  std::uint32_t device = 0;
  ojson body = ojson::object();

  friend bool operator==(const TimelineEntry&, const TimelineEntry&) = default;
};

inline ojson to_json(const TimelineEntry& e) {
  ojson j;
  j["seq"] = e.seq;
  j["ts"] = e.ts_ms;
  j["kind"] = to_string(e.kind);
  j["device"] = e.device;
  j["body"] = e.body;
  return j;
}

inline std::string to_line(const TimelineEntry& e) { return to_json(e).dump() + '\n'; }

/// Throws std::runtime_error on malformed input.
inline TimelineEntry entry_from_json(const ojson& j) {
  TimelineEntry e;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.ts_ms = j.at("ts").get<std::int64_t>();
  const auto kind = parse_entry_kind(j.at("kind").get<std::string>());
  if (!kind) throw std::runtime_error("unknown entry kind");
  e.kind = *kind;
  e.device = j.at("device").get<std::uint32_t>();
  e.body = j.at("body");
  return e;
}

class StorageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class Durability { Fsync, Buffered };

/// The log file plus an in-memory copy of every entry. Retention is
/// unbounded. Appends are serialized; queries run concurrently with each
/// other and see only fully appended entries.
class TimelineLog {
public:
  /// Opens (creating if needed) and recovers the log. A torn final line
  /// (no trailing newline, unparsable) is truncated away; any other
  /// malformed line is an error.
  explicit TimelineLog(std::filesystem::path path, Durability durability = Durability::Fsync)
      : path_(std::move(path)), durability_(durability) {
    recover();
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw StorageError("open " + path_.string() + ": " + std::strerror(errno));
  }

  TimelineLog(const TimelineLog&) = delete;
  TimelineLog& operator=(const TimelineLog&) = delete;

  ~TimelineLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  const std::filesystem::path& path() const noexcept { return path_; }

  /// Assigns the next sequence number, writes the line and (by default)
  /// fsyncs before returning. The entry is visible to queries only once it
  /// is on disk.
  TimelineEntry append(TimelineEntry entry) {
    std::unique_lock lock(mutex_);
    entry.seq = last_seq_ + 1;
    const auto line = to_line(entry);
    write_all(line);
    if (durability_ == Durability::Fsync && ::fsync(fd_) != 0)
      throw StorageError("fsync " + path_.string() + ": " + std::strerror(errno));
    last_seq_ = entry.seq;
    entries_.push_back(entry);
    return entry;
  }

  std::uint64_t last_seq() const {
    std::shared_lock lock(mutex_);
    return last_seq_;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  /// Entries with seq > since for one device, ascending.
  std::vector<TimelineEntry> query(std::uint32_t device, std::uint64_t since,
                                   KindFilter kinds = KindFilter::all()) const {
    std::shared_lock lock(mutex_);
    std::vector<TimelineEntry> out;
    for (auto it = first_after(since); it != entries_.end(); ++it)
      if (it->device == device && kinds.contains(it->kind)) out.push_back(*it);
    return out;
  }

  /// All entries with seq > since, ascending.
  std::vector<TimelineEntry> entries(std::uint64_t since = 0) const {
    std::shared_lock lock(mutex_);
    return {first_after(since), entries_.end()};
  }

private:
  std::vector<TimelineEntry>::const_iterator first_after(std::uint64_t since) const {
    // seq is gapless starting at 1, so index == seq - 1.
    if (since >= entries_.size()) return entries_.end();
    return entries_.begin() + static_cast<std::ptrdiff_t>(since);
  }

  void recover() {
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < content.size()) {
      const auto nl = content.find('\n', pos);
      const bool complete = nl != std::string::npos;
      const auto line = std::string_view(content).substr(pos, complete ? nl - pos : std::string::npos);
      ++line_no;
      try {
        auto entry = entry_from_json(ojson::parse(line));
        if (!complete) throw std::runtime_error("missing newline");
        if (entry.seq != last_seq_ + 1)
          throw StorageError(path_.string() + ":" + std::to_string(line_no) + ": sequence gap");
        last_seq_ = entry.seq;
        entries_.push_back(std::move(entry));
      } catch (const StorageError&) {
        throw;
      } catch (const std::exception& e) {
        if (complete)
          throw StorageError(path_.string() + ":" + std::to_string(line_no) + ": " + e.what());
        std::filesystem::resize_file(path_, pos);
        return;
      }
      pos = nl + 1;
    }
  }

  void write_all(std::string_view data) {
    while (!data.empty()) {
      const auto n = ::write(fd_, data.data(), data.size());
      if (n < 0) {
        if (errno == EINTR) continue;
        throw StorageError("write " + path_.string() + ": " + std::strerror(errno));
      }
      data.remove_prefix(static_cast<std::size_t>(n));
    }
  }

  std::filesystem::path path_;
  Durability durability_;
  int fd_ = -1;
  mutable std::shared_mutex mutex_;
  std::uint64_t last_seq_ = 0;
  std::vector<TimelineEntry> entries_;
};

} // namespace swimps
