#pragma once

#include "swimps/protocol.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>

namespace swimps {

struct AlertConfig {
  /// Recovery level in centi-percent. Unset means "the device's high threshold".
  std::optional<std::uint16_t> clear_cpct;
  std::int64_t cooldown_s = 3600;

  friend bool operator==(const AlertConfig&, const AlertConfig&) = default;
};

/// Per-device debounce state.
struct AlertState {
  bool active = false;     ///< an alert fired and moisture has not recovered
  bool prev_latch = false; ///< flags bit2 at the previous sample
  std::optional<std::int64_t> last_emit_ms;

  friend bool operator==(const AlertState&, const AlertState&) = default;
};

struct NotificationEvent {
  std::uint32_t device_id = 0;
  std::int64_t timestamp_ms = 0;
  std::uint16_t moisture_cpct = 0;

  friend bool operator==(const NotificationEvent&, const NotificationEvent&) = default;
};

/// Thresholds resolved for one device at evaluation time.
struct AlertLevels {
  std::uint16_t low_cpct = 3000;
  std::uint16_t clear_cpct = 3500;
  std::int64_t cooldown_s = 3600;
};

inline AlertLevels resolve_levels(const AlertConfig& cfg, std::uint16_t low, std::uint16_t high) {
  AlertLevels lv{low, cfg.clear_cpct.value_or(high), cfg.cooldown_s};
  if (lv.cooldown_s < 0) throw std::invalid_argument("cooldown_s: must be >= 0");
  if (lv.clear_cpct <= lv.low_cpct) throw std::invalid_argument("clear_cpct: must exceed the low threshold");
  return lv;
}

/// Debounced LOW_MOISTURE detection. Fires on a rising low-latch bit or on a
/// below-low sample once the previous alert has recovered (moisture reached
/// the clear level). While moisture stays below low, it re-fires at most
/// once per cooldown.
inline std::optional<NotificationEvent> evaluate_alerts(AlertState& st, std::uint32_t device_id,
                                                        const TelemetryPayload& t, const AlertLevels& lv,
                                                        std::int64_t now_ms) {
  const bool latch = t.low_latch();
  const bool rising = latch && !st.prev_latch;
  const bool below = t.moisture_cpct < lv.low_cpct;
  st.prev_latch = latch;

  if (t.moisture_cpct >= lv.clear_cpct) st.active = false;

  bool fire = false;
  if (!st.active)
    fire = rising || below;
  else if (below && st.last_emit_ms)
    fire = now_ms - *st.last_emit_ms >= lv.cooldown_s * 1000;

  if (!fire) return std::nullopt;
  st.active = true;
  st.last_emit_ms = now_ms;
  return NotificationEvent{device_id, now_ms, t.moisture_cpct};
}

} // namespace swimps
