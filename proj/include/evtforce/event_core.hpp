#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace evtforce {

inline constexpr int kDefaultSensorWidth = 320;
inline constexpr int kDefaultSensorHeight = 240;

/// One brightness-change record from a dynamic vision sensor.
struct Event {
  std::int64_t t_us = 0;
  int x = 0;
  int y = 0;
  int p = 1;  // +1 or -1

  friend bool operator==(const Event&, const Event&) = default;
};

/// Time-ordered events from one sensor of fixed resolution.
struct EventStream {
  int width = kDefaultSensorWidth;
  int height = kDefaultSensorHeight;
  std::vector<Event> events;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

struct Violation {
  std::size_t index = 0;
  std::string reason;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
};

ValidationReport validate_stream(const EventStream& stream);

enum class EventFormat { csv, binary };

/// Picks the format from the file extension: `.csv` is CSV, anything else EVB1.
EventFormat format_for_path(const std::filesystem::path& path);

enum class EventIoErrorKind {
  missing_file,
  malformed_header,
  truncated_record,
  invalid_content,
  invalid_stream,
  unwritable_path,
};

class EventIoError : public std::runtime_error {
 public:
  EventIoError(EventIoErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  EventIoErrorKind kind() const { return kind_; }

 private:
  EventIoErrorKind kind_;
};

EventStream read_events(const std::filesystem::path& path, EventFormat format);
void write_events(const EventStream& stream, const std::filesystem::path& path,
                  EventFormat format);

/// Events with t0_us <= t < t1_us. Throws std::invalid_argument if t0 > t1.
EventStream slice_window(const EventStream& stream, std::int64_t t0_us,
                         std::int64_t t1_us);

/// Index range [first, last) of events inside the half-open window; the
/// stream must be time-ordered.
std::pair<std::size_t, std::size_t> window_bounds(const EventStream& stream,
                                                  std::int64_t t0_us,
                                                  std::int64_t t1_us);

}  // namespace evtforce
