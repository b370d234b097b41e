#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evtforce/event_core.hpp"

namespace evtforce {

enum class AccumulationMode { binary, count, polarity2ch };

std::string to_string(AccumulationMode mode);
AccumulationMode parse_accumulation_mode(const std::string& name);

/// How events inside one time window become a frame.
struct FrameSpec {
  std::int64_t window_us = 100'000;
  AccumulationMode mode = AccumulationMode::polarity2ch;
  int out_size = 64;
  bool normalize = true;

  int channels() const { return mode == AccumulationMode::polarity2ch ? 2 : 1; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// channels x height x width, row-major.
struct Frame {
  int channels = 1;
  int height = 0;
  int width = 0;
  std::vector<float> data;
  std::int64_t t_start_us = 0;
  std::int64_t t_end_us = 0;

  Frame() = default;
  Frame(int c, int h, int w) : channels(c), height(h), width(w), data(std::size_t(c) * h * w) {}

  float& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
  double total() const;
};

/// Force samples at a fixed rate, sample k taken at k / rate_hz seconds.
struct ForceTrack {
  double rate_hz = 10.0;
  std::vector<double> samples;

  std::int64_t period_us() const;
};

/// An event recording with the time extent it covers, starting at t = 0.
struct Recording {
  std::string id;
  EventStream stream;
  std::int64_t duration_us = 0;
  ForceTrack track;
};

/// Extent of a stream when nothing else is known: last timestamp + 1.
std::int64_t implied_duration_us(const EventStream& stream);

struct FrameDataset {
  std::vector<Frame> frames;
  std::vector<double> labels;
  std::vector<std::string> provenance;

  std::size_t size() const { return frames.size(); }
  bool empty() const { return frames.empty(); }
};

struct ForceRange {
  double lo = 0.0;
  double hi = 1.6;
};

/// Raw sensor-resolution histogram of events [first, last) of `stream`.
Frame accumulate_events(const EventStream& stream, std::size_t first, std::size_t last,
                        AccumulationMode mode);

/// Accumulates the events of one window; `events` must already be sliced to
/// [t0, t0 + window). Resizes to out_size x out_size when the sensor differs
/// and normalizes by the frame maximum when the spec asks for it.
Frame accumulate_frame(const EventStream& events, const FrameSpec& spec, std::int64_t t0_us);

/// Same, reading events [first, last) of `stream` without copying them.
Frame accumulate_range(const EventStream& stream, std::size_t first, std::size_t last,
                       const FrameSpec& spec, std::int64_t t0_us);

/// Mass-preserving box resampling to out_size x out_size.
Frame resize_frame(const Frame& frame, int out_size);

/// Divides every element by the frame maximum; all-zero frames are unchanged.
void normalize_frame(Frame& frame);

/// Windows every recording into floor(duration / window) frames and labels
/// frame k with force sample k. Throws std::invalid_argument on a sample
/// period that differs from the window, a track too short for the
/// recording, or a label outside `range`.
FrameDataset build_dataset(const std::vector<Recording>& recordings, const FrameSpec& spec,
                           ForceRange range = {});

// FRD1 container.
enum class FrameIoErrorKind { missing_file, corrupt, unwritable_path };

class FrameIoError : public std::runtime_error {
 public:
  FrameIoError(FrameIoErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  FrameIoErrorKind kind() const { return kind_; }

 private:
  FrameIoErrorKind kind_;
};

std::string encode_frd1(const FrameDataset& dataset);
FrameDataset decode_frd1(std::string_view bytes);
void write_frd1(const FrameDataset& dataset, const std::filesystem::path& path);
FrameDataset read_frd1(const std::filesystem::path& path);

}  // namespace evtforce
