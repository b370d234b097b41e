#include "evtforce/frame_builder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "evtforce/binary_io.hpp"

namespace evtforce {

std::string to_string(AccumulationMode mode) {
  switch (mode) {
    case AccumulationMode::binary: return "binary";
    case AccumulationMode::count: return "count";
    case AccumulationMode::polarity2ch: return "polarity2ch";
  }
  return "unknown";
}

AccumulationMode parse_accumulation_mode(const std::string& name) {
  if (name == "binary") return AccumulationMode::binary;
  if (name == "count") return AccumulationMode::count;
  if (name == "polarity2ch") return AccumulationMode::polarity2ch;
  throw std::invalid_argument("unknown accumulation mode '" + name + "'");
}

void FrameSpec::validate() const {
  if (window_us <= 0) throw std::invalid_argument("frame.window_us must be > 0");
  if (out_size <= 0 || out_size > 65535) {
    throw std::invalid_argument("frame.out_size must be in [1, 65535]");
  }
}

double Frame::total() const { return std::accumulate(data.begin(), data.end(), 0.0); }

std::int64_t ForceTrack::period_us() const {
  if (!(rate_hz > 0)) throw std::invalid_argument("force track rate_hz must be > 0");
  return std::llround(1e6 / rate_hz);
}

std::int64_t implied_duration_us(const EventStream& stream) {
  return stream.empty() ? 0 : stream.events.back().t_us + 1;
}

Frame accumulate_events(const EventStream& stream, std::size_t first, std::size_t last,
                        AccumulationMode mode) {
  Frame frame(mode == AccumulationMode::polarity2ch ? 2 : 1, stream.height, stream.width);
  const std::size_t plane = std::size_t(stream.height) * stream.width;
  const std::size_t width = stream.width;
  float* out = frame.data.data();
  const Event* ev = stream.events.data();

  switch (mode) {
    case AccumulationMode::count:
      for (std::size_t i = first; i < last; ++i) out[ev[i].y * width + ev[i].x] += 1.0f;
      break;
    case AccumulationMode::binary:
      for (std::size_t i = first; i < last; ++i) out[ev[i].y * width + ev[i].x] = 1.0f;
      break;
    case AccumulationMode::polarity2ch:
      for (std::size_t i = first; i < last; ++i) {
        const std::size_t offset = ev[i].p > 0 ? 0 : plane;
        out[offset + ev[i].y * width + ev[i].x] += 1.0f;
      }
      break;
  }
  return frame;
}

Frame accumulate_range(const EventStream& stream, std::size_t first, std::size_t last,
                       const FrameSpec& spec, std::int64_t t0_us) {
  Frame frame = accumulate_events(stream, first, last, spec.mode);
  if (frame.height != spec.out_size || frame.width != spec.out_size) {
    frame = resize_frame(frame, spec.out_size);
  }
  if (spec.normalize) normalize_frame(frame);
  frame.t_start_us = t0_us;
  frame.t_end_us = t0_us + spec.window_us;
  return frame;
}

Frame accumulate_frame(const EventStream& events, const FrameSpec& spec, std::int64_t t0_us) {
  return accumulate_range(events, 0, events.size(), spec, t0_us);
}

namespace {

struct AxisWeight {
  int out;
  double weight;
};

// For each input index, the output cells it overlaps and the fraction of its
// mass that lands in each (fractions sum to 1).
std::vector<std::vector<AxisWeight>> box_weights(int in_size, int out_size) {
  std::vector<std::vector<AxisWeight>> weights(in_size);
  const double scale = static_cast<double>(out_size) / in_size;
  for (int i = 0; i < in_size; ++i) {
    double lo = i * scale;
    double hi = (i + 1) * scale;
    int first = static_cast<int>(std::floor(lo));
    int last = std::min(out_size - 1, static_cast<int>(std::ceil(hi)) - 1);
    for (int o = first; o <= last; ++o) {
      double overlap = std::min(hi, o + 1.0) - std::max(lo, static_cast<double>(o));
      if (overlap > 0) weights[i].push_back({o, overlap / scale});
    }
  }
  return weights;
}

}  // namespace

Frame resize_frame(const Frame& frame, int out_size) {
  if (out_size <= 0) throw std::invalid_argument("resize_frame: out_size must be > 0");
  if (frame.height == out_size && frame.width == out_size) return frame;

  const auto wy = box_weights(frame.height, out_size);
  const auto wx = box_weights(frame.width, out_size);
  Frame out(frame.channels, out_size, out_size);
  out.t_start_us = frame.t_start_us;
  out.t_end_us = frame.t_end_us;

  std::vector<double> rows(std::size_t(out_size) * frame.width);
  std::vector<double> acc(std::size_t(out_size) * out_size);
  for (int c = 0; c < frame.channels; ++c) {
    std::fill(rows.begin(), rows.end(), 0.0);
    for (int y = 0; y < frame.height; ++y) {
      const float* src = &frame.data[(std::size_t(c) * frame.height + y) * frame.width];
      bool any = std::any_of(src, src + frame.width, [](float v) { return v != 0.0f; });
      if (!any) continue;
      for (const auto& w : wy[y]) {
        double* dst = &rows[std::size_t(w.out) * frame.width];
        for (int x = 0; x < frame.width; ++x) dst[x] += w.weight * src[x];
      }
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int oy = 0; oy < out_size; ++oy) {
      const double* src = &rows[std::size_t(oy) * frame.width];
      double* dst = &acc[std::size_t(oy) * out_size];
      for (int x = 0; x < frame.width; ++x) {
        if (src[x] == 0.0) continue;
        for (const auto& w : wx[x]) dst[w.out] += w.weight * src[x];
      }
    }
    std::transform(acc.begin(), acc.end(),
                   out.data.begin() + static_cast<std::ptrdiff_t>(c) * out_size * out_size,
                   [](double v) { return static_cast<float>(v); });
  }
  return out;
}

void normalize_frame(Frame& frame) {
  if (frame.data.empty()) return;
  float peak = *std::max_element(frame.data.begin(), frame.data.end());
  if (peak <= 0.0f) return;
  for (auto& v : frame.data) v /= peak;
}

FrameDataset build_dataset(const std::vector<Recording>& recordings, const FrameSpec& spec,
                           ForceRange range) {
  spec.validate();
  FrameDataset ds;
  for (const auto& rec : recordings) {
    if (rec.track.period_us() != spec.window_us) {
      throw std::invalid_argument("recording '" + rec.id + "': force sample period " +
                                  std::to_string(rec.track.period_us()) +
                                  " us does not match window " +
                                  std::to_string(spec.window_us) + " us");
    }
    const auto n_frames = static_cast<std::size_t>(std::max<std::int64_t>(0, rec.duration_us) /
                                                   spec.window_us);
    if (rec.track.samples.size() < n_frames) {
      throw std::invalid_argument("recording '" + rec.id + "': force track has " +
                                  std::to_string(rec.track.samples.size()) + " samples, need " +
                                  std::to_string(n_frames));
    }
    for (std::size_t k = 0; k < n_frames; ++k) {
      double label = rec.track.samples[k];
      if (!(label >= range.lo && label <= range.hi)) {
        throw std::invalid_argument("recording '" + rec.id + "': label " +
                                    std::to_string(label) + " outside force range");
      }
      const std::int64_t t0 = static_cast<std::int64_t>(k) * spec.window_us;
      auto [first, last] = window_bounds(rec.stream, t0, t0 + spec.window_us);
      ds.frames.push_back(accumulate_range(rec.stream, first, last, spec, t0));
      ds.labels.push_back(label);
      ds.provenance.push_back(rec.id);
    }
  }
  return ds;
}

// FRD1: "FRD1", u16 channels, u16 H, u16 W, u64 count, then per frame
// C*H*W float32 followed by a float32 label.
std::string encode_frd1(const FrameDataset& ds) {
  int c = 0, h = 0, w = 0;
  if (!ds.empty()) {
    c = ds.frames.front().channels;
    h = ds.frames.front().height;
    w = ds.frames.front().width;
  }
  if (ds.labels.size() != ds.frames.size()) {
    throw FrameIoError(FrameIoErrorKind::corrupt, "FRD1: frame/label count mismatch");
  }
  std::string out;
  const std::size_t per_frame = std::size_t(c) * h * w;
  out.reserve(18 + ds.size() * (per_frame + 1) * 4);
  out.append("FRD1");
  binary::put(out, static_cast<std::uint16_t>(c));
  binary::put(out, static_cast<std::uint16_t>(h));
  binary::put(out, static_cast<std::uint16_t>(w));
  binary::put(out, static_cast<std::uint64_t>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& f = ds.frames[i];
    if (f.channels != c || f.height != h || f.width != w || f.data.size() != per_frame) {
      throw FrameIoError(FrameIoErrorKind::corrupt, "FRD1: frames must share one shape");
    }
    for (float v : f.data) binary::put_f32(out, v);
    binary::put_f32(out, static_cast<float>(ds.labels[i]));
  }
  return out;
}

FrameDataset decode_frd1(std::string_view bytes) {
  binary::Reader in(bytes);
  auto magic = in.take(4);
  if (!magic || *magic != "FRD1") throw FrameIoError(FrameIoErrorKind::corrupt, "FRD1: bad magic");
  auto c = in.get<std::uint16_t>();
  auto h = in.get<std::uint16_t>();
  auto w = in.get<std::uint16_t>();
  auto n = in.get<std::uint64_t>();
  if (!c || !h || !w || !n) throw FrameIoError(FrameIoErrorKind::corrupt, "FRD1: short header");
  const std::size_t per_frame = std::size_t(*c) * *h * *w;
  const std::size_t record = (per_frame + 1) * 4;
  if (in.remaining() != *n * record) {
    throw FrameIoError(FrameIoErrorKind::corrupt, "FRD1: payload size does not match declared frame count");
  }
  FrameDataset ds;
  ds.frames.reserve(*n);
  for (std::uint64_t i = 0; i < *n; ++i) {
    Frame f(*c, *h, *w);
    for (auto& v : f.data) v = *in.get_f32();
    ds.frames.push_back(std::move(f));
    ds.labels.push_back(*in.get_f32());
    ds.provenance.emplace_back();
  }
  return ds;
}

void write_frd1(const FrameDataset& dataset, const std::filesystem::path& path) {
  if (!binary::write_file(path, encode_frd1(dataset))) {
    throw FrameIoError(FrameIoErrorKind::unwritable_path, path.string() + ": cannot write");
  }
}

FrameDataset read_frd1(const std::filesystem::path& path) {
  std::string bytes;
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec) || !binary::read_file(path, bytes)) throw FrameIoError(FrameIoErrorKind::missing_file, path.string() + ": cannot open");
  return decode_frd1(bytes);
}

}  // namespace evtforce
