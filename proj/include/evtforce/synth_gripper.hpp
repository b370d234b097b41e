#pragma once

#include <cstdint>
#include <vector>

#include "evtforce/event_core.hpp"
#include "evtforce/frame_builder.hpp"

namespace evtforce::synth {

struct Point {
  double x = 0;
  double y = 0;
};

/// A two-finger soft gripper seen by a static event camera. The upper
/// finger is `finger`; the lower finger is its mirror image about the
/// horizontal centre line. Under force both fingers bend toward the centre:
/// a vertex at column x moves by deflection * clamp((x - base_x) /
/// (tip_x - base_x), 0, 1) rows.
struct GripperScene {
  int width = kDefaultSensorWidth;
  int height = kDefaultSensorHeight;
  std::vector<Point> finger;  // closed polygon, upper finger at zero force
  double base_x = 30.0;
  double tip_x = 250.0;
  double delta_max = 12.0;  // pixels at f_max
  double f_max = 1.6;       // newtons
  double background = 0.25;
  double foreground = 1.0;
  double contrast_threshold = 0.15;  // log-intensity step per event
  int supersample = 4;               // per-axis coverage samples per pixel
  double noise_rate_hz = 0.0;        // uniform noise events per second, 0 = off
  std::uint64_t noise_seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Polygon vertices of both fingers at the given force.
  std::vector<std::vector<Point>> deflected_fingers(double force) const;
};

GripperScene default_scene();

/// Samples at a fixed rate; sample k is taken at k / rate_hz seconds.
using ForceProfile = ForceTrack;

/// Row-major H x W positive intensities.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  double at(int x, int y) const { return data[std::size_t(y) * width + x]; }
  friend bool operator==(const Image&, const Image&) = default;
};

/// Linear elastic stand-in: delta_max * force / f_max. Throws outside [0, f_max].
double force_to_deflection(double force, const GripperScene& scene);

/// Background everywhere, foreground blended in by the fraction of each
/// pixel covered by the deflected finger polygons.
Image render_intensity(const GripperScene& scene, double force);

/// Fraction of each pixel covered by the fingers, in [0, 1].
std::vector<double> coverage(const GripperScene& scene, double force);

/// Idealized contrast-threshold pixel model: floor(|ln I_next - ln I_prev| / C)
/// events of polarity sign(delta), timestamps evenly spaced in
/// (t_prev, t_next], output sorted by time.
std::vector<Event> events_from_intensity_pair(const Image& prev, const Image& next,
                                              std::int64_t t_prev_us, std::int64_t t_next_us,
                                              double contrast_threshold);

struct SynthRecording {
  EventStream stream;
  ForceProfile profile;
  std::int64_t duration_us = 0;  // (n - 1) sample periods
};

/// Renders the scene at substeps_per_sample points per profile interval
/// (force linearly interpolated) and concatenates the events of every
/// consecutive image pair.
SynthRecording synthesize_recording(const GripperScene& scene, const ForceProfile& profile,
                                    int substeps_per_sample);

/// A grasp-phase force profile: a monotone ease curve from a low start force
/// to a high end force, deterministic per seed. Covers duration_s seconds
/// with duration_s * rate_hz + 1 samples.
ForceProfile grasp_profile(double duration_s, double rate_hz, double f_max, std::uint64_t seed);

}  // namespace evtforce::synth
