#include "evtforce/synth_gripper.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>

namespace evtforce::synth {

namespace {

// Counts supersample centres inside `polygon` (even-odd rule) per pixel.
void add_polygon_coverage(const std::vector<Point>& polygon, int width, int height, int ss,
                          std::vector<int>& hits) {
  std::vector<double> crossings;
  const std::size_t n = polygon.size();
  for (int row = 0; row < height * ss; ++row) {
    const double ys = (row + 0.5) / ss;
    crossings.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const Point& a = polygon[i];
      const Point& b = polygon[(i + 1) % n];
      if ((a.y <= ys && ys < b.y) || (b.y <= ys && ys < a.y)) {
        crossings.push_back(a.x + (ys - a.y) * (b.x - a.x) / (b.y - a.y));
      }
    }
    if (crossings.size() < 2) continue;
    std::sort(crossings.begin(), crossings.end());
    int* hit_row = &hits[std::size_t(row / ss) * width];
    for (std::size_t i = 0; i + 1 < crossings.size(); i += 2) {
      long first = static_cast<long>(std::ceil(crossings[i] * ss - 0.5));
      long last = static_cast<long>(std::ceil(crossings[i + 1] * ss - 0.5)) - 1;
      first = std::max(first, 0L);
      last = std::min(last, static_cast<long>(width) * ss - 1);
      for (long k = first; k <= last; ++k) ++hit_row[k / ss];
    }
  }
}

}  // namespace

void GripperScene::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("scene." + key + " " + why);
  };
  if (width <= 0 || width > 65535) fail("width", "must be in [1, 65535]");
  if (height <= 0 || height > 65535) fail("height", "must be in [1, 65535]");
  if (!(delta_max >= 0)) fail("delta_max", "must be >= 0");
  if (!(f_max > 0)) fail("f_max", "must be > 0");
  if (!(contrast_threshold > 0)) fail("C", "must be > 0");
  if (!(background > 0)) fail("background", "must be > 0");
  if (!(foreground > 0)) fail("foreground", "must be > 0");
  if (supersample < 1) fail("supersample", "must be >= 1");
  if (!(noise_rate_hz >= 0)) fail("noise_rate_hz", "must be >= 0");
  if (!(tip_x > base_x)) fail("tip_x", "must exceed scene.base_x");
  if (!finger.empty() && finger.size() < 3) fail("finger", "needs at least 3 points");
  for (const auto& p : finger) {
    if (p.x < 0 || p.x > width || p.y < 0 || p.y > height) {
      fail("finger", "control points must lie inside the sensor plane");
    }
  }
}

std::vector<std::vector<Point>> GripperScene::deflected_fingers(double force) const {
  const double deflection = force_to_deflection(force, *this);
  std::vector<Point> upper = finger;
  std::vector<Point> lower = finger;
  for (std::size_t i = 0; i < finger.size(); ++i) {
    double along = std::clamp((finger[i].x - base_x) / (tip_x - base_x), 0.0, 1.0);
    upper[i].y = finger[i].y + deflection * along;
    lower[i].y = height - finger[i].y - deflection * along;
  }
  if (finger.empty()) return {};
  return {upper, lower};
}

GripperScene default_scene() {
  GripperScene scene;
  scene.finger = {{30, 50}, {150, 64}, {250, 78}, {290, 90}, {290, 108}, {250, 108},
                  {150, 104}, {30, 100}};
  return scene;
}

double force_to_deflection(double force, const GripperScene& scene) {
  if (!(force >= 0 && force <= scene.f_max)) {
    throw std::out_of_range("force " + std::to_string(force) + " N outside [0, " +
                            std::to_string(scene.f_max) + "]");
  }
  return scene.delta_max * (force / scene.f_max);
}

std::vector<double> coverage(const GripperScene& scene, double force) {
  std::vector<int> hits(std::size_t(scene.width) * scene.height, 0);
  for (const auto& polygon : scene.deflected_fingers(force)) {
    add_polygon_coverage(polygon, scene.width, scene.height, scene.supersample, hits);
  }
  const double per_pixel = double(scene.supersample) * scene.supersample;
  std::vector<double> out(hits.size());
  std::transform(hits.begin(), hits.end(), out.begin(),
                 [&](int h) { return std::min(1.0, h / per_pixel); });
  return out;
}

Image render_intensity(const GripperScene& scene, double force) {
  Image img{scene.width, scene.height, coverage(scene, force)};
  for (auto& v : img.data) v = scene.background + (scene.foreground - scene.background) * v;
  return img;
}

std::vector<Event> events_from_intensity_pair(const Image& prev, const Image& next,
                                              std::int64_t t_prev_us, std::int64_t t_next_us,
                                              double contrast_threshold) {
  if (prev.width != next.width || prev.height != next.height) {
    throw std::invalid_argument("intensity images differ in size");
  }
  if (!(t_prev_us < t_next_us)) throw std::invalid_argument("t_prev must precede t_next");
  if (!(contrast_threshold > 0)) throw std::invalid_argument("contrast threshold must be > 0");

  // Absorbs rounding in ln(I * e^C) - ln(I) so an exact threshold step fires.
  constexpr double kSlack = 1e-9;
  const std::int64_t span = t_next_us - t_prev_us;
  std::vector<Event> events;
  for (int y = 0; y < prev.height; ++y) {
    for (int x = 0; x < prev.width; ++x) {
      const double a = prev.at(x, y);
      const double b = next.at(x, y);
      if (!(a > 0) || !(b > 0)) throw std::invalid_argument("intensities must be positive");
      if (a == b) continue;
      const double delta = std::log(b) - std::log(a);
      const auto n = static_cast<std::int64_t>(std::floor(std::abs(delta) / contrast_threshold + kSlack));
      const int polarity = delta > 0 ? 1 : -1;
      for (std::int64_t j = 1; j <= n; ++j) {
        // ceil(j * span / n) keeps every timestamp strictly after t_prev.
        const std::int64_t offset = (j * span + n - 1) / n;
        events.push_back({t_prev_us + offset, x, y, polarity});
      }
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& l, const Event& r) { return l.t_us < r.t_us; });
  return events;
}

SynthRecording synthesize_recording(const GripperScene& scene, const ForceProfile& profile,
                                    int substeps_per_sample) {
  scene.validate();
  if (substeps_per_sample < 1) throw std::invalid_argument("substeps_per_sample must be >= 1");
  for (double f : profile.samples) {
    if (!(f >= 0 && f <= scene.f_max)) {
      throw std::out_of_range("profile sample " + std::to_string(f) + " N outside [0, f_max]");
    }
  }

  const std::int64_t period = profile.period_us();
  SynthRecording rec;
  rec.profile = profile;
  rec.stream.width = scene.width;
  rec.stream.height = scene.height;
  if (profile.samples.size() < 2) return rec;
  rec.duration_us = period * static_cast<std::int64_t>(profile.samples.size() - 1);

  std::mt19937_64 noise_rng(scene.noise_seed);
  auto& out = rec.stream.events;
  double prev_force = profile.samples[0];
  Image prev = render_intensity(scene, prev_force);
  for (std::size_t k = 0; k + 1 < profile.samples.size(); ++k) {
    const double f0 = profile.samples[k];
    const double f1 = profile.samples[k + 1];
    const std::int64_t t_base = static_cast<std::int64_t>(k) * period;
    for (int s = 0; s < substeps_per_sample; ++s) {
      const std::int64_t t_a = t_base + (s * period) / substeps_per_sample;
      const std::int64_t t_b = t_base + ((s + 1) * period) / substeps_per_sample;
      const double frac = static_cast<double>(s + 1) / substeps_per_sample;
      const double force = s + 1 == substeps_per_sample ? f1 : f0 + (f1 - f0) * frac;
      Image next = force == prev_force ? prev : render_intensity(scene, force);
      auto step = events_from_intensity_pair(prev, next, t_a, t_b, scene.contrast_threshold);

      if (scene.noise_rate_hz > 0) {
        const double mean = scene.noise_rate_hz * double(t_b - t_a) * 1e-6;
        std::poisson_distribution<long> count(mean);
        std::uniform_int_distribution<int> px(0, scene.width - 1);
        std::uniform_int_distribution<int> py(0, scene.height - 1);
        std::uniform_int_distribution<std::int64_t> pt(t_a + 1, t_b);
        std::bernoulli_distribution positive(0.5);
        const long n_noise = count(noise_rng);
        for (long i = 0; i < n_noise; ++i) {
          Event e{pt(noise_rng), px(noise_rng), py(noise_rng), 1};
          e.p = positive(noise_rng) ? 1 : -1;
          step.push_back(e);
        }
        std::stable_sort(step.begin(), step.end(),
                         [](const Event& l, const Event& r) { return l.t_us < r.t_us; });
      }
      out.insert(out.end(), step.begin(), step.end());
      prev = std::move(next);
      prev_force = force;
    }
  }
  return rec;
}

ForceProfile grasp_profile(double duration_s, double rate_hz, double f_max, std::uint64_t seed) {
  if (!(duration_s >= 0) || !(rate_hz > 0) || !(f_max > 0)) {
    throw std::invalid_argument("grasp_profile: duration >= 0, rate > 0 and f_max > 0 required");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> start(0.0, 0.1 * f_max);
  std::uniform_real_distribution<double> end(0.8 * f_max, f_max);
  std::uniform_real_distribution<double> wobble(-0.6, 0.6);
  const double f0 = start(rng);
  const double f1 = end(rng);
  const double a = wobble(rng);

  ForceProfile profile;
  profile.rate_hz = rate_hz;
  const auto n = static_cast<std::size_t>(std::llround(duration_s * rate_hz)) + 1;
  profile.samples.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double u = n > 1 ? double(k) / double(n - 1) : 0.0;
    // Monotone since |a| < 1.
    const double shape = u + a * std::sin(2 * std::numbers::pi * u) / (2 * std::numbers::pi);
    profile.samples[k] = std::clamp(f0 + (f1 - f0) * shape, 0.0, f_max);
  }
  return profile;
}

}  // namespace evtforce::synth
