#include <cmath>
#include <map>

#include "doctest.h"
#include "evtforce/frame_builder.hpp"
#include "evtforce/synth_gripper.hpp"

using namespace evtforce;
using namespace evtforce::synth;

namespace {

Image flat(int w, int h, double v) { return Image{w, h, std::vector<double>(std::size_t(w) * h, v)}; }

ForceProfile ramp(std::size_t n, double lo, double hi) {
  ForceProfile p;
  for (std::size_t k = 0; k < n; ++k) p.samples.push_back(lo + (hi - lo) * double(k) / double(n - 1));
  return p;
}

}  // namespace

TEST_CASE("force_to_deflection is linear") {
  auto scene = default_scene();
  CHECK(force_to_deflection(0.0, scene) == 0.0);
  CHECK(force_to_deflection(scene.f_max, scene) == scene.delta_max);
  CHECK(force_to_deflection(scene.f_max / 2, scene) == doctest::Approx(scene.delta_max / 2));
  CHECK_THROWS_AS(force_to_deflection(-0.01, scene), std::out_of_range);
  CHECK_THROWS_AS(force_to_deflection(scene.f_max + 0.01, scene), std::out_of_range);
}

TEST_CASE("scene validation names the key") {
  auto scene = default_scene();
  CHECK_NOTHROW(scene.validate());
  scene.contrast_threshold = -1;
  try {
    scene.validate();
    FAIL("expected failure");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).starts_with("scene.C"));
  }
  scene = default_scene();
  scene.finger[0].x = -5;
  CHECK_THROWS_AS(scene.validate(), std::invalid_argument);
  scene = default_scene();
  scene.delta_max = -1;
  CHECK_THROWS_AS(scene.validate(), std::invalid_argument);
}

TEST_CASE("render_intensity: deterministic and constant without fingers") {
  auto scene = default_scene();
  CHECK(render_intensity(scene, 0.0) == render_intensity(scene, 0.0));

  scene.finger.clear();
  auto img = render_intensity(scene, 0.8);
  CHECK(img.width == 320);
  CHECK(img.height == 240);
  for (double v : img.data) CHECK(v == scene.background);
}

TEST_CASE("render_intensity: tip coverage moves by delta_max rows at f_max") {
  auto scene = default_scene();
  auto at0 = coverage(scene, 0.0);
  auto at_max = coverage(scene, scene.f_max);
  const int shift = static_cast<int>(scene.delta_max);
  for (int x = 252; x < 288; ++x) {
    for (int y = 60; y < 108; ++y) {
      const double a = at0[std::size_t(y) * scene.width + x];
      const double b = at_max[std::size_t(y + shift) * scene.width + x];
      CHECK(a == doctest::Approx(b).epsilon(1e-12));
      // lower finger mirrors the upper one
      const double la = at0[std::size_t(scene.height - 1 - y) * scene.width + x];
      const double lb = at_max[std::size_t(scene.height - 1 - y - shift) * scene.width + x];
      CHECK(la == doctest::Approx(lb).epsilon(1e-12));
    }
  }
  double covered = 0;
  for (double c : at0) covered += c;
  CHECK(covered > 1000.0);
}

TEST_CASE("events_from_intensity_pair: threshold rule") {
  const double C = 0.15;
  auto a = flat(4, 3, 0.5);
  CHECK(events_from_intensity_pair(a, a, 0, 100, C).empty());

  auto b = a;
  b.data[1 * 4 + 2] = 0.5 * std::exp(C);
  auto one = events_from_intensity_pair(a, b, 0, 100, C);
  REQUIRE(one.size() == 1);
  CHECK(one[0].x == 2);
  CHECK(one[0].y == 1);
  CHECK(one[0].p == 1);
  CHECK(one[0].t_us > 0);
  CHECK(one[0].t_us <= 100);

  b.data[1 * 4 + 2] = 0.5 * std::exp(2.5 * C);
  auto two = events_from_intensity_pair(a, b, 0, 100, C);
  REQUIRE(two.size() == 2);
  CHECK(two[0].p == 1);
  CHECK(two[1].p == 1);
  CHECK(two[0].t_us < two[1].t_us);

  auto c = a;
  c.data[0] = 0.5 * std::exp(-3.2 * C);
  auto neg = events_from_intensity_pair(a, c, 1000, 2000, C);
  REQUIRE(neg.size() == 3);
  for (const auto& e : neg) CHECK(e.p == -1);
  CHECK(neg.back().t_us == 2000);
}

TEST_CASE("events_from_intensity_pair: errors") {
  auto a = flat(2, 2, 1.0);
  auto z = flat(2, 2, 0.0);
  CHECK_THROWS_AS(events_from_intensity_pair(a, z, 0, 10, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(events_from_intensity_pair(a, flat(3, 2, 1.0), 0, 10, 0.1),
                  std::invalid_argument);
  CHECK_THROWS_AS(events_from_intensity_pair(a, a, 10, 10, 0.1), std::invalid_argument);
}

TEST_CASE("synthesize_recording: constant-zero profile is silent") {
  ForceProfile p;
  p.samples.assign(11, 0.0);
  auto rec = synthesize_recording(default_scene(), p, 2);
  CHECK(rec.stream.empty());
  CHECK(rec.duration_us == 1'000'000);
  CHECK(rec.profile.samples == p.samples);
}

TEST_CASE("synthesize_recording: ramp produces events only on moving edges") {
  auto scene = default_scene();
  auto p = ramp(11, 0.0, scene.f_max);
  auto rec = synthesize_recording(scene, p, 1);
  CHECK(rec.stream.size() > 0);
  CHECK(validate_stream(rec.stream).ok());

  auto c0 = coverage(scene, 0.0);
  auto c1 = coverage(scene, scene.f_max);
  std::map<std::size_t, int> polarity;
  for (const auto& e : rec.stream.events) {
    const std::size_t i = std::size_t(e.y) * scene.width + e.x;
    const double change = c1[i] - c0[i];
    REQUIRE(change != 0.0);
    CHECK(e.p == (change > 0 ? 1 : -1));
    auto [it, inserted] = polarity.emplace(i, e.p);
    if (!inserted) CHECK(it->second == e.p);
  }
}

TEST_CASE("synthesize_recording: deterministic, seeded noise") {
  auto scene = default_scene();
  auto p = ramp(6, 0.2, 1.2);
  CHECK(synthesize_recording(scene, p, 3).stream == synthesize_recording(scene, p, 3).stream);

  scene.noise_rate_hz = 5000;
  scene.noise_seed = 4;
  auto n1 = synthesize_recording(scene, p, 1);
  auto n2 = synthesize_recording(scene, p, 1);
  CHECK(n1.stream == n2.stream);
  CHECK(validate_stream(n1.stream).ok());
  scene.noise_seed = 5;
  CHECK_FALSE(synthesize_recording(scene, p, 1).stream == n1.stream);
}

TEST_CASE("synthesize_recording: doubling C never adds events") {
  auto scene = default_scene();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto p = grasp_profile(1.0, 10.0, scene.f_max, seed);
    scene.contrast_threshold = 0.15;
    const auto base = synthesize_recording(scene, p, 1).stream.size();
    scene.contrast_threshold = 0.30;
    CHECK(synthesize_recording(scene, p, 1).stream.size() <= base);
  }
}

TEST_CASE("synthesize_recording: n samples window into n - 1 frames") {
  auto scene = default_scene();
  for (std::size_t n : {2u, 11u, 41u}) {
    auto p = grasp_profile(double(n - 1) / 10.0, 10.0, scene.f_max, n);
    REQUIRE(p.samples.size() == n);
    auto rec = synthesize_recording(scene, p, 1);
    Recording r{"r", rec.stream, rec.duration_us, rec.profile};
    CHECK(build_dataset({r}, FrameSpec{}).size() == n - 1);
  }
}

TEST_CASE("synthesize_recording: rejects bad inputs") {
  auto p = ramp(3, 0.0, 1.0);
  CHECK_THROWS_AS(synthesize_recording(default_scene(), p, 0), std::invalid_argument);
  p.samples[1] = 5.0;
  CHECK_THROWS_AS(synthesize_recording(default_scene(), p, 1), std::out_of_range);
}

TEST_CASE("grasp_profile: monotone, in range, seeded") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto p = grasp_profile(4.0, 10.0, 1.6, seed);
    REQUIRE(p.samples.size() == 41);
    CHECK(p.rate_hz == 10.0);
    for (std::size_t k = 0; k < p.samples.size(); ++k) {
      CHECK(p.samples[k] >= 0.0);
      CHECK(p.samples[k] <= 1.6);
      if (k > 0) CHECK(p.samples[k] >= p.samples[k - 1]);
    }
    CHECK(p.samples == grasp_profile(4.0, 10.0, 1.6, seed).samples);
  }
  CHECK(grasp_profile(4.0, 10.0, 1.6, 1).samples != grasp_profile(4.0, 10.0, 1.6, 2).samples);
}
