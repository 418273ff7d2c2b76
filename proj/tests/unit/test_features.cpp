#include <cmath>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"

using namespace storm;

namespace {

const FeatureConfig kPolar{};
const PowerNormalization kNorm{-70.0, 8.0};

// Dyadic coordinates and shifts keep every subtraction exact.
std::vector<Measurement> dyadic_scene(Rng& rng, std::size_t n) {
  std::vector<Measurement> m(n);
  for (auto& v : m) {
    v.location = {static_cast<double>(rng.index(256)) * 0.25, static_cast<double>(rng.index(256)) * 0.25};
    v.power_db = -90.0 + static_cast<double>(rng.index(160)) * 0.25;
  }
  return m;
}

Location rotate_about(Location p, Location c, double angle) {
  const double dx = p.x - c.x, dy = p.y - c.y;
  return {c.x + std::cos(angle) * dx - std::sin(angle) * dy, c.y + std::sin(angle) * dx + std::cos(angle) * dy};
}

}  // namespace

TEST_SUITE("features") {
  TEST_CASE("rotation frame examples") {
    const Location x{10.0, 20.0};
    const std::vector<Measurement> east{{{11.0, 20.0}, -50.0}};
    const RotationFrame f1 = rotation_frame(east, x);
    CHECK_FALSE(f1.degenerate);
    CHECK(f1.rotation == std::array<double, 4>{1.0, 0.0, -0.0, 1.0});

    const std::vector<Measurement> north{{{10.0, 21.0}, -50.0}};
    const RotationFrame f2 = rotation_frame(north, x);
    const Location r = f2.apply({0.0, 1.0});
    CHECK(r.x == doctest::Approx(1.0));
    CHECK(std::abs(r.y) < 1e-15);
    // Clockwise by 90 degrees: (1, 0) goes to (0, -1).
    const Location e = f2.apply({1.0, 0.0});
    CHECK(std::abs(e.x) < 1e-15);
    CHECK(e.y == doctest::Approx(-1.0));
  }

  TEST_CASE("rotation frame direction matches direct summation") {
    const Location x{0.0, 0.0};
    const std::vector<Measurement> m{{{1.0, 0.0}, 0.0}, {{0.0, 1.0}, 10.0}};
    const RotationFrame f = rotation_frame(m, x);
    const double dx = std::exp(0.0) * 1.0, dy = std::exp(10.0) * 1.0;
    const double norm = std::hypot(dx, dy);
    CHECK(std::abs(f.direction.x * std::exp(10.0) - dx) < 1e-9);
    CHECK(std::abs(f.direction.y * std::exp(10.0) - dy) < 1e-9);
    const Location u = f.apply({dx / norm, dy / norm});
    CHECK(std::abs(u.x - 1.0) < 1e-12);
    CHECK(std::abs(u.y) < 1e-12);
  }

  TEST_CASE("rotation is orthonormal with unit determinant") {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
      const auto m = oracle::random_measurements(1 + rng.index(20), rng);
      const RotationFrame f = rotation_frame(m, {rng.uniform(0, 64), rng.uniform(0, 64)});
      const auto& r = f.rotation;
      CHECK(std::abs(r[0] * r[0] + r[2] * r[2] - 1.0) < 1e-12);
      CHECK(std::abs(r[1] * r[1] + r[3] * r[3] - 1.0) < 1e-12);
      CHECK(std::abs(r[0] * r[1] + r[2] * r[3]) < 1e-12);
      CHECK(std::abs(r[0] * r[3] - r[1] * r[2] - 1.0) < 1e-12);
      if (!f.degenerate) {
        const Location d = f.apply(f.direction);
        CHECK(d.x > 0.0);
        CHECK(std::abs(d.y) < 1e-9 * d.x);
      }
    }
  }

  TEST_CASE("symmetric ring gives a degenerate frame") {
    const Location x{5.0, 5.0};
    const std::vector<Measurement> ring{{{6.0, 5.0}, -60.0}, {{4.0, 5.0}, -60.0}, {{5.0, 6.0}, -60.0}, {{5.0, 4.0}, -60.0}};
    const RotationFrame f = rotation_frame(ring, x);
    CHECK(f.degenerate);
    CHECK(f.rotation == std::array<double, 4>{1.0, 0.0, 0.0, 1.0});
  }

  TEST_CASE("frame direction is continuous in the powers") {
    const Location x{0.0, 0.0};
    std::vector<Measurement> m{{{10.0, 0.0}, -60.0}, {{0.0, 10.0}, -60.0}};
    double prev_angle = std::atan2(rotation_frame(m, x).direction.y, rotation_frame(m, x).direction.x);
    for (int k = 1; k <= 200; ++k) {
      m[1].power_db = -60.0 + 0.01 * k;
      const Location d = rotation_frame(m, x).direction;
      const double angle = std::atan2(d.y, d.x);
      CHECK(std::abs(angle - prev_angle) < 0.01);
      prev_angle = angle;
    }
  }

  TEST_CASE("measurement at the target has zero geometry and unit angle") {
    const std::vector<Measurement> m{{{3.0, 4.0}, -60.0}, {{13.0, 4.0}, -65.0}};
    const FeatureMatrix fm = build_features(m, {3.0, 4.0}, kPolar, kNorm);
    CHECK(fm.values.rows() == 6);
    CHECK(fm.columns() == 2);
    CHECK(fm.values(0, 0) == kNorm.normalize(-60.0));
    CHECK(fm.values(1, 0) == 0.0);
    CHECK(fm.values(2, 0) == 0.0);
    CHECK(fm.values(3, 0) == 0.0);
    CHECK(fm.values(4, 0) == 1.0);
    CHECK(fm.values(5, 0) == 0.0);
    CHECK(fm.values(3, 1) == doctest::Approx(10.0 / 32.0));
    CHECK(fm.source == std::vector<std::size_t>{0, 1});
  }

  TEST_CASE("feature layout without polar extras") {
    FeatureConfig plain;
    plain.polar = false;
    Rng rng(2);
    const auto m = oracle::random_measurements(5, rng);
    const FeatureMatrix fm = build_features(m, {32, 32}, plain, kNorm);
    CHECK(fm.values.rows() == 3);
    const Tensor c = build_candidate_features(std::vector<Location>{{1, 1}, {32, 32}}, fm.frame, {32, 32}, plain);
    CHECK(c.rows() == 2);
    CHECK(c(0, 1) == 0.0);
    CHECK(c(1, 1) == 0.0);
    const Tensor cp = build_candidate_features(std::vector<Location>{{1, 1}}, fm.frame, {32, 32}, kPolar);
    CHECK(cp.rows() == kPolar.dim() - 1);
  }

  TEST_CASE("translation leaves features bit identical") {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
      auto m = dyadic_scene(rng, 1 + rng.index(30));
      const Location x{static_cast<double>(rng.index(256)) * 0.25, static_cast<double>(rng.index(256)) * 0.25};
      const FeatureMatrix a = build_features(m, x, kPolar, kNorm);
      const Location shift{static_cast<double>(rng.index(4096)) - 2048.0, static_cast<double>(rng.index(4096)) * 0.5};
      for (auto& v : m) v.location = {v.location.x + shift.x, v.location.y + shift.y};
      const FeatureMatrix b = build_features(m, {x.x + shift.x, x.y + shift.y}, kPolar, kNorm);
      CHECK(a.values == b.values);
    }
  }

  TEST_CASE("rotation about the target leaves features unchanged") {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
      auto m = oracle::random_measurements(2 + rng.index(30), rng);
      const Location x{rng.uniform(0, 64), rng.uniform(0, 64)};
      const FeatureMatrix a = build_features(m, x, kPolar, kNorm);
      if (a.frame.degenerate) continue;
      const double angle = t == 0 ? 37.0 * std::numbers::pi / 180.0 : rng.uniform(0, 2 * std::numbers::pi);
      for (auto& v : m) v.location = rotate_about(v.location, x, angle);
      const FeatureMatrix b = build_features(m, x, kPolar, kNorm);
      for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(std::abs(a.values[i] - b.values[i]) < 1e-10);
    }
  }

  TEST_CASE("candidate features are invariant under rigid scene motion") {
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
      auto m = oracle::random_measurements(10, rng);
      std::vector<Location> cands;
      for (int q = 0; q < 6; ++q) cands.push_back({rng.uniform(0, 64), rng.uniform(0, 64)});
      Location x{rng.uniform(0, 64), rng.uniform(0, 64)};
      const Tensor a = build_candidate_features(cands, rotation_frame(m, x), x, kPolar);
      const double angle = rng.uniform(0, 6.28);
      const Location pivot{rng.uniform(-100, 100), rng.uniform(-100, 100)};
      const Location shift{rng.uniform(-500, 500), rng.uniform(-500, 500)};
      auto move = [&](Location p) {
        const Location r = rotate_about(p, pivot, angle);
        return Location{r.x + shift.x, r.y + shift.y};
      };
      for (auto& v : m) v.location = move(v.location);
      for (auto& c : cands) c = move(c);
      x = move(x);
      const Tensor b = build_candidate_features(cands, rotation_frame(m, x), x, kPolar);
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-10);
    }
  }

  TEST_CASE("max shift in the weights changes no geometric feature") {
    Rng rng(6);
    for (int t = 0; t < 50; ++t) {
      auto m = dyadic_scene(rng, 2 + rng.index(10));
      // Moderate powers so the unshifted exponentials stay finite.
      for (auto& v : m) v.power_db = -8.0 + static_cast<double>(rng.index(64)) * 0.25;
      const Location x{8.0, 8.0};
      const FeatureMatrix a = build_features(m, x, kPolar, kNorm);
      auto lifted = m;
      for (auto& v : lifted) v.power_db += 37.0;
      const FeatureMatrix b = build_features(lifted, x, kPolar, kNorm);
      for (std::size_t r = 1; r < a.values.rows(); ++r)
        for (std::size_t c = 0; c < a.values.cols(); ++c) CHECK(a.values(r, c) == b.values(r, c));

      long double dx = 0, dy = 0;
      for (const auto& v : m) {
        dx += std::exp(static_cast<long double>(v.power_db)) * (v.location.x - x.x);
        dy += std::exp(static_cast<long double>(v.power_db)) * (v.location.y - x.y);
      }
      const long double norm = std::hypot(dx, dy);
      if (norm < 1e-6L) continue;
      CHECK(std::abs(static_cast<double>(dx / norm) - a.frame.rotation[0]) < 1e-12);
      CHECK(std::abs(static_cast<double>(dy / norm) - a.frame.rotation[1]) < 1e-12);
    }
  }

  TEST_CASE("error paths") {
    CHECK_THROWS(rotation_frame({}, {0, 0}));
    CHECK_THROWS(build_features({}, {0, 0}, kPolar, kNorm));
    const std::vector<Measurement> bad{{{0.0, std::nan("")}, -60.0}};
    CHECK_THROWS(build_features(bad, {0, 0}, kPolar, kNorm));
    const std::vector<Measurement> bad_power{{{0.0, 0.0}, INFINITY}};
    CHECK_THROWS(build_features(bad_power, {0, 0}, kPolar, kNorm));
    CHECK_THROWS(build_candidate_features({}, RotationFrame{}, {0, 0}, kPolar));
    FeatureConfig zero;
    zero.length_scale = 0.0;
    CHECK_THROWS(zero.validate());
  }
}
