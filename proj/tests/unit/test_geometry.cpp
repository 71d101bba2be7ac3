#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "zmd/geometry.hpp"
#include "zmd/rng.hpp"

using namespace zmd;

TEST_CASE("um_to_px matches the merge rule unit pairing", "[geometry]") {
  // 2.5 um at 0.25 mpp is the 10 px duplicate-merge distance
  auto p = um_to_px(PointUm{2.5, 0.0}, WorkingResolution{0.25});
  CHECK(p.x_px == Catch::Approx(10.0).margin(1e-12));
  CHECK(p.y_px == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("um_to_px fixed points", "[geometry]") {
  auto origin = um_to_px(PointUm{0.0, 0.0}, WorkingResolution{0.086});
  CHECK(origin.x_px == 0.0);
  CHECK(origin.y_px == 0.0);

  auto p = um_to_px(PointUm{1.21, 0.0}, WorkingResolution{0.121});
  CHECK(p.x_px == Catch::Approx(10.0).margin(1e-9));
}

TEST_CASE("um_to_px rejects non-finite input", "[geometry]") {
  CHECK_THROWS_AS(um_to_px(PointUm{std::nan(""), 0.0}, WorkingResolution{0.25}), Error);
  CHECK_THROWS_AS(um_to_px(PointUm{0.0, INFINITY}, WorkingResolution{0.25}), Error);
  CHECK_THROWS_AS(um_to_px(PointUm{1.0, 1.0}, WorkingResolution{0.0}), Error);
}

TEST_CASE("px/um round trip is identity", "[geometry]") {
  Rng rng(101);
  for (int i = 0; i < 2000; ++i) {
    WorkingResolution res{rng.uniform(0.05, 2.0)};
    PointUm p{rng.uniform(0.0, 50000.0), rng.uniform(0.0, 50000.0)};
    auto px = um_to_px(p, res);
    auto back = px_to_um(px, res);
    CHECK(std::fabs(back.x_um - p.x_um) < 1e-9 * std::max(1.0, p.x_um));
    CHECK(std::fabs(back.y_um - p.y_um) < 1e-9 * std::max(1.0, p.y_um));
    auto px2 = um_to_px(back, res);
    CHECK(std::fabs(px2.x_px - px.x_px) < 1e-6);
    CHECK(std::fabs(px2.y_px - px.y_px) < 1e-6);
  }
}

TEST_CASE("rescale_factor from table profiles", "[geometry]") {
  ScanProfile p480dx{"P480DX", 0.121, {0.0}, std::nullopt, "41x WI"};
  ScanProfile gt450{"GT450", 0.263, {0.0}, std::nullopt, "40x Air"};
  WorkingResolution work{0.25};
  CHECK(rescale_factor(p480dx, work) == Catch::Approx(0.484).margin(1e-12));
  CHECK(rescale_factor(gt450, work) == Catch::Approx(1.052).margin(1e-12));

  ScanProfile same{"X", 0.25, {0.0}, std::nullopt, ""};
  CHECK(rescale_factor(same, work) == 1.0);
}

TEST_CASE("profile validation accepts table rows", "[geometry]") {
  ScanProfile z5{"P480DX", 0.121, {-1.2, -0.6, 0.0, 0.6, 1.2}, 0.6, "41x WI"};
  CHECK_NOTHROW(validate_profile(z5));

  ScanProfile gt450z{"GT450", 0.263, {-1.5, -0.75, 0.0, 0.75, 1.5}, 0.75, "40x Air"};
  CHECK_NOTHROW(validate_profile(gt450z));

  ScanProfile single{"GT450", 0.263, {0.0}, std::nullopt, "40x Air"};
  CHECK_NOTHROW(validate_profile(single));
}

TEST_CASE("profile validation rejects bad inputs", "[geometry]") {
  CHECK_THROWS_AS(validate_profile(ScanProfile{"x", -1.0, {0.0}, std::nullopt, ""}), Error);
  CHECK_THROWS_AS(validate_profile(ScanProfile{"x", 0.25, {}, std::nullopt, ""}), Error);
  // multi-plane without interplane distance
  CHECK_THROWS_AS(validate_profile(ScanProfile{"x", 0.25, {0.0, 0.6}, std::nullopt, ""}), Error);
  // spacing mismatch beyond 1e-9
  CHECK_THROWS_AS(validate_profile(ScanProfile{"x", 0.25, {0.0, 0.6, 1.3}, 0.6, ""}), Error);
  // single layer must not claim an interplane distance
  CHECK_THROWS_AS(validate_profile(ScanProfile{"x", 0.25, {0.0}, 0.6, ""}), Error);
}

TEST_CASE("profile validation rejects shuffled plane offsets", "[geometry]") {
  Rng rng(77);
  const std::vector<double> sorted{-1.2, -0.6, 0.0, 0.6, 1.2};
  int rejected = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto offsets = sorted;
    for (std::size_t i = offsets.size(); i > 1; --i)
      std::swap(offsets[i - 1], offsets[rng.uniform_index(i)]);
    ScanProfile p{"x", 0.25, offsets, 0.6, ""};
    const bool is_sorted = std::is_sorted(offsets.begin(), offsets.end());
    if (!is_sorted) {
      CHECK_THROWS_AS(validate_profile(p), Error);
      ++rejected;
    } else {
      CHECK_NOTHROW(validate_profile(p));
    }
  }
  CHECK(rejected > 100);  // shuffles are mostly non-monotone
}
