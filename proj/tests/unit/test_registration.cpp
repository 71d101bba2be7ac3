#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "zmd/registration.hpp"
#include "zmd/simulator.hpp"

using namespace zmd;

namespace {

GlobalSearchParams quick_params(double max_shift_um = 850.0) {
  GlobalSearchParams p;
  p.scale_min = 0.96;
  p.scale_max = 1.04;
  p.rot_min_deg = -3.0;
  p.rot_max_deg = 3.0;
  p.max_shift_um = max_shift_um;
  return p;
}

GlobalTransform warp_about(double scale, double rot_deg, const PointUm& center,
                           const PointUm& shift) {
  const double th = rot_deg * 0.017453292519943295;
  const double c = std::cos(th), s = std::sin(th);
  GlobalTransform g;
  g.scale = scale;
  g.rotation_deg = rot_deg;
  g.dx_um = center.x_um - scale * (c * center.x_um - s * center.y_um) + shift.x_um;
  g.dy_um = center.y_um - scale * (s * center.x_um + c * center.y_um) + shift.y_um;
  return g;
}

}  // namespace

TEST_CASE("global transform composes with its inverse to identity", "[registration]") {
  GlobalTransform g{1.02, 1.4, 37.0, -12.0};
  auto inv = g.inverse();
  for (double x : {0.0, 150.0, 4999.0})
    for (double y : {0.0, 88.0, 7210.0}) {
      auto round = inv.apply(g.apply(PointUm{x, y}));
      CHECK(round.x_um == Catch::Approx(x).margin(1e-9));
      CHECK(round.y_um == Catch::Approx(y).margin(1e-9));
    }
}

TEST_CASE("identical thumbnails estimate the identity transform", "[registration]") {
  TextureField tex(11);
  auto ref = sample_thumbnail(TexturePatchSource::reference(tex), 8000, 8000, 16.0);
  auto g = estimate_global(ref, ref, 16.0, quick_params());
  CHECK(std::fabs(g.scale - 1.0) <= 0.011);
  CHECK(std::fabs(g.rotation_deg) <= 0.51);
  auto moved = g.apply(PointUm{4000.0, 4000.0});
  CHECK(distance_um(moved, PointUm{4000.0, 4000.0}) < 16.0);
}

TEST_CASE("known pixel shift is recovered within one thumbnail pixel", "[registration]") {
  TextureField tex(12);
  auto ref_src = TexturePatchSource::reference(tex);
  const GlobalTransform truth = warp_about(1.0, 0.0, PointUm{4000, 4000},
                                           PointUm{12 * 16.0, -7 * 16.0});
  auto tgt_src = TexturePatchSource::target(tex, truth);
  auto ref = sample_thumbnail(ref_src, 8000, 8000, 16.0);
  auto tgt = sample_thumbnail(tgt_src, 8000, 8000, 16.0);

  auto g = estimate_global(ref, tgt, 16.0, quick_params());
  // compare mapped positions of the slide center region
  for (auto p : {PointUm{3000, 3000}, PointUm{4000, 4000}, PointUm{5200, 4600}}) {
    auto want = truth.apply(p);
    auto got = g.apply(p);
    CHECK(distance_um(want, got) <= 16.0);  // 1 thumbnail px
  }
}

TEST_CASE("two-degree rotation is recovered within half a degree", "[registration]") {
  TextureField tex(13);
  const GlobalTransform truth = warp_about(1.0, 2.0, PointUm{4000, 4000}, PointUm{0, 0});
  auto ref = sample_thumbnail(TexturePatchSource::reference(tex), 8000, 8000, 16.0);
  auto tgt = sample_thumbnail(TexturePatchSource::target(tex, truth), 8000, 8000, 16.0);
  auto g = estimate_global(ref, tgt, 16.0, quick_params());
  CHECK(std::fabs(g.rotation_deg - 2.0) <= 0.5);
}

TEST_CASE("global estimate is invariant to brightness and contrast", "[registration]") {
  TextureField tex(14);
  const GlobalTransform truth = warp_about(1.01, -1.0, PointUm{4000, 4000}, PointUm{150, -90});
  auto ref = sample_thumbnail(TexturePatchSource::reference(tex), 8000, 8000, 16.0);
  auto tgt = sample_thumbnail(TexturePatchSource::target(tex, truth), 8000, 8000, 16.0);

  auto g0 = estimate_global(ref, tgt, 16.0, quick_params());

  auto bright = tgt;
  for (auto& v : bright.px) v = 0.4f * v + 0.3f;
  auto g1 = estimate_global(ref, bright, 16.0, quick_params());
  CHECK(g1.scale == Catch::Approx(g0.scale).margin(1e-6));
  CHECK(g1.rotation_deg == Catch::Approx(g0.rotation_deg).margin(1e-6));
  CHECK(g1.dx_um == Catch::Approx(g0.dx_um).margin(0.5));
  CHECK(g1.dy_um == Catch::Approx(g0.dy_um).margin(0.5));

  auto dim_ref = ref;
  for (auto& v : dim_ref.px) v = 2.0f * v - 0.1f;
  auto g2 = estimate_global(dim_ref, tgt, 16.0, quick_params());
  CHECK(g2.scale == Catch::Approx(g0.scale).margin(1e-6));
  CHECK(g2.rotation_deg == Catch::Approx(g0.rotation_deg).margin(1e-6));
}

TEST_CASE("global registration fails loudly on unrelated images", "[registration]") {
  TextureField a(15), b(9944);
  auto ref = sample_thumbnail(TexturePatchSource::reference(a), 4000, 4000, 16.0);
  auto tgt = sample_thumbnail(TexturePatchSource::reference(b), 4000, 4000, 16.0);
  auto params = quick_params(400.0);
  params.min_peak = 0.6;  // unrelated textures correlate weakly
  CHECK_THROWS_AS(estimate_global(ref, tgt, 16.0, params), Error);
  CHECK_THROWS_AS(estimate_global(ref, tgt, 8.0, quick_params()), Error);  // mpp precondition
}

TEST_CASE("identical patches refine to zero shift with peak 1", "[registration]") {
  TextureField tex(16);
  auto src = TexturePatchSource::reference(tex);
  const PointUm p{1000.0, 1200.0};
  auto patch = src.sample(p, 64.0, 0.5);
  auto window = src.sample(p, 96.0, 0.5);
  auto t = refine_local(p, p, patch, window, 0.5);
  CHECK(t.status == TransferStatus::refined);
  CHECK(t.ncc_peak > 0.999);
  CHECK(std::fabs(t.shift_x_um) < 0.25);
  CHECK(std::fabs(t.shift_y_um) < 0.25);
}

TEST_CASE("local jitter of 3 um is recovered within 0.5 um", "[registration]") {
  TextureField tex(17);
  auto src = TexturePatchSource::reference(tex);
  for (auto jitter : {PointUm{3.0, 0.0}, PointUm{0.0, -3.0}, PointUm{2.1, 2.1}}) {
    const PointUm p{2000.0, 2400.0};
    const PointUm miss{p.x_um - jitter.x_um, p.y_um - jitter.y_um};
    auto patch = src.sample(p, 64.0, 0.5);
    auto window = src.sample(miss, 96.0, 0.5);  // window centered off by the jitter
    auto t = refine_local(p, miss, patch, window, 0.5);
    REQUIRE(t.status == TransferStatus::refined);
    CHECK(std::fabs(t.shift_x_um - jitter.x_um) <= 0.5);
    CHECK(std::fabs(t.shift_y_um - jitter.y_um) <= 0.5);
    CHECK(distance_um(*t.mapped, p) <= 0.71);
  }
}

TEST_CASE("blank patches yield global_only with peak 0", "[registration]") {
  FloatImage blank_patch(32, 32, 0.5f);
  FloatImage window(48, 48, 0.5f);
  auto t = refine_local(PointUm{10, 10}, PointUm{11, 11}, blank_patch, window, 0.5);
  CHECK(t.status == TransferStatus::global_only);
  CHECK(t.ncc_peak == 0.0);
  REQUIRE(t.mapped.has_value());
  CHECK(t.mapped->x_um == 11.0);  // falls back to the global guess
}

TEST_CASE("transfer without refinement copies through the transform", "[registration]") {
  GlobalTransform identity;
  std::vector<PointUm> pts{{10, 20}, {30, 40}, {50, 60}};
  auto out = transfer_annotations(pts, identity);
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out[i].status == TransferStatus::global_only);
    CHECK(out[i].mapped->x_um == pts[i].x_um);
    CHECK(out[i].mapped->y_um == pts[i].y_um);
  }
}

namespace {
class ThrowingSource final : public PatchSource {
 public:
  FloatImage sample(const PointUm&, double, double) const override {
    throw Error(ErrorCode::store, "offline");
  }
};
}  // namespace

TEST_CASE("failing samplers mark annotations failed, never abort the batch", "[registration]") {
  ThrowingSource bad;
  std::vector<PointUm> pts{{10, 20}, {30, 40}};
  auto out = transfer_annotations(pts, GlobalTransform{}, &bad, &bad);
  REQUIRE(out.size() == 2);
  for (const auto& t : out) {
    CHECK(t.status == TransferStatus::failed);
    CHECK_FALSE(t.mapped.has_value());
  }
}

TEST_CASE("end-to-end transfer on a warped pair lands within 2 um", "[registration]") {
  auto fx = make_warped_pair(2101, 60);
  auto params = quick_params();
  auto g = estimate_global(fx.ref_thumb, fx.tgt_thumb, fx.thumb_mpp, params);

  TransferOptions opts;
  opts.mpp = 0.5;
  opts.workers = 2;
  auto out = transfer_annotations(fx.annotations, g, fx.ref_source.get(), fx.tgt_source.get(), opts);

  int within = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    REQUIRE(out[i].mapped.has_value());
    const PointUm truth = fx.warp.apply(fx.annotations[i]);
    if (distance_um(*out[i].mapped, truth) <= 2.0) ++within;
  }
  CHECK(within >= static_cast<int>(std::ceil(0.99 * out.size())));
}
