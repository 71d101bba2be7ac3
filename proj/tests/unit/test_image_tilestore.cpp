#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "zmd/rng.hpp"
#include "zmd/tilestore.hpp"

using namespace zmd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("zmd_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

StoreManifest small_manifest(int planes, int w = 100, int h = 80, TileFormat fmt = TileFormat::raw16) {
  StoreManifest m;
  m.slide_id = "s1";
  m.mpp = 0.25;
  m.width_px = w;
  m.height_px = h;
  m.tile_size_px = 64;
  m.tile_format = fmt;
  m.profile.scanner_id = "SIM";
  m.profile.native_mpp = 0.25;
  m.profile.objective = "sim";
  if (planes == 1) {
    m.profile.plane_offsets_um = {0.0};
  } else if (planes == 2) {
    m.profile.interplane_um = 0.6;
    m.profile.plane_offsets_um = {0.0, 0.6};
  } else {
    REQUIRE(planes == 5);
    m.profile.interplane_um = 0.6;
    m.profile.plane_offsets_um = {-1.2, -0.6, 0.0, 0.6, 1.2};
  }
  for (double z : m.profile.plane_offsets_um)
    m.planes.push_back({z, "z" + std::to_string(m.planes.size())});
  return m;
}

TileImage constant_tile(int w, int h, uint16_t v, int depth) {
  TileImage t;
  t.width = w;
  t.height = h;
  t.bit_depth = depth;
  t.samples.assign(static_cast<std::size_t>(w) * h, v);
  return t;
}

TileImage random_raster(Rng& rng, int w, int h, int depth) {
  TileImage t;
  t.width = w;
  t.height = h;
  t.bit_depth = depth;
  t.samples.resize(static_cast<std::size_t>(w) * h);
  const uint64_t maxv = depth == 8 ? 256 : 65536;
  for (auto& s : t.samples) s = static_cast<uint16_t>(rng.uniform_index(maxv));
  return t;
}

void write_full_store(const fs::path& dir, const StoreManifest& m, Rng& rng) {
  StoreWriter writer(dir, m);
  const int depth = m.tile_format == TileFormat::png8 ? 8 : 16;
  for (std::size_t p = 0; p < m.planes.size(); ++p)
    writer.write_plane(p, random_raster(rng, m.width_px, m.height_px, depth));
}

}  // namespace

TEST_CASE("png8 write-read round trip is bit identical", "[tilestore]") {
  auto dir = temp_dir("png_roundtrip");
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto img = random_raster(rng, 37 + trial, 23 + 2 * trial, 8);
    const auto path = (dir / ("t" + std::to_string(trial) + ".png")).string();
    write_png8(path, img);
    auto back = read_png(path);
    CHECK(back.same_pixels(img));
  }
}

TEST_CASE("raw16 write-read round trip is bit identical", "[tilestore]") {
  auto dir = temp_dir("raw_roundtrip");
  Rng rng(8);
  auto img = random_raster(rng, 51, 33, 16);
  const auto path = (dir / "t.raw").string();
  write_raw16(path, img);
  CHECK(read_raw16(path).same_pixels(img));
}

TEST_CASE("minimal one-plane store opens", "[tilestore]") {
  auto dir = temp_dir("open_min");
  Rng rng(9);
  auto m = small_manifest(1);
  write_full_store(dir, m, rng);
  auto handle = open_store(dir);
  CHECK(handle.manifest().planes.size() == 1);
  CHECK(handle.manifest().slide_id == "s1");
}

TEST_CASE("plane count mismatch vs profile is rejected", "[tilestore]") {
  auto dir = temp_dir("open_mismatch");
  Rng rng(10);
  auto m = small_manifest(5);
  write_full_store(dir, m, rng);
  // corrupt: drop one plane dir from the manifest only
  auto j = manifest_to_json(m);
  j["planes"].erase(4);
  std::ofstream(dir / "manifest.json") << j.dump(2);
  CHECK_THROWS_WITH(open_store(dir), Catch::Matchers::ContainsSubstring("5 planes"));
}

TEST_CASE("five-plane store matches the z-stack profile row", "[tilestore]") {
  auto dir = temp_dir("open_zstack");
  Rng rng(11);
  auto m = small_manifest(5);
  m.profile.scanner_id = "P480DX";
  m.profile.native_mpp = 0.121;
  write_full_store(dir, m, rng);
  auto handle = open_store(dir);
  const auto& prof = handle.manifest().profile;
  CHECK(prof.plane_offsets_um == std::vector<double>{-1.2, -0.6, 0.0, 0.6, 1.2});
  CHECK(prof.interplane_um == Catch::Approx(0.6));
}

TEST_CASE("missing tiles are enumerated", "[tilestore]") {
  auto dir = temp_dir("open_missing");
  Rng rng(12);
  auto m = small_manifest(1);
  write_full_store(dir, m, rng);
  fs::remove(dir / "z0" / "t_0_0.raw");
  fs::remove(dir / "z0" / "t_1_1.raw");
  try {
    open_store(dir);
    FAIL("expected store error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2 missing tile(s)") != std::string::npos);
    CHECK(msg.find("t_0_0.raw") != std::string::npos);
    CHECK(msg.find("t_1_1.raw") != std::string::npos);
  }
  CHECK_NOTHROW(open_store(dir, /*verify_tiles=*/false));
}

TEST_CASE("tile plan covers a 1000px slide with a 3x3 grid", "[tilestore]") {
  auto m = small_manifest(1, 1000, 1000);
  auto plan = plan_tiles(m, 512, 64);
  CHECK(plan.size() == 9);
  // interior tiles are exactly tile_size
  CHECK(plan[4].width_px == 512);
  CHECK(plan[4].height_px == 512);
}

TEST_CASE("slide smaller than a tile plans one tile per plane", "[tilestore]") {
  auto m = small_manifest(1, 100, 80);
  auto plan = plan_tiles(m, 512, 64);
  REQUIRE(plan.size() == 1);
  CHECK(plan[0].x0_px == 0);
  CHECK(plan[0].width_px == 100);
  CHECK(plan[0].height_px == 80);
}

TEST_CASE("five-plane plan is five single plans, plane-major", "[tilestore]") {
  auto m1 = small_manifest(1, 1000, 700);
  auto m5 = small_manifest(5, 1000, 700);
  auto p1 = plan_tiles(m1, 256, 32);
  auto p5 = plan_tiles(m5, 256, 32);
  REQUIRE(p5.size() == 5 * p1.size());
  for (std::size_t i = 0; i < p5.size(); ++i) {
    const auto& expect = p1[i % p1.size()];
    CHECK(p5[i].plane_offset_um == m5.planes[i / p1.size()].z_offset_um);
    CHECK(p5[i].x0_px == expect.x0_px);
    CHECK(p5[i].y0_px == expect.y0_px);
  }
}

TEST_CASE("plan preconditions and degenerate dims", "[tilestore]") {
  auto m = small_manifest(1);
  CHECK_THROWS_AS(plan_tiles(m, 128, 64), Error);
  CHECK_THROWS_AS(plan_tiles(m, 128, -1), Error);
  auto degenerate = m;
  degenerate.width_px = 0;
  CHECK(plan_tiles(degenerate, 128, 16).empty());
}

TEST_CASE("tile cores partition the slide exactly", "[tilestore]") {
  Rng rng(13);
  for (int trial = 0; trial < 25; ++trial) {
    const int w = 1 + static_cast<int>(rng.uniform_index(900));
    const int h = 1 + static_cast<int>(rng.uniform_index(900));
    const int halo = static_cast<int>(rng.uniform_index(40));
    const int tile = 2 * halo + 1 + static_cast<int>(rng.uniform_index(300));
    auto m = small_manifest(1, w, h);
    auto plan = plan_tiles(m, tile, halo);
    const int stride = tile - 2 * halo;

    std::vector<int> cover(static_cast<std::size_t>(w) * h, 0);
    for (const auto& t : plan) {
      const int cx0 = t.core_x0_px(stride);
      const int cy0 = t.core_y0_px(stride);
      const int cx1 = std::min(cx0 + stride, w);
      const int cy1 = std::min(cy0 + stride, h);
      // core must sit inside the tile rectangle
      CHECK(t.x0_px <= cx0);
      CHECK(t.y0_px <= cy0);
      CHECK(cx1 <= t.x0_px + t.width_px);
      CHECK(cy1 <= t.y0_px + t.height_px);
      for (int y = cy0; y < cy1; ++y)
        for (int x = cx0; x < cx1; ++x) ++cover[static_cast<std::size_t>(y) * w + x];
    }
    for (int c : cover) REQUIRE(c == 1);

    // determinism
    auto plan2 = plan_tiles(m, tile, halo);
    CHECK(plan2 == plan);
  }
}

TEST_CASE("read_tile assembles regions with exact um transform", "[tilestore]") {
  auto dir = temp_dir("read_region");
  Rng rng(14);
  auto m = small_manifest(2, 150, 130);
  StoreWriter writer(dir, m);
  std::vector<TileImage> rasters;
  for (std::size_t p = 0; p < m.planes.size(); ++p) {
    rasters.push_back(random_raster(rng, m.width_px, m.height_px, 16));
    writer.write_plane(p, rasters.back());
  }
  auto handle = open_store(dir);

  auto plan = plan_tiles(m, 64, 8);
  for (const auto& spec : plan) {
    auto img = handle.read_tile(spec);
    REQUIRE(img.width == spec.width_px);
    REQUIRE(img.height == spec.height_px);
    const auto& raster = rasters[*m.plane_index(spec.plane_offset_um)];
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        REQUIRE(img.at(x, y) == raster.at(spec.x0_px + x, spec.y0_px + y));
    // transform maps tile pixel (0,0) corner to x0*mpp
    CHECK(img.transform.origin_x_um == Catch::Approx(spec.x0_px * m.mpp));
    CHECK(img.transform.origin_y_um == Catch::Approx(spec.y0_px * m.mpp));
  }
}

TEST_CASE("constant tile round trips bit exact through the store", "[tilestore]") {
  auto dir = temp_dir("const_tile");
  auto m = small_manifest(1, 64, 64, TileFormat::png8);
  StoreWriter writer(dir, m);
  writer.write_plane(0, constant_tile(64, 64, 200, 8));
  auto handle = open_store(dir);
  auto img = handle.read_region(0.0, 0, 0, 64, 64);
  CHECK(img.same_pixels(constant_tile(64, 64, 200, 8)));
}

TEST_CASE("out-of-bounds reads fail", "[tilestore]") {
  auto dir = temp_dir("oob");
  Rng rng(15);
  auto m = small_manifest(1);
  write_full_store(dir, m, rng);
  auto handle = open_store(dir);
  CHECK_THROWS_AS(handle.read_region(0.0, 90, 0, 20, 20), Error);
  CHECK_THROWS_AS(handle.read_region(0.6, 0, 0, 10, 10), Error);  // no such plane
}

TEST_CASE("bilinear resample hits expected sizes and preserves constants", "[tilestore]") {
  auto img = constant_tile(100, 60, 37, 8);
  auto down = resample_bilinear(img, 0.121, 0.25);
  CHECK(down.width == 48);  // round(100*0.121/0.25)
  CHECK(down.height == 29);
  for (auto v : down.samples) CHECK(v == 37);
}
