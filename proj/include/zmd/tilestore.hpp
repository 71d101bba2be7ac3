#pragma once

// Plane-stack store: a portable on-disk layout for multi-plane slide rasters
// at working resolution, plus the tiling planner that drives detector runs.
//
// Disk layout:
//   <root>/manifest.json
//   <root>/<plane dir>/t_<col>_<row>.<png|raw>     non-overlapping tile grid
//
// The execution plan produced by plan_tiles() uses its own grid: tiles of
// tile_size_px that overlap by halo_px on each side (stride tile_size - 2*halo),
// so a structure near a cut always appears whole in some tile. read_tile()
// assembles any requested rectangle from the storage grid.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "zmd/geometry.hpp"
#include "zmd/image.hpp"

namespace zmd {

enum class TileFormat { png8, raw16 };

inline const char* tile_format_name(TileFormat f) { return f == TileFormat::png8 ? "png8" : "raw16"; }
inline const char* tile_format_ext(TileFormat f) { return f == TileFormat::png8 ? "png" : "raw"; }

inline TileFormat tile_format_from_name(const std::string& s) {
  if (s == "png8") return TileFormat::png8;
  if (s == "raw16") return TileFormat::raw16;
  throw Error(ErrorCode::store, "unknown tile_format: " + s);
}

struct PlaneEntry {
  double z_offset_um = 0.0;
  std::string dir;
};

struct StoreManifest {
  std::string slide_id;
  ScanProfile profile;
  double mpp = 0.25;  // store resolution
  int width_px = 0;
  int height_px = 0;
  int tile_size_px = 512;
  TileFormat tile_format = TileFormat::png8;
  std::vector<PlaneEntry> planes;

  double width_um() const { return width_px * mpp; }
  double height_um() const { return height_px * mpp; }

  int storage_cols() const { return (width_px + tile_size_px - 1) / tile_size_px; }
  int storage_rows() const { return (height_px + tile_size_px - 1) / tile_size_px; }

  std::optional<std::size_t> plane_index(double z_offset_um) const {
    for (std::size_t i = 0; i < planes.size(); ++i)
      if (std::fabs(planes[i].z_offset_um - z_offset_um) < 1e-6) return i;
    return std::nullopt;
  }
};

inline void validate_manifest(const StoreManifest& m) {
  if (m.slide_id.empty()) throw Error(ErrorCode::store, "manifest: empty slide_id");
  if (m.width_px <= 0 || m.height_px <= 0)
    throw Error(ErrorCode::store, "manifest: width_px/height_px must be positive");
  if (m.tile_size_px <= 0) throw Error(ErrorCode::store, "manifest: tile_size_px must be positive");
  if (!(m.mpp > 0.0)) throw Error(ErrorCode::store, "manifest: mpp must be positive");
  if (m.planes.empty()) throw Error(ErrorCode::store, "manifest: no planes");
  validate_profile(m.profile);
  if (m.profile.plane_count() != m.planes.size())
    throw Error(ErrorCode::store,
                "manifest: profile declares " + std::to_string(m.profile.plane_count()) +
                    " planes but " + std::to_string(m.planes.size()) + " plane dirs listed");
  for (std::size_t i = 0; i < m.planes.size(); ++i) {
    if (std::fabs(m.planes[i].z_offset_um - m.profile.plane_offsets_um[i]) > 1e-9)
      throw Error(ErrorCode::store, "manifest: plane offsets disagree with profile");
    if (m.planes[i].dir.empty()) throw Error(ErrorCode::store, "manifest: empty plane dir");
  }
}

inline nlohmann::json manifest_to_json(const StoreManifest& m) {
  nlohmann::json planes = nlohmann::json::array();
  for (const auto& p : m.planes) planes.push_back({{"z_offset_um", p.z_offset_um}, {"dir", p.dir}});
  nlohmann::json profile = {{"scanner_id", m.profile.scanner_id},
                            {"native_mpp", m.profile.native_mpp},
                            {"plane_offsets_um", m.profile.plane_offsets_um},
                            {"objective", m.profile.objective}};
  if (m.profile.interplane_um) profile["interplane_um"] = *m.profile.interplane_um;
  return nlohmann::json{{"slide_id", m.slide_id},
                        {"mpp", m.mpp},
                        {"width_px", m.width_px},
                        {"height_px", m.height_px},
                        {"tile_size_px", m.tile_size_px},
                        {"tile_format", tile_format_name(m.tile_format)},
                        {"planes", planes},
                        {"profile", profile}};
}

inline StoreManifest manifest_from_json(const nlohmann::json& j) {
  StoreManifest m;
  try {
    m.slide_id = j.at("slide_id").get<std::string>();
    m.mpp = j.at("mpp").get<double>();
    m.width_px = j.at("width_px").get<int>();
    m.height_px = j.at("height_px").get<int>();
    m.tile_size_px = j.at("tile_size_px").get<int>();
    m.tile_format = tile_format_from_name(j.at("tile_format").get<std::string>());
    for (const auto& p : j.at("planes"))
      m.planes.push_back({p.at("z_offset_um").get<double>(), p.at("dir").get<std::string>()});
    const auto& prof = j.at("profile");
    m.profile.scanner_id = prof.at("scanner_id").get<std::string>();
    m.profile.native_mpp = prof.at("native_mpp").get<double>();
    m.profile.plane_offsets_um = prof.at("plane_offsets_um").get<std::vector<double>>();
    m.profile.objective = prof.value("objective", std::string{});
    if (prof.contains("interplane_um")) m.profile.interplane_um = prof.at("interplane_um").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::store, std::string("malformed manifest: ") + e.what());
  }
  return m;
}

// One entry of the execution plan. col/row index the *plan* grid, whose
// stride is tile_size - 2*halo; x0/y0/width/height describe the full pixel
// rectangle including halo, clipped at slide edges.
struct TileSpec {
  double plane_offset_um = 0.0;
  int col = 0;
  int row = 0;
  int x0_px = 0;
  int y0_px = 0;
  int width_px = 0;
  int height_px = 0;
  int halo_px = 0;

  // Non-halo (core) region; cores of all tiles partition the slide exactly.
  int core_x0_px(int stride) const { return col * stride; }
  int core_y0_px(int stride) const { return row * stride; }

  bool operator==(const TileSpec&) const = default;
};

inline std::vector<TileSpec> plan_tiles(const StoreManifest& m, int tile_size_px, int halo_px) {
  if (halo_px < 0) throw Error(ErrorCode::store, "halo_px must be >= 0");
  if (tile_size_px <= 2 * halo_px)
    throw Error(ErrorCode::store, "tile_size_px must exceed 2*halo_px");
  std::vector<TileSpec> plan;
  if (m.width_px <= 0 || m.height_px <= 0) {
    std::fprintf(stderr, "zmd: warning: degenerate slide dimensions, empty tile plan\n");
    return plan;
  }
  const int stride = tile_size_px - 2 * halo_px;
  const int cols = (m.width_px + stride - 1) / stride;
  const int rows = (m.height_px + stride - 1) / stride;
  plan.reserve(static_cast<std::size_t>(cols) * rows * m.planes.size());
  for (const auto& plane : m.planes) {
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const int core_x0 = c * stride;
        const int core_y0 = r * stride;
        const int core_x1 = std::min(core_x0 + stride, m.width_px);
        const int core_y1 = std::min(core_y0 + stride, m.height_px);
        TileSpec t;
        t.plane_offset_um = plane.z_offset_um;
        t.col = c;
        t.row = r;
        t.x0_px = std::max(0, core_x0 - halo_px);
        t.y0_px = std::max(0, core_y0 - halo_px);
        t.width_px = std::min(m.width_px, core_x1 + halo_px) - t.x0_px;
        t.height_px = std::min(m.height_px, core_y1 + halo_px) - t.y0_px;
        t.halo_px = halo_px;
        plan.push_back(t);
      }
    }
  }
  return plan;
}

class StoreHandle {
 public:
  StoreHandle(std::filesystem::path root, StoreManifest manifest)
      : root_(std::move(root)), manifest_(std::move(manifest)) {}

  const StoreManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }

  std::string tile_path(std::size_t plane_idx, int col, int row) const {
    const auto& p = manifest_.planes.at(plane_idx);
    return (root_ / p.dir /
            ("t_" + std::to_string(col) + "_" + std::to_string(row) + "." +
             tile_format_ext(manifest_.tile_format)))
        .string();
  }

  // Arbitrary in-bounds rectangle on one plane, assembled from storage tiles.
  TileImage read_region(double plane_offset_um, int x0, int y0, int w, int h) const {
    auto plane = manifest_.plane_index(plane_offset_um);
    if (!plane)
      throw Error(ErrorCode::store,
                  "no plane at offset " + std::to_string(plane_offset_um) + " um");
    if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > manifest_.width_px ||
        y0 + h > manifest_.height_px)
      throw Error(ErrorCode::store, "read_region out of bounds");

    TileImage out;
    out.width = w;
    out.height = h;
    out.bit_depth = manifest_.tile_format == TileFormat::png8 ? 8 : 16;
    out.samples.assign(static_cast<std::size_t>(w) * h, 0);
    out.transform = TileTransform{manifest_.mpp, x0 * manifest_.mpp, y0 * manifest_.mpp};

    const int ts = manifest_.tile_size_px;
    for (int sr = y0 / ts; sr <= (y0 + h - 1) / ts; ++sr) {
      for (int sc = x0 / ts; sc <= (x0 + w - 1) / ts; ++sc) {
        const TileImage tile = read_storage_tile(*plane, sc, sr);
        const int tx0 = sc * ts, ty0 = sr * ts;
        const int ix0 = std::max(x0, tx0), iy0 = std::max(y0, ty0);
        const int ix1 = std::min(x0 + w, tx0 + tile.width);
        const int iy1 = std::min(y0 + h, ty0 + tile.height);
        for (int y = iy0; y < iy1; ++y)
          for (int x = ix0; x < ix1; ++x) out.at(x - x0, y - y0) = tile.at(x - tx0, y - ty0);
      }
    }
    return out;
  }

  TileImage read_tile(const TileSpec& spec) const {
    return read_region(spec.plane_offset_um, spec.x0_px, spec.y0_px, spec.width_px,
                       spec.height_px);
  }

  TileImage read_storage_tile(std::size_t plane_idx, int col, int row) const {
    const std::string path = tile_path(plane_idx, col, row);
    TileImage img = manifest_.tile_format == TileFormat::png8 ? read_png(path) : read_raw16(path);
    img.transform = TileTransform{manifest_.mpp, col * manifest_.tile_size_px * manifest_.mpp,
                                  row * manifest_.tile_size_px * manifest_.mpp};
    return img;
  }

 private:
  std::filesystem::path root_;
  StoreManifest manifest_;
};

inline StoreHandle open_store(const std::filesystem::path& root, bool verify_tiles = true) {
  const auto manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw Error(ErrorCode::store, "missing manifest: " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::store, std::string("manifest parse error: ") + e.what());
  }
  StoreManifest m = manifest_from_json(j);
  validate_manifest(m);

  StoreHandle handle(root, m);
  if (verify_tiles) {
    std::string missing;
    int n_missing = 0;
    for (std::size_t p = 0; p < m.planes.size(); ++p)
      for (int r = 0; r < m.storage_rows(); ++r)
        for (int c = 0; c < m.storage_cols(); ++c) {
          const std::string path = handle.tile_path(p, c, r);
          if (!std::filesystem::exists(path)) {
            missing += "\n  " + path;
            ++n_missing;
          }
        }
    if (n_missing > 0)
      throw Error(ErrorCode::store,
                  std::to_string(n_missing) + " missing tile(s):" + missing);
  }
  return handle;
}

// Single-writer store construction. Tiles are written on the storage grid;
// write_plane() accepts a full-plane raster at store resolution and cuts it.
class StoreWriter {
 public:
  StoreWriter(std::filesystem::path root, StoreManifest manifest)
      : root_(std::move(root)), manifest_(std::move(manifest)) {
    validate_manifest(manifest_);
    std::filesystem::create_directories(root_);
    for (const auto& p : manifest_.planes) std::filesystem::create_directories(root_ / p.dir);
    std::ofstream out(root_ / "manifest.json");
    if (!out) throw Error(ErrorCode::store, "cannot write manifest under " + root_.string());
    out << manifest_to_json(manifest_).dump(2) << "\n";
  }

  const StoreManifest& manifest() const { return manifest_; }

  void write_storage_tile(std::size_t plane_idx, int col, int row, const TileImage& img) {
    const auto& p = manifest_.planes.at(plane_idx);
    const std::string path =
        (root_ / p.dir /
         ("t_" + std::to_string(col) + "_" + std::to_string(row) + "." +
          tile_format_ext(manifest_.tile_format)))
            .string();
    if (manifest_.tile_format == TileFormat::png8)
      write_png8(path, img);
    else
      write_raw16(path, img);
  }

  void write_plane(std::size_t plane_idx, const TileImage& raster) {
    if (raster.width != manifest_.width_px || raster.height != manifest_.height_px)
      throw Error(ErrorCode::store, "plane raster does not match manifest extents");
    const int ts = manifest_.tile_size_px;
    const int expect_depth = manifest_.tile_format == TileFormat::png8 ? 8 : 16;
    if (raster.bit_depth != expect_depth)
      throw Error(ErrorCode::store, "plane raster bit depth does not match tile format");
    for (int r = 0; r < manifest_.storage_rows(); ++r) {
      for (int c = 0; c < manifest_.storage_cols(); ++c) {
        TileImage tile;
        tile.bit_depth = raster.bit_depth;
        tile.width = std::min(ts, manifest_.width_px - c * ts);
        tile.height = std::min(ts, manifest_.height_px - r * ts);
        tile.samples.resize(static_cast<std::size_t>(tile.width) * tile.height);
        for (int y = 0; y < tile.height; ++y)
          for (int x = 0; x < tile.width; ++x) tile.at(x, y) = raster.at(c * ts + x, r * ts + y);
        write_storage_tile(plane_idx, c, r, tile);
      }
    }
  }

 private:
  std::filesystem::path root_;
  StoreManifest manifest_;
};

}  // namespace zmd
