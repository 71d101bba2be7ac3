#pragma once

// Physical-unit geometry shared by every stage. All cross-module coordinates
// are micrometres from the slide origin; pixels appear only at the tile-store
// and detector boundaries. Plane identity is the focal offset in µm, never an
// index, so profiles with different interplane distances stay comparable.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "zmd/errors.hpp"

namespace zmd {

struct PointUm {
  double x_um = 0.0;
  double y_um = 0.0;
};

struct PixelPoint {
  double x_px = 0.0;
  double y_px = 0.0;
};

// Target raster resolution after ingestion; default matches the usual 40x
// equivalent of 0.25 µm per pixel.
struct WorkingResolution {
  double mpp = 0.25;
};

inline double distance_um(const PointUm& a, const PointUm& b) {
  const double dx = a.x_um - b.x_um;
  const double dy = a.y_um - b.y_um;
  return std::sqrt(dx * dx + dy * dy);
}

inline PixelPoint um_to_px(const PointUm& p, const WorkingResolution& res) {
  if (!(res.mpp > 0.0))
    throw Error(ErrorCode::invalid_geometry, "working resolution must be positive");
  if (!std::isfinite(p.x_um) || !std::isfinite(p.y_um))
    throw Error(ErrorCode::invalid_geometry, "non-finite point coordinates");
  return PixelPoint{p.x_um / res.mpp, p.y_um / res.mpp};
}

inline PointUm px_to_um(const PixelPoint& p, const WorkingResolution& res) {
  if (!(res.mpp > 0.0))
    throw Error(ErrorCode::invalid_geometry, "working resolution must be positive");
  if (!std::isfinite(p.x_px) || !std::isfinite(p.y_px))
    throw Error(ErrorCode::invalid_geometry, "non-finite pixel coordinates");
  return PointUm{p.x_px * res.mpp, p.y_px * res.mpp};
}

// One scanner configuration: native resolution plus the list of focal plane
// offsets. Single-layer profiles carry exactly one offset and no interplane
// distance; z-stack profiles carry an evenly spaced, strictly increasing list.
struct ScanProfile {
  std::string scanner_id;
  double native_mpp = 0.0;
  std::vector<double> plane_offsets_um;
  std::optional<double> interplane_um;
  std::string objective;

  bool single_layer() const { return plane_offsets_um.size() == 1; }
  std::size_t plane_count() const { return plane_offsets_um.size(); }
};

inline void validate_profile(const ScanProfile& p) {
  if (!(p.native_mpp > 0.0))
    throw Error(ErrorCode::invalid_profile, "native_mpp must be positive (" + p.scanner_id + ")");
  if (p.plane_offsets_um.empty())
    throw Error(ErrorCode::invalid_profile, "profile needs at least one plane offset");
  for (double z : p.plane_offsets_um)
    if (!std::isfinite(z))
      throw Error(ErrorCode::invalid_profile, "non-finite plane offset");
  for (std::size_t i = 1; i < p.plane_offsets_um.size(); ++i)
    if (!(p.plane_offsets_um[i] > p.plane_offsets_um[i - 1]))
      throw Error(ErrorCode::invalid_profile, "plane offsets must be strictly increasing");
  if (p.plane_offsets_um.size() >= 2) {
    if (!p.interplane_um.has_value())
      throw Error(ErrorCode::invalid_profile, "multi-plane profile needs interplane_um");
    for (std::size_t i = 1; i < p.plane_offsets_um.size(); ++i) {
      const double d = p.plane_offsets_um[i] - p.plane_offsets_um[i - 1];
      if (std::fabs(d - *p.interplane_um) > 1e-9)
        throw Error(ErrorCode::invalid_profile,
                    "plane spacing does not match interplane_um within 1e-9");
    }
  } else if (p.interplane_um.has_value()) {
    throw Error(ErrorCode::invalid_profile, "single-layer profile must not set interplane_um");
  }
}

// Multiplier taking native pixel coordinates to working-resolution pixels.
inline double rescale_factor(const ScanProfile& from, const WorkingResolution& to) {
  if (!(from.native_mpp > 0.0))
    throw Error(ErrorCode::invalid_profile, "native_mpp must be positive");
  if (!(to.mpp > 0.0))
    throw Error(ErrorCode::invalid_geometry, "working resolution must be positive");
  return from.native_mpp / to.mpp;
}

}  // namespace zmd
