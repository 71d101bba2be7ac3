#pragma once

// Two-stage annotation transfer between scans of the same glass slide:
// stage 1 estimates a global similarity transform (scale, rotation,
// translation) from low-resolution thumbnails by normalized cross-correlation
// over a multi-start parameter grid; stage 2 refines each annotation with a
// sub-pixel NCC match of a 64 um patch inside a windowed search on the target.
// NCC is the right metric here: same stain, same slide, near-linear intensity
// relationship.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "zmd/geometry.hpp"
#include "zmd/image.hpp"
#include "zmd/parallel.hpp"
#include "zmd/rng.hpp"
#include "zmd/tilestore.hpp"

namespace zmd {

inline constexpr double kPatchExtentUm = 64.0;
inline constexpr double kWindowMarginUm = 16.0;
inline constexpr double kRefinePeakThreshold = 0.5;
inline constexpr double kGlobalPeakThreshold = 0.2;

struct GlobalTransform {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double dx_um = 0.0;
  double dy_um = 0.0;

  PointUm apply(const PointUm& p) const {
    const double th = rotation_deg * 0.017453292519943295;
    const double c = std::cos(th), s = std::sin(th);
    return PointUm{scale * (c * p.x_um - s * p.y_um) + dx_um,
                   scale * (s * p.x_um + c * p.y_um) + dy_um};
  }

  GlobalTransform inverse() const {
    const double th = rotation_deg * 0.017453292519943295;
    const double c = std::cos(th), s = std::sin(th);
    GlobalTransform inv;
    inv.scale = 1.0 / scale;
    inv.rotation_deg = -rotation_deg;
    inv.dx_um = -(c * dx_um + s * dy_um) / scale;
    inv.dy_um = -(-s * dx_um + c * dy_um) / scale;
    return inv;
  }
};

enum class TransferStatus { refined, global_only, failed };

inline const char* transfer_status_name(TransferStatus s) {
  switch (s) {
    case TransferStatus::refined: return "refined";
    case TransferStatus::global_only: return "global_only";
    case TransferStatus::failed: return "failed";
  }
  return "?";
}

struct TransferredAnnotation {
  PointUm source;
  std::optional<PointUm> mapped;  // empty only for failed entries
  double shift_x_um = 0.0;
  double shift_y_um = 0.0;
  double ncc_peak = 0.0;
  TransferStatus status = TransferStatus::failed;
};

// ---------------------------------------------------------------------------
// NCC matching
// ---------------------------------------------------------------------------

namespace ncc {

struct Peak {
  double dx_px = 0.0;  // template offset inside the image, sub-pixel
  double dy_px = 0.0;
  double value = -2.0;
  bool valid = false;
};

// Dense NCC of tmpl against every in-bounds offset of image; window sums come
// from integral images, the cross term is a direct loop. Returns the NCC grid.
inline FloatImage ncc_surface(const FloatImage& tmpl, const FloatImage& image) {
  const int ow = image.width - tmpl.width + 1;
  const int oh = image.height - tmpl.height + 1;
  FloatImage surface(std::max(0, ow), std::max(0, oh), -2.0f);
  if (ow <= 0 || oh <= 0) return surface;

  const std::size_t n = static_cast<std::size_t>(tmpl.width) * tmpl.height;
  double t_sum = 0.0, t_sum2 = 0.0;
  for (float v : tmpl.px) {
    t_sum += v;
    t_sum2 += static_cast<double>(v) * v;
  }
  const double t_mean = t_sum / static_cast<double>(n);
  const double t_var = t_sum2 - t_sum * t_sum / static_cast<double>(n);
  if (t_var <= 1e-12) return surface;  // blank template: NCC undefined
  const double t_norm = std::sqrt(t_var);

  // integral images over image and image^2
  const int iw = image.width + 1;
  std::vector<double> integ(static_cast<std::size_t>(iw) * (image.height + 1), 0.0);
  std::vector<double> integ2(integ.size(), 0.0);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const double v = image.at(x, y);
      const std::size_t i = static_cast<std::size_t>(y + 1) * iw + (x + 1);
      integ[i] = v + integ[i - 1] + integ[i - iw] - integ[i - iw - 1];
      integ2[i] = v * v + integ2[i - 1] + integ2[i - iw] - integ2[i - iw - 1];
    }
  auto window_sums = [&](int x0, int y0, int w, int h, double& s1, double& s2) {
    const std::size_t a = static_cast<std::size_t>(y0) * iw + x0;
    const std::size_t b = static_cast<std::size_t>(y0 + h) * iw + (x0 + w);
    const std::size_t c = static_cast<std::size_t>(y0) * iw + (x0 + w);
    const std::size_t d = static_cast<std::size_t>(y0 + h) * iw + x0;
    s1 = integ[b] + integ[a] - integ[c] - integ[d];
    s2 = integ2[b] + integ2[a] - integ2[c] - integ2[d];
  };

  for (int v = 0; v < oh; ++v) {
    for (int u = 0; u < ow; ++u) {
      double cross = 0.0;
      for (int y = 0; y < tmpl.height; ++y) {
        const float* trow = &tmpl.px[static_cast<std::size_t>(y) * tmpl.width];
        const float* irow = &image.px[static_cast<std::size_t>(v + y) * image.width + u];
        for (int x = 0; x < tmpl.width; ++x) cross += static_cast<double>(trow[x]) * irow[x];
      }
      double s1 = 0.0, s2 = 0.0;
      window_sums(u, v, tmpl.width, tmpl.height, s1, s2);
      const double w_var = s2 - s1 * s1 / static_cast<double>(n);
      if (w_var <= 1e-12) continue;  // blank window
      const double value = (cross - t_mean * s1) / (t_norm * std::sqrt(w_var));
      surface.at(u, v) = static_cast<float>(value);
    }
  }
  return surface;
}

inline double parabolic_offset(double a, double b, double c) {
  const double denom = a - 2.0 * b + c;
  if (std::fabs(denom) < 1e-12) return 0.0;
  return std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
}

inline Peak peak_of_surface(const FloatImage& surface) {
  Peak peak;
  if (surface.width <= 0 || surface.height <= 0) return peak;
  int bu = 0, bv = 0;
  float best = -2.0f;
  for (int v = 0; v < surface.height; ++v)
    for (int u = 0; u < surface.width; ++u)
      if (surface.at(u, v) > best) {
        best = surface.at(u, v);
        bu = u;
        bv = v;
      }
  if (best <= -2.0f) return peak;
  peak.valid = true;
  peak.value = best;
  peak.dx_px = bu;
  peak.dy_px = bv;
  if (bu > 0 && bu + 1 < surface.width && surface.at(bu - 1, bv) > -2.0f &&
      surface.at(bu + 1, bv) > -2.0f)
    peak.dx_px += parabolic_offset(surface.at(bu - 1, bv), best, surface.at(bu + 1, bv));
  if (bv > 0 && bv + 1 < surface.height && surface.at(bu, bv - 1) > -2.0f &&
      surface.at(bu, bv + 1) > -2.0f)
    peak.dy_px += parabolic_offset(surface.at(bu, bv - 1), best, surface.at(bu, bv + 1));
  return peak;
}

// Coarse-to-fine alignment of patch inside window. Levels halve resolution
// until the coarsest search grid is small; finer levels search +-3 px around
// the upsampled peak.
inline Peak align_pyramid(const FloatImage& patch, const FloatImage& window) {
  if (patch.width > window.width || patch.height > window.height) return Peak{};

  int levels = 0;
  while ((std::max(window.width - patch.width, window.height - patch.height) >> levels) > 24 &&
         (std::min(patch.width, patch.height) >> (levels + 1)) >= 8)
    ++levels;

  std::vector<FloatImage> patch_pyr{patch}, window_pyr{window};
  for (int l = 0; l < levels; ++l) {
    patch_pyr.push_back(block_average(patch_pyr.back(), 2));
    window_pyr.push_back(block_average(window_pyr.back(), 2));
  }

  // full search at the coarsest level
  Peak peak = peak_of_surface(ncc_surface(patch_pyr.back(), window_pyr.back()));
  if (!peak.valid) return peak;

  for (int l = levels - 1; l >= 0; --l) {
    const FloatImage& p = patch_pyr[static_cast<std::size_t>(l)];
    const FloatImage& w = window_pyr[static_cast<std::size_t>(l)];
    const int cx = static_cast<int>(std::lround(peak.dx_px * 2.0));
    const int cy = static_cast<int>(std::lround(peak.dy_px * 2.0));
    const int x0 = std::clamp(cx - 3, 0, w.width - p.width);
    const int y0 = std::clamp(cy - 3, 0, w.height - p.height);
    const int x1 = std::clamp(cx + 3, 0, w.width - p.width);
    const int y1 = std::clamp(cy + 3, 0, w.height - p.height);

    FloatImage crop(x1 - x0 + p.width, y1 - y0 + p.height);
    for (int y = 0; y < crop.height; ++y)
      for (int x = 0; x < crop.width; ++x) crop.at(x, y) = w.at(x0 + x, y0 + y);
    Peak local = peak_of_surface(ncc_surface(p, crop));
    if (!local.valid) return Peak{};
    peak = local;
    peak.dx_px += x0;
    peak.dy_px += y0;
  }
  return peak;
}

}  // namespace ncc

// ---------------------------------------------------------------------------
// Stage 1: global similarity estimate
// ---------------------------------------------------------------------------

struct GlobalSearchParams {
  double scale_min = 0.95;
  double scale_max = 1.05;
  double scale_step = 0.01;
  double rot_min_deg = -5.0;
  double rot_max_deg = 5.0;
  double rot_step_deg = 0.5;
  double max_shift_um = 1000.0;
  double min_peak = kGlobalPeakThreshold;
  uint64_t seed = 0;  // extra multi-start (scale, rotation) draws
  int extra_starts = 8;
};

namespace detail {

// Target thumbnail resampled into the reference frame under (scale, rot)
// about the image center; out-of-bounds pixels take the target mean.
inline FloatImage warp_similarity(const FloatImage& tgt, double scale, double rot_deg) {
  FloatImage out(tgt.width, tgt.height);
  const double th = rot_deg * 0.017453292519943295;
  const double c = std::cos(th), s = std::sin(th);
  const double cx = 0.5 * (tgt.width - 1), cy = 0.5 * (tgt.height - 1);
  double mean = 0.0;
  for (float v : tgt.px) mean += v;
  mean /= static_cast<double>(tgt.px.size());

  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const double rx = x - cx, ry = y - cy;
      const double sx = scale * (c * rx - s * ry) + cx;
      const double sy = scale * (s * rx + c * ry) + cy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      if (x0 < 0 || y0 < 0 || x0 + 1 >= tgt.width || y0 + 1 >= tgt.height) {
        out.at(x, y) = static_cast<float>(mean);
        continue;
      }
      const double fx = sx - x0, fy = sy - y0;
      out.at(x, y) = static_cast<float>(
          (1 - fy) * ((1 - fx) * tgt.at(x0, y0) + fx * tgt.at(x0 + 1, y0)) +
          fy * ((1 - fx) * tgt.at(x0, y0 + 1) + fx * tgt.at(x0 + 1, y0 + 1)));
    }
  }
  return out;
}

inline FloatImage central_crop(const FloatImage& img, int margin) {
  const int w = img.width - 2 * margin, h = img.height - 2 * margin;
  if (w < 8 || h < 8)
    throw Error(ErrorCode::registration, "thumbnail too small for the requested shift range");
  FloatImage out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(x, y) = img.at(x + margin, y + margin);
  return out;
}

}  // namespace detail

inline GlobalTransform estimate_global(const FloatImage& ref_thumb, const FloatImage& tgt_thumb,
                                       double thumb_mpp, const GlobalSearchParams& params = {}) {
  if (!(thumb_mpp >= 16.0))
    throw Error(ErrorCode::registration, "thumbnails must be at >= 16 um/px");
  if (ref_thumb.width != tgt_thumb.width || ref_thumb.height != tgt_thumb.height)
    throw Error(ErrorCode::registration, "thumbnails must share extents");

  struct Candidate {
    double scale, rot;
  };
  std::vector<Candidate> starts;
  for (double s = params.scale_min; s <= params.scale_max + 1e-12; s += params.scale_step)
    for (double r = params.rot_min_deg; r <= params.rot_max_deg + 1e-12; r += params.rot_step_deg)
      starts.push_back({s, r});
  Rng rng(derive_seed(params.seed, "global_starts"));
  for (int i = 0; i < params.extra_starts; ++i)
    starts.push_back({rng.uniform(params.scale_min, params.scale_max),
                      rng.uniform(params.rot_min_deg, params.rot_max_deg)});

  // coarse level: the strongest decimation that keeps a usable template
  int dec = 1, margin_dec = 2;
  for (int d : {8, 4, 2, 1}) {
    const int margin = std::max(2, static_cast<int>(std::ceil(params.max_shift_um /
                                                              (thumb_mpp * d))) + 3);
    const int tmpl_px = std::min(ref_thumb.width, ref_thumb.height) / d - 2 * margin;
    dec = d;
    margin_dec = margin;
    if (tmpl_px >= 16) break;
  }
  const FloatImage ref_dec = block_average(ref_thumb, dec);
  const FloatImage tgt_dec = block_average(tgt_thumb, dec);
  const FloatImage tmpl_dec = detail::central_crop(ref_dec, margin_dec);

  double best_value = -2.0;
  Candidate best{1.0, 0.0};
  for (const auto& cand : starts) {
    const FloatImage warped = detail::warp_similarity(tgt_dec, cand.scale, cand.rot);
    const ncc::Peak peak = ncc::peak_of_surface(ncc::ncc_surface(tmpl_dec, warped));
    if (peak.valid && peak.value > best_value) {
      best_value = peak.value;
      best = cand;
    }
  }
  if (best_value < params.min_peak)
    throw Error(ErrorCode::registration,
                "global registration failed: best NCC peak " + std::to_string(best_value));

  // refine scale/rotation on the full-resolution thumbnails around the best
  // coarse cell, shrinking steps
  const int margin1 = dec * margin_dec;
  const FloatImage tmpl1 = detail::central_crop(ref_thumb, margin1);
  double s_step = params.scale_step / 2.0, r_step = params.rot_step_deg / 2.0;
  ncc::Peak refined_peak;
  for (int round = 0; round < 3; ++round) {
    double round_best = -2.0;
    Candidate round_cand = best;
    ncc::Peak round_peak;
    for (int ds = -1; ds <= 1; ++ds) {
      for (int dr = -1; dr <= 1; ++dr) {
        const Candidate cand{best.scale + ds * s_step, best.rot + dr * r_step};
        const FloatImage warped = detail::warp_similarity(tgt_thumb, cand.scale, cand.rot);
        const ncc::Peak peak = ncc::align_pyramid(tmpl1, warped);
        if (peak.valid && peak.value > round_best) {
          round_best = peak.value;
          round_cand = cand;
          round_peak = peak;
        }
      }
    }
    best = round_cand;
    refined_peak = round_peak;
    s_step /= 2.0;
    r_step /= 2.0;
  }

  // offset of the template inside the warped target, relative to its resting
  // position, is the translation in the (scaled, rotated) frame
  const double du_px = refined_peak.dx_px - margin1;
  const double dv_px = refined_peak.dy_px - margin1;

  GlobalTransform g;
  g.scale = best.scale;
  g.rotation_deg = best.rot;
  const double th = best.rot * 0.017453292519943295;
  const double c = std::cos(th), s = std::sin(th);
  // warp was about the pixel-grid center; compose into origin form
  const double cx_um = 0.5 * (tgt_thumb.width - 1) * thumb_mpp;
  const double cy_um = 0.5 * (tgt_thumb.height - 1) * thumb_mpp;
  const double delta_x_um = du_px * thumb_mpp;
  const double delta_y_um = dv_px * thumb_mpp;
  g.dx_um = cx_um - g.scale * (c * cx_um - s * cy_um) + g.scale * (c * delta_x_um - s * delta_y_um);
  g.dy_um = cy_um - g.scale * (s * cx_um + c * cy_um) + g.scale * (s * delta_x_um + c * delta_y_um);
  return g;
}

// ---------------------------------------------------------------------------
// Stage 2: per-annotation local refinement
// ---------------------------------------------------------------------------

inline TransferredAnnotation refine_local(const PointUm& source, const PointUm& mapped_guess,
                                          const FloatImage& ref_patch,
                                          const FloatImage& tgt_window, double mpp) {
  TransferredAnnotation out;
  out.source = source;
  out.mapped = mapped_guess;
  out.status = TransferStatus::global_only;

  if (ref_patch.width <= 0 || tgt_window.width < ref_patch.width ||
      tgt_window.height < ref_patch.height)
    return out;

  const ncc::Peak peak = ncc::align_pyramid(ref_patch, tgt_window);
  if (!peak.valid) return out;  // blank patch or window: NCC undefined, peak 0
  out.ncc_peak = peak.value;
  if (peak.value < kRefinePeakThreshold) return out;

  const double centered_x = 0.5 * (tgt_window.width - ref_patch.width);
  const double centered_y = 0.5 * (tgt_window.height - ref_patch.height);
  out.shift_x_um = (peak.dx_px - centered_x) * mpp;
  out.shift_y_um = (peak.dy_px - centered_y) * mpp;
  out.mapped = PointUm{mapped_guess.x_um + out.shift_x_um, mapped_guess.y_um + out.shift_y_um};
  out.status = TransferStatus::refined;
  return out;
}

// Pixel source for stage-2 patches; implementations sample the reference or
// target scan around a point at a given mpp. Out-of-bounds requests may clip.
class PatchSource {
 public:
  virtual ~PatchSource() = default;
  virtual FloatImage sample(const PointUm& center, double extent_um, double mpp) const = 0;
};

struct TransferOptions {
  double patch_um = kPatchExtentUm;
  double margin_um = kWindowMarginUm;
  double mpp = 0.25;
  int workers = 1;
};

inline std::vector<TransferredAnnotation> transfer_annotations(
    const std::vector<PointUm>& annotations, const GlobalTransform& global,
    const PatchSource* ref_source = nullptr, const PatchSource* tgt_source = nullptr,
    const TransferOptions& opts = {}) {
  std::vector<TransferredAnnotation> out(annotations.size());
  const bool refine = ref_source != nullptr && tgt_source != nullptr;
  parallel_for(annotations.size(), opts.workers, [&](std::size_t i) {
    const PointUm& p = annotations[i];
    const PointUm guess = global.apply(p);
    if (!refine) {
      out[i].source = p;
      out[i].mapped = guess;
      out[i].status = TransferStatus::global_only;
      return;
    }
    try {
      const FloatImage patch = ref_source->sample(p, opts.patch_um, opts.mpp);
      const FloatImage window =
          tgt_source->sample(guess, opts.patch_um + 2.0 * opts.margin_um, opts.mpp);
      out[i] = refine_local(p, guess, patch, window, opts.mpp);
    } catch (const Error&) {
      out[i].source = p;
      out[i].mapped.reset();
      out[i].status = TransferStatus::failed;
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Store-backed helpers
// ---------------------------------------------------------------------------

// Streaming block-average thumbnail of one plane at >= 16 um/px.
inline FloatImage make_thumbnail(const StoreHandle& store, double plane_offset_um,
                                 double target_mpp = 16.0) {
  const auto& m = store.manifest();
  const int factor = std::max(1, static_cast<int>(std::ceil(target_mpp / m.mpp)));
  const int tw = (m.width_px + factor - 1) / factor;
  const int th = (m.height_px + factor - 1) / factor;
  std::vector<double> acc(static_cast<std::size_t>(tw) * th, 0.0);
  std::vector<int> cnt(acc.size(), 0);

  const auto plane = m.plane_index(plane_offset_um);
  if (!plane) throw Error(ErrorCode::store, "no such plane for thumbnail");
  const int ts = m.tile_size_px;
  for (int row = 0; row < m.storage_rows(); ++row) {
    for (int col = 0; col < m.storage_cols(); ++col) {
      const TileImage tile = store.read_storage_tile(*plane, col, row);
      const double maxv = tile.max_value();
      for (int y = 0; y < tile.height; ++y) {
        const int gy = (row * ts + y) / factor;
        for (int x = 0; x < tile.width; ++x) {
          const int gx = (col * ts + x) / factor;
          acc[static_cast<std::size_t>(gy) * tw + gx] += tile.at(x, y) / maxv;
          ++cnt[static_cast<std::size_t>(gy) * tw + gx];
        }
      }
    }
  }
  FloatImage thumb(tw, th);
  for (std::size_t i = 0; i < acc.size(); ++i)
    thumb.px[i] = cnt[i] ? static_cast<float>(acc[i] / cnt[i]) : 0.0f;
  return thumb;
}

class StorePatchSource final : public PatchSource {
 public:
  StorePatchSource(const StoreHandle& store, double plane_offset_um)
      : store_(store), plane_(plane_offset_um) {}

  FloatImage sample(const PointUm& center, double extent_um, double mpp) const override {
    const auto& m = store_.manifest();
    if (std::fabs(mpp - m.mpp) > 1e-9)
      throw Error(ErrorCode::store, "patch mpp must match the store resolution");
    const int half_px = static_cast<int>(std::lround(extent_um / (2.0 * mpp)));
    int x0 = static_cast<int>(std::lround(center.x_um / mpp)) - half_px;
    int y0 = static_cast<int>(std::lround(center.y_um / mpp)) - half_px;
    int x1 = x0 + 2 * half_px, y1 = y0 + 2 * half_px;
    const int cx0 = std::clamp(x0, 0, m.width_px), cx1 = std::clamp(x1, 0, m.width_px);
    const int cy0 = std::clamp(y0, 0, m.height_px), cy1 = std::clamp(y1, 0, m.height_px);
    if (cx1 <= cx0 || cy1 <= cy0)
      throw Error(ErrorCode::store, "patch entirely outside the slide");
    if (cx0 != x0 || cy0 != y0 || cx1 != x1 || cy1 != y1)
      std::fprintf(stderr, "zmd: warning: patch at (%.1f, %.1f) clipped to slide bounds\n",
                   center.x_um, center.y_um);
    return to_float(store_.read_region(plane_, cx0, cy0, cx1 - cx0, cy1 - cy0));
  }

 private:
  const StoreHandle& store_;
  double plane_;
};

}  // namespace zmd
