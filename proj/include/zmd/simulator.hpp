#pragma once

// Synthetic multi-plane slides with known ground truth under the defocus
// model, plus the paired single-layer vs z-stack experiment that the
// acceptance suite runs end to end. Scores come from the analytic detector by
// default (fast path); slides can also be rasterized into a tile store for
// end-to-end coverage through the raster detector. Both paths share the
// Detector interface and the same per-object noise streams.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "zmd/detector.hpp"
#include "zmd/forest.hpp"
#include "zmd/parallel.hpp"
#include "zmd/registration.hpp"
#include "zmd/report.hpp"
#include "zmd/rng.hpp"
#include "zmd/stats.hpp"
#include "zmd/tilestore.hpp"
#include "zmd/zmerge.hpp"

namespace zmd {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct SimConfig {
  double slide_w_um = 3000.0;
  double slide_h_um = 3000.0;
  int n_mitoses = 120;
  double mitosis_depth_range_um = 1.5;  // z* uniform in +-range
  DefocusParams defocus;
  std::vector<double> plane_offsets_um = {-1.2, -0.6, 0.0, 0.6, 1.2};
  int n_runs = 20;
  uint64_t master_seed = 1;

  int n_test_slides = 2;  // per run, alongside one calibration slide
  std::vector<std::string> model_ids = {"m1", "m2", "m3", "m4"};
  ForestHyper forest;
  double merge_radius_um = kDefaultMergeRadiusUm;
  double match_cutoff_um = 7.5;
  double min_spacing_um = 10.0;
  std::string scanner_label = "sim";
  std::string pipeline_label = "synthetic";
};

inline void validate_sim_config(const SimConfig& cfg) {
  if (!(cfg.slide_w_um > 0.0) || !(cfg.slide_h_um > 0.0))
    throw Error(ErrorCode::config, "slide dimensions must be positive");
  if (cfg.n_mitoses < 1) throw Error(ErrorCode::config, "n_mitoses must be >= 1");
  if (!(cfg.mitosis_depth_range_um >= 0.0))
    throw Error(ErrorCode::config, "mitosis_depth_range_um must be >= 0");
  if (cfg.n_runs < 1) throw Error(ErrorCode::config, "n_runs must be >= 1");
  if (cfg.n_test_slides < 1) throw Error(ErrorCode::config, "n_test_slides must be >= 1");
  if (cfg.model_ids.empty()) throw Error(ErrorCode::config, "model_ids must not be empty");
  validate_defocus(cfg.defocus);
  // plane offsets obey the same rules as a scan profile
  ScanProfile probe;
  probe.scanner_id = "sim";
  probe.native_mpp = 0.25;
  probe.plane_offsets_um = cfg.plane_offsets_um;
  if (cfg.plane_offsets_um.size() >= 2)
    probe.interplane_um = cfg.plane_offsets_um[1] - cfg.plane_offsets_um[0];
  validate_profile(probe);
}

// ---------------------------------------------------------------------------
// Slide generation
// ---------------------------------------------------------------------------

struct SyntheticSlide {
  std::string slide_id;
  double width_um = 0.0;
  double height_um = 0.0;
  std::vector<GroundTruthMitosis> mitoses;
  std::vector<PointUm> imposters;
  uint64_t noise_seed = 0;  // drives every detector noise stream for the slide

  std::vector<PointUm> ground_truth_positions() const {
    std::vector<PointUm> out;
    out.reserve(mitoses.size());
    for (const auto& m : mitoses) out.push_back(m.pos);
    return out;
  }
};

inline SyntheticSlide generate_slide(const SimConfig& cfg, uint64_t seed) {
  validate_sim_config(cfg);
  SyntheticSlide slide;
  slide.slide_id = "sim_" + std::to_string(seed);
  slide.width_um = cfg.slide_w_um;
  slide.height_um = cfg.slide_h_um;
  slide.noise_seed = derive_seed(seed, "noise");

  const double margin = 20.0;
  if (cfg.slide_w_um <= 2 * margin || cfg.slide_h_um <= 2 * margin)
    throw Error(ErrorCode::generation, "slide too small for placement margins");

  const double area_mm2 = cfg.slide_w_um * cfg.slide_h_um * 1e-6;
  const int n_imposters =
      static_cast<int>(std::lround(cfg.defocus.imposter_rate_per_mm2 * area_mm2));
  const int total = cfg.n_mitoses + n_imposters;

  Rng rng(derive_seed(seed, "layout"));
  std::vector<PointUm> placed;
  placed.reserve(static_cast<std::size_t>(total));
  const double spacing2 = cfg.min_spacing_um * cfg.min_spacing_um;
  long attempts_left = 1000l * std::max(total, 1);
  while (static_cast<int>(placed.size()) < total) {
    if (--attempts_left < 0)
      throw Error(ErrorCode::generation,
                  "cannot place " + std::to_string(total) + " objects with " +
                      std::to_string(cfg.min_spacing_um) + " um spacing on this slide");
    const PointUm p{rng.uniform(margin, cfg.slide_w_um - margin),
                    rng.uniform(margin, cfg.slide_h_um - margin)};
    bool ok = true;
    for (const auto& q : placed) {
      const double dx = p.x_um - q.x_um, dy = p.y_um - q.y_um;
      if (dx * dx + dy * dy < spacing2) {
        ok = false;
        break;
      }
    }
    if (ok) placed.push_back(p);
  }

  for (int i = 0; i < cfg.n_mitoses; ++i)
    slide.mitoses.push_back(
        {placed[static_cast<std::size_t>(i)],
         rng.uniform(-cfg.mitosis_depth_range_um, cfg.mitosis_depth_range_um)});
  for (int j = 0; j < n_imposters; ++j)
    slide.imposters.push_back(placed[static_cast<std::size_t>(cfg.n_mitoses + j)]);
  return slide;
}

inline SyntheticDetector make_detector(const SyntheticSlide& slide, const DefocusParams& params) {
  return SyntheticDetector(slide.mitoses, slide.imposters, slide.width_um, slide.height_um, params,
                           slide.noise_seed);
}

// ---------------------------------------------------------------------------
// Optional rasterization into a tile store
// ---------------------------------------------------------------------------

inline constexpr double kBlobSigmaUm = 2.0;

inline StoreManifest render_manifest(const SyntheticSlide& slide,
                                     const std::vector<double>& plane_offsets, double mpp,
                                     int tile_size_px, TileFormat fmt) {
  StoreManifest m;
  m.slide_id = slide.slide_id;
  m.mpp = mpp;
  m.width_px = static_cast<int>(std::lround(slide.width_um / mpp));
  m.height_px = static_cast<int>(std::lround(slide.height_um / mpp));
  m.tile_size_px = tile_size_px;
  m.tile_format = fmt;
  m.profile.scanner_id = "sim";
  m.profile.native_mpp = mpp;
  m.profile.objective = "synthetic";
  m.profile.plane_offsets_um = plane_offsets;
  if (plane_offsets.size() >= 2)
    m.profile.interplane_um = plane_offsets[1] - plane_offsets[0];
  for (std::size_t i = 0; i < plane_offsets.size(); ++i)
    m.planes.push_back({plane_offsets[i], "z" + std::to_string(i)});
  return m;
}

// Gaussian blobs whose peak amplitude is the object's per-plane segmentation
// score, over a low noise floor. Background stays well under seg_threshold.
inline void render_store(const SyntheticSlide& slide, const SimConfig& cfg,
                         const std::filesystem::path& dir, TileFormat fmt = TileFormat::raw16,
                         double mpp = 0.25, int tile_size_px = 512) {
  const StoreManifest manifest = render_manifest(slide, cfg.plane_offsets_um, mpp, tile_size_px, fmt);
  StoreWriter writer(dir, manifest);
  const SyntheticDetector det = make_detector(slide, cfg.defocus);
  const int depth = fmt == TileFormat::png8 ? 8 : 16;
  const double maxv = depth == 8 ? 255.0 : 65535.0;

  for (std::size_t p = 0; p < cfg.plane_offsets_um.size(); ++p) {
    const double plane = cfg.plane_offsets_um[p];
    TileImage raster;
    raster.width = manifest.width_px;
    raster.height = manifest.height_px;
    raster.bit_depth = depth;
    raster.samples.resize(static_cast<std::size_t>(raster.width) * raster.height);

    std::vector<double> buf(raster.samples.size());
    for (int y = 0; y < raster.height; ++y) {
      Rng row_rng(derive_seed(slide.noise_seed, "bg", {plane_key(plane), y}));
      for (int x = 0; x < raster.width; ++x)
        buf[static_cast<std::size_t>(y) * raster.width + x] =
            std::clamp(0.08 + 0.02 * row_rng.normal(), 0.0, 0.3);
    }

    auto splat = [&](const PointUm& pos, double amp) {
      if (amp <= 0.0) return;
      const double r_px = 4.0 * kBlobSigmaUm / mpp;
      const int x0 = std::max(0, static_cast<int>((pos.x_um / mpp) - r_px));
      const int x1 = std::min(raster.width - 1, static_cast<int>((pos.x_um / mpp) + r_px));
      const int y0 = std::max(0, static_cast<int>((pos.y_um / mpp) - r_px));
      const int y1 = std::min(raster.height - 1, static_cast<int>((pos.y_um / mpp) + r_px));
      const double inv2s2 = 1.0 / (2.0 * kBlobSigmaUm * kBlobSigmaUm);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double dx = (x + 0.5) * mpp - pos.x_um;
          const double dy = (y + 0.5) * mpp - pos.y_um;
          const double v = amp * std::exp(-(dx * dx + dy * dy) * inv2s2);
          auto& cell = buf[static_cast<std::size_t>(y) * raster.width + x];
          cell = std::max(cell, v);
        }
      }
    };
    for (std::size_t i = 0; i < slide.mitoses.size(); ++i)
      splat(slide.mitoses[i].pos, det.seg_score_of_mitosis(i, plane));
    for (std::size_t j = 0; j < slide.imposters.size(); ++j)
      splat(slide.imposters[j], det.seg_score_of_imposter(j, plane));

    for (std::size_t i = 0; i < buf.size(); ++i)
      raster.samples[i] = static_cast<uint16_t>(std::lround(std::clamp(buf[i], 0.0, 1.0) * maxv));
    writer.write_plane(p, raster);
  }
}

// ---------------------------------------------------------------------------
// Pipeline runs
// ---------------------------------------------------------------------------

struct SlideEvaluation {
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

// One slide through one layer mode: detect per plane, merge across planes,
// score the tensor, classify, match against ground truth.
inline SlideEvaluation evaluate_slide(const SyntheticSlide& slide, const Detector& detector,
                                      const std::vector<double>& planes, const ForestModel& model,
                                      const SimConfig& cfg) {
  std::vector<Candidate> all;
  for (double plane : planes)
    for (auto& c : detector.detect_plane(plane)) all.push_back(std::move(c));
  const auto merged = merge_candidates(all, cfg.merge_radius_um);

  std::vector<IdPoint> accepted;
  for (const auto& mc : merged) {
    const FeatureVector fv = assemble_features(mc, detector, planes, cfg.model_ids);
    if (predict_proba(model, fv) >= model.decision_threshold)
      accepted.push_back(IdPoint{mc.rep.id, mc.rep.pos});
  }

  std::vector<IdPoint> gts;
  for (std::size_t i = 0; i < slide.mitoses.size(); ++i)
    gts.push_back(IdPoint{"g" + std::to_string(i), slide.mitoses[i].pos});

  const MatchResult m = match_detections(accepted, gts, cfg.match_cutoff_um);
  return SlideEvaluation{m.tp, m.fp, m.fn};
}

inline int64_t plane_set_key(const std::vector<double>& planes) {
  uint64_t h = 0x9E3779B97F4A7C15ull;
  for (double p : planes) h = splitmix64(h ^ static_cast<uint64_t>(plane_key(p)));
  return static_cast<int64_t>(h);
}

// Calibrate on one slide, evaluate on the test slides; aggregate counts over
// the test set before computing the run's metrics.
inline ForestModel calibrate_on_slide(const SyntheticSlide& calib, const SimConfig& cfg,
                                      const std::vector<double>& planes, uint64_t forest_seed) {
  const SyntheticDetector det = make_detector(calib, cfg.defocus);
  std::vector<Candidate> all;
  for (double plane : planes)
    for (auto& c : det.detect_plane(plane)) all.push_back(std::move(c));
  const auto merged = merge_candidates(all, cfg.merge_radius_um);
  const LabeledSet labeled = build_labeled_set(merged, det, planes, cfg.model_ids,
                                               calib.ground_truth_positions(), cfg.match_cutoff_um);
  return recalibrate(cfg.forest, labeled, forest_seed);
}

inline std::vector<MetricSample> run_experiment(const SimConfig& cfg, int workers = 1) {
  validate_sim_config(cfg);

  struct RunOutput {
    std::vector<MetricSample> samples;
  };
  std::vector<RunOutput> runs(static_cast<std::size_t>(cfg.n_runs));

  parallel_for(static_cast<std::size_t>(cfg.n_runs), workers, [&](std::size_t r) {
    const uint64_t run_seed = derive_seed(cfg.master_seed, "run", {static_cast<int64_t>(r)});
    const SyntheticSlide calib = generate_slide(cfg, derive_seed(run_seed, "slide", {0}));
    std::vector<SyntheticSlide> tests;
    for (int i = 0; i < cfg.n_test_slides; ++i)
      tests.push_back(generate_slide(cfg, derive_seed(run_seed, "slide", {1 + i})));

    for (LayerMode mode : {LayerMode::single, LayerMode::zstack}) {
      const std::vector<double> planes =
          mode == LayerMode::single ? std::vector<double>{0.0} : cfg.plane_offsets_um;
      const uint64_t forest_seed = derive_seed(run_seed, "forest", {plane_set_key(planes)});
      const ForestModel model = calibrate_on_slide(calib, cfg, planes, forest_seed);

      SlideEvaluation total;
      for (const auto& slide : tests) {
        const SyntheticDetector det = make_detector(slide, cfg.defocus);
        const SlideEvaluation e = evaluate_slide(slide, det, planes, model, cfg);
        total.tp += e.tp;
        total.fp += e.fp;
        total.fn += e.fn;
      }

      MatchResult as_match;
      as_match.tp = total.tp;
      as_match.fp = total.fp;
      as_match.fn = total.fn;
      const auto sens = sensitivity(as_match);
      const auto prec = precision(as_match);
      const int run_index = static_cast<int>(r) + 1;
      if (sens)
        runs[r].samples.push_back({cfg.scanner_label, cfg.pipeline_label, mode, run_index,
                                   MetricKind::sensitivity, *sens});
      if (prec)
        runs[r].samples.push_back({cfg.scanner_label, cfg.pipeline_label, mode, run_index,
                                   MetricKind::precision, *prec});
      else
        std::fprintf(stderr,
                     "zmd: warning: run %d %s precision undefined (no detections), excluded\n",
                     run_index, layer_mode_name(mode));
    }
  });

  std::vector<MetricSample> samples;
  for (auto& run : runs)
    for (auto& s : run.samples) samples.push_back(std::move(s));
  return samples;
}

// ---------------------------------------------------------------------------
// Procedural texture and warped slide pairs (registration fixtures)
// ---------------------------------------------------------------------------

// Seeded value noise, three octaves, Catmull-Rom interpolated; any coordinate
// can be sampled at any resolution without storing a raster.
class TextureField {
 public:
  explicit TextureField(uint64_t seed) : seed_(seed) {}

  double sample(double x_um, double y_um) const {
    const double v = 0.5 + 0.30 * octave(x_um, y_um, 150.0, 0) +
                     0.25 * octave(x_um, y_um, 24.0, 1) + 0.15 * octave(x_um, y_um, 7.0, 2);
    return std::clamp(v, 0.0, 1.0);
  }

 private:
  double lattice(int64_t ix, int64_t iy, int oct) const {
    uint64_t h = splitmix64(seed_ ^ splitmix64(static_cast<uint64_t>(oct)));
    h = splitmix64(h ^ static_cast<uint64_t>(ix));
    h = splitmix64(h ^ static_cast<uint64_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5;
  }

  static double catmull_rom(double p0, double p1, double p2, double p3, double t) {
    const double t2 = t * t, t3 = t2 * t;
    return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2 +
                  (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3);
  }

  double octave(double x_um, double y_um, double spacing_um, int oct) const {
    const double gx = x_um / spacing_um, gy = y_um / spacing_um;
    const int64_t ix = static_cast<int64_t>(std::floor(gx));
    const int64_t iy = static_cast<int64_t>(std::floor(gy));
    const double tx = gx - static_cast<double>(ix), ty = gy - static_cast<double>(iy);
    double rows[4];
    for (int j = -1; j <= 2; ++j)
      rows[j + 1] = catmull_rom(lattice(ix - 1, iy + j, oct), lattice(ix, iy + j, oct),
                                lattice(ix + 1, iy + j, oct), lattice(ix + 2, iy + j, oct), tx);
    return catmull_rom(rows[0], rows[1], rows[2], rows[3], ty);
  }

  uint64_t seed_;
};

// Samples the texture as seen by one scan: the reference scan shows T(p), the
// target scan shows T(warp^-1(q)).
class TexturePatchSource final : public PatchSource {
 public:
  TexturePatchSource(const TextureField& texture, const GlobalTransform& view_to_texture)
      : texture_(texture), view_to_texture_(view_to_texture) {}

  static TexturePatchSource reference(const TextureField& t) {
    return TexturePatchSource(t, GlobalTransform{});
  }
  static TexturePatchSource target(const TextureField& t, const GlobalTransform& warp) {
    return TexturePatchSource(t, warp.inverse());
  }

  double sample_at(const PointUm& view) const {
    const PointUm tex = view_to_texture_.apply(view);
    return texture_.sample(tex.x_um, tex.y_um);
  }

  FloatImage sample(const PointUm& center, double extent_um, double mpp) const override {
    const int n = std::max(2, static_cast<int>(std::lround(extent_um / mpp)));
    FloatImage img(n, n);
    const double half = 0.5 * (n - 1);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        img.at(x, y) = static_cast<float>(sample_at(
            PointUm{center.x_um + (x - half) * mpp, center.y_um + (y - half) * mpp}));
    return img;
  }

 private:
  const TextureField& texture_;
  GlobalTransform view_to_texture_;
};

inline FloatImage sample_thumbnail(const TexturePatchSource& source, double w_um, double h_um,
                                   double mpp) {
  const int tw = static_cast<int>(std::lround(w_um / mpp));
  const int th = static_cast<int>(std::lround(h_um / mpp));
  FloatImage out(tw, th);
  for (int y = 0; y < th; ++y)
    for (int x = 0; x < tw; ++x)
      out.at(x, y) = static_cast<float>(source.sample_at(PointUm{(x + 0.5) * mpp, (y + 0.5) * mpp}));
  return out;
}

struct WarpedPairFixture {
  double slide_w_um = 8000.0;
  double slide_h_um = 8000.0;
  double thumb_mpp = 16.0;
  GlobalTransform warp;  // reference -> target, the ground truth
  std::shared_ptr<TextureField> texture;
  FloatImage ref_thumb;
  FloatImage tgt_thumb;
  std::shared_ptr<TexturePatchSource> ref_source;
  std::shared_ptr<TexturePatchSource> tgt_source;
  std::vector<PointUm> annotations;
};

// Similarity warp drawn within the acceptance envelope: |shift| <= 50 thumb
// px, |rotation| <= 2 deg, scale in [0.97, 1.03]; rotation/scale about the
// slide center so content stays in frame.
inline WarpedPairFixture make_warped_pair(uint64_t seed, int n_annotations = 200,
                                          double slide_w_um = 8000.0, double slide_h_um = 8000.0,
                                          double thumb_mpp = 16.0) {
  WarpedPairFixture fx;
  fx.slide_w_um = slide_w_um;
  fx.slide_h_um = slide_h_um;
  fx.thumb_mpp = thumb_mpp;
  fx.texture = std::make_shared<TextureField>(derive_seed(seed, "texture"));

  Rng rng(derive_seed(seed, "warp"));
  const double scale = rng.uniform(0.97, 1.03);
  const double rot = rng.uniform(-2.0, 2.0);
  const double shift_max_um = 50.0 * thumb_mpp;
  const double angle = rng.uniform(0.0, 6.283185307179586);
  const double radius = shift_max_um * std::sqrt(rng.uniform01());
  const PointUm shift{radius * std::cos(angle), radius * std::sin(angle)};
  const PointUm center{slide_w_um / 2.0, slide_h_um / 2.0};

  const double th = rot * 0.017453292519943295;
  const double c = std::cos(th), s = std::sin(th);
  fx.warp.scale = scale;
  fx.warp.rotation_deg = rot;
  fx.warp.dx_um = center.x_um - scale * (c * center.x_um - s * center.y_um) + shift.x_um;
  fx.warp.dy_um = center.y_um - scale * (s * center.x_um + c * center.y_um) + shift.y_um;

  fx.ref_source = std::make_shared<TexturePatchSource>(TexturePatchSource::reference(*fx.texture));
  fx.tgt_source =
      std::make_shared<TexturePatchSource>(TexturePatchSource::target(*fx.texture, fx.warp));
  fx.ref_thumb = sample_thumbnail(*fx.ref_source, slide_w_um, slide_h_um, thumb_mpp);
  fx.tgt_thumb = sample_thumbnail(*fx.tgt_source, slide_w_um, slide_h_um, thumb_mpp);

  const double margin = 1200.0;
  for (int i = 0; i < n_annotations; ++i)
    fx.annotations.push_back(PointUm{rng.uniform(margin, slide_w_um - margin),
                                     rng.uniform(margin, slide_h_um - margin)});
  return fx;
}

}  // namespace zmd
