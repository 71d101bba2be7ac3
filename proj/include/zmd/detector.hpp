#pragma once

// Candidate generation and patch scoring behind one interface:
//
//   SyntheticDetector  analytic defocus model over known ground truth; used by
//                      the simulator and every fast test
//   RasterDetector     the same generative model read back from rendered tile
//                      stores (blob peaks above the segmentation threshold)
//   ExternalScoreAdapter  precomputed per-(candidate, plane, model) scores from
//                      out-of-process models, exchanged as JSON Lines
//
// Detectability of a structure imaged dz µm away from its true depth follows
// exp(-dz^2 / (2 sigma^2)).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "zmd/candidate.hpp"
#include "zmd/rng.hpp"
#include "zmd/tilestore.hpp"
#include "zmd/zmerge.hpp"

namespace zmd {

struct DefocusParams {
  double sigma_um = 0.6;
  double base_detectability = 0.9;
  double seg_threshold = 0.5;  // tau; the paper does not state stage-1 thresholds
  double noise_sd = 0.05;
  double imposter_rate_per_mm2 = 12.0;
};

inline void validate_defocus(const DefocusParams& p) {
  if (!(p.sigma_um > 0.0)) throw Error(ErrorCode::config, "sigma_um must be positive");
  if (!(p.base_detectability > 0.0) || p.base_detectability > 1.0)
    throw Error(ErrorCode::config, "base_detectability must be in (0,1]");
  if (!(p.seg_threshold > 0.0) || !(p.seg_threshold < 1.0))
    throw Error(ErrorCode::config, "seg_threshold must be in (0,1)");
  if (p.noise_sd < 0.0) throw Error(ErrorCode::config, "noise_sd must be >= 0");
  if (p.imposter_rate_per_mm2 < 0.0) throw Error(ErrorCode::config, "imposter_rate must be >= 0");
}

inline double defocus_response(double dz_um, double sigma_um) {
  if (!(sigma_um > 0.0)) throw Error(ErrorCode::config, "sigma_um must be positive");
  return std::exp(-(dz_um * dz_um) / (2.0 * sigma_um * sigma_um));
}

// Imposter scores: Beta(2,5) scaled so the mean stays below the segmentation
// threshold (mean = 2.4*tau*2/7 ~ 0.69*tau) while the upper tail still crosses
// it, which is what creates false-positive pressure.
inline constexpr double kImposterScoreScale = 2.4;
// Per-axis localization jitter of synthetic detections.
inline constexpr double kLocalizationJitterUm = 0.25;

class Detector {
 public:
  virtual ~Detector() = default;

  // Candidates for one focal plane, deduplicated within the plane by the
  // 2.5 um rule, deterministic for a fixed seed.
  virtual std::vector<Candidate> detect_plane(double plane_offset_um) const = 0;

  // Verification scores at a position, one per model id. The full tensor must
  // be available; a missing (pos, plane, model) triple is a hard error.
  virtual ScoreVector score_patch(const PointUm& pos, double plane_offset_um,
                                  const std::vector<std::string>& model_ids) const = 0;
};

// ---------------------------------------------------------------------------
// Synthetic (analytic) detector
// ---------------------------------------------------------------------------

struct GroundTruthMitosis {
  PointUm pos;
  double depth_um = 0.0;  // true focal depth z*
};

inline int64_t plane_key(double plane_offset_um) {
  return static_cast<int64_t>(std::llround(plane_offset_um * 1000.0));
}

class SyntheticDetector final : public Detector {
 public:
  SyntheticDetector(std::vector<GroundTruthMitosis> mitoses, std::vector<PointUm> imposters,
                    double slide_w_um, double slide_h_um, DefocusParams params, uint64_t seed)
      : mitoses_(std::move(mitoses)),
        imposters_(std::move(imposters)),
        slide_w_um_(slide_w_um),
        slide_h_um_(slide_h_um),
        params_(params),
        seed_(seed) {
    validate_defocus(params_);
  }

  const DefocusParams& params() const { return params_; }

  double seg_score_of_mitosis(std::size_t i, double plane_offset_um) const {
    const double g = defocus_response(plane_offset_um - mitoses_[i].depth_um, params_.sigma_um);
    double s = params_.base_detectability * g;
    if (params_.noise_sd > 0.0) {
      Rng rng(derive_seed(seed_, "segnoise_gt", {static_cast<int64_t>(i), plane_key(plane_offset_um)}));
      s += params_.noise_sd * rng.normal();
    }
    return std::clamp(s, 0.0, 1.0);
  }

  double seg_score_of_imposter(std::size_t j, double plane_offset_um) const {
    Rng rng(derive_seed(seed_, "segnoise_imp", {static_cast<int64_t>(j), plane_key(plane_offset_um)}));
    return std::clamp(kImposterScoreScale * params_.seg_threshold * rng.beta(2, 5), 0.0, 1.0);
  }

  std::vector<Candidate> detect_plane(double plane_offset_um) const override {
    if (!std::isfinite(plane_offset_um))
      throw Error(ErrorCode::invalid_geometry, "non-finite plane offset");
    std::vector<Candidate> raw;
    for (std::size_t i = 0; i < mitoses_.size(); ++i) {
      const double s = seg_score_of_mitosis(i, plane_offset_um);
      if (s >= params_.seg_threshold)
        raw.push_back(Candidate{"", jitter(mitoses_[i].pos, "jitter_gt", i, plane_offset_um),
                                plane_offset_um, s, CandidateSource::synthetic, ""});
    }
    for (std::size_t j = 0; j < imposters_.size(); ++j) {
      const double s = seg_score_of_imposter(j, plane_offset_um);
      if (s >= params_.seg_threshold)
        raw.push_back(Candidate{"", jitter(imposters_[j], "jitter_imp", j, plane_offset_um),
                                plane_offset_um, s, CandidateSource::synthetic, ""});
    }
    return finalize_plane(raw, plane_offset_um);
  }

  ScoreVector score_patch(const PointUm& pos, double plane_offset_um,
                          const std::vector<std::string>& model_ids) const override {
    ScoreVector sv;
    sv.model_ids = model_ids;
    sv.scores.reserve(model_ids.size());

    const auto [kind, idx] = nearest_object(pos);
    for (const auto& model : model_ids) {
      const int64_t mkey = static_cast<int64_t>(fnv1a64(model));
      double s;
      if (kind == ObjectKind::mitosis) {
        const double g =
            defocus_response(plane_offset_um - mitoses_[idx].depth_um, params_.sigma_um);
        s = params_.base_detectability * g;
        if (params_.noise_sd > 0.0) {
          Rng rng(derive_seed(seed_, "cnn_gt",
                              {static_cast<int64_t>(idx), plane_key(plane_offset_um), mkey}));
          s += params_.noise_sd * rng.normal();
        }
      } else if (kind == ObjectKind::imposter) {
        Rng rng(derive_seed(seed_, "cnn_imp",
                            {static_cast<int64_t>(idx), plane_key(plane_offset_um), mkey}));
        s = kImposterScoreScale * params_.seg_threshold * rng.beta(2, 5);
      } else {
        Rng rng(derive_seed(seed_, "cnn_bg",
                            {static_cast<int64_t>(std::llround(pos.x_um * 100.0)),
                             static_cast<int64_t>(std::llround(pos.y_um * 100.0)),
                             plane_key(plane_offset_um), mkey}));
        s = 0.05 * rng.uniform01();
      }
      sv.scores.push_back(std::clamp(s, 0.0, 1.0));
    }
    return sv;
  }

 private:
  enum class ObjectKind { mitosis, imposter, background };

  std::pair<ObjectKind, std::size_t> nearest_object(const PointUm& pos) const {
    double best = kDefaultMergeRadiusUm;  // association radius
    ObjectKind kind = ObjectKind::background;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < mitoses_.size(); ++i) {
      const double d = distance_um(pos, mitoses_[i].pos);
      if (d < best) {
        best = d;
        kind = ObjectKind::mitosis;
        idx = i;
      }
    }
    for (std::size_t j = 0; j < imposters_.size(); ++j) {
      const double d = distance_um(pos, imposters_[j]);
      if (d < best) {
        best = d;
        kind = ObjectKind::imposter;
        idx = j;
      }
    }
    return {kind, idx};
  }

  PointUm jitter(const PointUm& p, const char* tag, std::size_t obj, double plane) const {
    Rng rng(derive_seed(seed_, tag, {static_cast<int64_t>(obj), plane_key(plane)}));
    const double dx = kLocalizationJitterUm * rng.normal();
    const double dy = kLocalizationJitterUm * rng.normal();
    return PointUm{std::clamp(p.x_um + dx, 0.0, slide_w_um_),
                   std::clamp(p.y_um + dy, 0.0, slide_h_um_)};
  }

  std::vector<Candidate> finalize_plane(std::vector<Candidate>& raw, double plane) const {
    auto merged = merge_candidates(raw, kDefaultMergeRadiusUm);
    std::vector<Candidate> out;
    out.reserve(merged.size());
    const std::string prefix = "p" + std::to_string(plane_key(plane)) + "_c";
    for (std::size_t k = 0; k < merged.size(); ++k) {
      Candidate c = merged[k].rep;
      c.id = prefix + std::to_string(k);
      out.push_back(std::move(c));
    }
    return out;
  }

  std::vector<GroundTruthMitosis> mitoses_;
  std::vector<PointUm> imposters_;
  double slide_w_um_;
  double slide_h_um_;
  DefocusParams params_;
  uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Raster detector over a rendered tile store
// ---------------------------------------------------------------------------

class RasterDetector final : public Detector {
 public:
  RasterDetector(std::shared_ptr<const StoreHandle> store, DefocusParams params, uint64_t seed,
                 int halo_px = 64)
      : store_(std::move(store)), params_(params), seed_(seed), halo_px_(halo_px) {
    validate_defocus(params_);
  }

  std::vector<Candidate> detect_plane(double plane_offset_um) const override {
    const auto& m = store_->manifest();
    if (!m.plane_index(plane_offset_um))
      throw Error(ErrorCode::store, "no plane at offset " + std::to_string(plane_offset_um));

    StoreManifest one_plane = m;  // plan over a single plane
    one_plane.planes = {PlaneEntry{plane_offset_um, ""}};
    one_plane.profile.plane_offsets_um = {plane_offset_um};
    one_plane.profile.interplane_um.reset();
    const auto plan = plan_tiles(one_plane, m.tile_size_px, halo_px_);

    std::vector<std::vector<Candidate>> per_tile;
    per_tile.reserve(plan.size());
    for (const auto& spec : plan) {
      TileSpec s = spec;
      s.plane_offset_um = plane_offset_um;
      per_tile.push_back(detect_tile(s));
    }
    auto stripped = strip_halo_duplicates(per_tile, kDefaultMergeRadiusUm);
    auto merged = merge_candidates(stripped, kDefaultMergeRadiusUm);
    std::vector<Candidate> out;
    const std::string prefix = "r" + std::to_string(plane_key(plane_offset_um)) + "_c";
    for (std::size_t k = 0; k < merged.size(); ++k) {
      Candidate c = merged[k].rep;
      c.id = prefix + std::to_string(k);
      out.push_back(std::move(c));
    }
    return out;
  }

  ScoreVector score_patch(const PointUm& pos, double plane_offset_um,
                          const std::vector<std::string>& model_ids) const override {
    const auto& m = store_->manifest();
    const double r_um = kDefaultMergeRadiusUm;
    const int x0 = std::max(0, static_cast<int>((pos.x_um - r_um) / m.mpp));
    const int y0 = std::max(0, static_cast<int>((pos.y_um - r_um) / m.mpp));
    const int x1 = std::min(m.width_px, static_cast<int>((pos.x_um + r_um) / m.mpp) + 1);
    const int y1 = std::min(m.height_px, static_cast<int>((pos.y_um + r_um) / m.mpp) + 1);
    if (x1 <= x0 || y1 <= y0) throw Error(ErrorCode::store, "score_patch out of bounds");
    const TileImage win = store_->read_region(plane_offset_um, x0, y0, x1 - x0, y1 - y0);

    double peak = 0.0;
    const double maxv = win.max_value();
    for (uint16_t v : win.samples) peak = std::max(peak, v / maxv);

    ScoreVector sv;
    sv.model_ids = model_ids;
    for (const auto& model : model_ids) {
      double s = peak;
      if (params_.noise_sd > 0.0) {
        Rng rng(derive_seed(seed_, "rcnn",
                            {static_cast<int64_t>(std::llround(pos.x_um * 100.0)),
                             static_cast<int64_t>(std::llround(pos.y_um * 100.0)),
                             plane_key(plane_offset_um),
                             static_cast<int64_t>(fnv1a64(model))}));
        s += params_.noise_sd * rng.normal();
      }
      sv.scores.push_back(std::clamp(s, 0.0, 1.0));
    }
    return sv;
  }

 private:
  std::vector<Candidate> detect_tile(const TileSpec& spec) const {
    const TileImage tile = store_->read_tile(spec);
    const double maxv = tile.max_value();
    std::vector<Candidate> found;
    const std::string tile_id =
        "t_" + std::to_string(spec.col) + "_" + std::to_string(spec.row);
    for (int y = 1; y + 1 < tile.height; ++y) {
      for (int x = 1; x + 1 < tile.width; ++x) {
        const double v = tile.at(x, y) / maxv;
        if (v < params_.seg_threshold) continue;
        bool is_peak = true;
        for (int dy = -1; dy <= 1 && is_peak; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            const double w = tile.at(x + dx, y + dy) / maxv;
            if (w > v || (w == v && (dy < 0 || (dy == 0 && dx < 0)))) {
              is_peak = false;  // plateau ties resolve to the top-left pixel
              break;
            }
          }
        if (!is_peak) continue;

        // intensity-weighted centroid over a 5x5 patch
        double wsum = 0.0, cx = 0.0, cy = 0.0;
        for (int dy = -2; dy <= 2; ++dy)
          for (int dx = -2; dx <= 2; ++dx) {
            const int xx = std::clamp(x + dx, 0, tile.width - 1);
            const int yy = std::clamp(y + dy, 0, tile.height - 1);
            const double w = tile.at(xx, yy) / maxv;
            wsum += w;
            cx += w * xx;
            cy += w * yy;
          }
        const PointUm pos =
            wsum > 0.0 ? tile.transform.pixel_corner_um(cx / wsum + 0.5, cy / wsum + 0.5)
                       : tile.transform.pixel_center_um(x, y);
        found.push_back(Candidate{"", pos, spec.plane_offset_um, v, CandidateSource::synthetic,
                                  tile_id});
      }
    }
    return found;
  }

  std::shared_ptr<const StoreHandle> store_;
  DefocusParams params_;
  uint64_t seed_;
  int halo_px_;
};

// ---------------------------------------------------------------------------
// External score-exchange adapter (JSON Lines)
// ---------------------------------------------------------------------------

// One line per (candidate, plane, model):
//   {"x_um":..., "y_um":..., "plane_um":..., "model":"...", "seg":..., "score":...}
// Candidate files reuse the schema without the model/score fields.
struct ScoreRecord {
  double x_um = 0.0;
  double y_um = 0.0;
  double plane_um = 0.0;
  std::string model;  // empty for candidate-only records
  double seg = 0.0;
  double score = 0.0;
  bool has_score = false;
};

inline std::vector<ScoreRecord> read_score_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::adapter, "cannot open score file: " + path);
  std::vector<ScoreRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      ScoreRecord r;
      r.x_um = j.at("x_um").get<double>();
      r.y_um = j.at("y_um").get<double>();
      r.plane_um = j.at("plane_um").get<double>();
      r.seg = j.value("seg", 0.0);
      r.model = j.value("model", std::string{});
      if (j.contains("score")) {
        r.score = j.at("score").get<double>();
        r.has_score = true;
      }
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::adapter, path + ": record " + std::to_string(line_no) +
                                          " malformed: " + e.what());
    }
  }
  return records;
}

class ExternalScoreAdapter final : public Detector {
 public:
  // pos_tolerance_um: "same candidate" radius for score lookup, one working
  // pixel by default.
  explicit ExternalScoreAdapter(std::vector<ScoreRecord> records, double pos_tolerance_um = 0.25)
      : records_(std::move(records)), tol_um_(pos_tolerance_um) {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      const CandKey ck{quant(r.x_um), quant(r.y_um), plane_key(r.plane_um)};
      auto [it, inserted] = cand_order_.try_emplace(ck, cand_list_.size());
      if (inserted) cand_list_.push_back(i);
      if (r.has_score) score_index_[score_key(ck, r.model)] = i;
    }
  }

  static ExternalScoreAdapter from_file(const std::string& path, double pos_tolerance_um = 0.25) {
    return ExternalScoreAdapter(read_score_records(path), pos_tolerance_um);
  }

  std::vector<Candidate> detect_plane(double plane_offset_um) const override {
    std::vector<Candidate> raw;
    std::vector<std::size_t> order;
    for (std::size_t pos = 0; pos < cand_list_.size(); ++pos) {
      const auto& r = records_[cand_list_[pos]];
      if (plane_key(r.plane_um) != plane_key(plane_offset_um)) continue;
      raw.push_back(Candidate{"e" + std::to_string(cand_list_[pos]), PointUm{r.x_um, r.y_um},
                              r.plane_um, r.seg, CandidateSource::external, ""});
      order.push_back(pos);
    }
    // within-plane dedup, keeping first-appearance order of representatives
    auto merged = merge_candidates(raw, kDefaultMergeRadiusUm);
    std::vector<std::pair<std::size_t, Candidate>> keyed;
    for (const auto& m : merged) {
      std::size_t first = std::numeric_limits<std::size_t>::max();
      for (const auto& member : m.members)
        for (std::size_t k = 0; k < raw.size(); ++k)
          if (raw[k].id == member.id) first = std::min(first, order[k]);
      keyed.emplace_back(first, m.rep);
    }
    std::sort(keyed.begin(), keyed.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<Candidate> out;
    for (auto& [k, c] : keyed) out.push_back(std::move(c));
    return out;
  }

  ScoreVector score_patch(const PointUm& pos, double plane_offset_um,
                          const std::vector<std::string>& model_ids) const override {
    ScoreVector sv;
    sv.model_ids = model_ids;
    for (const auto& model : model_ids) {
      const ScoreRecord* found = lookup(pos, plane_offset_um, model);
      if (!found)
        throw Error(ErrorCode::adapter,
                    "missing score for (" + std::to_string(pos.x_um) + ", " +
                        std::to_string(pos.y_um) + ") plane " + std::to_string(plane_offset_um) +
                        " model " + model);
      sv.scores.push_back(found->score);
    }
    return sv;
  }

 private:
  struct CandKey {
    int64_t qx, qy, plane;
    bool operator==(const CandKey&) const = default;
  };
  struct CandKeyHash {
    std::size_t operator()(const CandKey& k) const {
      return static_cast<std::size_t>(
          splitmix64(static_cast<uint64_t>(k.qx) ^ splitmix64(static_cast<uint64_t>(k.qy)) ^
                     splitmix64(static_cast<uint64_t>(k.plane))));
    }
  };

  int64_t quant(double um) const { return static_cast<int64_t>(std::floor(um / tol_um_)); }

  static std::string score_key_str(int64_t qx, int64_t qy, int64_t plane, const std::string& model) {
    return std::to_string(qx) + "|" + std::to_string(qy) + "|" + std::to_string(plane) + "|" + model;
  }
  std::string score_key(const CandKey& k, const std::string& model) const {
    return score_key_str(k.qx, k.qy, k.plane, model);
  }

  const ScoreRecord* lookup(const PointUm& pos, double plane, const std::string& model) const {
    const int64_t pk = plane_key(plane);
    const ScoreRecord* best = nullptr;
    double best_d = tol_um_;
    // scan the 3x3 quantized neighborhood for the closest matching record
    for (int64_t dy = -1; dy <= 1; ++dy) {
      for (int64_t dx = -1; dx <= 1; ++dx) {
        auto it = score_index_.find(
            score_key_str(quant(pos.x_um) + dx, quant(pos.y_um) + dy, pk, model));
        if (it == score_index_.end()) continue;
        const ScoreRecord& r = records_[it->second];
        const double d = distance_um(pos, PointUm{r.x_um, r.y_um});
        if (d <= best_d) {
          best_d = d;
          best = &r;
        }
      }
    }
    return best;
  }

  std::vector<ScoreRecord> records_;
  double tol_um_;
  std::unordered_map<CandKey, std::size_t, CandKeyHash> cand_order_;
  std::vector<std::size_t> cand_list_;
  std::unordered_map<std::string, std::size_t> score_index_;
};

}  // namespace zmd
