#pragma once

// Cross-plane candidate merging. Two candidates closer than the merge radius
// (default 2.5 µm, i.e. 10 px at 0.25 mpp) are duplicates; clusters are the
// connected components of the distance-threshold graph, which is the only
// reading of the pairwise rule that does not depend on input order. Discovery
// uses a uniform grid of cell size = radius plus union-find, O(n) expected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>
#include <vector>

#include "zmd/candidate.hpp"

namespace zmd {

inline constexpr double kDefaultMergeRadiusUm = 2.5;

struct MergedCandidate {
  Candidate rep;                     // member with max seg_score (deterministic tie-break)
  std::vector<Candidate> members;    // whole cluster, canonically sorted
  std::set<double> planes_present;   // plane offsets seen in the cluster
};

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (size_[a] < size_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> size_;
};

// Candidate ordering used for representative tie-breaks and canonical output.
inline bool candidate_tuple_less(const Candidate& a, const Candidate& b) {
  if (a.plane_offset_um != b.plane_offset_um) return a.plane_offset_um < b.plane_offset_um;
  if (a.pos.x_um != b.pos.x_um) return a.pos.x_um < b.pos.x_um;
  if (a.pos.y_um != b.pos.y_um) return a.pos.y_um < b.pos.y_um;
  return a.id < b.id;
}

inline bool better_representative(const Candidate& a, const Candidate& b) {
  if (a.seg_score != b.seg_score) return a.seg_score > b.seg_score;
  return candidate_tuple_less(a, b);
}

}  // namespace detail

inline std::vector<MergedCandidate> merge_candidates(const std::vector<Candidate>& cands,
                                                     double radius_um = kDefaultMergeRadiusUm) {
  if (!(radius_um > 0.0)) throw Error(ErrorCode::invalid_geometry, "merge radius must be positive");
  std::vector<MergedCandidate> out;
  if (cands.empty()) return out;

  const std::size_t n = cands.size();
  const double cell = radius_um;
  const double r2 = radius_um * radius_um;

  auto cell_key = [cell](const PointUm& p) {
    const int64_t cx = static_cast<int64_t>(std::floor(p.x_um / cell));
    const int64_t cy = static_cast<int64_t>(std::floor(p.y_um / cell));
    return (static_cast<uint64_t>(cx) << 32) ^ static_cast<uint64_t>(cy & 0xFFFFFFFFll);
  };

  std::unordered_map<uint64_t, std::vector<std::size_t>> grid;
  grid.reserve(n * 2);
  for (std::size_t i = 0; i < n; ++i) grid[cell_key(cands[i].pos)].push_back(i);

  detail::UnionFind uf(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = cands[i].pos;
    const int64_t cx = static_cast<int64_t>(std::floor(p.x_um / cell));
    const int64_t cy = static_cast<int64_t>(std::floor(p.y_um / cell));
    for (int64_t dy = -1; dy <= 1; ++dy) {
      for (int64_t dx = -1; dx <= 1; ++dx) {
        const uint64_t key = (static_cast<uint64_t>(cx + dx) << 32) ^
                             static_cast<uint64_t>((cy + dy) & 0xFFFFFFFFll);
        auto it = grid.find(key);
        if (it == grid.end()) continue;
        for (std::size_t j : it->second) {
          if (j <= i) continue;
          const double ddx = p.x_um - cands[j].pos.x_um;
          const double ddy = p.y_um - cands[j].pos.y_um;
          if (ddx * ddx + ddy * ddy < r2) uf.unite(i, j);  // strictly-less rule
        }
      }
    }
  }

  std::unordered_map<std::size_t, std::size_t> root_to_cluster;
  std::vector<MergedCandidate> clusters;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t root = uf.find(i);
    auto [it, inserted] = root_to_cluster.try_emplace(root, clusters.size());
    if (inserted) clusters.emplace_back();
    clusters[it->second].members.push_back(cands[i]);
  }

  for (auto& c : clusters) {
    std::sort(c.members.begin(), c.members.end(), detail::candidate_tuple_less);
    c.rep = *std::min_element(c.members.begin(), c.members.end(),
                              detail::better_representative);
    for (const auto& m : c.members) c.planes_present.insert(m.plane_offset_um);
  }

  std::sort(clusters.begin(), clusters.end(), [](const MergedCandidate& a, const MergedCandidate& b) {
    if (a.rep.pos.y_um != b.rep.pos.y_um) return a.rep.pos.y_um < b.rep.pos.y_um;
    if (a.rep.pos.x_um != b.rep.pos.x_um) return a.rep.pos.x_um < b.rep.pos.x_um;
    return a.rep.id < b.rep.id;
  });
  return clusters;
}

// Removes duplicates caused by tile halos: same-plane candidates from
// overlapping tiles collapse to one representative per cluster. Cross-plane
// merging stays with merge_candidates.
inline std::vector<Candidate> strip_halo_duplicates(
    const std::vector<std::vector<Candidate>>& per_tile_candidates,
    double radius_um = kDefaultMergeRadiusUm) {
  std::map<int64_t, std::vector<Candidate>> by_plane;  // ordered for determinism
  for (const auto& tile : per_tile_candidates)
    for (const auto& c : tile)
      by_plane[static_cast<int64_t>(std::llround(c.plane_offset_um * 1e6))].push_back(c);

  std::vector<Candidate> out;
  for (auto& [plane_key, cands] : by_plane) {
    (void)plane_key;
    for (const auto& cluster : merge_candidates(cands, radius_um)) out.push_back(cluster.rep);
  }
  return out;
}

}  // namespace zmd
