#pragma once

#include <string>
#include <vector>

#include "zmd/geometry.hpp"

namespace zmd {

enum class CandidateSource { external, synthetic };

inline const char* candidate_source_name(CandidateSource s) {
  return s == CandidateSource::external ? "external" : "synthetic";
}

// Stage-1 output: one proposed mitosis location on one focal plane.
struct Candidate {
  std::string id;
  PointUm pos;
  double plane_offset_um = 0.0;
  double seg_score = 0.0;  // in [0,1]
  CandidateSource source = CandidateSource::synthetic;
  std::string tile_id;  // originating tile, when detection was tiled
};

// Per-candidate verification scores, one per CNN model id.
struct ScoreVector {
  std::vector<std::string> model_ids;
  std::vector<double> scores;  // in [0,1], parallel to model_ids
};

}  // namespace zmd
