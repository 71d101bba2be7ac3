#pragma once

// Score fusion: the plane x model score tensor of a merged candidate is
// classified by a from-scratch random forest (CART splits, Gini gain,
// per-tree bootstrap, seeded feature subsampling). Everything is reproducible
// from (data, hyper, seed): bootstrap rows for tree t are a pure function of
// (seed, t), split candidates are midpoints between consecutive sorted unique
// feature values, and Gini ties break by (feature index, threshold) ascending.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "zmd/detector.hpp"
#include "zmd/parallel.hpp"
#include "zmd/rng.hpp"
#include "zmd/zmerge.hpp"

namespace zmd {

// Index meaning of a feature vector: values are laid out plane-major, so
// values[p*M + m] is (plane_offsets_um[p], model_ids[m]).
struct FeatureLayout {
  std::vector<double> plane_offsets_um;
  std::vector<std::string> model_ids;

  std::size_t size() const { return plane_offsets_um.size() * model_ids.size(); }
  bool operator==(const FeatureLayout&) const = default;
};

struct FeatureVector {
  std::vector<double> values;  // in [0,1], length layout.size()
  FeatureLayout layout;
};

struct LabeledSet {
  std::vector<FeatureVector> features;
  std::vector<int> labels;  // 1 mitosis, 0 non-mitosis
  FeatureLayout layout;
};

struct ForestHyper {
  int n_trees = 100;
  int max_depth = 12;
  int min_leaf = 2;
  int features_per_split = 0;  // 0 -> ceil(sqrt(P*M))
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double leaf_fraction = 0.0;  // positive-class fraction at leaves
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
};

struct ForestModel {
  std::vector<Tree> trees;
  ForestHyper hyper;
  uint64_t seed = 0;
  FeatureLayout layout;
  double decision_threshold = 0.5;
};

// ---------------------------------------------------------------------------
// Feature assembly
// ---------------------------------------------------------------------------

inline FeatureVector assemble_features(const MergedCandidate& mc, const Detector& detector,
                                       const std::vector<double>& plane_offsets,
                                       const std::vector<std::string>& model_ids) {
  FeatureVector fv;
  fv.layout.plane_offsets_um = plane_offsets;
  fv.layout.model_ids = model_ids;
  fv.values.reserve(fv.layout.size());
  for (double plane : plane_offsets) {
    const ScoreVector sv = detector.score_patch(mc.rep.pos, plane, model_ids);
    if (sv.scores.size() != model_ids.size())
      throw Error(ErrorCode::contract, "score_patch returned an incomplete tensor");
    fv.values.insert(fv.values.end(), sv.scores.begin(), sv.scores.end());
  }
  return fv;
}

// Calibration-set construction: a merged candidate is a positive example when
// it lies within the match cutoff of any ground-truth mitosis, a negative
// otherwise.
inline LabeledSet build_labeled_set(const std::vector<MergedCandidate>& merged,
                                    const Detector& detector,
                                    const std::vector<double>& plane_offsets,
                                    const std::vector<std::string>& model_ids,
                                    const std::vector<PointUm>& ground_truth,
                                    double cutoff_um) {
  LabeledSet set;
  set.layout.plane_offsets_um = plane_offsets;
  set.layout.model_ids = model_ids;
  for (const auto& mc : merged) {
    set.features.push_back(assemble_features(mc, detector, plane_offsets, model_ids));
    bool near_gt = false;
    for (const auto& gt : ground_truth)
      if (distance_um(mc.rep.pos, gt) <= cutoff_um) {
        near_gt = true;
        break;
      }
    set.labels.push_back(near_gt ? 1 : 0);
  }
  return set;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// Bootstrap rows for tree t; exposed so tests can reconstruct the exact
// training multiset.
inline std::vector<std::size_t> bootstrap_indices(uint64_t seed, int tree, std::size_t n) {
  Rng rng(derive_seed(seed, "bootstrap", {tree}));
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = rng.uniform_index(n);
  return idx;
}

namespace detail {

struct SplitChoice {
  bool valid = false;
  double gain = -1.0;
  int feature = -1;
  double threshold = 0.0;
};

inline double gini(std::size_t pos, std::size_t total) {
  if (total == 0) return 0.0;
  const double p = static_cast<double>(pos) / static_cast<double>(total);
  return 1.0 - p * p - (1.0 - p) * (1.0 - p);
}

class TreeBuilder {
 public:
  TreeBuilder(const LabeledSet& data, const ForestHyper& hyper, int mtry, Rng& rng)
      : data_(data), hyper_(hyper), mtry_(mtry), rng_(rng) {}

  Tree build(std::vector<std::size_t> rows) {
    Tree tree;
    grow(tree, std::move(rows), 0);
    return tree;
  }

 private:
  int grow(Tree& tree, std::vector<std::size_t> rows, int depth) {
    const std::size_t pos =
        static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [&](std::size_t r) {
          return data_.labels[r] == 1;
        }));
    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{});

    const bool pure = pos == 0 || pos == rows.size();
    if (depth >= hyper_.max_depth || pure ||
        rows.size() < 2 * static_cast<std::size_t>(hyper_.min_leaf)) {
      make_leaf(tree, node_id, pos, rows.size());
      return node_id;
    }

    const SplitChoice split = best_split(rows);
    if (!split.valid) {
      make_leaf(tree, node_id, pos, rows.size());
      return node_id;
    }

    std::vector<std::size_t> left, right;
    for (std::size_t r : rows)
      (data_.features[r].values[static_cast<std::size_t>(split.feature)] < split.threshold
           ? left
           : right)
          .push_back(r);
    rows.clear();
    rows.shrink_to_fit();

    tree.nodes[static_cast<std::size_t>(node_id)].feature = split.feature;
    tree.nodes[static_cast<std::size_t>(node_id)].threshold = split.threshold;
    const int l = grow(tree, std::move(left), depth + 1);  // left before right, DFS
    const int r = grow(tree, std::move(right), depth + 1);
    tree.nodes[static_cast<std::size_t>(node_id)].left = l;
    tree.nodes[static_cast<std::size_t>(node_id)].right = r;
    return node_id;
  }

  void make_leaf(Tree& tree, int node_id, std::size_t pos, std::size_t total) {
    auto& n = tree.nodes[static_cast<std::size_t>(node_id)];
    n.feature = -1;
    n.leaf_fraction = total ? static_cast<double>(pos) / static_cast<double>(total) : 0.0;
  }

  SplitChoice best_split(const std::vector<std::size_t>& rows) {
    const std::size_t dims = data_.layout.size();
    // partial Fisher-Yates, then ascending order so gain ties resolve to the
    // smallest feature index
    std::vector<int> features(dims);
    std::iota(features.begin(), features.end(), 0);
    const std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(mtry_), dims);
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng_.uniform_index(dims - i);
      std::swap(features[i], features[j]);
    }
    features.resize(take);
    std::sort(features.begin(), features.end());

    const std::size_t total = rows.size();
    const std::size_t total_pos =
        static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [&](std::size_t r) {
          return data_.labels[r] == 1;
        }));
    const double parent = gini(total_pos, total);

    SplitChoice best;
    std::vector<std::pair<double, int>> vals;  // (value, label)
    vals.reserve(total);
    for (int f : features) {
      vals.clear();
      for (std::size_t r : rows)
        vals.emplace_back(data_.features[r].values[static_cast<std::size_t>(f)], data_.labels[r]);
      std::sort(vals.begin(), vals.end());

      std::size_t left_n = 0, left_pos = 0;
      for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
        ++left_n;
        left_pos += static_cast<std::size_t>(vals[i].second);
        if (vals[i].first == vals[i + 1].first) continue;  // midpoints need distinct values
        const std::size_t right_n = total - left_n;
        if (left_n < static_cast<std::size_t>(hyper_.min_leaf) ||
            right_n < static_cast<std::size_t>(hyper_.min_leaf))
          continue;
        const double threshold = vals[i].first + 0.5 * (vals[i + 1].first - vals[i].first);
        const double child =
            (static_cast<double>(left_n) * gini(left_pos, left_n) +
             static_cast<double>(right_n) * gini(total_pos - left_pos, right_n)) /
            static_cast<double>(total);
        const double gain = parent - child;
        if (gain <= 1e-15) continue;
        const bool improves =
            !best.valid || gain > best.gain ||
            (gain == best.gain &&
             (f < best.feature || (f == best.feature && threshold < best.threshold)));
        if (improves) {
          best.valid = true;
          best.gain = gain;
          best.feature = f;
          best.threshold = threshold;
        }
      }
    }
    return best;
  }

  const LabeledSet& data_;
  const ForestHyper& hyper_;
  int mtry_;
  Rng& rng_;
};

}  // namespace detail

inline void validate_labeled_set(const LabeledSet& data) {
  if (data.features.size() != data.labels.size())
    throw Error(ErrorCode::training, "features/labels length mismatch");
  if (data.features.empty()) throw Error(ErrorCode::training, "empty training set");
  const std::size_t dims = data.layout.size();
  if (dims == 0) throw Error(ErrorCode::training, "empty feature layout");
  for (const auto& fv : data.features) {
    if (fv.values.size() != dims)
      throw Error(ErrorCode::training, "feature vector length does not match layout");
    if (!(fv.layout == data.layout))
      throw Error(ErrorCode::training, "feature vector layout differs from dataset layout");
  }
  const bool has_pos = std::find(data.labels.begin(), data.labels.end(), 1) != data.labels.end();
  const bool has_neg = std::find(data.labels.begin(), data.labels.end(), 0) != data.labels.end();
  if (!has_pos || !has_neg)
    throw Error(ErrorCode::training, "training needs at least one example of each class");
}

inline ForestModel train_forest(const LabeledSet& data, const ForestHyper& hyper, uint64_t seed,
                                int workers = 1) {
  validate_labeled_set(data);
  if (hyper.n_trees < 1) throw Error(ErrorCode::training, "n_trees must be >= 1");
  if (hyper.max_depth < 1) throw Error(ErrorCode::training, "max_depth must be >= 1");
  if (hyper.min_leaf < 1) throw Error(ErrorCode::training, "min_leaf must be >= 1");

  const std::size_t dims = data.layout.size();
  const int mtry = hyper.features_per_split > 0
                       ? hyper.features_per_split
                       : static_cast<int>(std::ceil(std::sqrt(static_cast<double>(dims))));

  ForestModel model;
  model.hyper = hyper;
  model.seed = seed;
  model.layout = data.layout;
  model.trees.resize(static_cast<std::size_t>(hyper.n_trees));

  parallel_for(static_cast<std::size_t>(hyper.n_trees), workers, [&](std::size_t t) {
    Rng tree_rng(derive_seed(seed, "tree", {static_cast<int64_t>(t)}));
    detail::TreeBuilder builder(data, hyper, mtry, tree_rng);
    model.trees[t] = builder.build(bootstrap_indices(seed, static_cast<int>(t), data.features.size()));
  });
  return model;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

inline int tree_leaf_index(const Tree& tree, const FeatureVector& fv) {
  int node = 0;
  while (tree.nodes[static_cast<std::size_t>(node)].feature >= 0) {
    const auto& n = tree.nodes[static_cast<std::size_t>(node)];
    node = fv.values[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right;
  }
  return node;
}

inline double predict_proba(const ForestModel& model, const FeatureVector& fv) {
  if (!(fv.layout == model.layout))
    throw Error(ErrorCode::contract, "feature layout does not match model layout");
  if (model.trees.empty()) throw Error(ErrorCode::contract, "empty forest");
  double acc = 0.0;
  for (const auto& tree : model.trees)
    acc += tree.nodes[static_cast<std::size_t>(tree_leaf_index(tree, fv))].leaf_fraction;
  return acc / static_cast<double>(model.trees.size());
}

inline bool predict_class(const ForestModel& model, const FeatureVector& fv) {
  return predict_proba(model, fv) >= model.decision_threshold;
}

// Full refit on the calibration slide's features; the caller keeps one model
// per (scanner, layer-mode) condition.
inline ForestModel recalibrate(const ForestHyper& hyper, const LabeledSet& calib, uint64_t seed,
                               int workers = 1) {
  return train_forest(calib, hyper, seed, workers);
}

// Alternative recalibration: keep the trees, tune only the decision threshold
// (best F1 on the calibration set, lowest threshold on ties).
inline ForestModel tune_threshold(ForestModel model, const LabeledSet& calib) {
  validate_labeled_set(calib);
  std::vector<double> probs;
  probs.reserve(calib.features.size());
  for (const auto& fv : calib.features) probs.push_back(predict_proba(model, fv));

  std::vector<double> cuts = probs;
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  double best_f1 = -1.0, best_cut = model.decision_threshold;
  for (double cut : cuts) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const bool hit = probs[i] >= cut;
      if (hit && calib.labels[i] == 1) ++tp;
      if (hit && calib.labels[i] == 0) ++fp;
      if (!hit && calib.labels[i] == 1) ++fn;
    }
    const double denom = 2.0 * tp + fp + fn;
    const double f1 = denom > 0 ? 2.0 * tp / denom : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_cut = cut;
    }
  }
  model.decision_threshold = best_cut;
  return model;
}

// ---------------------------------------------------------------------------
// Serialization (versioned JSON document)
// ---------------------------------------------------------------------------

inline nlohmann::json forest_to_json(const ForestModel& model) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& tree : model.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : tree.nodes) {
      if (n.feature < 0)
        nodes.push_back({{"p", n.leaf_fraction}});
      else
        nodes.push_back({{"f", n.feature}, {"t", n.threshold}, {"l", n.left}, {"r", n.right}});
    }
    trees.push_back(std::move(nodes));
  }
  return nlohmann::json{
      {"format", "zmd-forest"},
      {"version", 1},
      {"seed", model.seed},
      {"decision_threshold", model.decision_threshold},
      {"hyper",
       {{"n_trees", model.hyper.n_trees},
        {"max_depth", model.hyper.max_depth},
        {"min_leaf", model.hyper.min_leaf},
        {"features_per_split", model.hyper.features_per_split}}},
      {"layout",
       {{"plane_offsets_um", model.layout.plane_offsets_um},
        {"model_ids", model.layout.model_ids}}},
      {"trees", std::move(trees)}};
}

inline std::string serialize_forest(const ForestModel& model) {
  return forest_to_json(model).dump(2) + "\n";
}

inline ForestModel forest_from_json(const nlohmann::json& j) {
  ForestModel model;
  try {
    if (j.at("format").get<std::string>() != "zmd-forest" || j.at("version").get<int>() != 1)
      throw Error(ErrorCode::contract, "unsupported forest document");
    model.seed = j.at("seed").get<uint64_t>();
    model.decision_threshold = j.at("decision_threshold").get<double>();
    const auto& h = j.at("hyper");
    model.hyper.n_trees = h.at("n_trees").get<int>();
    model.hyper.max_depth = h.at("max_depth").get<int>();
    model.hyper.min_leaf = h.at("min_leaf").get<int>();
    model.hyper.features_per_split = h.at("features_per_split").get<int>();
    const auto& l = j.at("layout");
    model.layout.plane_offsets_um = l.at("plane_offsets_um").get<std::vector<double>>();
    model.layout.model_ids = l.at("model_ids").get<std::vector<std::string>>();
    for (const auto& tj : j.at("trees")) {
      Tree tree;
      for (const auto& nj : tj) {
        TreeNode n;
        if (nj.contains("f")) {
          n.feature = nj.at("f").get<int>();
          n.threshold = nj.at("t").get<double>();
          n.left = nj.at("l").get<int>();
          n.right = nj.at("r").get<int>();
          if (n.feature >= static_cast<int>(model.layout.size()))
            throw Error(ErrorCode::contract, "split feature index out of layout range");
        } else {
          n.leaf_fraction = nj.at("p").get<double>();
          if (n.leaf_fraction < 0.0 || n.leaf_fraction > 1.0)
            throw Error(ErrorCode::contract, "leaf fraction out of [0,1]");
        }
        tree.nodes.push_back(n);
      }
      model.trees.push_back(std::move(tree));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::contract, std::string("malformed forest document: ") + e.what());
  }
  if (model.trees.empty()) throw Error(ErrorCode::contract, "forest document has no trees");
  return model;
}

inline ForestModel parse_forest(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::contract, std::string("forest document parse error: ") + e.what());
  }
  return forest_from_json(j);
}

}  // namespace zmd
