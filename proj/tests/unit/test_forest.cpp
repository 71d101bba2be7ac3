#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>

#include "zmd/forest.hpp"
#include "zmd/rng.hpp"

using namespace zmd;

namespace {

FeatureLayout layout_1d() {
  return FeatureLayout{{0.0}, {"m1"}};
}

LabeledSet one_dim_set(const std::vector<double>& xs, const std::vector<int>& labels) {
  LabeledSet s;
  s.layout = layout_1d();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    s.features.push_back(FeatureVector{{xs[i]}, s.layout});
    s.labels.push_back(labels[i]);
  }
  return s;
}

FeatureVector fv1(double x) { return FeatureVector{{x}, layout_1d()}; }

// Exhaustive stump oracle: every midpoint between consecutive sorted distinct
// values on the given multiset, best weighted Gini gain, ties to the lowest
// threshold.
struct StumpOracle {
  double threshold = 0.0;
  double gain = -1.0;
};

StumpOracle exhaustive_stump(const std::vector<double>& xs, const std::vector<int>& ys) {
  auto gini = [](double pos, double n) {
    if (n == 0) return 0.0;
    const double p = pos / n;
    return 1.0 - p * p - (1.0 - p) * (1.0 - p);
  };
  std::vector<std::pair<double, int>> v;
  for (std::size_t i = 0; i < xs.size(); ++i) v.emplace_back(xs[i], ys[i]);
  std::sort(v.begin(), v.end());
  const double total = static_cast<double>(v.size());
  double total_pos = 0;
  for (auto& [x, y] : v) total_pos += y;
  const double parent = gini(total_pos, total);

  StumpOracle best;
  double left_n = 0, left_pos = 0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) {
    left_n += 1;
    left_pos += v[i].second;
    if (v[i].first == v[i + 1].first) continue;
    const double thr = v[i].first + 0.5 * (v[i + 1].first - v[i].first);
    const double child = (left_n * gini(left_pos, left_n) +
                          (total - left_n) * gini(total_pos - left_pos, total - left_n)) /
                         total;
    const double gain = parent - child;
    if (gain > best.gain + 1e-15) {
      best.gain = gain;
      best.threshold = thr;
    }
  }
  return best;
}

LabeledSet separable_two_class(int n_per_class, uint64_t seed, int dims = 2, double gap = 0.2) {
  LabeledSet s;
  s.layout.plane_offsets_um = {0.0};
  for (int d = 0; d < dims; ++d) s.layout.model_ids.push_back("m" + std::to_string(d + 1));
  Rng rng(seed);
  for (int i = 0; i < n_per_class; ++i) {
    FeatureVector lo{{}, s.layout}, hi{{}, s.layout};
    for (int d = 0; d < dims; ++d) {
      lo.values.push_back(rng.uniform(0.0, 0.5 - gap / 2));
      hi.values.push_back(rng.uniform(0.5 + gap / 2, 1.0));
    }
    s.features.push_back(lo);
    s.labels.push_back(0);
    s.features.push_back(hi);
    s.labels.push_back(1);
  }
  return s;
}

}  // namespace

TEST_CASE("assemble_features builds plane-major tensors", "[forest]") {
  DefocusParams params;
  params.noise_sd = 0.0;
  SyntheticDetector det({GroundTruthMitosis{PointUm{50.0, 50.0}, 0.0}}, {}, 200, 200, params, 3);

  MergedCandidate mc;
  mc.rep = Candidate{"c0", PointUm{50.0, 50.0}, 0.0, 0.9, CandidateSource::synthetic, ""};
  mc.members = {mc.rep};

  const std::vector<double> planes{-1.2, -0.6, 0.0, 0.6, 1.2};
  const std::vector<std::string> models{"m1", "m2", "m3", "m4"};
  auto fv = assemble_features(mc, det, planes, models);
  REQUIRE(fv.values.size() == 20);

  auto fv1l = assemble_features(mc, det, {0.0}, models);
  REQUIRE(fv1l.values.size() == 4);

  // noise-free scores decay symmetrically across planes around z* = 0
  for (int m = 0; m < 4; ++m) {
    CHECK(fv.values[0 * 4 + m] == Catch::Approx(fv.values[4 * 4 + m]).margin(1e-12));  // +-1.2
    CHECK(fv.values[1 * 4 + m] == Catch::Approx(fv.values[3 * 4 + m]).margin(1e-12));  // +-0.6
    CHECK(fv.values[2 * 4 + m] > fv.values[1 * 4 + m]);
    CHECK(fv.values[1 * 4 + m] > fv.values[0 * 4 + m]);
  }
  // plane-major layout: entry p*M+m equals the per-plane score_patch value
  auto sv = det.score_patch(mc.rep.pos, -0.6, models);
  for (int m = 0; m < 4; ++m) CHECK(fv.values[1 * 4 + m] == sv.scores[static_cast<std::size_t>(m)]);
}

TEST_CASE("single-class training is rejected", "[forest]") {
  auto s = one_dim_set({0.1, 0.2, 0.3}, {1, 1, 1});
  CHECK_THROWS_AS(train_forest(s, ForestHyper{1, 1, 1, 1}, 7), Error);
}

TEST_CASE("depth-1 stump matches the exhaustive split oracle", "[forest]") {
  auto s = one_dim_set({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1});
  ForestHyper hyper{1, 1, 1, 1};

  for (uint64_t seed : {1ull, 2ull, 3ull, 5ull, 8ull, 13ull}) {
    auto idx = bootstrap_indices(seed, 0, 4);
    std::vector<double> xs;
    std::vector<int> ys;
    for (auto i : idx) {
      xs.push_back(s.features[i].values[0]);
      ys.push_back(s.labels[i]);
    }
    const bool both = std::count(ys.begin(), ys.end(), 1) > 0 &&
                      std::count(ys.begin(), ys.end(), 0) > 0;
    if (!both) continue;  // degenerate resample cannot split

    auto model = train_forest(s, hyper, seed);
    REQUIRE(model.trees.size() == 1);
    const auto& root = model.trees[0].nodes[0];
    REQUIRE(root.feature == 0);
    CHECK(root.threshold > 0.2);
    CHECK(root.threshold < 0.8);

    auto oracle = exhaustive_stump(xs, ys);
    CHECK(root.threshold == Catch::Approx(oracle.threshold).margin(1e-12));

    // training accuracy 1.0 on the original points
    for (std::size_t i = 0; i < s.features.size(); ++i)
      CHECK((predict_proba(model, s.features[i]) >= 0.5 ? 1 : 0) == s.labels[i]);

    // held-out points fall on the right sides
    CHECK(predict_proba(model, fv1(0.05)) < 0.5);
    CHECK(predict_proba(model, fv1(0.95)) > 0.5);
  }
}

TEST_CASE("training twice gives bit-identical serialization", "[forest]") {
  auto s = separable_two_class(60, 21);
  ForestHyper hyper{25, 6, 2, 0};
  auto a = serialize_forest(train_forest(s, hyper, 123));
  auto b = serialize_forest(train_forest(s, hyper, 123));
  CHECK(a == b);
  auto c = serialize_forest(train_forest(s, hyper, 124));
  CHECK(a != c);
  // worker count must not affect the result
  auto d = serialize_forest(train_forest(s, hyper, 123, /*workers=*/4));
  CHECK(a == d);
}

TEST_CASE("forest separates a 200-point fixture at >=0.99 training accuracy", "[forest]") {
  auto s = separable_two_class(100, 22);
  REQUIRE(s.features.size() == 200);
  auto model = train_forest(s, ForestHyper{}, 9);
  int correct = 0;
  for (std::size_t i = 0; i < s.features.size(); ++i)
    if ((predict_proba(model, s.features[i]) >= model.decision_threshold ? 1 : 0) == s.labels[i])
      ++correct;
  CHECK(correct >= 198);
}

TEST_CASE("serialization round trip preserves predictions", "[forest]") {
  auto s = separable_two_class(40, 23, 3);
  auto model = train_forest(s, ForestHyper{15, 8, 2, 0}, 77);
  auto text = serialize_forest(model);
  auto back = parse_forest(text);
  CHECK(serialize_forest(back) == text);
  for (const auto& fv : s.features)
    CHECK(predict_proba(back, fv) == predict_proba(model, fv));
}

TEST_CASE("predict_proba bounds and layout contract", "[forest]") {
  auto s = separable_two_class(30, 24);
  auto model = train_forest(s, ForestHyper{10, 5, 1, 0}, 5);

  Rng rng(91);
  for (int i = 0; i < 500; ++i) {
    FeatureVector fv{{rng.uniform01(), rng.uniform01()}, s.layout};
    const double p = predict_proba(model, fv);
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }

  FeatureVector wrong{{0.5}, layout_1d()};
  CHECK_THROWS_AS(predict_proba(model, wrong), Error);

  ForestModel empty;
  empty.layout = s.layout;
  CHECK_THROWS_AS(predict_proba(empty, s.features[0]), Error);
}

TEST_CASE("pure-positive forest predicts 1.0", "[forest]") {
  // degenerate leaves: single tree, root leaf with fraction 1
  ForestModel model;
  model.layout = layout_1d();
  Tree t;
  t.nodes.push_back(TreeNode{-1, 0, -1, -1, 1.0});
  model.trees.push_back(t);
  CHECK(predict_proba(model, fv1(0.3)) == 1.0);
}

TEST_CASE("bootstrap indices are a pure function of (seed, tree)", "[forest]") {
  auto a = bootstrap_indices(42, 3, 100);
  auto b = bootstrap_indices(42, 3, 100);
  CHECK(a == b);
  CHECK(bootstrap_indices(42, 4, 100) != a);
  CHECK(bootstrap_indices(43, 3, 100) != a);
}

TEST_CASE("identical-leaf monotone check", "[forest]") {
  auto s = separable_two_class(50, 25);
  auto model = train_forest(s, ForestHyper{20, 8, 2, 0}, 11);

  // raise a negative example's features to a positive example's values: both
  // land in identical leaves, so the probabilities cannot invert
  const FeatureVector& positive = s.features[1];
  FeatureVector raised = s.features[0];
  raised.values = positive.values;
  for (const auto& tree : model.trees)
    REQUIRE(tree_leaf_index(tree, raised) == tree_leaf_index(tree, positive));
  CHECK(predict_proba(model, raised) >= predict_proba(model, positive) - 1e-9);
}

TEST_CASE("single-layer and z-stack calibrations have incompatible layouts", "[forest]") {
  DefocusParams params;
  params.noise_sd = 0.0;
  std::vector<GroundTruthMitosis> gts;
  std::vector<PointUm> imps;
  Rng rng(31);
  for (int i = 0; i < 25; ++i)
    gts.push_back({PointUm{rng.uniform(20, 480), rng.uniform(20, 480)}, rng.uniform(-0.4, 0.4)});
  for (int i = 0; i < 25; ++i)
    imps.push_back(PointUm{rng.uniform(20, 480), rng.uniform(20, 480)});
  SyntheticDetector det(gts, imps, 500, 500, params, 8);

  const std::vector<std::string> models{"m1", "m2", "m3", "m4"};
  const std::vector<double> zplanes{-1.2, -0.6, 0.0, 0.6, 1.2};

  auto collect = [&](const std::vector<double>& planes) {
    std::vector<Candidate> all;
    for (double p : planes)
      for (auto& c : det.detect_plane(p)) all.push_back(c);
    return merge_candidates(all);
  };
  std::vector<PointUm> gt_pos;
  for (const auto& g : gts) gt_pos.push_back(g.pos);

  auto single_set = build_labeled_set(collect({0.0}), det, {0.0}, models, gt_pos, 7.5);
  auto zstack_set = build_labeled_set(collect(zplanes), det, zplanes, models, gt_pos, 7.5);
  REQUIRE(single_set.layout.size() == 4);
  REQUIRE(zstack_set.layout.size() == 20);

  auto single_model = recalibrate(ForestHyper{20, 8, 2, 0}, single_set, 4);
  auto zstack_model = recalibrate(ForestHyper{20, 8, 2, 0}, zstack_set, 4);
  CHECK_THROWS_AS(predict_proba(single_model, zstack_set.features[0]), Error);
  CHECK_THROWS_AS(predict_proba(zstack_model, single_set.features[0]), Error);
}

TEST_CASE("threshold tuning picks a separating cut", "[forest]") {
  auto s = separable_two_class(40, 26);
  auto model = train_forest(s, ForestHyper{10, 6, 2, 0}, 15);
  auto tuned = tune_threshold(model, s);
  int correct = 0;
  for (std::size_t i = 0; i < s.features.size(); ++i)
    if ((predict_proba(tuned, s.features[i]) >= tuned.decision_threshold ? 1 : 0) == s.labels[i])
      ++correct;
  CHECK(correct == static_cast<int>(s.features.size()));
}
