#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "doctest.h"
#include "sdcot/detector.hpp"

using namespace sdcot;

namespace {

DetectorConfig tiny_config(int n = 24, int m = 8, int k = 3, int f = 6) {
  DetectorConfig cfg;
  cfg.n_points = n;
  cfg.n_seeds = m;
  cfg.n_proposals = k;
  cfg.feature_dim = f;
  cfg.grouping_radius = 1.0;
  return cfg;
}

PointCloud random_cloud(int n, RngStream& rng, double extent = 3.0) {
  PointCloud c;
  for (int i = 0; i < n; ++i) {
    c.points.push_back({rng.uniform(-extent, extent), rng.uniform(-extent, extent),
                        rng.uniform(0.0, 2.0)});
    c.instance_ids.push_back(-1);
  }
  return c;
}

double min_pairwise_dist(const std::vector<Vec3>& pts, const std::vector<int>& idx) {
  double best = 1e300;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = i + 1; j < idx.size(); ++j) {
      const Vec3& a = pts[idx[i]];
      const Vec3& b = pts[idx[j]];
      const double d = std::hypot(a[0] - b[0], std::hypot(a[1] - b[1], a[2] - b[2]));
      best = std::min(best, d);
    }
  }
  return best;
}

bool bitwise_equal_tensor(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(),
                     a.values().size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("fps with count == n is a permutation") {
  RngStream rng(1, "fps");
  std::vector<Vec3> pts;
  for (int i = 0; i < 12; ++i) pts.push_back({static_cast<double>(i), 0, 0});
  const auto idx = farthest_point_sample(pts, 12, rng);
  std::set<int> unique(idx.begin(), idx.end());
  CHECK(unique.size() == 12);
  CHECK_THROWS_AS(farthest_point_sample(pts, 13, rng), std::invalid_argument);
}

TEST_CASE("fps on collinear points picks the far endpoint") {
  const std::vector<Vec3> pts = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  // find a stream whose first draw starts at point 0
  for (int seed = 0; seed < 64; ++seed) {
    RngStream probe(seed, "collinear");
    if (probe.uniform_int(3) != 0) continue;
    RngStream rng(seed, "collinear");
    const auto idx = farthest_point_sample(pts, 2, rng);
    CHECK(idx == std::vector<int>{0, 2});
    return;
  }
  FAIL("no probe seed started fps at index 0");
}

TEST_CASE("fps spreads better than random subsets") {
  RngStream data_rng(2, "fps_cloud");
  const PointCloud cloud = random_cloud(120, data_rng);
  RngStream fps_rng(3, "fps_run");
  const auto chosen = farthest_point_sample(cloud.points, 12, fps_rng);
  const double fps_spread = min_pairwise_dist(cloud.points, chosen);

  RngStream sub_rng(4, "subsets");
  for (int trial = 0; trial < 1000; ++trial) {
    std::set<int> pick;
    while (pick.size() < 12) pick.insert(sub_rng.uniform_int(120));
    const std::vector<int> idx(pick.begin(), pick.end());
    CHECK(fps_spread >= min_pairwise_dist(cloud.points, idx));
  }
}

TEST_CASE("normalize_cloud pads and strides deterministically") {
  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  c.instance_ids = {0, 1, -1};
  const PointCloud padded = normalize_cloud(c, 5);
  CHECK(padded.points.size() == 5);
  CHECK(padded.points[3][0] == 0.0);  // cyclic repeat
  CHECK(padded.instance_ids[4] == 1);

  const PointCloud cut = normalize_cloud(c, 2);
  CHECK(cut.points.size() == 2);
  CHECK_THROWS_AS(normalize_cloud(PointCloud{}, 4), std::invalid_argument);
}

TEST_CASE("backbone feature of an isolated seed is reproducible by hand") {
  DetectorConfig cfg = tiny_config(1, 1, 1, 4);
  RngStream init(5, "init");
  DetectorModel model = init_detector(cfg, {"box"}, {1, 1, 1}, init);

  PointCloud c;
  c.points = {{0.3, -0.2, 0.5}};
  c.instance_ids = {-1};
  const SeedFeatures seeds = backbone_forward(model.params, c, {0}, cfg);

  // manual recomputation: the only neighbor is the seed itself at offset zero
  Tensor x = Tensor::from_values({1, 3}, {0.3, -0.2, 0.5});
  Tensor zero = Tensor::zeros({1, 3});
  const ParamStore& p = model.params;
  Tensor p1 = relu(add_rowvec(matmul(zero, p.at("backbone.point1.w")), p.at("backbone.point1.b")));
  Tensor p2 = relu(add_rowvec(matmul(p1, p.at("backbone.point2.w")), p.at("backbone.point2.b")));
  Tensor self = relu(add_rowvec(matmul(x, p.at("backbone.self.w")), p.at("backbone.self.b")));
  Tensor comb = relu(add_rowvec(matmul(concat_cols(self, p2), p.at("backbone.combine.w")),
                                p.at("backbone.combine.b")));
  CHECK(bitwise_equal_tensor(seeds.features, comb));
}

TEST_CASE("backbone features follow absolute coordinates") {
  DetectorConfig cfg = tiny_config();
  RngStream init(6, "init");
  DetectorModel model = init_detector(cfg, {"box"}, {1, 1, 1}, init);
  RngStream cloud_rng(7, "cloud");
  PointCloud c = random_cloud(cfg.n_points, cloud_rng);
  std::vector<int> seed_idx;
  for (int i = 0; i < cfg.n_seeds; ++i) seed_idx.push_back(i);

  const SeedFeatures before = backbone_forward(model.params, c, seed_idx, cfg);
  for (auto& pt : c.points) pt[0] += 2.0;  // translate the whole cloud
  const SeedFeatures after = backbone_forward(model.params, c, seed_idx, cfg);
  CHECK_FALSE(bitwise_equal_tensor(before.features, after.features));
}

TEST_CASE("zeroed offset head makes votes coincide with seeds") {
  DetectorConfig cfg = tiny_config();
  RngStream init(8, "init");
  DetectorModel model = init_detector(cfg, {"box"}, {1, 1, 1}, init);
  auto& w = model.params.at("vote.offset.w").mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  auto& b = model.params.at("vote.offset.b").mutable_values();
  std::fill(b.begin(), b.end(), 0.0);

  RngStream cloud_rng(9, "cloud");
  const PointCloud c = random_cloud(cfg.n_points, cloud_rng);
  std::vector<int> seed_idx;
  for (int i = 0; i < cfg.n_seeds; ++i) seed_idx.push_back(i * 2);
  const SeedFeatures seeds = backbone_forward(model.params, c, seed_idx, cfg);
  const Votes votes = vote(model.params, seeds);
  for (int i = 0; i < cfg.n_seeds; ++i) {
    for (int d = 0; d < 3; ++d) {
      CHECK(votes.positions.at({i, d}) == seeds.positions[i][d]);
    }
  }
}

TEST_CASE("vote positions shift by exactly the offset head output") {
  DetectorConfig cfg = tiny_config(1, 1, 1, 4);
  RngStream init(10, "init");
  DetectorModel model = init_detector(cfg, {"box"}, {1, 1, 1}, init);
  PointCloud c;
  c.points = {{1.0, 2.0, 0.5}};
  c.instance_ids = {-1};
  const SeedFeatures seeds = backbone_forward(model.params, c, {0}, cfg);
  const Votes votes = vote(model.params, seeds);

  const ParamStore& p = model.params;
  Tensor h1 = relu(add_rowvec(matmul(seeds.features, p.at("vote.hidden1.w")), p.at("vote.hidden1.b")));
  Tensor h = relu(add_rowvec(matmul(h1, p.at("vote.hidden2.w")), p.at("vote.hidden2.b")));
  Tensor off = add_rowvec(matmul(h, p.at("vote.offset.w")), p.at("vote.offset.b"));
  for (int d = 0; d < 3; ++d) {
    CHECK(votes.positions.at({0, d}) ==
          doctest::Approx(c.points[0][d] + off.at({0, d})).epsilon(1e-15));
  }
}

TEST_CASE("zero classifier weights give zero logits") {
  DetectorConfig cfg = tiny_config();
  RngStream init(11, "init");
  DetectorModel model = init_detector(cfg, {"a", "b", "c"}, {1, 1, 1}, init);
  auto& w = model.params.at("head.classifier.w").mutable_values();
  std::fill(w.begin(), w.end(), 0.0);

  RngStream cloud_rng(12, "cloud");
  RngStream fwd(13, "fwd");
  const DetectorOutput out = forward(model, random_cloud(cfg.n_points, cloud_rng), fwd);
  for (double v : out.proposals.class_logits.values()) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic given the rng state and emits K proposals") {
  DetectorConfig cfg = tiny_config();
  RngStream init(14, "init");
  DetectorModel model = init_detector(cfg, {"a", "b"}, {1, 1, 1}, init);
  RngStream cloud_rng(15, "cloud");
  const PointCloud c = random_cloud(cfg.n_points, cloud_rng);

  RngStream f1(16, "fwd");
  RngStream f2(16, "fwd");
  const DetectorOutput a = forward(model, c, f1);
  const DetectorOutput b = forward(model, c, f2);
  CHECK(a.proposals.indices.seed_indices == b.proposals.indices.seed_indices);
  CHECK(a.proposals.indices.cluster_indices == b.proposals.indices.cluster_indices);
  CHECK(bitwise_equal_tensor(a.proposals.class_logits, b.proposals.class_logits));
  CHECK(bitwise_equal_tensor(a.proposals.centers, b.proposals.centers));
  CHECK(a.proposals.objectness_logits.dim(0) == cfg.n_proposals);
  CHECK(a.proposals.class_logits.dim(1) == 2);
  CHECK(a.proposals.heading_scores.dim(1) == 2 * cfg.heading_bins);

  RngStream f3(17, "fwd");
  const DetectorOutput d = forward(model, c, f3);
  CHECK(d.proposals.indices.seed_indices != a.proposals.indices.seed_indices);

  RngStream f4(18, "fwd");
  CHECK_THROWS_AS(forward(model, PointCloud{}, f4), std::invalid_argument);
}

TEST_CASE("index reuse aligns proposals across models") {
  DetectorConfig cfg = tiny_config();
  RngStream init1(19, "init1");
  RngStream init2(20, "init2");
  DetectorModel m1 = init_detector(cfg, {"a", "b"}, {1, 1, 1}, init1);
  DetectorModel m2 = init_detector(cfg, {"a", "b"}, {1, 1, 1}, init2);

  RngStream cloud_rng(21, "cloud");
  const PointCloud c = random_cloud(cfg.n_points, cloud_rng);
  RngStream fwd(22, "fwd");
  const DetectorOutput out1 = forward(m1, c, fwd);
  const SampleIndices idx = out1.proposals.indices;

  // same model, same indices: bitwise identical proposals
  const DetectorOutput replay = forward_with_indices(m1, c, idx);
  CHECK(bitwise_equal_tensor(replay.proposals.class_logits, out1.proposals.class_logits));
  CHECK(bitwise_equal_tensor(replay.proposals.objectness_logits,
                             out1.proposals.objectness_logits));
  CHECK(bitwise_equal_tensor(replay.proposals.centers, out1.proposals.centers));

  // different parameters, same indices: each slot derives from the same seed point
  const DetectorOutput out2 = forward_with_indices(m2, c, idx);
  for (int k = 0; k < cfg.n_proposals; ++k) {
    const int vote_idx = idx.cluster_indices[k];
    for (int d = 0; d < 3; ++d) {
      CHECK(out1.seed_positions[vote_idx][d] == out2.seed_positions[vote_idx][d]);
    }
  }

  SampleIndices bad = idx;
  bad.seed_indices[0] = cfg.n_points + 5;
  CHECK_THROWS_AS(forward_with_indices(m1, c, bad), std::invalid_argument);
}

TEST_CASE("perturbing one cluster index changes only that proposal slot") {
  DetectorConfig cfg = tiny_config(32, 12, 4, 6);
  RngStream init(23, "init");
  DetectorModel model = init_detector(cfg, {"a"}, {1, 1, 1}, init);
  RngStream cloud_rng(24, "cloud");
  const PointCloud c = random_cloud(cfg.n_points, cloud_rng);
  RngStream fwd(25, "fwd");
  const DetectorOutput base = forward(model, c, fwd);
  SampleIndices idx = base.proposals.indices;

  // swap cluster 2 to a vote not currently used
  int replacement = -1;
  for (int v = 0; v < cfg.n_seeds; ++v) {
    if (std::find(idx.cluster_indices.begin(), idx.cluster_indices.end(), v) ==
        idx.cluster_indices.end()) {
      replacement = v;
      break;
    }
  }
  REQUIRE(replacement >= 0);
  const int slot = 2;
  idx.cluster_indices[slot] = replacement;
  const DetectorOutput mod = forward_with_indices(model, c, idx);

  for (int k = 0; k < cfg.n_proposals; ++k) {
    bool same_center = true;
    for (int d = 0; d < 3; ++d) {
      if (mod.proposals.cluster_positions[k][d] != base.proposals.cluster_positions[k][d]) {
        same_center = false;
      }
    }
    if (k == slot) {
      CHECK_FALSE(same_center);
    } else {
      CHECK(same_center);
    }
  }
}

TEST_CASE("classifier extension conserves base logits bitwise") {
  DetectorConfig cfg = tiny_config();
  RngStream init(26, "init");
  DetectorModel model = init_detector(cfg, {"a", "b", "c", "d", "e"}, {1, 1, 1}, init);
  RngStream cloud_rng(27, "cloud");
  const PointCloud c = random_cloud(cfg.n_points, cloud_rng);
  RngStream fwd(28, "fwd");
  const DetectorOutput before = forward(model, c, fwd);

  DetectorModel extended = model.clone();
  RngStream ext_rng(29, "extend");
  extend_classifier(extended, {"f", "g", "h", "i", "j"}, ext_rng);
  CHECK(extended.config.n_classes == 10);
  CHECK(extended.class_names.size() == 10);

  // every pre-existing parameter is bitwise unchanged
  for (const auto& name : model.params.names()) {
    if (name == "head.classifier.w") continue;
    const auto& a = model.params.at(name).values();
    const auto& b = extended.params.at(name).values();
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
  }
  const auto& old_w = model.params.at("head.classifier.w").values();
  const auto& new_w = extended.params.at("head.classifier.w").values();
  CHECK(std::memcmp(old_w.data(), new_w.data(), old_w.size() * sizeof(double)) == 0);

  const DetectorOutput after = forward_with_indices(extended, c, before.proposals.indices);
  CHECK(after.proposals.class_logits.dim(1) == 10);
  for (int k = 0; k < cfg.n_proposals; ++k) {
    for (int cidx = 0; cidx < 5; ++cidx) {
      CHECK(after.proposals.class_logits.at({k, cidx}) ==
            before.proposals.class_logits.at({k, cidx}));
    }
  }

  CHECK_THROWS_AS(extend_classifier(extended, {}, ext_rng), std::invalid_argument);
  CHECK_THROWS_AS(extend_classifier(extended, {"a"}, ext_rng), std::invalid_argument);
}

TEST_CASE("decode hand cases") {
  const int k = 1, nc = 4, nh = 1;
  ProposalSet ps;
  ps.objectness_logits = Tensor::zeros({k, 2});
  ps.centers = Tensor::from_values({k, 3}, {1, 2, 3});
  ps.size_offsets = Tensor::zeros({k, 3});
  ps.heading_scores = Tensor::zeros({k, 2 * nh});
  ps.class_logits = Tensor::zeros({k, nc});
  ps.cluster_positions = {{0, 0, 0}};

  const Vec3 mean{0.8, 1.0, 1.2};
  const auto decoded = decode_proposals(ps, mean, nh);
  REQUIRE(decoded.size() == 1);
  CHECK(decoded[0].box.size[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(decoded[0].box.size[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(decoded[0].box.heading == 0.0);
  CHECK(decoded[0].objectness == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(decoded[0].class_prob == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(decoded[0].box.score == doctest::Approx(0.125).epsilon(1e-15));
}

TEST_CASE("target assignment matches a brute-force scan") {
  DetectorConfig cfg = tiny_config();
  RngStream rng(30, "assign");
  for (int trial = 0; trial < 25; ++trial) {
    const int k = 6;
    ProposalSet ps;
    ps.cluster_positions.clear();
    for (int i = 0; i < k; ++i) {
      ps.cluster_positions.push_back(
          {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 1)});
    }
    LabelSet labels;
    const int n_gt = rng.uniform_int(3);
    for (int g = 0; g < n_gt; ++g) {
      Box3D b;
      b.center = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 1)};
      b.size = {0.8, 0.8, 0.8};
      labels.boxes.push_back(b);
      labels.instance_ids.push_back(g);
      labels.is_pseudo.push_back(false);
    }
    const TargetAssignment got = assign_targets(ps, {}, {}, labels, cfg);

    for (int i = 0; i < k; ++i) {
      double best = 1e300;
      int best_g = -1;
      for (int g = 0; g < n_gt; ++g) {
        const auto& c = labels.boxes[g].center;
        const auto& p = ps.cluster_positions[i];
        const double d = std::sqrt((c[0] - p[0]) * (c[0] - p[0]) +
                                   (c[1] - p[1]) * (c[1] - p[1]) +
                                   (c[2] - p[2]) * (c[2] - p[2]));
        if (d < best) {
          best = d;
          best_g = g;
        }
      }
      if (best_g < 0 || best > cfg.vote_radius_far) {
        CHECK(got.objectness[i] == ObjectnessLabel::kNegative);
      } else if (best <= cfg.vote_radius_near) {
        CHECK(got.objectness[i] == ObjectnessLabel::kPositive);
        CHECK(got.matched_label[i] == best_g);
      } else {
        CHECK(got.objectness[i] == ObjectnessLabel::kIgnored);
      }
    }
  }
}

TEST_CASE("assignment puts a proposal on a gt center in the positive set") {
  DetectorConfig cfg = tiny_config();
  ProposalSet ps;
  Box3D gt;
  gt.center = {1, 1, 0.5};
  gt.size = {1, 1, 1};
  ps.cluster_positions = {{1, 1, 0.5}, {9, 9, 2}};
  LabelSet labels;
  labels.boxes = {gt};
  labels.instance_ids = {0};
  labels.is_pseudo = {false};
  const TargetAssignment a = assign_targets(ps, {}, {}, labels, cfg);
  CHECK(a.objectness[0] == ObjectnessLabel::kPositive);
  CHECK(a.matched_label[0] == 0);
  CHECK(a.objectness[1] == ObjectnessLabel::kNegative);

  const TargetAssignment empty = assign_targets(ps, {}, {}, LabelSet{}, cfg);
  CHECK(empty.objectness[0] == ObjectnessLabel::kNegative);
  CHECK(empty.objectness[1] == ObjectnessLabel::kNegative);
}

TEST_CASE("vote owners come from instance links then containment") {
  DetectorConfig cfg = tiny_config();
  ProposalSet ps;
  ps.cluster_positions = {{0, 0, 0}};

  Box3D linked;
  linked.center = {0, 0, 0.5};
  linked.size = {1, 1, 1};
  Box3D pseudo_box;
  pseudo_box.center = {3, 3, 0.5};
  pseudo_box.size = {1, 1, 1};

  LabelSet labels;
  labels.boxes = {linked, pseudo_box};
  labels.instance_ids = {4, -1};  // pseudo carries no link
  labels.is_pseudo = {false, true};

  const std::vector<Vec3> seeds = {{0, 0, 0.5}, {3.1, 3.2, 0.4}, {8, 8, 1}};
  const std::vector<int> seed_ids = {4, -1, -1};
  const TargetAssignment a = assign_targets(ps, seeds, seed_ids, labels, cfg);
  CHECK(a.vote_owner[0] == 0);  // instance link
  CHECK(a.vote_owner[1] == 1);  // geometric containment in the pseudo box
  CHECK(a.vote_owner[2] == -1);
}

TEST_CASE("checkpoints round trip models bitwise") {
  DetectorConfig cfg = tiny_config();
  RngStream init(31, "init");
  DetectorModel model = init_detector(cfg, {"box", "cone"}, {0.9, 1.0, 1.1}, init);

  std::stringstream ss;
  save_checkpoint(ss, model);
  DetectorModel loaded = load_checkpoint(ss);
  CHECK(loaded.class_names == model.class_names);
  CHECK(loaded.config.n_classes == 2);
  CHECK(loaded.config.n_points == cfg.n_points);
  CHECK(loaded.mean_size[0] == model.mean_size[0]);
  CHECK(bitwise_equal(loaded.params, model.params));

  std::stringstream ss2;
  save_checkpoint(ss2, loaded);
  CHECK(ss.str() == ss2.str());
}

TEST_CASE("gradient check through the full proposal path") {
  DetectorConfig cfg = tiny_config(12, 5, 2, 4);
  RngStream init(32, "init");
  DetectorModel model = init_detector(cfg, {"a", "b"}, {1, 1, 1}, init);
  RngStream cloud_rng(33, "cloud");
  const PointCloud c = random_cloud(cfg.n_points, cloud_rng, 1.2);
  RngStream fwd(34, "fwd");
  const DetectorOutput ref = forward(model, c, fwd);
  const SampleIndices idx = ref.proposals.indices;
  const auto groups = ref.proposal_groups;

  auto fn = [&](ParamStore&) {
    const DetectorOutput out = forward_with_indices(model, c, idx, &groups);
    Tensor s = add(sum(out.proposals.objectness_logits), sum(out.proposals.centers));
    s = add(s, sum(out.proposals.class_logits));
    s = add(s, sum(mul(out.proposals.size_offsets, out.proposals.size_offsets)));
    s = add(s, sum(out.proposals.heading_scores));
    return add(s, sum(out.vote_positions));
  };
  CHECK(grad_check(fn, model.params, 1e-5) <= 1e-4);
}
