#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "sdcot/evaluation.hpp"

using namespace sdcot;

namespace {

Detection det(int scene, double x, double y, int cls, double score) {
  Detection d;
  d.scene_id = scene;
  d.box.center = {x, y, 0.5};
  d.box.size = {1, 1, 1};
  d.box.class_id = cls;
  d.box.score = score;
  return d;
}

// independent matcher: walks scenes separately, claims best unmatched gt
std::vector<bool> match_reference(const std::vector<Detection>& dets,
                                  const std::vector<Detection>& gts, int cls, double thr) {
  std::vector<int> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].box.class_id == cls) order.push_back(static_cast<int>(i));
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return dets[a].box.score != dets[b].box.score ? dets[a].box.score > dets[b].box.score : a < b;
  });
  std::vector<bool> taken(gts.size(), false);
  std::vector<bool> out;
  for (int di : order) {
    int best = -1;
    double best_iou = thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].box.class_id != cls || gts[g].scene_id != dets[di].scene_id) continue;
      const double iou = iou_3d(dets[di].box, gts[g].box);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      taken[best] = true;
      out.push_back(true);
    } else {
      out.push_back(false);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("matching hand cases") {
  const std::vector<Detection> gts = {det(0, 0, 0, 0, 1.0)};

  const auto single = match_detections({det(0, 0, 0, 0, 0.9)}, gts, 0, 0.25);
  CHECK(single == std::vector<bool>{true});

  const auto twice =
      match_detections({det(0, 0, 0, 0, 0.9), det(0, 0.05, 0, 0, 0.8)}, gts, 0, 0.25);
  CHECK(twice == std::vector<bool>{true, false});

  // wrong class or wrong scene never matches
  CHECK(match_detections({det(0, 0, 0, 1, 0.9)}, gts, 1, 0.25) == std::vector<bool>{false});
  CHECK(match_detections({det(3, 0, 0, 0, 0.9)}, gts, 0, 0.25) == std::vector<bool>{false});
}

TEST_CASE("matching agrees with an exhaustive oracle") {
  RngStream rng(1, "match");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Detection> dets, gts;
    for (int i = 0; i < 30; ++i) {
      dets.push_back(det(rng.uniform_int(3), rng.uniform(-2, 2), rng.uniform(-2, 2),
                         rng.uniform_int(2), rng.uniform()));
    }
    for (int g = 0; g < 12; ++g) {
      gts.push_back(det(rng.uniform_int(3), rng.uniform(-2, 2), rng.uniform(-2, 2),
                        rng.uniform_int(2), 1.0));
    }
    for (int cls = 0; cls < 2; ++cls) {
      CHECK(match_detections(dets, gts, cls, 0.25) == match_reference(dets, gts, cls, 0.25));
    }
  }
}

TEST_CASE("average precision hand cases") {
  CHECK(average_precision({true, true}, 2) == doctest::Approx(1.0));
  CHECK(average_precision({}, 3) == 0.0);
  CHECK(average_precision({true, false, true}, 2) ==
        doctest::Approx(1.0 * 0.5 + (2.0 / 3.0) * 0.5).epsilon(1e-12));
  CHECK(average_precision({false, false}, 0) == 0.0);
  CHECK_THROWS_AS(average_precision({true}, -1), std::invalid_argument);
}

TEST_CASE("ap is invariant under monotone score changes and safe against tail fps") {
  RngStream rng(2, "ap");
  std::vector<Detection> dets, gts;
  for (int g = 0; g < 6; ++g) gts.push_back(det(0, g * 3.0, 0, 0, 1.0));
  for (int i = 0; i < 10; ++i) {
    dets.push_back(det(0, rng.uniform_int(6) * 3.0 + rng.uniform(-0.4, 0.4),
                       rng.uniform(-0.4, 0.4), 0, rng.uniform(0.1, 0.9)));
  }
  const auto flags = match_detections(dets, gts, 0, 0.25);
  const double ap = average_precision(flags, 6);

  // squash scores through a strictly monotone map: identical flags, same ap
  std::vector<Detection> squashed = dets;
  for (auto& d : squashed) d.box.score = 1.0 / (1.0 + std::exp(-7.0 * d.box.score));
  CHECK(average_precision(match_detections(squashed, gts, 0, 0.25), 6) ==
        doctest::Approx(ap).epsilon(1e-12));

  // lowest-score zero-iou false positive never raises ap
  std::vector<Detection> padded = dets;
  padded.push_back(det(0, 100.0, 100.0, 0, 0.001));
  CHECK(average_precision(match_detections(padded, gts, 0, 0.25), 6) <= ap + 1e-12);
}

TEST_CASE("perfect oracle detections give unit ap everywhere") {
  RngStream rng(3, "oracle");
  std::vector<Detection> gts;
  for (int s = 0; s < 4; ++s) {
    for (int g = 0; g < 3; ++g) {
      gts.push_back(det(s, rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform_int(3), 1.0));
    }
  }
  std::vector<Detection> echo = gts;
  for (auto& d : echo) d.box.score = 0.7;

  const EvalReport report = compute_report(echo, gts, {"a", "b", "c"}, {true, true, false},
                                           {true, true, true}, 0.25);
  for (const auto& c : report.per_class) {
    CHECK(c.ap == doctest::Approx(1.0));
    CHECK_FALSE(c.skipped);
  }
  CHECK(report.map_base == doctest::Approx(1.0));
  CHECK(report.map_novel == doctest::Approx(1.0));
  CHECK(report.map_all == doctest::Approx(1.0));

  const EvalReport empty = compute_report({}, gts, {"a", "b", "c"}, {true, true, false},
                                          {true, true, true}, 0.25);
  CHECK(empty.map_all == 0.0);
}

TEST_CASE("map_all is the unweighted mean of per-class aps") {
  RngStream rng(4, "mean");
  std::vector<Detection> dets, gts;
  for (int s = 0; s < 3; ++s) {
    for (int g = 0; g < 4; ++g) {
      gts.push_back(det(s, rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform_int(4), 1.0));
    }
    for (int i = 0; i < 6; ++i) {
      dets.push_back(det(s, rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform_int(4),
                         rng.uniform()));
    }
  }
  const EvalReport report =
      compute_report(dets, gts, {"a", "b", "c", "d"}, {true, true, false, false},
                     {true, true, true, true}, 0.25);
  double mean = 0.0;
  int n = 0;
  for (const auto& c : report.per_class) {
    if (!c.skipped) {
      mean += c.ap;
      ++n;
    }
  }
  REQUIRE(n > 0);
  CHECK(std::fabs(report.map_all - mean / n) <= 1e-12);
}

TEST_CASE("forgetting metrics") {
  EvalReport before, after;
  before.per_class = {{"a", 0.6, 10, true, false, false}, {"b", 0.6, 8, true, false, false}};
  before.map_base = 0.6;
  after.per_class = {{"a", 0.3, 10, true, false, false}, {"b", 0.3, 8, true, false, false}};
  after.map_base = 0.3;

  const ForgettingMetrics same = forgetting_metrics(before, before);
  for (double d : same.ap_delta) CHECK(d == 0.0);
  CHECK(same.retention == doctest::Approx(1.0));

  const ForgettingMetrics drop = forgetting_metrics(before, after);
  CHECK(drop.retention == doctest::Approx(0.5));
  for (double d : drop.ap_delta) CHECK(d == doctest::Approx(-0.3));

  const ForgettingMetrics rise = forgetting_metrics(after, before);
  for (std::size_t i = 0; i < rise.ap_delta.size(); ++i) {
    CHECK(rise.ap_delta[i] == doctest::Approx(-drop.ap_delta[i]));
  }

  EvalReport other;
  other.per_class = {{"z", 0.5, 3, true, false, false}};
  CHECK_THROWS_AS(forgetting_metrics(before, other), std::invalid_argument);
}

TEST_CASE("evaluate is deterministic and reports absent classes as zero") {
  DetectorConfig cfg;
  cfg.n_points = 48;
  cfg.n_seeds = 12;
  cfg.n_proposals = 4;
  cfg.feature_dim = 6;
  const ClassCatalog catalog = ClassCatalog::default_catalog();
  RngStream init(5, "init");
  DetectorModel model = init_detector(cfg, {"box", "cone", "cylinder"}, {1, 1, 1}, init);

  SceneGenParams gen;
  gen.clutter_points = 20;
  std::vector<Scene> scenes;
  for (int i = 0; i < 4; ++i) {
    RngStream rng(600 + i, "eval_scene");
    scenes.push_back(generate_scene(catalog, {0, 1, 2, 3}, rng, gen, i));
  }

  const std::vector<std::string> partition = {"box", "cone", "cylinder", "slab"};
  const std::vector<bool> base_mask = {true, true, true, false};
  EvalConfig ecfg;
  const EvalReport r1 = evaluate(model, scenes, partition, base_mask, ecfg);
  const EvalReport r2 = evaluate(model, scenes, partition, base_mask, ecfg);
  REQUIRE(r1.per_class.size() == r2.per_class.size());
  for (std::size_t i = 0; i < r1.per_class.size(); ++i) {
    CHECK(r1.per_class[i].ap == r2.per_class[i].ap);
    CHECK(r1.per_class[i].n_gt == r2.per_class[i].n_gt);
  }

  // the model knows nothing about "slab": absent, ap 0 when gt exists
  const ClassResult* slab = r1.find("slab");
  REQUIRE(slab != nullptr);
  CHECK(slab->absent);
  if (slab->n_gt > 0) CHECK(slab->ap == 0.0);

  CHECK_THROWS_AS(evaluate(model, scenes, {"box"}, {true, false}, ecfg), std::invalid_argument);
}

TEST_CASE("report csv layout") {
  EvalReport report;
  report.per_class = {{"box", 0.75, 12, true, false, false},
                      {"slab", 0.25, 9, false, false, false}};
  report.map_base = 0.75;
  report.map_novel = 0.25;
  report.map_all = 0.5;
  std::ostringstream os;
  write_report_csv(os, report);
  const std::string csv = os.str();
  CHECK(csv.find("class,ap,n_gt,group\n") == 0);
  CHECK(csv.find("box,0.750000,12,base") != std::string::npos);
  CHECK(csv.find("slab,0.250000,9,novel") != std::string::npos);
  CHECK(csv.find("mAP_base,0.750000,,") != std::string::npos);
  CHECK(csv.find("mAP_all,0.500000,,") != std::string::npos);
}
