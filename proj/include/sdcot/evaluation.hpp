#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sdcot/data.hpp"
#include "sdcot/detector.hpp"

namespace sdcot {

struct Detection {
  int scene_id = 0;
  Box3D box;
};

struct ClassResult {
  std::string name;
  double ap = 0.0;
  int n_gt = 0;
  bool is_base = false;
  bool skipped = false;  // no ground truth and no detections
  bool absent = false;   // class unknown to the evaluated model
};

struct EvalReport {
  std::vector<ClassResult> per_class;
  double map_base = 0.0;
  double map_novel = 0.0;
  double map_all = 0.0;
  double iou_threshold = 0.25;

  const ClassResult* find(const std::string& name) const;
};

struct EvalConfig {
  double iou_threshold = 0.25;
  double nms_iou = 0.25;
  double score_floor = 0.05;
  std::uint64_t eval_seed = 90210;  // dedicated stream so reports are stable
};

// Greedy matching in descending score order; each ground truth is claimed at
// most once. Returns one TP/FP flag per detection, score-sorted.
std::vector<bool> match_detections(const std::vector<Detection>& detections,
                                   const std::vector<Detection>& gts, int class_id,
                                   double iou_threshold);

// All-point interpolated area under the precision-recall curve.
double average_precision(const std::vector<bool>& tp_flags, int n_gt);

// Per-class AP and base/novel/all mAP from raw detections and annotations.
// Class ids index into class_names; base_mask tells which names count as base.
EvalReport compute_report(const std::vector<Detection>& detections,
                          const std::vector<Detection>& gts,
                          const std::vector<std::string>& class_names,
                          const std::vector<bool>& base_mask,
                          const std::vector<bool>& model_knows, double iou_threshold);

// Runs the model over every scene (fixed eval seed), decodes, applies 3D NMS
// and the score floor, then scores against the scenes' annotations.
// Scene annotations must already use the evaluated partition's class ids;
// partition_names must cover every annotation class.
EvalReport evaluate(const DetectorModel& model, const std::vector<Scene>& scenes,
                    const std::vector<std::string>& partition_names,
                    const std::vector<bool>& base_mask, const EvalConfig& config);

std::vector<Detection> run_inference(const DetectorModel& model, const Scene& scene,
                                     const EvalConfig& config);

struct ForgettingMetrics {
  std::vector<std::string> classes;
  std::vector<double> ap_delta;  // after - before
  double retention = 0.0;        // mean AP after / mean AP before on shared classes
};

ForgettingMetrics forgetting_metrics(const EvalReport& before, const EvalReport& after);

// CSV: `class,ap,n_gt,group` rows plus mAP_base / mAP_novel / mAP_all summary rows.
void write_report_csv(std::ostream& os, const EvalReport& report);
void print_report_table(std::ostream& os, const EvalReport& report);

}  // namespace sdcot
