#include "sdcot/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

namespace sdcot {

const ClassResult* EvalReport::find(const std::string& name) const {
  for (const auto& c : per_class) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::vector<bool> match_detections(const std::vector<Detection>& detections,
                                   const std::vector<Detection>& gts, int class_id,
                                   double iou_threshold) {
  std::vector<int> det_idx;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    if (detections[i].box.class_id == class_id) det_idx.push_back(static_cast<int>(i));
  }
  std::stable_sort(det_idx.begin(), det_idx.end(), [&](int a, int b) {
    if (detections[a].box.score != detections[b].box.score) {
      return detections[a].box.score > detections[b].box.score;
    }
    return a < b;
  });

  std::vector<int> gt_idx;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].box.class_id == class_id) gt_idx.push_back(static_cast<int>(i));
  }
  std::vector<bool> gt_taken(gt_idx.size(), false);

  std::vector<bool> flags;
  flags.reserve(det_idx.size());
  for (int di : det_idx) {
    const Detection& d = detections[di];
    double best_iou = 0.0;
    int best_g = -1;
    for (std::size_t g = 0; g < gt_idx.size(); ++g) {
      if (gt_taken[g]) continue;
      const Detection& gt = gts[gt_idx[g]];
      if (gt.scene_id != d.scene_id) continue;
      const double iou = iou_3d(d.box, gt.box);
      if (iou > best_iou) {
        best_iou = iou;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best_iou >= iou_threshold) {
      gt_taken[best_g] = true;
      flags.push_back(true);
    } else {
      flags.push_back(false);
    }
  }
  return flags;
}

double average_precision(const std::vector<bool>& tp_flags, int n_gt) {
  if (n_gt < 0) throw std::invalid_argument("average_precision: negative ground-truth count");
  if (n_gt == 0) return 0.0;  // callers skip the no-gt/no-detection case
  if (tp_flags.empty()) return 0.0;

  std::vector<double> precision, recall;
  int tp = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    if (tp_flags[i]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  // monotone non-increasing precision envelope
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[i] = std::max(precision[i], precision[i + 1]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

EvalReport compute_report(const std::vector<Detection>& detections,
                          const std::vector<Detection>& gts,
                          const std::vector<std::string>& class_names,
                          const std::vector<bool>& base_mask,
                          const std::vector<bool>& model_knows, double iou_threshold) {
  if (class_names.size() != base_mask.size() || class_names.size() != model_knows.size()) {
    throw std::invalid_argument("compute_report: class metadata arrays must be parallel");
  }
  EvalReport report;
  report.iou_threshold = iou_threshold;

  double base_sum = 0.0, novel_sum = 0.0, all_sum = 0.0;
  int base_n = 0, novel_n = 0, all_n = 0;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    ClassResult r;
    r.name = class_names[c];
    r.is_base = base_mask[c];
    r.absent = !model_knows[c];
    for (const auto& g : gts) {
      if (g.box.class_id == static_cast<int>(c)) ++r.n_gt;
    }
    const auto flags = match_detections(detections, gts, static_cast<int>(c), iou_threshold);
    if (r.n_gt == 0 && flags.empty()) {
      r.skipped = true;
      r.ap = 0.0;
    } else {
      r.ap = average_precision(flags, r.n_gt);
    }
    if (!r.skipped) {
      all_sum += r.ap;
      ++all_n;
      if (r.is_base) {
        base_sum += r.ap;
        ++base_n;
      } else {
        novel_sum += r.ap;
        ++novel_n;
      }
    }
    report.per_class.push_back(std::move(r));
  }
  report.map_base = base_n ? base_sum / base_n : 0.0;
  report.map_novel = novel_n ? novel_sum / novel_n : 0.0;
  report.map_all = all_n ? all_sum / all_n : 0.0;
  return report;
}

std::vector<Detection> run_inference(const DetectorModel& model, const Scene& scene,
                                     const EvalConfig& config) {
  NoGradGuard ng;
  RngStream rng(config.eval_seed, "eval/scene_" + std::to_string(scene.id));
  PointCloud cloud = subsample_cloud(scene.cloud, model.config.n_points, rng);
  DetectorOutput out = forward(model, cloud, rng);
  const auto decoded = decode_proposals(out.proposals, model.mean_size, model.config.heading_bins);

  std::vector<Box3D> boxes;
  boxes.reserve(decoded.size());
  for (const auto& d : decoded) boxes.push_back(d.box);
  const auto kept = nms_3d(boxes, config.nms_iou);

  std::vector<Detection> detections;
  for (int i : kept) {
    if (boxes[i].score < config.score_floor) continue;
    detections.push_back({scene.id, boxes[i]});
  }
  return detections;
}

EvalReport evaluate(const DetectorModel& model, const std::vector<Scene>& scenes,
                    const std::vector<std::string>& partition_names,
                    const std::vector<bool>& base_mask, const EvalConfig& config) {
  if (partition_names.size() != base_mask.size()) {
    throw std::invalid_argument("evaluate: partition arrays must be parallel");
  }
  std::vector<bool> model_knows(partition_names.size(), false);
  std::map<int, int> model_to_partition;  // model class id -> partition id
  for (std::size_t p = 0; p < partition_names.size(); ++p) {
    for (std::size_t m = 0; m < model.class_names.size(); ++m) {
      if (model.class_names[m] == partition_names[p]) {
        model_knows[p] = true;
        model_to_partition[static_cast<int>(m)] = static_cast<int>(p);
      }
    }
  }

  std::vector<Detection> detections, gts;
  for (const auto& scene : scenes) {
    for (const auto& b : scene.gt_boxes) {
      if (b.class_id < 0 || b.class_id >= static_cast<int>(partition_names.size())) {
        throw std::invalid_argument("evaluate: annotation class id outside partition");
      }
      gts.push_back({scene.id, b});
    }
    for (auto& d : run_inference(model, scene, config)) {
      const auto it = model_to_partition.find(d.box.class_id);
      if (it == model_to_partition.end()) continue;  // class not under evaluation
      d.box.class_id = it->second;
      detections.push_back(std::move(d));
    }
  }
  return compute_report(detections, gts, partition_names, base_mask, model_knows,
                        config.iou_threshold);
}

ForgettingMetrics forgetting_metrics(const EvalReport& before, const EvalReport& after) {
  ForgettingMetrics out;
  double before_sum = 0.0, after_sum = 0.0;
  for (const auto& b : before.per_class) {
    if (b.skipped) continue;
    const ClassResult* a = after.find(b.name);
    if (!a || a->skipped) continue;
    out.classes.push_back(b.name);
    out.ap_delta.push_back(a->ap - b.ap);
    before_sum += b.ap;
    after_sum += a->ap;
  }
  if (out.classes.empty()) {
    throw std::invalid_argument("forgetting_metrics: reports share no evaluated classes");
  }
  out.retention = before_sum > 0.0 ? after_sum / before_sum : 0.0;
  return out;
}

void write_report_csv(std::ostream& os, const EvalReport& report) {
  os << "class,ap,n_gt,group\n";
  char buf[64];
  for (const auto& c : report.per_class) {
    std::snprintf(buf, sizeof(buf), "%.6f", c.ap);
    os << c.name << "," << buf << "," << c.n_gt << "," << (c.is_base ? "base" : "novel") << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%.6f", report.map_base);
  os << "mAP_base," << buf << ",,\n";
  std::snprintf(buf, sizeof(buf), "%.6f", report.map_novel);
  os << "mAP_novel," << buf << ",,\n";
  std::snprintf(buf, sizeof(buf), "%.6f", report.map_all);
  os << "mAP_all," << buf << ",,\n";
}

void print_report_table(std::ostream& os, const EvalReport& report) {
  os << std::left << std::setw(12) << "class" << std::right << std::setw(10) << "AP"
     << std::setw(8) << "n_gt" << "  group\n";
  for (const auto& c : report.per_class) {
    os << std::left << std::setw(12) << c.name << std::right << std::setw(10) << std::fixed
       << std::setprecision(4) << c.ap << std::setw(8) << c.n_gt << "  "
       << (c.is_base ? "base" : "novel");
    if (c.absent) os << " (absent)";
    if (c.skipped) os << " (skipped)";
    os << "\n";
  }
  os << std::left << std::setw(12) << "mAP" << "  base " << std::fixed << std::setprecision(4)
     << report.map_base << "  novel " << report.map_novel << "  all " << report.map_all << "\n";
}

}  // namespace sdcot
