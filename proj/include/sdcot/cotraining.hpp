#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sdcot/data.hpp"
#include "sdcot/detector.hpp"

namespace sdcot {

struct PseudoLabelConfig {
  double tau_o = 0.95;       // objectness threshold
  double tau_c = 0.90;       // classification probability threshold
  double pre_nms_iou = 0.25;

  void validate() const;
};

struct LossWeights {
  double lambda_s = 10.0;
  double lambda_d = 1.0;
  double lambda_c = 10.0;
  double lambda1 = 0.5;  // objectness
  double lambda2 = 1.0;  // box
  double lambda3 = 0.2;  // semantic classification
  int ramp_up_epochs = 30;
};

struct EmaConfig {
  double alpha_rampup = 0.99;
  double alpha_after = 0.999;
};

enum class DistillLossFn { kL2Normalized, kCrossEntropy, kKdTemperature };

struct DistillVariant {
  bool target_class_logits = true;
  bool target_center = false;
  bool target_size = false;
  DistillLossFn loss_fn = DistillLossFn::kL2Normalized;
  double temperature = 2.0;

  void validate() const;
};

// Pseudo boxes over the teacher's classes plus ground-truth boxes; provenance
// stays disjoint so downstream code can tell the two apart.
struct MixedLabels {
  std::vector<Box3D> pseudo_boxes;
  std::vector<Box3D> gt_boxes;
  std::vector<int> gt_instance_ids;  // parallel to gt_boxes; -1 when unlinked

  LabelSet flatten() const;
};

// Teacher forward on the untransformed scene, 3D NMS, then both confidence
// thresholds. May legitimately return nothing.
std::vector<Box3D> generate_pseudo_labels(const DetectorModel& static_teacher, const Scene& scene,
                                          const PseudoLabelConfig& cfg, RngStream& rng);

// The thresholding rule alone, applied to already-decoded survivors.
std::vector<Box3D> filter_pseudo_candidates(const std::vector<DecodedProposal>& decoded,
                                            const std::vector<int>& kept,
                                            const PseudoLabelConfig& cfg);

MixedLabels mix_labels(const std::vector<Box3D>& pseudo, const std::vector<Box3D>& novel_gt,
                       const std::vector<int>& gt_instance_ids, double dedupe_iou,
                       const std::set<int>& pseudo_class_ids,
                       const std::set<int>& allowed_gt_class_ids);

struct SupervisedLossBreakdown {
  Tensor total;
  // individual term tensors, kept for per-term gradient checks
  Tensor vote_reg_term, objectness_term, center_term, angle_cls_term, angle_reg_term,
      size_term, sem_term;
  double vote_reg = 0, objectness = 0, center_reg = 0, angle_cls = 0, angle_reg = 0,
         size_reg = 0, sem_cls = 0, box = 0, value = 0;
  int n_positive = 0;
};

SupervisedLossBreakdown supervised_loss(const DetectorOutput& output,
                                        const TargetAssignment& assignment,
                                        const LabelSet& labels, const Vec3& mean_size,
                                        const LossWeights& weights, const DetectorConfig& config);

// Mean over proposals of the L2 distance between per-proposal mean-centred
// class logits (default variant); optional center/size mean-squared terms.
Tensor distillation_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                         const DistillVariant& variant, const Tensor* student_centers = nullptr,
                         const Tensor* teacher_centers = nullptr,
                         const Tensor* student_sizes = nullptr,
                         const Tensor* teacher_sizes = nullptr);

struct ConsistencyLossBreakdown {
  Tensor total;
  double center = 0, klass = 0, size = 0, value = 0;
};

// Student proposals against dynamic-teacher proposals already mapped into the
// student's augmented frame; nearest-center matching.
ConsistencyLossBreakdown consistency_loss(const ProposalSet& student, const Vec3& mean_size,
                                          const std::vector<Vec3>& teacher_centers,
                                          const std::vector<Vec3>& teacher_sizes,
                                          const std::vector<std::vector<double>>& teacher_probs);

double ramp_up_weight(int epoch, int ramp_up_epochs, double max_weight);

double ema_alpha_for_epoch(const EmaConfig& cfg, int epoch, int ramp_up_epochs);

enum class TrainMode {
  kBase,
  kJoint,
  kFreezeAdd,
  kFineTune,
  kSdcot,
  kSdcotNoDis,
  kSdcotNoCon,
  kSdcotNoBoth,
};

TrainMode parse_train_mode(const std::string& name);
std::string train_mode_name(TrainMode mode);
bool mode_uses_pseudo_labels(TrainMode mode);
bool mode_uses_distillation(TrainMode mode);
bool mode_uses_consistency(TrainMode mode);

struct TrainSchedule {
  int epochs = 30;
  double lr = 1e-3;
  std::vector<int> lr_decay_epochs;  // multiply lr by decay_factor at these epochs
  double lr_decay_factor = 0.1;
};

struct StepBreakdown {
  double l_sup = 0, l_dis = 0, l_con = 0, total = 0;
  double ramp_d = 0, ramp_c = 0;
  int n_pseudo = 0;
  SupervisedLossBreakdown sup;
};

struct EpochRecord {
  int epoch = 0;
  double l_sup = 0, l_dis = 0, l_con = 0, total = 0;
  double ramp_d = 0, ramp_c = 0, lr = 0;
  double mean_pseudo = 0;
  double mean_positives = 0;  // positive proposals per step
  double vote_reg = 0, objectness = 0, box = 0, sem_cls = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

struct IncrementalSettings {
  TrainMode mode = TrainMode::kSdcot;
  TrainSchedule schedule;
  LossWeights weights;
  PseudoLabelConfig pseudo;
  EmaConfig ema;
  DistillVariant distill;
  double dedupe_iou = 0.5;
  // The static teacher is frozen, so its labels per scene are fixed up to
  // subsampling noise; caching them trades that noise for one forward pass.
  bool cache_pseudo_labels = true;
};

struct IncrementalResult {
  DetectorModel student;
  std::optional<DetectorModel> dynamic_teacher;

  // Dynamic teacher when present, else the student.
  const DetectorModel& inference_model() const {
    return dynamic_teacher ? *dynamic_teacher : student;
  }
};

// One co-teaching update on a single scene: pseudo labels, mixed labels, two
// subsampled views, augmentation, the three losses, Adam, then the EMA step.
// Scene class ids must already live in the student's class-id space.
StepBreakdown train_step(DetectorModel& student, const DetectorModel* static_teacher,
                         DetectorModel* dynamic_teacher, AdamState& adam, const Scene& scene,
                         int epoch, const IncrementalSettings& settings,
                         const std::set<int>& base_class_ids,
                         const std::set<int>& allowed_gt_class_ids, RngStream& step_rng,
                         int n_frozen_classifier_rows = 0,
                         const std::vector<Box3D>* cached_pseudo = nullptr);

// Supervised-only training over the given scenes (base and joint modes).
DetectorModel train_base(const DetectorConfig& config, const std::vector<Scene>& dataset,
                         const std::vector<std::string>& class_names, const Vec3& mean_size,
                         const TrainSchedule& schedule, RngStream rng,
                         const EpochCallback& on_epoch = nullptr);

// Extends copies of the base model for student/dynamic teacher, freezes the
// static teacher, and runs the co-teaching loop (or the requested baseline).
IncrementalResult train_incremental(const DetectorModel& base_model,
                                    const std::vector<Scene>& novel_dataset,
                                    const std::vector<std::string>& novel_classes,
                                    const std::vector<Scene>& replay_exemplars,
                                    const IncrementalSettings& settings, RngStream rng,
                                    const EpochCallback& on_epoch = nullptr);

// Next round of sequential incremental learning: the previous student becomes
// the static teacher and all classes it knows act as the base set.
IncrementalResult sequential_round(const DetectorModel& previous_student,
                                   const std::vector<Scene>& next_dataset,
                                   const std::vector<std::string>& next_classes,
                                   const IncrementalSettings& settings, RngStream rng,
                                   const EpochCallback& on_epoch = nullptr);

}  // namespace sdcot
