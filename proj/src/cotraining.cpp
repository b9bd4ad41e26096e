#include "sdcot/cotraining.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sdcot {

namespace {

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Cuboid footprints are symmetric under a half-turn, so heading supervision
// is canonicalized into [-pi/2, pi/2).
double canonical_heading(double h) {
  h = wrap_angle(h);
  if (h >= M_PI / 2.0) h -= M_PI;
  if (h < -M_PI / 2.0) h += M_PI;
  return h;
}

Tensor const_matrix(const std::vector<Vec3>& rows) {
  std::vector<double> v;
  v.reserve(rows.size() * 3);
  for (const auto& r : rows) {
    v.push_back(r[0]);
    v.push_back(r[1]);
    v.push_back(r[2]);
  }
  return Tensor::from_values({static_cast<int>(rows.size()), 3}, std::move(v));
}

std::vector<std::vector<double>> row_softmax_values(const Tensor& logits) {
  const int m = logits.dim(0), n = logits.dim(1);
  const auto& v = logits.values();
  std::vector<std::vector<double>> out(m, std::vector<double>(n));
  for (int i = 0; i < m; ++i) {
    const double* row = &v[static_cast<std::size_t>(i) * n];
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    for (int j = 0; j < n; ++j) out[i][j] = std::exp(row[j] - mx) / z;
  }
  return out;
}

Tensor decoded_sizes_tensor(const Tensor& size_offsets, const Vec3& mean_size) {
  Tensor mean = Tensor::from_values({3}, {mean_size[0], mean_size[1], mean_size[2]});
  return mul_rowvec(exp_clamped(size_offsets, -6.0, 6.0), mean);
}

}  // namespace

void PseudoLabelConfig::validate() const {
  for (double v : {tau_o, tau_c, pre_nms_iou}) {
    if (!(v > 0.0 && v < 1.0)) {
      throw std::invalid_argument("pseudo label config: thresholds must lie in (0, 1)");
    }
  }
}

void DistillVariant::validate() const {
  if (!target_class_logits && !target_center && !target_size) {
    throw std::invalid_argument("distill variant: target set must be non-empty");
  }
  if (temperature <= 0.0) throw std::invalid_argument("distill variant: temperature must be positive");
}

LabelSet MixedLabels::flatten() const {
  LabelSet out;
  out.boxes.reserve(pseudo_boxes.size() + gt_boxes.size());
  for (const auto& b : pseudo_boxes) {
    out.boxes.push_back(b);
    out.instance_ids.push_back(-1);
    out.is_pseudo.push_back(true);
  }
  for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
    out.boxes.push_back(gt_boxes[i]);
    out.instance_ids.push_back(i < gt_instance_ids.size() ? gt_instance_ids[i] : -1);
    out.is_pseudo.push_back(false);
  }
  return out;
}

std::vector<Box3D> filter_pseudo_candidates(const std::vector<DecodedProposal>& decoded,
                                            const std::vector<int>& kept,
                                            const PseudoLabelConfig& cfg) {
  std::vector<Box3D> out;
  for (int i : kept) {
    const DecodedProposal& d = decoded[i];
    if (d.objectness >= cfg.tau_o && d.class_prob >= cfg.tau_c) out.push_back(d.box);
  }
  return out;
}

std::vector<Box3D> generate_pseudo_labels(const DetectorModel& static_teacher, const Scene& scene,
                                          const PseudoLabelConfig& cfg, RngStream& rng) {
  cfg.validate();
  std::vector<DecodedProposal> decoded;
  {
    NoGradGuard ng;
    DetectorOutput out = forward(static_teacher, scene.cloud, rng);
    decoded = decode_proposals(out.proposals, static_teacher.mean_size,
                               static_teacher.config.heading_bins);
  }
  std::vector<Box3D> boxes;
  boxes.reserve(decoded.size());
  for (const auto& d : decoded) boxes.push_back(d.box);
  const std::vector<int> kept = nms_3d(boxes, cfg.pre_nms_iou);
  return filter_pseudo_candidates(decoded, kept, cfg);
}

MixedLabels mix_labels(const std::vector<Box3D>& pseudo, const std::vector<Box3D>& novel_gt,
                       const std::vector<int>& gt_instance_ids, double dedupe_iou,
                       const std::set<int>& pseudo_class_ids,
                       const std::set<int>& allowed_gt_class_ids) {
  for (const auto& b : pseudo) {
    if (!pseudo_class_ids.count(b.class_id)) {
      throw std::runtime_error("mix_labels: pseudo box carries non-base class id " +
                               std::to_string(b.class_id));
    }
  }
  for (const auto& b : novel_gt) {
    if (!allowed_gt_class_ids.count(b.class_id)) {
      throw std::runtime_error("mix_labels: ground-truth class id " +
                               std::to_string(b.class_id) + " not allowed in this run");
    }
  }
  MixedLabels out;
  out.gt_boxes = novel_gt;
  out.gt_instance_ids = gt_instance_ids.empty() ? std::vector<int>(novel_gt.size(), -1)
                                                : gt_instance_ids;
  if (out.gt_instance_ids.size() != novel_gt.size()) {
    throw std::invalid_argument("mix_labels: instance id list must parallel gt boxes");
  }
  for (const auto& p : pseudo) {
    bool duplicate = false;
    for (const auto& g : novel_gt) {
      if (iou_3d(p, g) > dedupe_iou) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) out.pseudo_boxes.push_back(p);
  }
  return out;
}

SupervisedLossBreakdown supervised_loss(const DetectorOutput& output,
                                        const TargetAssignment& assignment,
                                        const LabelSet& labels, const Vec3& mean_size,
                                        const LossWeights& weights,
                                        const DetectorConfig& config) {
  const ProposalSet& props = output.proposals;
  const int nh = config.heading_bins;

  // vote regression over seeds owned by a label box
  std::vector<int> voted;
  std::vector<Vec3> vote_targets;
  for (std::size_t s = 0; s < assignment.vote_owner.size(); ++s) {
    const int owner = assignment.vote_owner[s];
    if (owner >= 0) {
      voted.push_back(static_cast<int>(s));
      vote_targets.push_back(labels.boxes[owner].center);
    }
  }
  Tensor l_vote = voted.empty()
                      ? Tensor::scalar(0.0)
                      : huber(gather_rows(output.vote_positions, voted),
                              const_matrix(vote_targets));

  // objectness over positives and negatives; positives are rare and their
  // assignment is stochastic under resampling, so the two classes are
  // reweighted 0.9/0.1 to keep confident on-object scores
  std::vector<int> contributing;
  std::vector<int> obj_targets;
  std::vector<double> obj_weights;
  std::vector<int> positives;
  for (std::size_t i = 0; i < assignment.objectness.size(); ++i) {
    if (assignment.objectness[i] == ObjectnessLabel::kIgnored) continue;
    const bool positive = assignment.objectness[i] == ObjectnessLabel::kPositive;
    contributing.push_back(static_cast<int>(i));
    obj_targets.push_back(positive ? 1 : 0);
    obj_weights.push_back(positive ? 0.9 : 0.1);
    if (positive) positives.push_back(static_cast<int>(i));
  }
  Tensor l_obj = contributing.empty()
                     ? Tensor::scalar(0.0)
                     : cross_entropy_rows_weighted(
                           gather_rows(props.objectness_logits, contributing), obj_targets,
                           obj_weights);

  Tensor l_center = Tensor::scalar(0.0);
  Tensor l_angle_cls = Tensor::scalar(0.0);
  Tensor l_angle_reg = Tensor::scalar(0.0);
  Tensor l_size = Tensor::scalar(0.0);
  Tensor l_sem = Tensor::scalar(0.0);

  if (!positives.empty()) {
    std::vector<Vec3> gt_centers;
    std::vector<Vec3> size_targets;
    std::vector<int> bin_targets;
    std::vector<double> residual_targets;
    std::vector<int> class_targets;
    for (int i : positives) {
      const Box3D& gt = labels.boxes[assignment.matched_label[i]];
      gt_centers.push_back(gt.center);
      size_targets.push_back({std::log(gt.size[0] / mean_size[0]),
                              std::log(gt.size[1] / mean_size[1]),
                              std::log(gt.size[2] / mean_size[2])});
      const double h = canonical_heading(gt.heading);
      const int bin = heading_target_bin(h, nh);
      bin_targets.push_back(bin);
      residual_targets.push_back(wrap_angle(h - heading_bin_center(bin, nh)));
      class_targets.push_back(gt.class_id);
    }
    l_center = huber(gather_rows(props.centers, positives), const_matrix(gt_centers));
    Tensor heading_rows = gather_rows(props.heading_scores, positives);
    l_angle_cls = cross_entropy_rows(slice_cols(heading_rows, 0, nh), bin_targets);
    std::vector<int> residual_cols(bin_targets.size());
    for (std::size_t i = 0; i < bin_targets.size(); ++i) residual_cols[i] = nh + bin_targets[i];
    l_angle_reg = huber(gather_one_per_row(heading_rows, residual_cols),
                        Tensor::from_values({static_cast<int>(residual_targets.size())},
                                            residual_targets));
    l_size = huber(gather_rows(props.size_offsets, positives), const_matrix(size_targets));
    l_sem = cross_entropy_rows(gather_rows(props.class_logits, positives), class_targets);
  }

  Tensor l_box = add(add(l_center, scale(l_angle_cls, 0.1)), add(l_angle_reg, l_size));
  Tensor total = add(add(l_vote, scale(l_obj, weights.lambda1)),
                     add(scale(l_box, weights.lambda2), scale(l_sem, weights.lambda3)));

  SupervisedLossBreakdown out;
  out.total = total;
  out.vote_reg_term = l_vote;
  out.objectness_term = l_obj;
  out.center_term = l_center;
  out.angle_cls_term = l_angle_cls;
  out.angle_reg_term = l_angle_reg;
  out.size_term = l_size;
  out.sem_term = l_sem;
  out.vote_reg = l_vote.item();
  out.objectness = l_obj.item();
  out.center_reg = l_center.item();
  out.angle_cls = l_angle_cls.item();
  out.angle_reg = l_angle_reg.item();
  out.size_reg = l_size.item();
  out.sem_cls = l_sem.item();
  out.box = l_box.item();
  out.value = total.item();
  out.n_positive = static_cast<int>(positives.size());
  return out;
}

Tensor distillation_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                         const DistillVariant& variant, const Tensor* student_centers,
                         const Tensor* teacher_centers, const Tensor* student_sizes,
                         const Tensor* teacher_sizes) {
  variant.validate();
  if (student_logits.shape() != teacher_logits.shape()) {
    throw std::invalid_argument("distillation_loss: logit shape mismatch " +
                                shape_to_string(student_logits.shape()) + " vs " +
                                shape_to_string(teacher_logits.shape()));
  }
  const int k = student_logits.dim(0);
  const int c = student_logits.dim(1);
  if (k < 1) throw std::invalid_argument("distillation_loss: no proposals");

  Tensor total = Tensor::scalar(0.0);
  if (variant.target_class_logits) {
    switch (variant.loss_fn) {
      case DistillLossFn::kL2Normalized: {
        Tensor s_bar = sub_colvec(student_logits, mean_rows(student_logits));
        Tensor t_bar = sub_colvec(teacher_logits, mean_rows(teacher_logits));
        Tensor d = sub(s_bar, t_bar);
        total = add(total, mean(sqrt_guarded(sum_rows(mul(d, d)))));
        break;
      }
      case DistillLossFn::kCrossEntropy: {
        const auto& tv = teacher_logits.values();
        std::vector<int> targets(k);
        for (int i = 0; i < k; ++i) {
          const double* row = &tv[static_cast<std::size_t>(i) * c];
          targets[i] = static_cast<int>(std::max_element(row, row + c) - row);
        }
        total = add(total, cross_entropy_rows(student_logits, targets));
        break;
      }
      case DistillLossFn::kKdTemperature: {
        const double t = variant.temperature;
        Tensor ls = log_softmax_rows(scale(student_logits, 1.0 / t));
        Tensor soft = softmax(scale(teacher_logits, 1.0 / t), 1);
        Tensor p = Tensor::from_values(soft.shape(), soft.values());  // detached targets
        std::vector<double> ent(k, 0.0);
        const auto& pv = p.values();
        for (int i = 0; i < k; ++i) {
          for (int j = 0; j < c; ++j) {
            const double q = pv[static_cast<std::size_t>(i) * c + j];
            if (q > 0.0) ent[i] += q * std::log(q);
          }
        }
        Tensor kl = sub(Tensor::from_values({k}, std::move(ent)), sum_rows(mul(p, ls)));
        total = add(total, scale(mean(kl), t * t));
        break;
      }
    }
  }
  if (variant.target_center) {
    if (!student_centers || !teacher_centers) {
      throw std::invalid_argument("distillation_loss: center target requires center tensors");
    }
    if (student_centers->shape() != teacher_centers->shape()) {
      throw std::invalid_argument("distillation_loss: center shape mismatch");
    }
    Tensor d = sub(*student_centers, *teacher_centers);
    total = add(total, mean(mul(d, d)));
  }
  if (variant.target_size) {
    if (!student_sizes || !teacher_sizes) {
      throw std::invalid_argument("distillation_loss: size target requires size tensors");
    }
    if (student_sizes->shape() != teacher_sizes->shape()) {
      throw std::invalid_argument("distillation_loss: size shape mismatch");
    }
    Tensor d = sub(*student_sizes, *teacher_sizes);
    total = add(total, mean(mul(d, d)));
  }
  return total;
}

ConsistencyLossBreakdown consistency_loss(const ProposalSet& student, const Vec3& mean_size,
                                          const std::vector<Vec3>& teacher_centers,
                                          const std::vector<Vec3>& teacher_sizes,
                                          const std::vector<std::vector<double>>& teacher_probs) {
  const int k = student.centers.dim(0);
  const int nc = student.class_logits.dim(1);
  if (teacher_centers.empty() || teacher_centers.size() != teacher_sizes.size() ||
      teacher_centers.size() != teacher_probs.size()) {
    throw std::invalid_argument("consistency_loss: teacher arrays must be parallel and non-empty");
  }
  for (const auto& p : teacher_probs) {
    if (static_cast<int>(p.size()) != nc) {
      throw std::invalid_argument("consistency_loss: teacher class count mismatch");
    }
  }

  // nearest teacher proposal per student proposal, by decoded center
  const auto& sc = student.centers.values();
  std::vector<int> match(k, 0);
  for (int i = 0; i < k; ++i) {
    const Vec3 c{sc[i * 3], sc[i * 3 + 1], sc[i * 3 + 2]};
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < teacher_centers.size(); ++j) {
      const double d = dist2(c, teacher_centers[j]);
      if (d < best) {
        best = d;
        match[i] = static_cast<int>(j);
      }
    }
  }

  std::vector<Vec3> mc(k), ms(k);
  std::vector<double> probs_flat(static_cast<std::size_t>(k) * nc);
  std::vector<double> ent(k, 0.0);
  for (int i = 0; i < k; ++i) {
    mc[i] = teacher_centers[match[i]];
    ms[i] = teacher_sizes[match[i]];
    for (int j = 0; j < nc; ++j) {
      const double q = teacher_probs[match[i]][j];
      probs_flat[static_cast<std::size_t>(i) * nc + j] = q;
      if (q > 0.0) ent[i] += q * std::log(q);
    }
  }

  Tensor dc = sub(student.centers, const_matrix(mc));
  Tensor center_term = mean(sum_rows(mul(dc, dc)));

  Tensor ls = log_softmax_rows(student.class_logits);
  Tensor p = Tensor::from_values({k, nc}, std::move(probs_flat));
  Tensor class_term = mean(sub(Tensor::from_values({k}, std::move(ent)), sum_rows(mul(p, ls))));

  Tensor ds = sub(decoded_sizes_tensor(student.size_offsets, mean_size), const_matrix(ms));
  Tensor size_term = mean(sum_rows(mul(ds, ds)));

  ConsistencyLossBreakdown out;
  out.total = add(add(center_term, class_term), size_term);
  out.center = center_term.item();
  out.klass = class_term.item();
  out.size = size_term.item();
  out.value = out.total.item();
  return out;
}

double ramp_up_weight(int epoch, int ramp_up_epochs, double max_weight) {
  if (epoch < 0) throw std::invalid_argument("ramp_up_weight: epoch must be non-negative");
  double t = 1.0;
  if (ramp_up_epochs > 0) {
    t = std::min(1.0, static_cast<double>(epoch) / static_cast<double>(ramp_up_epochs));
  }
  return max_weight * std::exp(-5.0 * (1.0 - t) * (1.0 - t));
}

double ema_alpha_for_epoch(const EmaConfig& cfg, int epoch, int ramp_up_epochs) {
  return epoch < ramp_up_epochs ? cfg.alpha_rampup : cfg.alpha_after;
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "base") return TrainMode::kBase;
  if (name == "joint") return TrainMode::kJoint;
  if (name == "freeze_add") return TrainMode::kFreezeAdd;
  if (name == "finetune") return TrainMode::kFineTune;
  if (name == "sdcot") return TrainMode::kSdcot;
  if (name == "sdcot_no_dis") return TrainMode::kSdcotNoDis;
  if (name == "sdcot_no_con") return TrainMode::kSdcotNoCon;
  if (name == "sdcot_no_both") return TrainMode::kSdcotNoBoth;
  throw std::invalid_argument("unknown train mode: " + name);
}

std::string train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::kBase: return "base";
    case TrainMode::kJoint: return "joint";
    case TrainMode::kFreezeAdd: return "freeze_add";
    case TrainMode::kFineTune: return "finetune";
    case TrainMode::kSdcot: return "sdcot";
    case TrainMode::kSdcotNoDis: return "sdcot_no_dis";
    case TrainMode::kSdcotNoCon: return "sdcot_no_con";
    case TrainMode::kSdcotNoBoth: return "sdcot_no_both";
  }
  return "?";
}

bool mode_uses_pseudo_labels(TrainMode mode) {
  switch (mode) {
    case TrainMode::kSdcot:
    case TrainMode::kSdcotNoDis:
    case TrainMode::kSdcotNoCon:
    case TrainMode::kSdcotNoBoth:
      return true;
    default:
      return false;
  }
}

bool mode_uses_distillation(TrainMode mode) {
  return mode == TrainMode::kSdcot || mode == TrainMode::kSdcotNoCon;
}

bool mode_uses_consistency(TrainMode mode) {
  return mode == TrainMode::kSdcot || mode == TrainMode::kSdcotNoDis;
}

namespace {

void zero_classifier_rows(DetectorModel& model, int n_rows) {
  if (n_rows <= 0) return;
  Tensor& w = model.params.at("head.classifier.w");
  auto& g = w.mutable_grad();
  const int f = w.dim(1);
  std::fill(g.begin(), g.begin() + static_cast<std::size_t>(n_rows) * f, 0.0);
}

std::vector<int> shuffled_order(int n, RngStream& rng) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i + 1 < n; ++i) {
    const int j = i + rng.uniform_int(n - i);
    std::swap(order[i], order[j]);
  }
  return order;
}

LabelSet own_labels(const Scene& scene) {
  LabelSet out;
  out.boxes = scene.gt_boxes;
  out.instance_ids.resize(scene.gt_boxes.size());
  std::iota(out.instance_ids.begin(), out.instance_ids.end(), 0);
  out.is_pseudo.assign(scene.gt_boxes.size(), false);
  return out;
}

}  // namespace

StepBreakdown train_step(DetectorModel& student, const DetectorModel* static_teacher,
                         DetectorModel* dynamic_teacher, AdamState& adam, const Scene& scene,
                         int epoch, const IncrementalSettings& settings,
                         const std::set<int>& base_class_ids,
                         const std::set<int>& allowed_gt_class_ids, RngStream& step_rng,
                         int n_frozen_classifier_rows, const std::vector<Box3D>* cached_pseudo) {
  const DetectorConfig& cfg = student.config;
  const bool use_pseudo = mode_uses_pseudo_labels(settings.mode) && static_teacher != nullptr;
  const bool use_dis = mode_uses_distillation(settings.mode) && static_teacher != nullptr;
  const bool use_con = mode_uses_consistency(settings.mode) && dynamic_teacher != nullptr;

  StepBreakdown out;
  out.ramp_d = ramp_up_weight(epoch, settings.weights.ramp_up_epochs, settings.weights.lambda_d);
  out.ramp_c = ramp_up_weight(epoch, settings.weights.ramp_up_epochs, settings.weights.lambda_c);

  // (1) pseudo labels from the static teacher on the raw scene
  std::vector<Box3D> pseudo;
  if (use_pseudo) {
    if (cached_pseudo) {
      pseudo = *cached_pseudo;
    } else {
      RngStream rng_pl = step_rng.derive("pseudo");
      pseudo = generate_pseudo_labels(*static_teacher, scene, settings.pseudo, rng_pl);
    }
  }
  out.n_pseudo = static_cast<int>(pseudo.size());

  // (2) mixed labels
  std::vector<int> gt_ids(scene.gt_boxes.size());
  std::iota(gt_ids.begin(), gt_ids.end(), 0);
  MixedLabels mixed = mix_labels(pseudo, scene.gt_boxes, gt_ids, settings.dedupe_iou,
                                 base_class_ids, allowed_gt_class_ids);

  // (3) two subsampled views
  RngStream rng_j = step_rng.derive("sub_j");
  PointCloud xj = subsample_cloud(scene.cloud, cfg.n_points, rng_j);
  PointCloud xi;
  if (use_con) {
    RngStream rng_i = step_rng.derive("sub_i");
    xi = subsample_cloud(scene.cloud, cfg.n_points, rng_i);
  }

  // (4) augment the student view and the mixed labels
  RngStream rng_aug = step_rng.derive("aug");
  const PoseTransform aug = draw_augmentation(rng_aug);
  PointCloud xj_aug = apply_transform(aug, xj);
  LabelSet labels = mixed.flatten();
  labels.boxes = apply_transform(aug, labels.boxes);

  // (5) student forward, capturing sampled indices
  RngStream rng_fps = step_rng.derive("fps");
  DetectorOutput student_out = forward(student, xj_aug, rng_fps);

  // (6) distillation against the static teacher on the same view and indices
  Tensor l_dis = Tensor::scalar(0.0);
  if (use_dis) {
    const int n_base = static_teacher->config.n_classes;
    Tensor teacher_logits, teacher_centers, teacher_sizes;
    {
      NoGradGuard ng;
      DetectorOutput t_out =
          forward_with_indices(*static_teacher, xj_aug, student_out.proposals.indices);
      teacher_logits = t_out.proposals.class_logits;
      teacher_centers = t_out.proposals.centers;
      teacher_sizes = decoded_sizes_tensor(t_out.proposals.size_offsets, static_teacher->mean_size);
    }
    Tensor student_base = slice_cols(student_out.proposals.class_logits, 0, n_base);
    if (settings.distill.target_center || settings.distill.target_size) {
      Tensor student_sizes =
          decoded_sizes_tensor(student_out.proposals.size_offsets, student.mean_size);
      l_dis = distillation_loss(student_base, teacher_logits, settings.distill,
                                &student_out.proposals.centers, &teacher_centers, &student_sizes,
                                &teacher_sizes);
    } else {
      l_dis = distillation_loss(student_base, teacher_logits, settings.distill);
    }
  }

  // (7) consistency against the dynamic teacher's view, mapped into the
  // student's augmented frame
  Tensor l_con = Tensor::scalar(0.0);
  double con_value = 0.0;
  if (use_con) {
    std::vector<Vec3> t_centers, t_sizes;
    std::vector<std::vector<double>> t_probs;
    {
      NoGradGuard ng;
      RngStream rng_fps_dyn = step_rng.derive("fps_dyn");
      DetectorOutput d_out = forward(*dynamic_teacher, xi, rng_fps_dyn);
      const auto decoded = decode_proposals(d_out.proposals, dynamic_teacher->mean_size,
                                            dynamic_teacher->config.heading_bins);
      t_probs = row_softmax_values(d_out.proposals.class_logits);
      for (const auto& d : decoded) {
        t_centers.push_back(aug.apply_point(d.box.center));
        t_sizes.push_back({aug.scale * d.box.size[0], aug.scale * d.box.size[1],
                           aug.scale * d.box.size[2]});
      }
    }
    ConsistencyLossBreakdown con =
        consistency_loss(student_out.proposals, student.mean_size, t_centers, t_sizes, t_probs);
    l_con = con.total;
    con_value = con.value;
  }

  // (8) supervised loss on the mixed labels and the weighted total
  TargetAssignment assignment = assign_targets(student_out.proposals, student_out.seed_positions,
                                               student_out.seed_instance_ids, labels, cfg);
  SupervisedLossBreakdown sup =
      supervised_loss(student_out, assignment, labels, student.mean_size, settings.weights, cfg);

  Tensor total = scale(sup.total, settings.weights.lambda_s);
  if (use_dis) total = add(total, scale(l_dis, out.ramp_d));
  if (use_con) total = add(total, scale(l_con, out.ramp_c));

  // (9) optimize the student
  student.params.zero_grads();
  total.backward();
  if (n_frozen_classifier_rows > 0) zero_classifier_rows(student, n_frozen_classifier_rows);
  adam.step(student.params);

  // (10) EMA update of the dynamic teacher
  if (dynamic_teacher) {
    const double alpha =
        ema_alpha_for_epoch(settings.ema, epoch, settings.weights.ramp_up_epochs);
    ema_update(dynamic_teacher->params, student.params, alpha);
  }

  out.l_sup = sup.value;
  out.l_dis = use_dis ? l_dis.item() : 0.0;
  out.l_con = con_value;
  out.total = total.item();
  out.sup = sup;
  return out;
}

DetectorModel train_base(const DetectorConfig& config, const std::vector<Scene>& dataset,
                         const std::vector<std::string>& class_names, const Vec3& mean_size,
                         const TrainSchedule& schedule, RngStream rng,
                         const EpochCallback& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("train_base: empty dataset");
  RngStream init_rng = rng.derive("init");
  DetectorModel model = init_detector(config, class_names, mean_size, init_rng);
  AdamState adam(AdamConfig{schedule.lr});

  LossWeights sup_weights;  // lambda1..lambda3 defaults; outer weights unused here
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    if (std::find(schedule.lr_decay_epochs.begin(), schedule.lr_decay_epochs.end(), epoch) !=
        schedule.lr_decay_epochs.end()) {
      adam.set_lr(adam.lr() * schedule.lr_decay_factor);
    }
    RngStream order_rng = rng.derive("order/e" + std::to_string(epoch));
    const auto order = shuffled_order(static_cast<int>(dataset.size()), order_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr();
    for (std::size_t si = 0; si < order.size(); ++si) {
      const Scene& scene = dataset[order[si]];
      RngStream step_rng =
          rng.derive("step/e" + std::to_string(epoch) + "/s" + std::to_string(si));

      RngStream rng_sub = step_rng.derive("sub_j");
      PointCloud cloud = subsample_cloud(scene.cloud, config.n_points, rng_sub);
      RngStream rng_aug = step_rng.derive("aug");
      const PoseTransform augment = draw_augmentation(rng_aug);
      cloud = apply_transform(augment, cloud);
      LabelSet labels = own_labels(scene);
      labels.boxes = apply_transform(augment, labels.boxes);

      RngStream rng_fps = step_rng.derive("fps");
      DetectorOutput fwd = forward(model, cloud, rng_fps);
      TargetAssignment assignment = assign_targets(fwd.proposals, fwd.seed_positions,
                                                   fwd.seed_instance_ids, labels, model.config);
      SupervisedLossBreakdown sup =
          supervised_loss(fwd, assignment, labels, model.mean_size, sup_weights, model.config);
      model.params.zero_grads();
      sup.total.backward();
      adam.step(model.params);
      rec.l_sup += sup.value;
      rec.total += sup.value;
      rec.mean_positives += sup.n_positive;
      rec.vote_reg += sup.vote_reg;
      rec.objectness += sup.objectness;
      rec.box += sup.box;
      rec.sem_cls += sup.sem_cls;
    }
    if (!order.empty()) {
      const double n = static_cast<double>(order.size());
      rec.l_sup /= n;
      rec.total /= n;
      rec.mean_positives /= n;
      rec.vote_reg /= n;
      rec.objectness /= n;
      rec.box /= n;
      rec.sem_cls /= n;
    }
    if (on_epoch) on_epoch(rec);
  }
  return model;
}

IncrementalResult train_incremental(const DetectorModel& base_model,
                                    const std::vector<Scene>& novel_dataset,
                                    const std::vector<std::string>& novel_classes,
                                    const std::vector<Scene>& replay_exemplars,
                                    const IncrementalSettings& settings, RngStream rng,
                                    const EpochCallback& on_epoch) {
  if (novel_dataset.empty()) throw std::invalid_argument("train_incremental: empty novel dataset");
  if (novel_classes.empty()) throw std::invalid_argument("train_incremental: no novel classes");
  for (const auto& name : novel_classes) {
    for (const auto& existing : base_model.class_names) {
      if (name == existing) {
        throw std::invalid_argument("train_incremental: class set overlap on " + name);
      }
    }
  }

  const int base_nc = base_model.config.n_classes;
  std::set<int> base_ids;
  for (int c = 0; c < base_nc; ++c) base_ids.insert(c);

  IncrementalResult result;
  result.student = base_model.clone();
  RngStream init_rng = rng.derive("init_novel");
  extend_classifier(result.student, novel_classes, init_rng);

  DetectorModel static_teacher = base_model.clone();
  static_teacher.freeze();
  const bool need_static = mode_uses_pseudo_labels(settings.mode) ||
                           mode_uses_distillation(settings.mode);
  const bool need_dynamic = mode_uses_consistency(settings.mode);

  if (need_dynamic) {
    result.dynamic_teacher = result.student.clone();
    result.dynamic_teacher->freeze();
  }

  int frozen_rows = 0;
  if (settings.mode == TrainMode::kFreezeAdd) {
    result.student.params.freeze_all();
    result.student.params.at("head.classifier.w").set_requires_grad(true);
    frozen_rows = base_nc;
  } else if (settings.mode == TrainMode::kFineTune) {
    frozen_rows = base_nc;
  }

  std::vector<const Scene*> pool;
  for (const auto& s : novel_dataset) pool.push_back(&s);
  for (const auto& s : replay_exemplars) pool.push_back(&s);

  std::set<int> allowed_gt;
  for (int c = base_nc; c < result.student.config.n_classes; ++c) allowed_gt.insert(c);
  if (!replay_exemplars.empty()) {
    for (int c : base_ids) allowed_gt.insert(c);
  }

  const bool pseudo_active = mode_uses_pseudo_labels(settings.mode) && need_static;
  std::map<int, std::vector<Box3D>> pseudo_cache;
  if (pseudo_active && settings.cache_pseudo_labels) {
    for (const Scene* s : pool) {
      if (pseudo_cache.count(s->id)) continue;
      RngStream pl_rng = rng.derive("pseudo/scene_" + std::to_string(s->id));
      pseudo_cache[s->id] = generate_pseudo_labels(static_teacher, *s, settings.pseudo, pl_rng);
    }
  }

  AdamState adam(AdamConfig{settings.schedule.lr});
  for (int epoch = 0; epoch < settings.schedule.epochs; ++epoch) {
    if (std::find(settings.schedule.lr_decay_epochs.begin(),
                  settings.schedule.lr_decay_epochs.end(),
                  epoch) != settings.schedule.lr_decay_epochs.end()) {
      adam.set_lr(adam.lr() * settings.schedule.lr_decay_factor);
    }
    RngStream order_rng = rng.derive("order/e" + std::to_string(epoch));
    const auto order = shuffled_order(static_cast<int>(pool.size()), order_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr();
    for (std::size_t si = 0; si < order.size(); ++si) {
      RngStream step_rng =
          rng.derive("step/e" + std::to_string(epoch) + "/s" + std::to_string(si));
      const Scene* scene = pool[order[si]];
      const std::vector<Box3D>* cached =
          pseudo_active && settings.cache_pseudo_labels ? &pseudo_cache[scene->id] : nullptr;
      StepBreakdown step = train_step(
          result.student, need_static ? &static_teacher : nullptr,
          result.dynamic_teacher ? &*result.dynamic_teacher : nullptr, adam, *scene,
          epoch, settings, base_ids, allowed_gt, step_rng, frozen_rows, cached);
      rec.l_sup += step.l_sup;
      rec.l_dis += step.l_dis;
      rec.l_con += step.l_con;
      rec.total += step.total;
      rec.mean_pseudo += step.n_pseudo;
      rec.mean_positives += step.sup.n_positive;
      rec.vote_reg += step.sup.vote_reg;
      rec.objectness += step.sup.objectness;
      rec.box += step.sup.box;
      rec.sem_cls += step.sup.sem_cls;
      rec.ramp_d = step.ramp_d;
      rec.ramp_c = step.ramp_c;
    }
    if (!order.empty()) {
      const double n = static_cast<double>(order.size());
      rec.l_sup /= n;
      rec.l_dis /= n;
      rec.l_con /= n;
      rec.total /= n;
      rec.mean_pseudo /= n;
      rec.mean_positives /= n;
      rec.vote_reg /= n;
      rec.objectness /= n;
      rec.box /= n;
      rec.sem_cls /= n;
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

IncrementalResult sequential_round(const DetectorModel& previous_student,
                                   const std::vector<Scene>& next_dataset,
                                   const std::vector<std::string>& next_classes,
                                   const IncrementalSettings& settings, RngStream rng,
                                   const EpochCallback& on_epoch) {
  // The previous student acts as the next static teacher, and every class it
  // knows becomes part of the base set for pseudo labeling.
  return train_incremental(previous_student, next_dataset, next_classes, {}, settings,
                           std::move(rng), on_epoch);
}

}  // namespace sdcot
