#include "sdcot/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace sdcot {

namespace {

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

std::vector<double> uniform_init(std::int64_t count, int fan_in, RngStream& rng) {
  const double half_width = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> out(count);
  for (auto& v : out) v = rng.uniform(-half_width, half_width);
  return out;
}

void create_linear(ParamStore& store, const std::string& prefix, int in, int out, RngStream& rng,
                   bool with_bias = true) {
  store.create(prefix + ".w", {in, out}, uniform_init(static_cast<std::int64_t>(in) * out, in, rng));
  if (with_bias) store.create(prefix + ".b", {out}, uniform_init(out, in, rng));
}

Tensor linear(const ParamStore& p, const std::string& prefix, const Tensor& x) {
  return add_rowvec(matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

Tensor coords_tensor(const std::vector<Vec3>& pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 3);
  for (const auto& p : pts) {
    v.push_back(p[0]);
    v.push_back(p[1]);
    v.push_back(p[2]);
  }
  return Tensor::from_values({static_cast<int>(pts.size()), 3}, std::move(v));
}

// Ball query with an optional sample cap. Oversized balls are thinned by a
// deterministic stride so the kept members still span the whole ball.
std::vector<std::vector<int>> radius_groups(const std::vector<Vec3>& all,
                                            const std::vector<Vec3>& centers, double radius,
                                            int max_samples = 0) {
  const double r2 = radius * radius;
  std::vector<std::vector<int>> groups(centers.size());
  std::vector<int> hits;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    hits.clear();
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (dist2(all[i], centers[c]) <= r2) hits.push_back(static_cast<int>(i));
    }
    const int n = static_cast<int>(hits.size());
    if (max_samples > 0 && n > max_samples) {
      for (int k = 0; k < max_samples; ++k) {
        groups[c].push_back(hits[static_cast<std::size_t>(k) * n / max_samples]);
      }
    } else {
      groups[c] = hits;
    }
  }
  return groups;
}

std::vector<Vec3> rows_as_vec3(const Tensor& t) {
  std::vector<Vec3> out(t.dim(0));
  const auto& v = t.values();
  for (int i = 0; i < t.dim(0); ++i) out[i] = {v[i * 3 + 0], v[i * 3 + 1], v[i * 3 + 2]};
  return out;
}

}  // namespace

void DetectorConfig::validate() const {
  if (n_points <= 0 || n_seeds <= 0 || n_proposals <= 0) {
    throw std::invalid_argument("detector config: counts must be positive");
  }
  if (n_seeds > n_points) throw std::invalid_argument("detector config: M must not exceed N");
  if (n_proposals > n_seeds) throw std::invalid_argument("detector config: K must not exceed M");
  if (heading_bins < 1) throw std::invalid_argument("detector config: NH must be >= 1");
  if (n_classes < 1) throw std::invalid_argument("detector config: NC must be >= 1");
  if (feature_dim <= 0) throw std::invalid_argument("detector config: feature_dim must be positive");
  if (grouping_radius <= 0 || vote_radius_near <= 0 || vote_radius_far <= 0) {
    throw std::invalid_argument("detector config: radii must be positive");
  }
  if (vote_radius_near >= vote_radius_far) {
    throw std::invalid_argument("detector config: near radius must be below far radius");
  }
}

DetectorModel DetectorModel::clone() const {
  DetectorModel out;
  out.config = config;
  out.class_names = class_names;
  out.mean_size = mean_size;
  out.params = params.clone();
  return out;
}

DetectorModel init_detector(const DetectorConfig& config, std::vector<std::string> class_names,
                            const Vec3& mean_size, RngStream& rng) {
  DetectorConfig cfg = config;
  cfg.n_classes = static_cast<int>(class_names.size());
  cfg.validate();

  DetectorModel model;
  model.config = cfg;
  model.class_names = std::move(class_names);
  model.mean_size = mean_size;

  const int f = cfg.feature_dim;
  ParamStore& p = model.params;
  create_linear(p, "backbone.point1", 3, f, rng);
  create_linear(p, "backbone.point2", f, f, rng);
  create_linear(p, "backbone.self", 3, f, rng);
  create_linear(p, "backbone.combine", 2 * f, f, rng);
  create_linear(p, "vote.hidden1", f, f, rng);
  create_linear(p, "vote.hidden2", f, f, rng);
  create_linear(p, "vote.offset", f, 3, rng);
  create_linear(p, "vote.residual", f, f, rng);
  create_linear(p, "proposal.pre", f + 3, f, rng);
  create_linear(p, "proposal.mlp1", f, f, rng);
  create_linear(p, "proposal.mlp2", f, f, rng);
  create_linear(p, "head.regressor", f, cfg.regressor_width(), rng);
  // Bias-free classifier, one row per class.
  p.create("head.classifier.w", {cfg.n_classes, f},
           uniform_init(static_cast<std::int64_t>(cfg.n_classes) * f, f, rng));
  return model;
}

std::vector<int> farthest_point_sample(const std::vector<Vec3>& points, int count,
                                       RngStream& rng) {
  const int n = static_cast<int>(points.size());
  if (count <= 0) throw std::invalid_argument("farthest_point_sample: count must be positive");
  if (count > n) {
    throw std::invalid_argument("farthest_point_sample: count " + std::to_string(count) +
                                " exceeds point count " + std::to_string(n));
  }
  std::vector<int> selected;
  selected.reserve(count);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  int cur = rng.uniform_int(n);
  selected.push_back(cur);
  for (int k = 1; k < count; ++k) {
    int next = -1;
    double far2 = -1.0;
    for (int i = 0; i < n; ++i) {
      const double d2 = dist2(points[i], points[cur]);
      if (d2 < best[i]) best[i] = d2;
      if (best[i] > far2) {
        far2 = best[i];
        next = i;
      }
    }
    selected.push_back(next);
    cur = next;
  }
  return selected;
}

PointCloud normalize_cloud(const PointCloud& cloud, int n_points) {
  const int n = static_cast<int>(cloud.points.size());
  if (n == 0) throw std::invalid_argument("normalize_cloud: empty cloud");
  if (n == n_points) return cloud;
  PointCloud out;
  out.points.reserve(n_points);
  out.instance_ids.reserve(n_points);
  const bool has_ids = !cloud.instance_ids.empty();
  if (n < n_points) {
    for (int i = 0; i < n_points; ++i) {
      const int j = i % n;
      out.points.push_back(cloud.points[j]);
      out.instance_ids.push_back(has_ids ? cloud.instance_ids[j] : -1);
    }
  } else {
    for (int i = 0; i < n_points; ++i) {
      const int j = static_cast<int>((static_cast<std::int64_t>(i) * n) / n_points);
      out.points.push_back(cloud.points[j]);
      out.instance_ids.push_back(has_ids ? cloud.instance_ids[j] : -1);
    }
  }
  return out;
}

SeedFeatures backbone_forward(const ParamStore& params, const PointCloud& cloud,
                              const std::vector<int>& seed_indices,
                              const DetectorConfig& config) {
  const int n = static_cast<int>(cloud.points.size());
  for (int idx : seed_indices) {
    if (idx < 0 || idx >= n) throw std::invalid_argument("backbone_forward: seed index out of range");
  }
  std::vector<Vec3> seed_pos;
  seed_pos.reserve(seed_indices.size());
  for (int idx : seed_indices) seed_pos.push_back(cloud.points[idx]);

  // Local shape: per seed, neighbor offsets feed a shared MLP and max-pool.
  // Offsets are seed-relative, so the pooled feature is translation-
  // equivariant; absolute position enters through the self branch only.
  auto groups = radius_groups(cloud.points, seed_pos, config.grouping_radius, 32);
  std::vector<double> rel;
  std::vector<std::vector<int>> ranges(groups.size());
  int row = 0;
  for (std::size_t s = 0; s < groups.size(); ++s) {
    for (int j : groups[s]) {
      for (int d = 0; d < 3; ++d) rel.push_back(cloud.points[j][d] - seed_pos[s][d]);
      ranges[s].push_back(row++);
    }
  }
  Tensor rel_coords = Tensor::from_values({row, 3}, std::move(rel));
  Tensor p1 = relu(linear(params, "backbone.point1", rel_coords));
  Tensor p2 = relu(linear(params, "backbone.point2", p1));
  Tensor pooled = group_max(p2, ranges);  // [M, F]

  Tensor seed_coords = coords_tensor(seed_pos);
  Tensor self_feat = relu(linear(params, "backbone.self", seed_coords));
  Tensor combined = relu(linear(params, "backbone.combine", concat_cols(self_feat, pooled)));

  SeedFeatures out;
  out.features = combined;
  out.positions = std::move(seed_pos);
  return out;
}

Votes vote(const ParamStore& params, const SeedFeatures& seeds) {
  Tensor h1 = relu(linear(params, "vote.hidden1", seeds.features));
  Tensor h = relu(linear(params, "vote.hidden2", h1));
  Tensor offsets = linear(params, "vote.offset", h);
  Tensor residual = linear(params, "vote.residual", h);
  Votes out;
  out.positions = add(coords_tensor(seeds.positions), offsets);
  out.features = add(seeds.features, residual);
  return out;
}

ProposalSet propose(const ParamStore& params, const Votes& votes,
                    const std::vector<int>& cluster_indices, const DetectorConfig& config,
                    const std::vector<std::vector<int>>* fixed_groups,
                    std::vector<std::vector<int>>* used_groups) {
  const int m = votes.positions.dim(0);
  for (int idx : cluster_indices) {
    if (idx < 0 || idx >= m) throw std::invalid_argument("propose: cluster index out of range");
  }
  const auto vote_pos = rows_as_vec3(votes.positions);
  std::vector<Vec3> centers;
  centers.reserve(cluster_indices.size());
  for (int idx : cluster_indices) centers.push_back(vote_pos[idx]);
  auto groups = fixed_groups ? *fixed_groups
                             : radius_groups(vote_pos, centers, config.grouping_radius);
  if (fixed_groups && fixed_groups->size() != cluster_indices.size()) {
    throw std::invalid_argument("propose: fixed group count must match cluster count");
  }
  if (used_groups) *used_groups = groups;

  Tensor grouped = group_rel_concat(votes.features, votes.positions, groups, cluster_indices);
  Tensor pre = relu(linear(params, "proposal.pre", grouped));
  std::vector<std::vector<int>> ranges(groups.size());
  int row = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t j = 0; j < groups[g].size(); ++j) ranges[g].push_back(row++);
  }
  Tensor pooled = group_max(pre, ranges);  // [K, F]
  Tensor a = relu(linear(params, "proposal.mlp1", pooled));
  Tensor b = relu(linear(params, "proposal.mlp2", a));

  Tensor reg = linear(params, "head.regressor", b);
  Tensor cls = matmul_nt(b, params.at("head.classifier.w"));

  ProposalSet out;
  out.objectness_logits = slice_cols(reg, 0, 2);
  Tensor center_offsets = slice_cols(reg, 2, 5);
  out.centers = add(gather_rows(votes.positions, cluster_indices), center_offsets);
  out.size_offsets = slice_cols(reg, 5, 8);
  out.heading_scores = slice_cols(reg, 8, 8 + 2 * config.heading_bins);
  out.class_logits = cls;
  out.cluster_positions = std::move(centers);
  out.indices.cluster_indices = cluster_indices;
  return out;
}

DetectorOutput forward(const DetectorModel& model, const PointCloud& cloud, RngStream& rng) {
  if (cloud.points.empty()) throw std::invalid_argument("forward: empty point cloud");
  const DetectorConfig& cfg = model.config;
  PointCloud pts = normalize_cloud(cloud, cfg.n_points);

  SampleIndices idx;
  idx.seed_indices = farthest_point_sample(pts.points, cfg.n_seeds, rng);
  SeedFeatures seeds = backbone_forward(model.params, pts, idx.seed_indices, cfg);
  Votes votes = vote(model.params, seeds);
  idx.cluster_indices = farthest_point_sample(rows_as_vec3(votes.positions), cfg.n_proposals, rng);

  DetectorOutput out;
  out.proposals = propose(model.params, votes, idx.cluster_indices, cfg, nullptr,
                          &out.proposal_groups);
  out.proposals.indices = idx;
  out.vote_positions = votes.positions;
  out.seed_positions = seeds.positions;
  out.seed_instance_ids.reserve(idx.seed_indices.size());
  for (int i : idx.seed_indices) {
    out.seed_instance_ids.push_back(pts.instance_ids.empty() ? -1 : pts.instance_ids[i]);
  }
  return out;
}

DetectorOutput forward_with_indices(const DetectorModel& model, const PointCloud& cloud,
                                    const SampleIndices& indices,
                                    const std::vector<std::vector<int>>* fixed_groups) {
  if (cloud.points.empty()) throw std::invalid_argument("forward_with_indices: empty point cloud");
  const DetectorConfig& cfg = model.config;
  PointCloud pts = normalize_cloud(cloud, cfg.n_points);
  if (static_cast<int>(indices.seed_indices.size()) != cfg.n_seeds) {
    throw std::invalid_argument("forward_with_indices: seed index count mismatch");
  }
  if (static_cast<int>(indices.cluster_indices.size()) != cfg.n_proposals) {
    throw std::invalid_argument("forward_with_indices: cluster index count mismatch");
  }
  for (int i : indices.seed_indices) {
    if (i < 0 || i >= cfg.n_points) {
      throw std::invalid_argument("forward_with_indices: seed index out of range");
    }
  }
  SeedFeatures seeds = backbone_forward(model.params, pts, indices.seed_indices, cfg);
  Votes votes = vote(model.params, seeds);

  DetectorOutput out;
  out.proposals = propose(model.params, votes, indices.cluster_indices, cfg, fixed_groups,
                          &out.proposal_groups);
  out.proposals.indices = indices;
  out.vote_positions = votes.positions;
  out.seed_positions = seeds.positions;
  out.seed_instance_ids.reserve(indices.seed_indices.size());
  for (int i : indices.seed_indices) {
    out.seed_instance_ids.push_back(pts.instance_ids.empty() ? -1 : pts.instance_ids[i]);
  }
  return out;
}

void extend_classifier(DetectorModel& model, const std::vector<std::string>& new_classes,
                       RngStream& init_rng) {
  if (new_classes.empty()) {
    throw std::invalid_argument("extend_classifier: need at least one new class");
  }
  for (const auto& name : new_classes) {
    for (const auto& existing : model.class_names) {
      if (name == existing) {
        throw std::invalid_argument("extend_classifier: class already present: " + name);
      }
    }
  }
  const int f = model.config.feature_dim;
  const Tensor& old_w = model.params.at("head.classifier.w");
  const int old_nc = old_w.dim(0);
  const int new_nc = old_nc + static_cast<int>(new_classes.size());

  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(new_nc) * f);
  values.insert(values.end(), old_w.values().begin(), old_w.values().end());
  auto fresh = uniform_init(static_cast<std::int64_t>(new_classes.size()) * f, f, init_rng);
  values.insert(values.end(), fresh.begin(), fresh.end());

  Tensor extended = Tensor::from_values({new_nc, f}, std::move(values), old_w.requires_grad());
  model.params.replace("head.classifier.w", std::move(extended));
  for (const auto& name : new_classes) model.class_names.push_back(name);
  model.config.n_classes = new_nc;
}

double heading_bin_center(int bin, int heading_bins) {
  return -M_PI + (bin + 0.5) * (2.0 * M_PI / heading_bins);
}

int heading_target_bin(double heading, int heading_bins) {
  const double h = wrap_angle(heading);
  int bin = static_cast<int>((h + M_PI) / (2.0 * M_PI / heading_bins));
  return std::clamp(bin, 0, heading_bins - 1);
}

std::vector<DecodedProposal> decode_proposals(const ProposalSet& proposals, const Vec3& mean_size,
                                              int heading_bins) {
  const int k = proposals.objectness_logits.dim(0);
  const int nc = proposals.class_logits.dim(1);
  const auto& obj = proposals.objectness_logits.values();
  const auto& ctr = proposals.centers.values();
  const auto& soff = proposals.size_offsets.values();
  const auto& head = proposals.heading_scores.values();
  const auto& cls = proposals.class_logits.values();

  std::vector<DecodedProposal> out(k);
  for (int i = 0; i < k; ++i) {
    DecodedProposal& d = out[i];
    // 2-way softmax, stable
    const double o0 = obj[i * 2], o1 = obj[i * 2 + 1];
    const double mo = std::max(o0, o1);
    const double e0 = std::exp(o0 - mo), e1 = std::exp(o1 - mo);
    d.objectness = e1 / (e0 + e1);

    d.box.center = {ctr[i * 3], ctr[i * 3 + 1], ctr[i * 3 + 2]};
    for (int dd = 0; dd < 3; ++dd) {
      const double off = std::clamp(soff[i * 3 + dd], -6.0, 6.0);
      d.box.size[dd] = std::max(mean_size[dd] * std::exp(off), 1e-4);
    }

    const double* hrow = &head[static_cast<std::size_t>(i) * 2 * heading_bins];
    int best_bin = 0;
    for (int b = 1; b < heading_bins; ++b) {
      if (hrow[b] > hrow[best_bin]) best_bin = b;
    }
    d.box.heading = wrap_angle(heading_bin_center(best_bin, heading_bins) +
                               hrow[heading_bins + best_bin]);

    const double* crow = &cls[static_cast<std::size_t>(i) * nc];
    int best_c = 0;
    double mc = crow[0];
    for (int c = 1; c < nc; ++c) {
      if (crow[c] > mc) {
        mc = crow[c];
        best_c = c;
      }
    }
    double z = 0.0;
    for (int c = 0; c < nc; ++c) z += std::exp(crow[c] - mc);
    d.class_prob = 1.0 / z;  // exp(mc - mc) / z
    d.box.class_id = best_c;
    d.box.score = d.objectness * d.class_prob;
  }
  return out;
}

TargetAssignment assign_targets(const ProposalSet& proposals,
                                const std::vector<Vec3>& seed_positions,
                                const std::vector<int>& seed_instance_ids,
                                const LabelSet& labels, const DetectorConfig& config) {
  const int k = static_cast<int>(proposals.cluster_positions.size());
  const int m = static_cast<int>(seed_positions.size());
  if (labels.boxes.size() != labels.instance_ids.size() ||
      labels.boxes.size() != labels.is_pseudo.size()) {
    throw std::invalid_argument("assign_targets: label arrays must be parallel");
  }

  TargetAssignment out;
  out.objectness.assign(k, ObjectnessLabel::kNegative);
  out.matched_label.assign(k, -1);
  out.vote_owner.assign(m, -1);

  const double near2 = config.vote_radius_near * config.vote_radius_near;
  const double far2 = config.vote_radius_far * config.vote_radius_far;

  for (int i = 0; i < k; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_label = -1;
    for (std::size_t l = 0; l < labels.boxes.size(); ++l) {
      const double d2 = dist2(proposals.cluster_positions[i], labels.boxes[l].center);
      if (d2 < best) {
        best = d2;
        best_label = static_cast<int>(l);
      }
    }
    if (best_label < 0) continue;  // no labels: everything stays negative
    if (best <= near2) {
      out.objectness[i] = ObjectnessLabel::kPositive;
      out.matched_label[i] = best_label;
    } else if (best <= far2) {
      out.objectness[i] = ObjectnessLabel::kIgnored;
    }
  }

  for (int s = 0; s < m; ++s) {
    const int inst = s < static_cast<int>(seed_instance_ids.size()) ? seed_instance_ids[s] : -1;
    int owner = -1;
    if (inst >= 0) {
      for (std::size_t l = 0; l < labels.boxes.size(); ++l) {
        if (labels.instance_ids[l] == inst) {
          owner = static_cast<int>(l);
          break;
        }
      }
    }
    if (owner < 0) {
      // Unlinked labels (pseudo boxes) claim seeds by containment.
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < labels.boxes.size(); ++l) {
        if (labels.instance_ids[l] >= 0) continue;
        if (!point_in_box(seed_positions[s], labels.boxes[l], 1e-6)) continue;
        const double d2 = dist2(seed_positions[s], labels.boxes[l].center);
        if (d2 < best) {
          best = d2;
          owner = static_cast<int>(l);
        }
      }
    }
    out.vote_owner[s] = owner;
  }
  return out;
}

void save_checkpoint(std::ostream& os, const DetectorModel& model) {
  const DetectorConfig& c = model.config;
  os << "SDCOT-CKPT v1"
     << " n_points=" << c.n_points << " n_seeds=" << c.n_seeds
     << " n_proposals=" << c.n_proposals << " heading_bins=" << c.heading_bins
     << " n_classes=" << c.n_classes << " feature_dim=" << c.feature_dim
     << " grouping_radius=" << c.grouping_radius << " vote_radius_near=" << c.vote_radius_near
     << " vote_radius_far=" << c.vote_radius_far;
  os << " classes=";
  for (std::size_t i = 0; i < model.class_names.size(); ++i) {
    if (i) os << ",";
    os << model.class_names[i];
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), " mean_size=%.17g,%.17g,%.17g", model.mean_size[0],
                model.mean_size[1], model.mean_size[2]);
  os << buf << "\n";
  model.params.save(os);
}

DetectorModel load_checkpoint(std::istream& is) {
  std::string header;
  if (!std::getline(is, header) || header.rfind("SDCOT-CKPT v1", 0) != 0) {
    throw std::runtime_error("checkpoint load: bad header");
  }
  DetectorModel model;
  std::istringstream hs(header);
  std::string tok;
  hs >> tok >> tok;  // magic, version
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint load: bad header field " + tok);
    const std::string key = tok.substr(0, eq);
    const std::string val = tok.substr(eq + 1);
    DetectorConfig& c = model.config;
    if (key == "n_points") c.n_points = std::stoi(val);
    else if (key == "n_seeds") c.n_seeds = std::stoi(val);
    else if (key == "n_proposals") c.n_proposals = std::stoi(val);
    else if (key == "heading_bins") c.heading_bins = std::stoi(val);
    else if (key == "n_classes") c.n_classes = std::stoi(val);
    else if (key == "feature_dim") c.feature_dim = std::stoi(val);
    else if (key == "grouping_radius") c.grouping_radius = std::stod(val);
    else if (key == "vote_radius_near") c.vote_radius_near = std::stod(val);
    else if (key == "vote_radius_far") c.vote_radius_far = std::stod(val);
    else if (key == "classes") {
      std::stringstream ss(val);
      std::string name;
      while (std::getline(ss, name, ',')) model.class_names.push_back(name);
    } else if (key == "mean_size") {
      std::stringstream ss(val);
      std::string num;
      for (int d = 0; d < 3 && std::getline(ss, num, ','); ++d) model.mean_size[d] = std::stod(num);
    } else {
      throw std::runtime_error("checkpoint load: unknown header field " + key);
    }
  }
  if (static_cast<int>(model.class_names.size()) != model.config.n_classes) {
    throw std::runtime_error("checkpoint load: class list does not match n_classes");
  }
  model.config.validate();
  model.params = ParamStore::load(is);
  return model;
}

void save_checkpoint_file(const std::string& path, const DetectorModel& model) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  save_checkpoint(os, model);
  if (!os) throw std::runtime_error("write failed for checkpoint: " + path);
}

DetectorModel load_checkpoint_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  return load_checkpoint(is);
}

}  // namespace sdcot
