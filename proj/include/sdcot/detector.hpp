#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "sdcot/data.hpp"
#include "sdcot/geometry.hpp"
#include "sdcot/params.hpp"
#include "sdcot/rng.hpp"
#include "sdcot/tensor.hpp"

namespace sdcot {

struct DetectorConfig {
  int n_points = 512;      // N
  int n_seeds = 128;       // M
  int n_proposals = 16;    // K
  int heading_bins = 1;    // NH
  int n_classes = 1;       // NC, grows under classifier extension
  int feature_dim = 32;
  double grouping_radius = 0.6;
  double vote_radius_near = 0.3;
  double vote_radius_far = 0.6;

  void validate() const;
  int regressor_width() const { return 2 + 3 + 3 + 2 * heading_bins; }
};

// Sampled-point bookkeeping: capturing these from one model and replaying
// them in another aligns the two proposal sets slot by slot.
struct SampleIndices {
  std::vector<int> seed_indices;     // M indices into the N input points
  std::vector<int> cluster_indices;  // K indices into the M votes
};

struct ProposalSet {
  Tensor objectness_logits;  // [K, 2]
  Tensor centers;            // [K, 3], absolute
  Tensor size_offsets;       // [K, 3], class-agnostic log-scale offsets
  Tensor heading_scores;     // [K, 2*NH]: NH bin scores then NH residuals
  Tensor class_logits;       // [K, NC], bias-free classifier
  std::vector<Vec3> cluster_positions;  // vote position of each cluster seed
  SampleIndices indices;
};

struct DetectorOutput {
  ProposalSet proposals;
  Tensor vote_positions;            // [M, 3]
  std::vector<Vec3> seed_positions; // values snapshot
  std::vector<int> seed_instance_ids;
  std::vector<std::vector<int>> proposal_groups;  // vote membership per cluster
};

struct DetectorModel {
  DetectorConfig config;
  std::vector<std::string> class_names;  // class_id = index into this list
  Vec3 mean_size{1, 1, 1};               // catalog-wide mean extents

  ParamStore params;

  DetectorModel clone() const;
  void freeze() { params.freeze_all(); }
};

DetectorModel init_detector(const DetectorConfig& config, std::vector<std::string> class_names,
                            const Vec3& mean_size, RngStream& rng);

// Greedy farthest point sampling; the rng only picks the starting point.
std::vector<int> farthest_point_sample(const std::vector<Vec3>& points, int count,
                                       RngStream& rng);

// Deterministically resizes a cloud to exactly n points: cyclic repetition
// when short, evenly strided selection when long.
PointCloud normalize_cloud(const PointCloud& cloud, int n_points);

struct SeedFeatures {
  Tensor features;              // [M, F]
  std::vector<Vec3> positions;  // seed coordinates
};

SeedFeatures backbone_forward(const ParamStore& params, const PointCloud& cloud,
                              const std::vector<int>& seed_indices,
                              const DetectorConfig& config);

struct Votes {
  Tensor positions;  // [M, 3]
  Tensor features;   // [M, F]
};

Votes vote(const ParamStore& params, const SeedFeatures& seeds);

// Vote grouping follows vote positions unless fixed_groups pins the
// membership (gradient checks differentiate with the structure frozen).
ProposalSet propose(const ParamStore& params, const Votes& votes,
                    const std::vector<int>& cluster_indices, const DetectorConfig& config,
                    const std::vector<std::vector<int>>* fixed_groups = nullptr,
                    std::vector<std::vector<int>>* used_groups = nullptr);

DetectorOutput forward(const DetectorModel& model, const PointCloud& cloud, RngStream& rng);
DetectorOutput forward_with_indices(const DetectorModel& model, const PointCloud& cloud,
                                    const SampleIndices& indices,
                                    const std::vector<std::vector<int>>* fixed_groups = nullptr);

// Appends rows to the bias-free classifier; every pre-existing parameter is
// bitwise untouched, so base-class logits are conserved exactly.
void extend_classifier(DetectorModel& model, const std::vector<std::string>& new_classes,
                       RngStream& init_rng);

struct DecodedProposal {
  Box3D box;
  double objectness = 0.0;  // softmax positive probability
  double class_prob = 0.0;  // max class probability
};

std::vector<DecodedProposal> decode_proposals(const ProposalSet& proposals, const Vec3& mean_size,
                                              int heading_bins);

enum class ObjectnessLabel { kNegative = -1, kIgnored = 0, kPositive = 1 };

struct TargetAssignment {
  std::vector<ObjectnessLabel> objectness;  // per proposal
  std::vector<int> matched_label;           // label index for positives, else -1
  std::vector<int> vote_owner;              // per seed: label index or -1
};

// Training labels with optional instance linkage back to the scene's boxes
// (pseudo labels carry no link and claim seeds by geometric containment).
struct LabelSet {
  std::vector<Box3D> boxes;
  std::vector<int> instance_ids;  // parallel; -1 when unlinked
  std::vector<bool> is_pseudo;    // provenance flag
};

TargetAssignment assign_targets(const ProposalSet& proposals,
                                const std::vector<Vec3>& seed_positions,
                                const std::vector<int>& seed_instance_ids,
                                const LabelSet& labels, const DetectorConfig& config);

// Checkpoint = header (config, class names, mean size) + parameter store.
void save_checkpoint(std::ostream& os, const DetectorModel& model);
DetectorModel load_checkpoint(std::istream& is);
void save_checkpoint_file(const std::string& path, const DetectorModel& model);
DetectorModel load_checkpoint_file(const std::string& path);

double heading_bin_center(int bin, int heading_bins);
int heading_target_bin(double heading, int heading_bins);

}  // namespace sdcot
