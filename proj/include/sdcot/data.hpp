#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "sdcot/geometry.hpp"
#include "sdcot/rng.hpp"

namespace sdcot {

struct ClassSpec {
  std::string name;
  Vec3 mean_size{1, 1, 1};
  double size_jitter = 0.15;      // relative, per extent
  double point_density = 30.0;    // surface points per unit area
  double placement_weight = 1.0;  // imbalance knob
};

// Class ids are indices into the alphabetically ordered class list.
struct ClassCatalog {
  std::vector<ClassSpec> classes;

  static ClassCatalog default_catalog();

  int id_of(const std::string& name) const;  // -1 if unknown
  const ClassSpec& spec(int class_id) const;
  std::vector<std::string> names() const;
  Vec3 overall_mean_size() const;
  std::vector<int> ids_of(const std::vector<std::string>& names) const;
};

// One point-cloud sample: geometry plus annotations. Instance ids link points
// to the box that spawned them (index into gt_boxes, -1 for clutter) and feed
// the detector's vote targets.
struct Scene {
  int id = 0;
  PointCloud cloud;
  std::vector<Box3D> gt_boxes;
};

struct SceneGenParams {
  double room_x = 10.0;
  double room_y = 10.0;
  double room_z = 3.0;
  int min_objects = 1;
  int max_objects = 6;
  double max_place_iou = 0.1;
  int place_retries = 40;
  int clutter_points = 154;  // ~30% of a 512-point budget
};

Scene generate_scene(const ClassCatalog& catalog, const std::vector<int>& class_pool,
                     RngStream& rng, const SceneGenParams& params = {}, int scene_id = 0);

struct SplitSpec {
  std::vector<std::string> base_classes;
  std::vector<std::vector<std::string>> novel_rounds;  // one list per round
  int train_scenes = 400;
  int val_scenes = 100;
  double replay_ratio = 0.0;
};

struct DataSplits {
  std::vector<Scene> base_train;                  // base-class annotations only
  std::vector<std::vector<Scene>> novel_train;    // per round, that round's classes only
  std::vector<Scene> val;                         // full annotations
};

// Annotation filtering only: geometry is shared verbatim, instance ids are
// remapped into the filtered box list (-1 when the owning box is hidden).
Scene filter_annotations(const Scene& scene, const std::vector<int>& keep_class_ids);

DataSplits build_splits(const std::vector<Scene>& scenes, const SplitSpec& spec,
                        const ClassCatalog& catalog);

// Uniform exemplar sampling with guaranteed coverage of every base class.
std::vector<Scene> sample_exemplars(const std::vector<Scene>& base_train, double ratio,
                                    const std::vector<int>& base_class_ids, RngStream& rng);

// Without replacement when enough points exist, with replacement otherwise.
PointCloud subsample_cloud(const PointCloud& cloud, int n_points, RngStream& rng);

PoseTransform draw_augmentation(RngStream& rng);

// `SDCOT-SCENE v1` text format; floats carry 17 significant digits so a
// save/load round trip is value-exact.
void save_scene(std::ostream& os, const Scene& scene, const ClassCatalog& catalog);
Scene load_scene(std::istream& is, const ClassCatalog& catalog, int scene_id);
void save_scene_file(const std::string& path, const Scene& scene, const ClassCatalog& catalog);
Scene load_scene_file(const std::string& path, const ClassCatalog& catalog, int scene_id);

}  // namespace sdcot
