#include "sdcot/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sdcot {

ClassCatalog ClassCatalog::default_catalog() {
  // Alphabetical; extents chosen so aspect ratio separates the classes.
  ClassCatalog c;
  c.classes = {
      {"box", {0.90, 0.90, 0.90}, 0.15, 120.0, 1.0},
      {"cone", {0.55, 0.55, 1.30}, 0.15, 136.0, 1.0},
      {"cylinder", {0.75, 0.75, 1.90}, 0.15, 104.0, 1.0},
      {"slab", {1.80, 1.10, 0.35}, 0.15, 112.0, 1.0},
      {"tube", {2.10, 0.45, 0.45}, 0.15, 128.0, 1.0},
      {"wedge", {1.30, 0.75, 0.55}, 0.15, 120.0, 1.0},
  };
  return c;
}

int ClassCatalog::id_of(const std::string& name) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const ClassSpec& ClassCatalog::spec(int class_id) const {
  if (class_id < 0 || class_id >= static_cast<int>(classes.size())) {
    throw std::out_of_range("ClassCatalog: bad class id " + std::to_string(class_id));
  }
  return classes[class_id];
}

std::vector<std::string> ClassCatalog::names() const {
  std::vector<std::string> out;
  for (const auto& c : classes) out.push_back(c.name);
  return out;
}

Vec3 ClassCatalog::overall_mean_size() const {
  Vec3 m{0, 0, 0};
  for (const auto& c : classes) {
    for (int d = 0; d < 3; ++d) m[d] += c.mean_size[d];
  }
  for (int d = 0; d < 3; ++d) m[d] /= static_cast<double>(classes.size());
  return m;
}

std::vector<int> ClassCatalog::ids_of(const std::vector<std::string>& names) const {
  std::vector<int> out;
  for (const auto& n : names) {
    const int id = id_of(n);
    if (id < 0) throw std::invalid_argument("unknown class name: " + n);
    out.push_back(id);
  }
  return out;
}

namespace {

// Choose a face of the cuboid weighted by area, then a uniform point on it.
Vec3 sample_surface_point(const Box3D& b, RngStream& rng) {
  const double dx = b.size[0], dy = b.size[1], dz = b.size[2];
  const double ax = dy * dz, ay = dx * dz, az = dx * dy;
  const double total = 2.0 * (ax + ay + az);
  double u = rng.uniform() * total;
  double lx, ly, lz;
  if (u < 2.0 * ax) {
    lx = (u < ax ? 0.5 : -0.5) * dx;
    ly = (rng.uniform() - 0.5) * dy;
    lz = (rng.uniform() - 0.5) * dz;
  } else if (u < 2.0 * (ax + ay)) {
    u -= 2.0 * ax;
    ly = (u < ay ? 0.5 : -0.5) * dy;
    lx = (rng.uniform() - 0.5) * dx;
    lz = (rng.uniform() - 0.5) * dz;
  } else {
    u -= 2.0 * (ax + ay);
    lz = (u < az ? 0.5 : -0.5) * dz;
    lx = (rng.uniform() - 0.5) * dx;
    ly = (rng.uniform() - 0.5) * dy;
  }
  const double c = std::cos(b.heading), s = std::sin(b.heading);
  return {b.center[0] + c * lx - s * ly, b.center[1] + s * lx + c * ly, b.center[2] + lz};
}

int weighted_class_draw(const ClassCatalog& catalog, const std::vector<int>& pool,
                        RngStream& rng) {
  double total = 0.0;
  for (int id : pool) total += catalog.spec(id).placement_weight;
  double u = rng.uniform() * total;
  for (int id : pool) {
    u -= catalog.spec(id).placement_weight;
    if (u <= 0.0) return id;
  }
  return pool.back();
}

}  // namespace

Scene generate_scene(const ClassCatalog& catalog, const std::vector<int>& class_pool,
                     RngStream& rng, const SceneGenParams& params, int scene_id) {
  if (class_pool.empty()) throw std::invalid_argument("generate_scene: empty class pool");
  Scene scene;
  scene.id = scene_id;

  const int n_obj = params.min_objects +
                    rng.uniform_int(params.max_objects - params.min_objects + 1);
  for (int k = 0; k < n_obj; ++k) {
    const int cid = weighted_class_draw(catalog, class_pool, rng);
    const ClassSpec& cs = catalog.spec(cid);
    bool placed = false;
    for (int attempt = 0; attempt < params.place_retries && !placed; ++attempt) {
      Box3D b;
      b.class_id = cid;
      for (int d = 0; d < 3; ++d) {
        b.size[d] = cs.mean_size[d] * (1.0 + rng.uniform(-cs.size_jitter, cs.size_jitter));
      }
      // Cuboids are 180-degree symmetric, so headings are drawn canonically.
      b.heading = rng.uniform(-M_PI / 2.0, M_PI / 2.0);
      const double margin = 0.5 * std::hypot(b.size[0], b.size[1]);
      b.center[0] = rng.uniform(-0.5 * params.room_x + margin, 0.5 * params.room_x - margin);
      b.center[1] = rng.uniform(-0.5 * params.room_y + margin, 0.5 * params.room_y - margin);
      b.center[2] = 0.5 * b.size[2] + rng.uniform(0.0, 0.25);
      bool ok = true;
      for (const auto& other : scene.gt_boxes) {
        if (iou_3d(b, other) >= params.max_place_iou) {
          ok = false;
          break;
        }
      }
      if (ok) {
        scene.gt_boxes.push_back(b);
        placed = true;
      }
    }
  }

  for (std::size_t bi = 0; bi < scene.gt_boxes.size(); ++bi) {
    const Box3D& b = scene.gt_boxes[bi];
    const ClassSpec& cs = catalog.spec(b.class_id);
    const double area = 2.0 * (b.size[0] * b.size[1] + b.size[1] * b.size[2] +
                               b.size[0] * b.size[2]);
    const int count = std::max(
        8, static_cast<int>(std::lround(cs.point_density * area * (0.75 + 0.5 * rng.uniform()))));
    for (int i = 0; i < count; ++i) {
      scene.cloud.points.push_back(sample_surface_point(b, rng));
      scene.cloud.instance_ids.push_back(static_cast<int>(bi));
    }
  }
  for (int i = 0; i < params.clutter_points; ++i) {
    scene.cloud.points.push_back({rng.uniform(-0.5 * params.room_x, 0.5 * params.room_x),
                                  rng.uniform(-0.5 * params.room_y, 0.5 * params.room_y),
                                  rng.uniform(0.0, params.room_z)});
    scene.cloud.instance_ids.push_back(-1);
  }
  return scene;
}

Scene filter_annotations(const Scene& scene, const std::vector<int>& keep_class_ids) {
  const std::set<int> keep(keep_class_ids.begin(), keep_class_ids.end());
  Scene out;
  out.id = scene.id;
  out.cloud.points = scene.cloud.points;
  std::vector<int> remap(scene.gt_boxes.size(), -1);
  for (std::size_t i = 0; i < scene.gt_boxes.size(); ++i) {
    if (keep.count(scene.gt_boxes[i].class_id)) {
      remap[i] = static_cast<int>(out.gt_boxes.size());
      out.gt_boxes.push_back(scene.gt_boxes[i]);
    }
  }
  out.cloud.instance_ids.reserve(scene.cloud.instance_ids.size());
  for (int id : scene.cloud.instance_ids) {
    out.cloud.instance_ids.push_back(id >= 0 ? remap[id] : -1);
  }
  return out;
}

DataSplits build_splits(const std::vector<Scene>& scenes, const SplitSpec& spec,
                        const ClassCatalog& catalog) {
  if (spec.train_scenes <= 0 || spec.val_scenes <= 0) {
    throw std::invalid_argument("build_splits: train/val scene counts must be positive");
  }
  if (static_cast<int>(scenes.size()) < spec.train_scenes + spec.val_scenes) {
    throw std::invalid_argument("build_splits: not enough scenes for requested split sizes");
  }
  const auto base_ids = catalog.ids_of(spec.base_classes);
  std::vector<std::vector<int>> round_ids;
  for (const auto& round : spec.novel_rounds) round_ids.push_back(catalog.ids_of(round));

  std::set<int> seen;
  for (int id : base_ids) {
    if (!seen.insert(id).second) {
      throw std::invalid_argument("build_splits: class appears twice across splits");
    }
  }
  for (const auto& ids : round_ids) {
    for (int id : ids) {
      if (!seen.insert(id).second) {
        throw std::invalid_argument("build_splits: class appears twice across splits");
      }
    }
  }

  auto contains_any = [](const Scene& s, const std::vector<int>& ids) {
    for (const auto& b : s.gt_boxes) {
      if (std::find(ids.begin(), ids.end(), b.class_id) != ids.end()) return true;
    }
    return false;
  };

  DataSplits out;
  out.novel_train.resize(round_ids.size());
  for (int i = 0; i < spec.train_scenes; ++i) {
    const Scene& s = scenes[i];
    if (contains_any(s, base_ids)) out.base_train.push_back(filter_annotations(s, base_ids));
    for (std::size_t r = 0; r < round_ids.size(); ++r) {
      if (contains_any(s, round_ids[r])) {
        out.novel_train[r].push_back(filter_annotations(s, round_ids[r]));
      }
    }
  }
  for (int i = spec.train_scenes; i < spec.train_scenes + spec.val_scenes; ++i) {
    out.val.push_back(scenes[i]);
  }

  if (out.base_train.empty()) throw std::runtime_error("build_splits: base split is empty");
  for (std::size_t r = 0; r < out.novel_train.size(); ++r) {
    if (out.novel_train[r].empty()) {
      throw std::runtime_error("build_splits: novel split for round " + std::to_string(r) +
                               " is empty");
    }
  }
  return out;
}

std::vector<Scene> sample_exemplars(const std::vector<Scene>& base_train, double ratio,
                                    const std::vector<int>& base_class_ids, RngStream& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("sample_exemplars: ratio must be in (0, 1]");
  }
  std::set<int> available;
  for (const auto& s : base_train) {
    for (const auto& b : s.gt_boxes) available.insert(b.class_id);
  }
  for (int id : base_class_ids) {
    if (!available.count(id)) {
      throw std::runtime_error("sample_exemplars: base class " + std::to_string(id) +
                               " absent from base split; coverage impossible");
    }
  }
  const int total = static_cast<int>(base_train.size());
  const int k = std::min(total, static_cast<int>(std::ceil(ratio * total)));
  constexpr int kMaxRetries = 200;
  for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
    std::vector<int> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
      const int j = i + rng.uniform_int(total - i);
      std::swap(idx[i], idx[j]);
    }
    std::set<int> covered;
    for (int i = 0; i < k; ++i) {
      for (const auto& b : base_train[idx[i]].gt_boxes) covered.insert(b.class_id);
    }
    bool ok = true;
    for (int id : base_class_ids) {
      if (!covered.count(id)) ok = false;
    }
    if (ok) {
      std::vector<Scene> out;
      out.reserve(k);
      for (int i = 0; i < k; ++i) out.push_back(base_train[idx[i]]);
      return out;
    }
  }
  throw std::runtime_error("sample_exemplars: coverage not reached within retry budget");
}

PointCloud subsample_cloud(const PointCloud& cloud, int n_points, RngStream& rng) {
  if (cloud.points.empty()) throw std::invalid_argument("subsample_cloud: empty cloud");
  if (n_points <= 0) throw std::invalid_argument("subsample_cloud: n_points must be positive");
  const int total = static_cast<int>(cloud.points.size());
  PointCloud out;
  out.points.reserve(n_points);
  out.instance_ids.reserve(n_points);
  if (total >= n_points) {
    std::vector<int> idx(total);
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < n_points; ++i) {
      const int j = i + rng.uniform_int(total - i);
      std::swap(idx[i], idx[j]);
      out.points.push_back(cloud.points[idx[i]]);
      out.instance_ids.push_back(cloud.instance_ids[idx[i]]);
    }
  } else {
    for (int i = 0; i < n_points; ++i) {
      const int j = rng.uniform_int(total);
      out.points.push_back(cloud.points[j]);
      out.instance_ids.push_back(cloud.instance_ids[j]);
    }
  }
  return out;
}

PoseTransform draw_augmentation(RngStream& rng) {
  PoseTransform t;
  t.flip_x = rng.bernoulli(0.5);
  t.rotation = rng.uniform(-M_PI / 6.0, M_PI / 6.0);
  t.scale = rng.uniform(0.85, 1.15);
  return t;
}

namespace {

void print_double(std::ostream& os, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  os << buf;
}

}  // namespace

void save_scene(std::ostream& os, const Scene& scene, const ClassCatalog& catalog) {
  os << "SDCOT-SCENE v1 " << scene.cloud.points.size() << " " << scene.gt_boxes.size() << "\n";
  for (std::size_t i = 0; i < scene.cloud.points.size(); ++i) {
    const Vec3& p = scene.cloud.points[i];
    print_double(os, p[0]);
    os << " ";
    print_double(os, p[1]);
    os << " ";
    print_double(os, p[2]);
    os << " " << scene.cloud.instance_ids[i] << "\n";
  }
  for (const auto& b : scene.gt_boxes) {
    print_double(os, b.center[0]);
    os << " ";
    print_double(os, b.center[1]);
    os << " ";
    print_double(os, b.center[2]);
    os << " ";
    print_double(os, b.size[0]);
    os << " ";
    print_double(os, b.size[1]);
    os << " ";
    print_double(os, b.size[2]);
    os << " ";
    print_double(os, b.heading);
    os << " " << catalog.spec(b.class_id).name << "\n";
  }
}

Scene load_scene(std::istream& is, const ClassCatalog& catalog, int scene_id) {
  std::string magic, version;
  std::size_t n_points = 0, n_boxes = 0;
  if (!(is >> magic >> version >> n_points >> n_boxes) || magic != "SDCOT-SCENE") {
    throw std::runtime_error("scene load: bad header");
  }
  if (version != "v1") throw std::runtime_error("scene load: unsupported version " + version);
  Scene scene;
  scene.id = scene_id;
  scene.cloud.points.resize(n_points);
  scene.cloud.instance_ids.resize(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    Vec3& p = scene.cloud.points[i];
    if (!(is >> p[0] >> p[1] >> p[2] >> scene.cloud.instance_ids[i])) {
      throw std::runtime_error("scene load: truncated point list");
    }
  }
  scene.gt_boxes.resize(n_boxes);
  for (std::size_t i = 0; i < n_boxes; ++i) {
    Box3D& b = scene.gt_boxes[i];
    std::string cname;
    if (!(is >> b.center[0] >> b.center[1] >> b.center[2] >> b.size[0] >> b.size[1] >>
          b.size[2] >> b.heading >> cname)) {
      throw std::runtime_error("scene load: truncated box list");
    }
    const int cid = catalog.id_of(cname);
    if (cid < 0) throw std::runtime_error("scene load: unknown class " + cname);
    b.class_id = cid;
    b.score = 1.0;
  }
  for (int id : scene.cloud.instance_ids) {
    if (id < -1 || id >= static_cast<int>(n_boxes)) {
      throw std::runtime_error("scene load: instance id out of range");
    }
  }
  return scene;
}

void save_scene_file(const std::string& path, const Scene& scene, const ClassCatalog& catalog) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write scene file: " + path);
  save_scene(os, scene, catalog);
  if (!os) throw std::runtime_error("write failed for scene file: " + path);
}

Scene load_scene_file(const std::string& path, const ClassCatalog& catalog, int scene_id) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read scene file: " + path);
  return load_scene(is, catalog, scene_id);
}

}  // namespace sdcot
