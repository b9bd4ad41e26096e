#include "sdcot/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace fs = std::filesystem;

namespace sdcot {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out.push_back(sep);
    out += items[i];
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  for (const auto& tok : split(s, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::string scene_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%05d.txt", id);
  return buf;
}

double elapsed_sec(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config file: " + path);
  ExperimentConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    cfg.apply_override(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void ExperimentConfig::apply_override(const std::string& key, const std::string& value) {
  auto rounds_from = [](const std::string& v) {
    std::vector<std::vector<std::string>> out;
    for (const auto& group : split(v, '|')) out.push_back(split(group, ','));
    return out;
  };
  if (key == "seed") seed = std::stoull(value);
  else if (key == "data_dir") data_dir = value;
  else if (key == "out_dir") out_dir = value;
  else if (key == "base_classes") base_classes = split(value, ',');
  else if (key == "novel_classes") novel_classes = split(value, ',');
  else if (key == "sequential_rounds") sequential_rounds = rounds_from(value);
  else if (key == "train_scenes") train_scenes = std::stoi(value);
  else if (key == "val_scenes") val_scenes = std::stoi(value);
  else if (key == "replay_ratio") replay_ratio = std::stod(value);
  else if (key == "class_weights") {
    class_weights.clear();
    for (const auto& item : split(value, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw std::runtime_error("class_weights: expected name:weight");
      class_weights[trim(item.substr(0, colon))] = std::stod(item.substr(colon + 1));
    }
  } else if (key == "n_points") detector.n_points = std::stoi(value);
  else if (key == "n_seeds") detector.n_seeds = std::stoi(value);
  else if (key == "n_proposals") detector.n_proposals = std::stoi(value);
  else if (key == "heading_bins") detector.heading_bins = std::stoi(value);
  else if (key == "feature_dim") detector.feature_dim = std::stoi(value);
  else if (key == "grouping_radius") detector.grouping_radius = std::stod(value);
  else if (key == "vote_radius_near") detector.vote_radius_near = std::stod(value);
  else if (key == "vote_radius_far") detector.vote_radius_far = std::stod(value);
  else if (key == "room_x") gen.room_x = std::stod(value);
  else if (key == "room_y") gen.room_y = std::stod(value);
  else if (key == "room_z") gen.room_z = std::stod(value);
  else if (key == "min_objects") gen.min_objects = std::stoi(value);
  else if (key == "max_objects") gen.max_objects = std::stoi(value);
  else if (key == "clutter_points") gen.clutter_points = std::stoi(value);
  else if (key == "tau_o") pseudo.tau_o = std::stod(value);
  else if (key == "tau_c") pseudo.tau_c = std::stod(value);
  else if (key == "pre_nms_iou") pseudo.pre_nms_iou = std::stod(value);
  else if (key == "dedupe_iou") dedupe_iou = std::stod(value);
  else if (key == "lambda_s") weights.lambda_s = std::stod(value);
  else if (key == "lambda_d") weights.lambda_d = std::stod(value);
  else if (key == "lambda_c") weights.lambda_c = std::stod(value);
  else if (key == "lambda1") weights.lambda1 = std::stod(value);
  else if (key == "lambda2") weights.lambda2 = std::stod(value);
  else if (key == "lambda3") weights.lambda3 = std::stod(value);
  else if (key == "ramp_up_epochs") weights.ramp_up_epochs = std::stoi(value);
  else if (key == "ema_alpha_rampup") ema.alpha_rampup = std::stod(value);
  else if (key == "ema_alpha_after") ema.alpha_after = std::stod(value);
  else if (key == "cache_pseudo_labels") cache_pseudo_labels = (value == "1" || value == "true");
  else if (key == "distill_targets") distill_targets = value;
  else if (key == "distill_loss") distill_loss = value;
  else if (key == "kd_temperature") kd_temperature = std::stod(value);
  else if (key == "base_epochs") base_epochs = std::stoi(value);
  else if (key == "base_lr") base_lr = std::stod(value);
  else if (key == "base_lr_milestones") base_lr_milestones = parse_int_list(value);
  else if (key == "lr_decay_factor") lr_decay_factor = std::stod(value);
  else if (key == "incr_epochs") incr_epochs = std::stoi(value);
  else if (key == "incr_lr") incr_lr = std::stod(value);
  else if (key == "eval_iou") eval.iou_threshold = std::stod(value);
  else if (key == "nms_iou") eval.nms_iou = std::stod(value);
  else if (key == "score_floor") eval.score_floor = std::stod(value);
  else if (key == "eval_seed") eval.eval_seed = std::stoull(value);
  else if (key == "suite_seeds") {
    suite_seeds.clear();
    for (const auto& tok : split(value, ',')) suite_seeds.push_back(std::stoull(tok));
  } else if (key == "replay_sweep") {
    replay_sweep.clear();
    for (const auto& tok : split(value, ',')) replay_sweep.push_back(std::stod(tok));
  } else if (key == "jobs") jobs = std::stoi(value);
  else throw std::runtime_error("unknown config key: " + key);
}

std::string ExperimentConfig::canonical_text() const {
  std::ostringstream os;
  std::vector<std::string> rounds;
  for (const auto& r : sequential_rounds) rounds.push_back(join(r, ','));
  std::vector<std::string> weights_items;
  for (const auto& [k, v] : class_weights) weights_items.push_back(k + ":" + fmt_double(v));
  std::vector<std::string> seed_items;
  for (auto s : suite_seeds) seed_items.push_back(std::to_string(s));
  std::vector<std::string> sweep_items;
  for (auto r : replay_sweep) sweep_items.push_back(fmt_double(r));
  std::vector<std::string> milestone_items;
  for (auto m : base_lr_milestones) milestone_items.push_back(std::to_string(m));

  os << "base_classes=" << join(base_classes, ',') << "\n"
     << "cache_pseudo_labels=" << (cache_pseudo_labels ? 1 : 0) << "\n"
     << "base_epochs=" << base_epochs << "\n"
     << "base_lr=" << fmt_double(base_lr) << "\n"
     << "base_lr_milestones=" << join(milestone_items, ',') << "\n"
     << "class_weights=" << join(weights_items, ',') << "\n"
     << "clutter_points=" << gen.clutter_points << "\n"
     << "dedupe_iou=" << fmt_double(dedupe_iou) << "\n"
     << "distill_loss=" << distill_loss << "\n"
     << "distill_targets=" << distill_targets << "\n"
     << "ema_alpha_after=" << fmt_double(ema.alpha_after) << "\n"
     << "ema_alpha_rampup=" << fmt_double(ema.alpha_rampup) << "\n"
     << "eval_iou=" << fmt_double(eval.iou_threshold) << "\n"
     << "eval_seed=" << eval.eval_seed << "\n"
     << "feature_dim=" << detector.feature_dim << "\n"
     << "grouping_radius=" << fmt_double(detector.grouping_radius) << "\n"
     << "heading_bins=" << detector.heading_bins << "\n"
     << "incr_epochs=" << incr_epochs << "\n"
     << "incr_lr=" << fmt_double(incr_lr) << "\n"
     << "jobs=" << jobs << "\n"
     << "kd_temperature=" << fmt_double(kd_temperature) << "\n"
     << "lambda1=" << fmt_double(weights.lambda1) << "\n"
     << "lambda2=" << fmt_double(weights.lambda2) << "\n"
     << "lambda3=" << fmt_double(weights.lambda3) << "\n"
     << "lambda_c=" << fmt_double(weights.lambda_c) << "\n"
     << "lambda_d=" << fmt_double(weights.lambda_d) << "\n"
     << "lambda_s=" << fmt_double(weights.lambda_s) << "\n"
     << "lr_decay_factor=" << fmt_double(lr_decay_factor) << "\n"
     << "max_objects=" << gen.max_objects << "\n"
     << "min_objects=" << gen.min_objects << "\n"
     << "n_points=" << detector.n_points << "\n"
     << "n_proposals=" << detector.n_proposals << "\n"
     << "n_seeds=" << detector.n_seeds << "\n"
     << "nms_iou=" << fmt_double(eval.nms_iou) << "\n"
     << "novel_classes=" << join(novel_classes, ',') << "\n"
     << "pre_nms_iou=" << fmt_double(pseudo.pre_nms_iou) << "\n"
     << "ramp_up_epochs=" << weights.ramp_up_epochs << "\n"
     << "replay_ratio=" << fmt_double(replay_ratio) << "\n"
     << "replay_sweep=" << join(sweep_items, ',') << "\n"
     << "room_x=" << fmt_double(gen.room_x) << "\n"
     << "room_y=" << fmt_double(gen.room_y) << "\n"
     << "room_z=" << fmt_double(gen.room_z) << "\n"
     << "score_floor=" << fmt_double(eval.score_floor) << "\n"
     << "seed=" << seed << "\n"
     << "sequential_rounds=" << join(rounds, '|') << "\n"
     << "suite_seeds=" << join(seed_items, ',') << "\n"
     << "tau_c=" << fmt_double(pseudo.tau_c) << "\n"
     << "tau_o=" << fmt_double(pseudo.tau_o) << "\n"
     << "train_scenes=" << train_scenes << "\n"
     << "val_scenes=" << val_scenes << "\n"
     << "vote_radius_far=" << fmt_double(detector.vote_radius_far) << "\n"
     << "vote_radius_near=" << fmt_double(detector.vote_radius_near) << "\n";
  return os.str();
}

std::string ExperimentConfig::config_hash() const {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_text())));
  return buf;
}

ClassCatalog ExperimentConfig::catalog() const {
  ClassCatalog cat = ClassCatalog::default_catalog();
  for (const auto& [name, w] : class_weights) {
    const int id = cat.id_of(name);
    if (id < 0) throw std::runtime_error("class_weights: unknown class " + name);
    cat.classes[id].placement_weight = w;
  }
  return cat;
}

DistillVariant ExperimentConfig::distill_variant() const {
  DistillVariant v;
  v.target_class_logits = false;
  for (const auto& t : split(distill_targets, ',')) {
    if (t == "class") v.target_class_logits = true;
    else if (t == "center") v.target_center = true;
    else if (t == "size") v.target_size = true;
    else throw std::runtime_error("distill_targets: unknown target " + t);
  }
  if (distill_loss == "l2") v.loss_fn = DistillLossFn::kL2Normalized;
  else if (distill_loss == "ce") v.loss_fn = DistillLossFn::kCrossEntropy;
  else if (distill_loss == "kd") v.loss_fn = DistillLossFn::kKdTemperature;
  else throw std::runtime_error("distill_loss: unknown loss " + distill_loss);
  v.temperature = kd_temperature;
  v.validate();
  return v;
}

IncrementalSettings ExperimentConfig::incremental_settings() const {
  IncrementalSettings s;
  s.cache_pseudo_labels = cache_pseudo_labels;
  s.schedule.epochs = incr_epochs;
  s.schedule.lr = incr_lr;
  s.schedule.lr_decay_factor = lr_decay_factor;
  s.weights = weights;
  s.pseudo = pseudo;
  s.ema = ema;
  s.distill = distill_variant();
  s.dedupe_iou = dedupe_iou;
  return s;
}

TrainSchedule ExperimentConfig::base_schedule() const {
  TrainSchedule s;
  s.epochs = base_epochs;
  s.lr = base_lr;
  s.lr_decay_epochs = base_lr_milestones;
  s.lr_decay_factor = lr_decay_factor;
  return s;
}

void ExperimentConfig::validate() const {
  detector.validate();
  pseudo.validate();
  distill_variant();
  if (train_scenes <= 0 || val_scenes <= 0) {
    throw std::runtime_error("config: train_scenes and val_scenes must be positive");
  }
  const ClassCatalog cat = catalog();
  std::set<std::string> seen;
  for (const auto& n : base_classes) {
    if (cat.id_of(n) < 0) throw std::runtime_error("config: unknown base class " + n);
    if (!seen.insert(n).second) throw std::runtime_error("config: duplicate class " + n);
  }
  std::set<std::string> novel_set;
  for (const auto& n : novel_classes) {
    if (cat.id_of(n) < 0) throw std::runtime_error("config: unknown novel class " + n);
    if (!seen.insert(n).second) throw std::runtime_error("config: duplicate class " + n);
    novel_set.insert(n);
  }
  std::set<std::string> seq_union;
  for (const auto& round : sequential_rounds) {
    for (const auto& n : round) {
      if (!novel_set.count(n)) {
        throw std::runtime_error("config: sequential class " + n + " not in novel_classes");
      }
      if (!seq_union.insert(n).second) {
        throw std::runtime_error("config: class " + n + " repeated across sequential rounds");
      }
    }
  }
  if (!sequential_rounds.empty() && seq_union != novel_set) {
    throw std::runtime_error("config: sequential rounds must cover all novel classes");
  }
}

RunDatasets load_datasets(const ExperimentConfig& cfg) {
  RunDatasets out;
  out.catalog = cfg.catalog();
  const fs::path scene_dir = fs::path(cfg.data_dir) / "scenes";
  const int total = cfg.train_scenes + cfg.val_scenes;
  out.all_scenes.reserve(total);
  for (int i = 0; i < total; ++i) {
    const fs::path p = scene_dir / scene_file_name(i);
    out.all_scenes.push_back(load_scene_file(p.string(), out.catalog, i));
  }
  SplitSpec batch_spec;
  batch_spec.base_classes = cfg.base_classes;
  batch_spec.novel_rounds = {cfg.novel_classes};
  batch_spec.train_scenes = cfg.train_scenes;
  batch_spec.val_scenes = cfg.val_scenes;
  out.batch = build_splits(out.all_scenes, batch_spec, out.catalog);

  if (!cfg.sequential_rounds.empty()) {
    SplitSpec seq_spec = batch_spec;
    seq_spec.novel_rounds = cfg.sequential_rounds;
    out.sequential = build_splits(out.all_scenes, seq_spec, out.catalog);
  }
  return out;
}

std::vector<Scene> to_model_space(const std::vector<Scene>& scenes, const ClassCatalog& catalog,
                                  const std::vector<std::string>& model_names) {
  std::vector<int> keep_ids;
  for (const auto& name : model_names) {
    const int id = catalog.id_of(name);
    if (id >= 0) keep_ids.push_back(id);
  }
  std::vector<Scene> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) {
    Scene filtered = filter_annotations(s, keep_ids);
    for (auto& b : filtered.gt_boxes) {
      const std::string& name = catalog.spec(b.class_id).name;
      const auto it = std::find(model_names.begin(), model_names.end(), name);
      b.class_id = static_cast<int>(it - model_names.begin());
    }
    out.push_back(std::move(filtered));
  }
  return out;
}

std::string file_digest_hex(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot digest missing file: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return buf;
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j;
  j["run_id"] = run_id;
  j["config_hash"] = config_hash;
  j["inputs"] = input_digests;
  j["artifacts"] = artifacts;
  j["timings_sec"] = timings_sec;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write manifest: " + path);
  os << j.dump(2) << "\n";
}

void cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const ClassCatalog catalog = cfg.catalog();
  const fs::path scene_dir = fs::path(cfg.data_dir) / "scenes";
  fs::create_directories(scene_dir);

  std::vector<int> pool(catalog.classes.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);

  const int total = cfg.train_scenes + cfg.val_scenes;
  for (int i = 0; i < total; ++i) {
    RngStream rng(cfg.seed, "data/scene_" + std::to_string(i));
    Scene scene = generate_scene(catalog, pool, rng, cfg.gen, i);
    save_scene_file((scene_dir / scene_file_name(i)).string(), scene, catalog);
  }

  std::vector<std::string> rounds;
  for (const auto& r : cfg.sequential_rounds) rounds.push_back(join(r, ','));
  std::ofstream idx(fs::path(cfg.data_dir) / "splits.txt");
  if (!idx) throw std::runtime_error("cannot write split index");
  idx << "SDCOT-SPLITS v1\n";
  idx << "classes " << join(catalog.names(), ',') << "\n";
  idx << "base " << join(cfg.base_classes, ',') << "\n";
  idx << "novel " << join(cfg.novel_classes, ',') << "\n";
  idx << "sequential " << join(rounds, '|') << "\n";
  idx << "train_count " << cfg.train_scenes << "\n";
  idx << "val_count " << cfg.val_scenes << "\n";
  idx << "config_hash " << cfg.config_hash() << "\n";

  log << "gen-data: wrote " << total << " scenes (" << cfg.train_scenes << " train, "
      << cfg.val_scenes << " val) under " << scene_dir.string() << "\n";
}

TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::string& mode,
                       const std::string& base_ckpt, std::optional<int> sequential_round_idx,
                       double replay_ratio, const std::string& run_name, std::ostream& log,
                       const RunDatasets* preloaded) {
  cfg.validate();
  const TrainMode tm = parse_train_mode(mode);
  const auto t_start = std::chrono::steady_clock::now();

  RunDatasets local;
  if (!preloaded) local = load_datasets(cfg);
  const RunDatasets& data = preloaded ? *preloaded : local;
  const ClassCatalog& catalog = data.catalog;

  const fs::path run_dir = fs::path(cfg.out_dir) / run_name;
  fs::create_directories(run_dir);

  {
    std::ofstream cfg_out(run_dir / "config.txt");
    cfg_out << cfg.canonical_text();
  }
  std::ofstream metrics(run_dir / "metrics.csv");
  metrics << "# config=" << cfg.config_hash() << "\n";
  metrics << "epoch,l_sup,l_dis,l_con,total,ramp_d,ramp_c,lr,mean_pseudo,mean_positives,"
             "vote_reg,objectness,box,sem_cls\n";
  auto on_epoch = [&metrics](const EpochRecord& r) {
    metrics << r.epoch << "," << fmt_fixed(r.l_sup) << "," << fmt_fixed(r.l_dis) << ","
            << fmt_fixed(r.l_con) << "," << fmt_fixed(r.total) << "," << fmt_fixed(r.ramp_d, 4)
            << "," << fmt_fixed(r.ramp_c, 4) << "," << fmt_double(r.lr) << ","
            << fmt_fixed(r.mean_pseudo, 2) << "," << fmt_fixed(r.mean_positives, 2) << ","
            << fmt_fixed(r.vote_reg) << "," << fmt_fixed(r.objectness) << ","
            << fmt_fixed(r.box) << "," << fmt_fixed(r.sem_cls) << "\n";
    metrics.flush();
  };

  RunManifest manifest;
  manifest.run_id = run_name;
  manifest.config_hash = cfg.config_hash();
  const fs::path splits_path = fs::path(cfg.data_dir) / "splits.txt";
  if (fs::exists(splits_path)) {
    manifest.input_digests["splits.txt"] = file_digest_hex(splits_path.string());
  }

  TrainOutcome outcome;
  outcome.run_dir = run_dir.string();

  const std::string student_path = (run_dir / "student.ckpt").string();
  const std::string teacher_path = (run_dir / "teacher.ckpt").string();
  const std::string infer_path = (run_dir / "infer.ckpt").string();

  if (tm == TrainMode::kBase || tm == TrainMode::kJoint) {
    std::vector<std::string> class_names = cfg.base_classes;
    if (tm == TrainMode::kJoint) {
      class_names.insert(class_names.end(), cfg.novel_classes.begin(), cfg.novel_classes.end());
    }
    std::vector<Scene> dataset;
    if (tm == TrainMode::kBase) {
      dataset = to_model_space(data.batch.base_train, catalog, class_names);
    } else {
      // joint upper bound: every train scene with all annotations visible
      std::vector<Scene> train(data.all_scenes.begin(),
                               data.all_scenes.begin() + cfg.train_scenes);
      dataset = to_model_space(train, catalog, class_names);
      std::erase_if(dataset, [](const Scene& s) { return s.gt_boxes.empty(); });
    }
    DetectorModel model =
        train_base(cfg.detector, dataset, class_names, catalog.overall_mean_size(),
                   cfg.base_schedule(), RngStream(cfg.seed, "train/" + mode), on_epoch);
    save_checkpoint_file(student_path, model);
    fs::copy_file(student_path, infer_path, fs::copy_options::overwrite_existing);
    outcome.student_ckpt = student_path;
    outcome.inference_ckpt = infer_path;
  } else {
    if (base_ckpt.empty() || !fs::exists(base_ckpt)) {
      throw std::invalid_argument("mode " + mode + " requires an existing base checkpoint (got '" +
                                  base_ckpt + "')");
    }
    manifest.input_digests["base_ckpt"] = file_digest_hex(base_ckpt);
    DetectorModel base_model = load_checkpoint_file(base_ckpt);

    std::vector<std::string> novel;
    std::vector<Scene> novel_scenes_catalog;
    if (sequential_round_idx) {
      const int r = *sequential_round_idx;
      if (r < 0 || r >= static_cast<int>(cfg.sequential_rounds.size())) {
        throw std::invalid_argument("sequential round index out of range");
      }
      novel = cfg.sequential_rounds[r];
      novel_scenes_catalog = data.sequential.novel_train[r];
    } else {
      novel = cfg.novel_classes;
      novel_scenes_catalog = data.batch.novel_train[0];
    }

    std::vector<std::string> student_names = base_model.class_names;
    student_names.insert(student_names.end(), novel.begin(), novel.end());
    std::vector<Scene> novel_dataset =
        to_model_space(novel_scenes_catalog, catalog, student_names);

    std::vector<Scene> exemplars;
    if (replay_ratio > 0.0) {
      RngStream ex_rng(cfg.seed, "replay/" + run_name);
      const auto base_ids = catalog.ids_of(cfg.base_classes);
      const auto picked = sample_exemplars(data.batch.base_train, replay_ratio, base_ids, ex_rng);
      exemplars = to_model_space(picked, catalog, student_names);
    }
    outcome.n_exemplars = static_cast<int>(exemplars.size());

    IncrementalSettings settings = cfg.incremental_settings();
    settings.mode = tm;
    IncrementalResult result =
        train_incremental(base_model, novel_dataset, novel, exemplars, settings,
                          RngStream(cfg.seed, "train/" + run_name), on_epoch);

    save_checkpoint_file(student_path, result.student);
    outcome.student_ckpt = student_path;
    if (result.dynamic_teacher) {
      save_checkpoint_file(teacher_path, *result.dynamic_teacher);
      manifest.artifacts.push_back(teacher_path);
    }
    save_checkpoint_file(infer_path, result.inference_model());
    outcome.inference_ckpt = infer_path;
  }

  outcome.wall_sec = elapsed_sec(t_start);
  manifest.timings_sec["train_wall_sec"] = outcome.wall_sec;
  manifest.artifacts.push_back(student_path);
  manifest.artifacts.push_back(infer_path);
  manifest.artifacts.push_back((run_dir / "metrics.csv").string());
  manifest.write((run_dir / "manifest.json").string());

  log << "train[" << run_name << "]: mode=" << mode << " wall=" << fmt_fixed(outcome.wall_sec, 1)
      << "s -> " << outcome.inference_ckpt << "\n";
  return outcome;
}

EvalReport cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt_path,
                    const std::string& out_csv, std::ostream& log,
                    const RunDatasets* preloaded) {
  cfg.validate();
  if (!fs::exists(ckpt_path)) throw std::runtime_error("missing checkpoint: " + ckpt_path);
  RunDatasets local;
  if (!preloaded) local = load_datasets(cfg);
  const RunDatasets& data = preloaded ? *preloaded : local;
  DetectorModel model = load_checkpoint_file(ckpt_path);

  std::vector<std::string> partition = cfg.base_classes;
  partition.insert(partition.end(), cfg.novel_classes.begin(), cfg.novel_classes.end());
  std::vector<bool> base_mask(partition.size(), false);
  for (std::size_t i = 0; i < cfg.base_classes.size(); ++i) base_mask[i] = true;

  std::vector<Scene> val(data.all_scenes.begin() + cfg.train_scenes, data.all_scenes.end());
  const auto val_model_space = to_model_space(val, data.catalog, partition);
  EvalReport report = evaluate(model, val_model_space, partition, base_mask, cfg.eval);

  if (!out_csv.empty()) {
    const fs::path parent = fs::path(out_csv).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream os(out_csv);
    if (!os) throw std::runtime_error("cannot write report: " + out_csv);
    os << "# config=" << cfg.config_hash() << "\n";
    write_report_csv(os, report);
  }
  print_report_table(log, report);
  return report;
}

namespace {

class TaskPool {
 public:
  explicit TaskPool(int jobs) : jobs_(jobs < 1 ? 1 : jobs) {}

  void add(std::function<void()> fn) { tasks_.push_back(std::move(fn)); }

  // Runs all queued tasks, then clears the queue. First exception wins.
  void run_all() {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    std::mutex err_mutex;
    std::exception_ptr error;
    const int n = std::min<int>(jobs_, static_cast<int>(tasks_.size()));
    for (int w = 0; w < n; ++w) {
      workers.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= tasks_.size()) return;
          try {
            tasks_[i]();
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : workers) t.join();
    tasks_.clear();
    if (error) std::rethrow_exception(error);
  }

 private:
  int jobs_;
  std::vector<std::function<void()>> tasks_;
};

struct SeedContext {
  ExperimentConfig cfg;  // per-seed copy with data/out dirs rebased
  std::shared_ptr<RunDatasets> data;
  std::string base_ckpt;
  std::string seq0_student;
  double base_map = 0.0;
};

}  // namespace

const SuiteRow* SuiteResult::find(std::uint64_t seed, const std::string& scenario,
                                  const std::string& mode, double ratio, int round) const {
  for (const auto& r : rows) {
    if (r.seed == seed && r.scenario == scenario && r.mode == mode &&
        std::fabs(r.replay_ratio - ratio) < 1e-9 && r.round == round) {
      return &r;
    }
  }
  return nullptr;
}

SuiteResult cmd_suite(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto t_suite = std::chrono::steady_clock::now();
  const int jobs = cfg.jobs > 0 ? cfg.jobs
                                : static_cast<int>(std::thread::hardware_concurrency());
  fs::create_directories(cfg.out_dir);

  SuiteResult result;
  std::mutex rows_mutex;
  std::mutex log_mutex;
  auto push_row = [&](SuiteRow row) {
    std::lock_guard<std::mutex> lock(rows_mutex);
    result.rows.push_back(std::move(row));
  };
  auto logline = [&](const std::string& s) {
    std::lock_guard<std::mutex> lock(log_mutex);
    log << s << "\n";
    log.flush();
  };

  std::vector<SeedContext> seeds;
  for (auto s : cfg.suite_seeds) {
    SeedContext ctx;
    ctx.cfg = cfg;
    ctx.cfg.seed = s;
    const fs::path seed_dir = fs::path(cfg.out_dir) / ("seed_" + std::to_string(s));
    ctx.cfg.data_dir = (seed_dir / "data").string();
    ctx.cfg.out_dir = seed_dir.string();
    seeds.push_back(std::move(ctx));
  }

  auto eval_run = [&](const SeedContext& ctx, const TrainOutcome& out) {
    std::ostringstream sink;
    return cmd_eval(ctx.cfg, out.inference_ckpt,
                    (fs::path(out.run_dir) / "eval_val.csv").string(), sink, ctx.data.get());
  };

  TaskPool pool(jobs);

  // phase 1: data, base anchor, joint upper bound
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    pool.add([&seeds, &result, &rows_mutex, &push_row, &logline, &eval_run, si] {
      SeedContext& ctx = seeds[si];
      std::ostringstream sink;
      cmd_gen_data(ctx.cfg, sink);
      ctx.data = std::make_shared<RunDatasets>(load_datasets(ctx.cfg));
      const auto seed = ctx.cfg.seed;

      TrainOutcome base = cmd_train(ctx.cfg, "base", "", std::nullopt, 0.0,
                                    "base_seed" + std::to_string(seed), sink, ctx.data.get());
      ctx.base_ckpt = base.inference_ckpt;
      EvalReport base_report = eval_run(ctx, base);
      ctx.base_map = base_report.map_base;
      {
        std::lock_guard<std::mutex> lock(rows_mutex);
        result.max_base_train_sec = std::max(result.max_base_train_sec, base.wall_sec);
      }
      push_row({seed, "base", "base", -1, 0.0, 0, base_report.map_base, base_report.map_novel,
                base_report.map_all, 1.0, base.wall_sec});
      logline("suite: seed " + std::to_string(seed) + " base mAP_base=" +
              fmt_fixed(base_report.map_base, 4));

      TrainOutcome joint = cmd_train(ctx.cfg, "joint", "", std::nullopt, 0.0,
                                     "joint_seed" + std::to_string(seed), sink, ctx.data.get());
      EvalReport joint_report = eval_run(ctx, joint);
      push_row({seed, "joint", "joint", -1, 0.0, 0, joint_report.map_base,
                joint_report.map_novel, joint_report.map_all, 0.0, joint.wall_sec});
      logline("suite: seed " + std::to_string(seed) + " joint mAP_all=" +
              fmt_fixed(joint_report.map_all, 4));
    });
  }
  pool.run_all();

  // phase 2: batch incremental modes, sequential round 0, replay sweep
  const std::vector<std::string> batch_modes = {"freeze_add", "finetune", "sdcot",
                                                "sdcot_no_dis", "sdcot_no_con", "sdcot_no_both"};
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    for (const auto& mode : batch_modes) {
      pool.add([&seeds, &push_row, &logline, &eval_run, si, mode] {
        SeedContext& ctx = seeds[si];
        const auto seed = ctx.cfg.seed;
        std::ostringstream sink;
        TrainOutcome out = cmd_train(ctx.cfg, mode, ctx.base_ckpt, std::nullopt, 0.0,
                                     mode + "_seed" + std::to_string(seed), sink, ctx.data.get());
        EvalReport report = eval_run(ctx, out);
        push_row({seed, "batch", mode, -1, 0.0, 0, report.map_base, report.map_novel,
                  report.map_all, 0.0, out.wall_sec});
        logline("suite: seed " + std::to_string(seed) + " " + mode + " all=" +
                fmt_fixed(report.map_all, 4) + " base=" + fmt_fixed(report.map_base, 4) +
                " novel=" + fmt_fixed(report.map_novel, 4));
      });
    }
    if (!seeds[si].cfg.sequential_rounds.empty()) {
      pool.add([&seeds, &push_row, &logline, &eval_run, si] {
        SeedContext& ctx = seeds[si];
        const auto seed = ctx.cfg.seed;
        std::ostringstream sink;
        TrainOutcome out = cmd_train(ctx.cfg, "sdcot", ctx.base_ckpt, 0, 0.0,
                                     "seq0_seed" + std::to_string(seed), sink, ctx.data.get());
        ctx.seq0_student = out.student_ckpt;
        EvalReport report = eval_run(ctx, out);
        push_row({seed, "sequential", "sdcot", 0, 0.0, 0, report.map_base, report.map_novel,
                  report.map_all, 0.0, out.wall_sec});
        logline("suite: seed " + std::to_string(seed) + " seq0 all=" +
                fmt_fixed(report.map_all, 4));
      });
    }
    for (double ratio : seeds[si].cfg.replay_sweep) {
      if (ratio <= 0.0) continue;  // ratio 0 reuses the plain batch runs
      for (const std::string mode : {"finetune", "sdcot"}) {
        pool.add([&seeds, &push_row, &logline, &eval_run, si, ratio, mode] {
          SeedContext& ctx = seeds[si];
          const auto seed = ctx.cfg.seed;
          std::ostringstream sink;
          char tag[64];
          std::snprintf(tag, sizeof(tag), "%s_r%.2f_seed%llu", mode.c_str(), ratio,
                        static_cast<unsigned long long>(seed));
          TrainOutcome out =
              cmd_train(ctx.cfg, mode, ctx.base_ckpt, std::nullopt, ratio, tag, sink,
                        ctx.data.get());
          EvalReport report = eval_run(ctx, out);
          push_row({seed, "replay", mode, -1, ratio, out.n_exemplars, report.map_base,
                    report.map_novel, report.map_all, 0.0, out.wall_sec});
          logline("suite: seed " + std::to_string(seed) + " replay " + mode + " r=" +
                  fmt_fixed(ratio, 2) + " base=" + fmt_fixed(report.map_base, 4));
        });
      }
    }
  }
  pool.run_all();

  // phase 3: sequential round 1 chained from round 0's student
  for (std::size_t si = 0; si < seeds.size(); ++si) {
    if (seeds[si].cfg.sequential_rounds.size() < 2) continue;
    pool.add([&seeds, &push_row, &logline, &eval_run, si] {
      SeedContext& ctx = seeds[si];
      const auto seed = ctx.cfg.seed;
      std::ostringstream sink;
      TrainOutcome out = cmd_train(ctx.cfg, "sdcot", ctx.seq0_student, 1, 0.0,
                                   "seq1_seed" + std::to_string(seed), sink, ctx.data.get());
      EvalReport report = eval_run(ctx, out);
      push_row({seed, "sequential", "sdcot", 1, 0.0, 0, report.map_base, report.map_novel,
                report.map_all, 0.0, out.wall_sec});
      logline("suite: seed " + std::to_string(seed) + " seq1 all=" +
              fmt_fixed(report.map_all, 4));
    });
  }
  pool.run_all();

  // retention relative to each seed's base anchor; replay rows at ratio 0
  for (auto& ctx : seeds) {
    const auto seed = ctx.cfg.seed;
    for (auto& row : result.rows) {
      if (row.seed == seed && row.scenario != "base" && ctx.base_map > 0.0) {
        row.retention = row.map_base / ctx.base_map;
      }
    }
    for (const std::string mode : {"finetune", "sdcot"}) {
      if (const SuiteRow* plain = result.find(seed, "batch", mode)) {
        SuiteRow copy = *plain;
        copy.scenario = "replay";
        copy.replay_ratio = 0.0;
        copy.n_exemplars = 0;
        result.rows.push_back(copy);
      }
    }
  }

  std::stable_sort(result.rows.begin(), result.rows.end(), [](const SuiteRow& a, const SuiteRow& b) {
    if (a.seed != b.seed) return a.seed < b.seed;
    if (a.scenario != b.scenario) return a.scenario < b.scenario;
    if (a.mode != b.mode) return a.mode < b.mode;
    if (a.round != b.round) return a.round < b.round;
    return a.replay_ratio < b.replay_ratio;
  });

  result.total_wall_sec = elapsed_sec(t_suite);

  std::ofstream summary(fs::path(cfg.out_dir) / "suite_summary.csv");
  summary << "# config=" << cfg.config_hash() << "\n";
  write_suite_csv(summary, result);
  std::ofstream series(fs::path(cfg.out_dir) / "replay_series.csv");
  series << "# config=" << cfg.config_hash() << "\n";
  series << "ratio,n_exemplars,mode,seed,map_base,map_novel,map_all\n";
  for (const auto& r : result.rows) {
    if (r.scenario != "replay") continue;
    series << fmt_fixed(r.replay_ratio, 2) << "," << r.n_exemplars << "," << r.mode << ","
           << r.seed << "," << fmt_fixed(r.map_base) << "," << fmt_fixed(r.map_novel) << ","
           << fmt_fixed(r.map_all) << "\n";
  }

  log << "suite: " << result.rows.size() << " rows, wall " << fmt_fixed(result.total_wall_sec, 1)
      << "s, summary at " << (fs::path(cfg.out_dir) / "suite_summary.csv").string() << "\n";
  return result;
}

void write_suite_csv(std::ostream& os, const SuiteResult& result) {
  os << "seed,scenario,mode,round,replay_ratio,n_exemplars,map_base,map_novel,map_all,"
        "retention,wall_sec\n";
  for (const auto& r : result.rows) {
    os << r.seed << "," << r.scenario << "," << r.mode << "," << r.round << ","
       << fmt_fixed(r.replay_ratio, 2) << "," << r.n_exemplars << "," << fmt_fixed(r.map_base)
       << "," << fmt_fixed(r.map_novel) << "," << fmt_fixed(r.map_all) << ","
       << fmt_fixed(r.retention) << "," << fmt_fixed(r.wall_sec, 2) << "\n";
  }
}

SuiteResult read_suite_csv(std::istream& is) {
  SuiteResult out;
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("suite csv: empty file");
  if (line.rfind("#", 0) == 0 && !std::getline(is, line)) {
    throw std::runtime_error("suite csv: missing header");
  }
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto cols = split(line, ',');
    if (cols.size() < 11) throw std::runtime_error("suite csv: bad row: " + line);
    SuiteRow r;
    r.seed = std::stoull(cols[0]);
    r.scenario = cols[1];
    r.mode = cols[2];
    r.round = std::stoi(cols[3]);
    r.replay_ratio = std::stod(cols[4]);
    r.n_exemplars = std::stoi(cols[5]);
    r.map_base = std::stod(cols[6]);
    r.map_novel = std::stod(cols[7]);
    r.map_all = std::stod(cols[8]);
    r.retention = std::stod(cols[9]);
    r.wall_sec = std::stod(cols[10]);
    out.rows.push_back(std::move(r));
  }
  return out;
}

}  // namespace sdcot
