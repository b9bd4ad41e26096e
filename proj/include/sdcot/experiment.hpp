#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sdcot/cotraining.hpp"
#include "sdcot/data.hpp"
#include "sdcot/detector.hpp"
#include "sdcot/evaluation.hpp"

namespace sdcot {

// Every knob of every module, parsed from a flat `key = value` file with
// command-line overrides. The canonical text of a config is hashed into every
// artifact for provenance.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string data_dir = "data";
  std::string out_dir = "runs";

  // scenario
  std::vector<std::string> base_classes = {"box", "cone", "cylinder"};
  std::vector<std::string> novel_classes = {"slab", "tube", "wedge"};
  std::vector<std::vector<std::string>> sequential_rounds = {{"slab", "tube"}, {"wedge"}};
  int train_scenes = 400;
  int val_scenes = 100;
  double replay_ratio = 0.0;
  std::map<std::string, double> class_weights;  // placement imbalance knob

  DetectorConfig detector;
  SceneGenParams gen;
  PseudoLabelConfig pseudo;
  LossWeights weights{.ramp_up_epochs = 8};  // paper's 30 scaled to desk epochs
  EmaConfig ema;
  double dedupe_iou = 0.5;

  bool cache_pseudo_labels = true;
  std::string distill_targets = "class";  // csv subset of class,center,size
  std::string distill_loss = "l2";        // l2 | ce | kd
  double kd_temperature = 2.0;

  int base_epochs = 30;
  double base_lr = 1e-3;
  std::vector<int> base_lr_milestones = {20, 27};
  double lr_decay_factor = 0.1;
  int incr_epochs = 12;
  double incr_lr = 1e-3;

  EvalConfig eval;

  std::vector<std::uint64_t> suite_seeds = {7, 8, 9};
  std::vector<double> replay_sweep = {0.0, 0.05, 0.1, 0.3, 0.5};
  int jobs = 0;  // 0 = hardware concurrency

  static ExperimentConfig from_file(const std::string& path);
  void apply_override(const std::string& key, const std::string& value);
  std::string canonical_text() const;
  std::string config_hash() const;  // 16 hex chars, stable across machines

  ClassCatalog catalog() const;
  DistillVariant distill_variant() const;
  IncrementalSettings incremental_settings() const;
  TrainSchedule base_schedule() const;
  void validate() const;
};

// Scenes for one run, with annotations remapped into model-id space.
struct RunDatasets {
  ClassCatalog catalog;
  std::vector<Scene> all_scenes;  // train then val, catalog-id space
  DataSplits batch;               // catalog-id space
  DataSplits sequential;          // catalog-id space
};

RunDatasets load_datasets(const ExperimentConfig& cfg);

// Annotation class ids rewritten from catalog space into the index of each
// box's class name inside `model_names`; boxes of unknown classes dropped.
std::vector<Scene> to_model_space(const std::vector<Scene>& scenes, const ClassCatalog& catalog,
                                  const std::vector<std::string>& model_names);

struct RunManifest {
  std::string run_id;
  std::string config_hash;
  std::map<std::string, std::string> input_digests;
  std::vector<std::string> artifacts;
  std::map<std::string, double> timings_sec;

  void write(const std::string& path) const;
};

std::string file_digest_hex(const std::string& path);

// gen-data: scene files plus the split index.
void cmd_gen_data(const ExperimentConfig& cfg, std::ostream& log);

struct TrainOutcome {
  std::string run_dir;
  std::string inference_ckpt;  // model to evaluate with
  std::string student_ckpt;    // next static teacher in sequential rounds
  int n_exemplars = 0;
  double wall_sec = 0.0;
};

// mode: base | joint | freeze_add | finetune | sdcot | sdcot_no_dis |
// sdcot_no_con | sdcot_no_both. For incremental modes, base_ckpt names the
// starting model; sequential_round (when set) selects the round's class
// subset instead of the full novel set.
TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::string& mode,
                       const std::string& base_ckpt, std::optional<int> sequential_round,
                       double replay_ratio, const std::string& run_name, std::ostream& log,
                       const RunDatasets* preloaded = nullptr);

// eval: CSV report plus a readable table on the log stream.
EvalReport cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt_path,
                    const std::string& out_csv, std::ostream& log,
                    const RunDatasets* preloaded = nullptr);

struct SuiteRow {
  std::uint64_t seed = 0;
  std::string scenario;  // base | joint | batch | sequential | replay
  std::string mode;
  int round = -1;
  double replay_ratio = 0.0;
  int n_exemplars = 0;
  double map_base = 0.0, map_novel = 0.0, map_all = 0.0;
  double retention = 0.0;  // base-class mAP relative to this seed's base run
  double wall_sec = 0.0;
};

struct SuiteResult {
  std::vector<SuiteRow> rows;
  double total_wall_sec = 0.0;
  double max_base_train_sec = 0.0;

  const SuiteRow* find(std::uint64_t seed, const std::string& scenario, const std::string& mode,
                       double ratio = 0.0, int round = -1) const;
};

// Base training, every incremental mode, two sequential rounds, and the
// replay sweep, across the configured seeds. Sub-runs execute on a small
// thread pool; each owns its output directory.
SuiteResult cmd_suite(const ExperimentConfig& cfg, std::ostream& log);

void write_suite_csv(std::ostream& os, const SuiteResult& result);
SuiteResult read_suite_csv(std::istream& is);

}  // namespace sdcot
