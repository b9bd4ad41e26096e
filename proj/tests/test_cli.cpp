// End-to-end exercises of the command-line binary: exit codes, artifact
// layout, and byte-level reproducibility of emitted files.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void check(bool ok, const std::string& what) {
  if (ok) {
    std::printf("[ok] %s\n", what.c_str());
  } else {
    std::printf("[FAILED] %s\n", what.c_str());
    ++g_failures;
  }
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: test_cli <path-to-sdcot-binary>\n");
    return 2;
  }
  const std::string bin = argv[1];
  const fs::path root = fs::temp_directory_path() / "sdcot_cli_test";
  fs::remove_all(root);
  fs::create_directories(root);

  const std::string tiny =
      " --set train_scenes=6 --set val_scenes=2 --set n_points=64 --set n_seeds=16"
      " --set n_proposals=4 --set feature_dim=8 --set base_epochs=2 --set incr_epochs=1"
      " --set ramp_up_epochs=1 --set base_lr_milestones=1 --set clutter_points=20";
  const std::string data1 = (root / "data1").string();
  const std::string data2 = (root / "data2").string();
  const std::string runs = (root / "runs").string();

  check(run(bin + " gen-data --data " + data1 + tiny) == 0, "gen-data succeeds");
  check(fs::exists(fs::path(data1) / "scenes" / "scene_00000.txt"), "scene files on disk");
  check(fs::exists(fs::path(data1) / "splits.txt"), "split index on disk");
  int n_scene_files = 0;
  for (const auto& e : fs::directory_iterator(fs::path(data1) / "scenes")) {
    (void)e;
    ++n_scene_files;
  }
  check(n_scene_files == 8, "train+val scene count matches the config");

  check(run(bin + " gen-data --data " + data2 + tiny) == 0, "gen-data reruns");
  check(slurp(fs::path(data1) / "scenes" / "scene_00003.txt") ==
            slurp(fs::path(data2) / "scenes" / "scene_00003.txt"),
        "same seed gives byte-identical scene files");

  check(run(bin + " gen-data --data " + (root / "bad").string() + tiny +
            " --set train_scenes=0") != 0,
        "zero scene count is rejected");

  check(run(bin + " train --mode base --data " + data1 + " --out " + runs + tiny) == 0,
        "base training succeeds");
  const fs::path base_ckpt = fs::path(runs) / "base_seed7" / "infer.ckpt";
  check(fs::exists(base_ckpt), "base checkpoint written");
  check(fs::exists(fs::path(runs) / "base_seed7" / "metrics.csv"), "metrics log written");
  check(fs::exists(fs::path(runs) / "base_seed7" / "manifest.json"), "manifest written");

  check(run(bin + " train --mode sdcot --data " + data1 + " --out " + runs + tiny +
            " --base-ckpt " + base_ckpt.string()) == 0,
        "sdcot training succeeds");
  check(fs::exists(fs::path(runs) / "sdcot_seed7" / "teacher.ckpt"),
        "dynamic teacher checkpoint written");

  check(run(bin + " train --mode sdcot --data " + data1 + " --out " + runs + tiny) != 0,
        "incremental mode without a base checkpoint is rejected");
  check(run(bin + " train --mode nonsense --data " + data1 + " --out " + runs + tiny) != 0,
        "unknown mode string is rejected");

  const std::string report1 = (root / "eval1.csv").string();
  const std::string report2 = (root / "eval2.csv").string();
  check(run(bin + " eval --ckpt " + base_ckpt.string() + " --data " + data1 + " --report " +
            report1 + tiny) == 0,
        "eval succeeds");
  check(run(bin + " eval --ckpt " + base_ckpt.string() + " --data " + data1 + " --report " +
            report2 + tiny) == 0,
        "eval reruns");
  check(!slurp(report1).empty() && slurp(report1) == slurp(report2),
        "repeated eval emits identical csv bytes");

  check(run(bin + " eval --ckpt " + (root / "missing.ckpt").string() + " --data " + data1 +
            tiny) != 0,
        "missing checkpoint is rejected");

  // config file + --set precedence
  const fs::path cfg_file = root / "exp.cfg";
  {
    std::ofstream os(cfg_file);
    os << "# exercise the config parser\n";
    os << "train_scenes = 6\nval_scenes = 2\nn_points = 64\nn_seeds = 16\n";
    os << "n_proposals = 4\nfeature_dim = 8\nbase_epochs = 1\nclutter_points = 20\n";
  }
  check(run(bin + " gen-data --config " + cfg_file.string() + " --data " +
            (root / "data3").string()) == 0,
        "config file drives gen-data");
  check(run(bin + " gen-data --config " + cfg_file.string() + " --set not_a_key=1 --data " +
            (root / "data4").string()) != 0,
        "unknown config key is rejected");

  if (g_failures == 0) {
    std::printf("test_cli: all checks passed\n");
    return 0;
  }
  std::printf("test_cli: %d check(s) failed\n", g_failures);
  return 1;
}
