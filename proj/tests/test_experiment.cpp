#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <unistd.h>

#include "pwml/checkpoint.hpp"
#include "pwml/experiment.hpp"
#include "pwml/nifti.hpp"

using namespace pwml;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("pwml_exp_" + std::to_string(getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::uint64_t file_hash(const std::string& path) {
  const std::string bytes = slurp(path);
  return fnv1a(bytes.data(), bytes.size());
}

std::vector<nlohmann::json> parse_jsonl(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

// Everything shrunk until a full pipeline fits in a test run.
ExperimentConfig micro_config(const std::string& root) {
  ExperimentConfig cfg = ExperimentConfig::defaults();
  cfg.reseed(77);
  cfg.phantom.volume_shape = {64, 64, 64};
  // a light lesion load keeps lesion-free 32^3 crops findable in 64^3
  cfg.phantom.lesion_count_range = {2, 4};
  cfg.phantom.lesion_size_range = {3, 12};
  cfg.n_control = 4;
  cfg.n_pwml = 4;
  cfg.splits.ratios = {0.5, 0.25, 0.25};  // 4 subjects -> 2/1/1
  cfg.network.growth = 4;
  cfg.network.db_layers = 1;
  cfg.network.tseg_depth = 2;
  cfg.network.cmg_width = 4;
  cfg.network.cls_hidden = 8;
  cfg.network.pseg_variant = PsegVariant::conv4;
  for (auto& [stage, sc] : cfg.stages) {
    sc.epochs = 2;
    sc.batch_size = 4;
  }
  cfg.patches.tseg = 2;
  cfg.patches.cls_pos = cfg.patches.cls_neg = 2;
  cfg.patches.cmg_pos = cfg.patches.cmg_neg = 2;
  cfg.patches.pseg_pos = 2;
  cfg.patches.pseg_neg = 1;
  cfg.inference.stride = 32;  // 8 windows per 64^3 subject
  cfg.inference.fusions = {"t1", "sp+cf+t1"};
  cfg.inference.primary = "sp+cf+t1";
  cfg.paths.data_dir = root + "/data";
  cfg.paths.checkpoint_dir = root + "/ckpt";
  cfg.paths.report_dir = root + "/out";
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DEEPPWML_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults cover all four stages") {
  const ExperimentConfig cfg = ExperimentConfig::defaults();
  CHECK_NOTHROW(cfg.validate());
  REQUIRE(cfg.stages.size() == 4);
  CHECK(cfg.stages.at(Stage::tseg).epochs == 50);
  CHECK(cfg.stages.at(Stage::cls).epochs == 30);
  CHECK(cfg.stages.at(Stage::cmg).epochs == 50);
  CHECK(cfg.stages.at(Stage::pseg).epochs == 50);
  CHECK(cfg.stages.at(Stage::tseg).batch_size == 16);
  CHECK(cfg.stages.at(Stage::tseg).lr.initial == 1e-3);
  CHECK(cfg.stages.at(Stage::tseg).lr.final_rate == 1e-5);
  CHECK(cfg.inference.fusions.size() == 7);
  CHECK(cfg.inference.primary == "sp+cf+t1");

  // every derived seed stream is distinct
  std::set<std::uint64_t> seeds{cfg.seed, cfg.splits.seed};
  for (const auto& [stage, sc] : cfg.stages) seeds.insert(sc.seed);
  CHECK(seeds.size() == 6);
}

TEST_CASE("data dir honors the environment variable") {
  setenv("DEEPPWML_DATA_DIR", "/tmp/pwml_env_probe", 1);
  const ExperimentConfig cfg = ExperimentConfig::defaults();
  CHECK(cfg.paths.data_dir == "/tmp/pwml_env_probe");
  CHECK(cfg.paths.checkpoint_dir == "/tmp/pwml_env_probe/checkpoints");
  CHECK(cfg.paths.report_dir == "/tmp/pwml_env_probe/reports");
  unsetenv("DEEPPWML_DATA_DIR");
  CHECK(ExperimentConfig::defaults().paths.data_dir == "data");
}

TEST_CASE("config json roundtrip and partial documents") {
  ExperimentConfig cfg = ExperimentConfig::defaults();
  cfg.reseed(5);
  const nlohmann::json j = cfg.to_json();
  CHECK(ExperimentConfig::from_json(j).to_json() == j);

  const ExperimentConfig part =
      ExperimentConfig::from_json({{"seed", 5}, {"cohort", {{"n_pwml", 3}}}});
  CHECK(part.seed == 5);
  CHECK(part.n_pwml == 3);
  CHECK(part.n_control == 20);
  CHECK(part.stages.at(Stage::cls).seed == cfg.stages.at(Stage::cls).seed);
  CHECK(part.splits.seed == cfg.splits.seed);

  // explicit per-stage seed wins over the derived one
  const ExperimentConfig pinned =
      ExperimentConfig::from_json({{"stages", {{"cls", {{"seed", 99}}}}}});
  CHECK(pinned.stages.at(Stage::cls).seed == 99);
  CHECK(pinned.stages.at(Stage::tseg).seed ==
        ExperimentConfig::defaults().stages.at(Stage::tseg).seed);

  // reseed rewrites the whole derived family
  ExperimentConfig two = ExperimentConfig::defaults();
  two.reseed(6);
  CHECK(two.stages.at(Stage::cls).seed != cfg.stages.at(Stage::cls).seed);
  CHECK(two.phantom.rng_seed == 6);
}

TEST_CASE("config validation rejects broken documents") {
  using J = nlohmann::json;
  CHECK_THROWS_AS(ExperimentConfig::from_json(J{{"typo", 1}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(J{{"network", {{"grwoth", 8}}}}), ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(J{{"splits", {{"ratios", {0.5, 0.3, 0.1}}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(J{{"inference", {{"fusions", {"t1", "bogus"}}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(J{{"inference", {{"primary", "sp"}, {"fusions", {"t1"}}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json(J{{"network", {{"pseg_variant", "resnet"}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(J{{"stages", {{"cls", {{"epochs", 0}}}}}}),
                  ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(J{{"cohort", {{"n_pwml", 0}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(J{{"patches", {{"cls_pos", 0}}}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(J{{"inference", {{"threshold", 1.5}}}}),
                  ConfigError);

  CHECK_THROWS_AS(ExperimentConfig::load_file("/nonexistent/config.json"), IoError);
  TempDir tmp;
  const std::string garbled = tmp.str() + "/bad.json";
  std::ofstream(garbled) << "{not json";
  CHECK_THROWS_AS(ExperimentConfig::load_file(garbled), FormatError);
}

TEST_CASE("read_manifest without a cohort is a staging error") {
  TempDir tmp;
  CHECK_THROWS_AS(read_manifest(tmp.str()), StagingError);
}

TEST_CASE("generate writes a reproducible cohort") {
  TempDir tmp;
  ExperimentConfig cfg = micro_config(tmp.str());
  cfg.n_control = 2;
  cfg.n_pwml = 2;

  const CohortManifest m = run_generate(cfg);
  REQUIRE(m.entries.size() == 4);
  CHECK(m.ids(Group::control) == std::vector<std::string>{"control-000", "control-001"});
  CHECK(m.ids(Group::pwml) == std::vector<std::string>{"pwml-000", "pwml-001"});
  CHECK(m.entry("pwml-001").seed == cohort_subject_seed(cfg.seed, Group::pwml, 1));
  for (const ManifestEntry& e : m.entries) {
    REQUIRE(e.paths.size() == 3);
    for (const auto& [ch, rel] : e.paths) CHECK(fs::exists(fs::path(cfg.paths.data_dir) / rel));
  }

  const std::string manifest_path = cfg.paths.data_dir + "/manifest.json";
  const std::uint64_t mh = file_hash(manifest_path);
  const std::uint64_t vh = file_hash(cfg.paths.data_dir + "/pwml-000/t1.nii.gz");
  run_generate(cfg);  // idempotent per seed
  CHECK(file_hash(manifest_path) == mh);
  CHECK(file_hash(cfg.paths.data_dir + "/pwml-000/t1.nii.gz") == vh);

  const CohortManifest r = read_manifest(cfg.paths.data_dir);
  CHECK(r.seed == cfg.seed);
  REQUIRE(r.entries.size() == 4);
  CHECK(r.entry("control-000").group == Group::control);
  CHECK_THROWS_AS(r.entry("nobody"), ValidationError);

  // what is on disk is exactly what the generator produces in memory
  const PhantomSubject s = load_subject(cfg.paths.data_dir, r.entry("pwml-000"));
  const PhantomSubject fresh =
      generate_subject(cfg.phantom, Group::pwml, r.entry("pwml-000").seed);
  REQUIRE(s.t1.shape() == fresh.t1.shape());
  CHECK((s.t1.data() == fresh.t1.data()).all());
  CHECK((s.tissue.data() == fresh.tissue.data()).all());
  CHECK((s.lesions.data() == fresh.lesions.data()).all());
}

TEST_CASE("micro pipeline: stage order, artifacts, predictions, report") {
  TempDir tmp;
  const ExperimentConfig cfg = micro_config(tmp.str());
  const CohortManifest manifest = run_generate(cfg);

  const SplitResult ctrl = group_split(cfg, manifest, Group::control);
  const SplitResult pwml = group_split(cfg, manifest, Group::pwml);
  CHECK(ctrl.train.size() == 2);
  CHECK(ctrl.val.size() == 1);
  CHECK(ctrl.test.size() == 1);
  CHECK(pwml.test.size() == 1);

  // stage data rules: tseg draws control subjects, cls draws pwml subjects
  const TrainData tseg_data = stage_patches(cfg, manifest, Stage::tseg);
  CHECK(tseg_data.train.size() == 4);  // 2 subjects x 2 patches
  CHECK(tseg_data.val.size() == 2);
  for (const Patch& p : tseg_data.train) {
    CHECK(p.label == PatchLabel::negative);
    CHECK(p.has_channel("tissue"));
  }
  const TrainData cls_data = stage_patches(cfg, manifest, Stage::cls);
  CHECK(cls_data.train.size() == 8);  // 2 subjects x (2 pos + 2 neg)
  int pos = 0;
  for (const Patch& p : cls_data.train) pos += p.label == PatchLabel::positive ? 1 : 0;
  CHECK(pos == 4);

  // dependency order is enforced before any work happens
  CHECK_THROWS_AS(run_train(cfg, Stage::cmg), StagingError);
  CHECK_THROWS_WITH_AS(run_train(cfg, Stage::pseg),
                       doctest::Contains("tseg"), StagingError);

  // ---- tseg ----
  auto res = run_train(cfg, Stage::tseg);
  REQUIRE(res.count("tseg") == 1);
  const std::string ck = cfg.paths.checkpoint_dir;
  for (const char* f : {"tseg.1.ckpt", "tseg.2.ckpt", "tseg.best.ckpt", "tseg.best.ckpt.json"})
    CHECK(fs::exists(ck + "/" + f));
  CHECK(read_checkpoint_meta(ck + "/tseg.best.ckpt").epoch == res.at("tseg").best_epoch);
  CHECK(read_checkpoint_meta(ck + "/tseg.best.ckpt").spec == cfg.network);
  const auto tseg_log = parse_jsonl(cfg.paths.report_dir + "/train_tseg.jsonl");
  REQUIRE(tseg_log.size() == 2);
  CHECK(tseg_log[0].at("stage") == "tseg");
  CHECK(tseg_log[0].at("epoch") == 1);
  for (const char* k : {"train_loss", "val_loss", "val_metric", "lr"})
    CHECK(tseg_log[1].contains(k));
  CHECK_NOTHROW(load_tseg(cfg));

  // ---- cls, cmg ----
  run_train(cfg, Stage::cls);
  CHECK(read_checkpoint_meta(ck + "/cls.best.ckpt").stage == "cls");
  run_train(cfg, Stage::cmg);
  CHECK_NOTHROW(load_cmg(cfg));

  // ---- pseg: one net per fusion, namespaced checkpoints ----
  res = run_train(cfg, Stage::pseg);
  REQUIRE(res.size() == 2);
  REQUIRE(res.count("t1") == 1);
  REQUIRE(res.count("sp+cf+t1") == 1);
  CHECK(fs::exists(ck + "/pseg/t1/pseg.best.ckpt"));
  CHECK(fs::exists(ck + "/pseg/sp+cf+t1/pseg.2.ckpt"));
  const auto pseg_log = parse_jsonl(cfg.paths.report_dir + "/train_pseg.jsonl");
  REQUIRE(pseg_log.size() == 4);  // 2 fusions x 2 epochs
  CHECK(pseg_log[0].at("fusion") == "t1");
  CHECK(pseg_log[3].at("fusion") == "sp+cf+t1");
  CHECK_NOTHROW(load_pseg(cfg, FusionSet::parse("t1")));
  CHECK_THROWS_AS(load_pseg(cfg, FusionSet::parse("cf")), StagingError);

  // ---- evaluate before predictions: names what is missing ----
  CHECK_THROWS_WITH_AS(run_evaluate(cfg), doctest::Contains(pwml.test[0].c_str()),
                       StagingError);

  // ---- infer: primary fusion only, deterministic reruns ----
  run_infer(cfg);
  const std::string pred = cfg.paths.report_dir + "/predictions/" + pwml.test[0];
  CHECK(fs::exists(pred + "/sp+cf+t1/lesion_mask.nii.gz"));
  CHECK_FALSE(fs::exists(pred + "/t1"));
  const VolumeF prob = read_volume<float>(pred + "/sp+cf+t1/lesion_prob.nii.gz");
  CHECK(prob.shape() == cfg.phantom.volume_shape);
  const std::uint64_t ph = file_hash(pred + "/sp+cf+t1/lesion_prob.nii.gz");
  run_infer(cfg);
  CHECK(file_hash(pred + "/sp+cf+t1/lesion_prob.nii.gz") == ph);

  // explicit subject ids work regardless of split membership
  run_infer(cfg, {pwml.train[0]});
  CHECK(fs::exists(cfg.paths.report_dir + "/predictions/" + pwml.train[0] + "/sp+cf+t1"));

  // t1-fusion predictions still missing for the test split
  CHECK_THROWS_AS(run_evaluate(cfg), StagingError);

  // ---- ablate + evaluate ----
  run_ablate(cfg);
  const std::vector<CohortReport> reports = run_evaluate(cfg);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].fusion == "t1");
  CHECK(reports[1].fusion == "sp+cf+t1");
  for (const CohortReport& r : reports) {
    CHECK(r.n_subjects == 1);
    for (double v : {r.dice_mean, r.tpr_mean, r.ppv_mean}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  const std::string report_json = slurp(cfg.paths.report_dir + "/report.json");
  const nlohmann::json parsed = nlohmann::json::parse(report_json);
  REQUIRE(parsed.is_array());
  CHECK(parsed.size() == 2);
  const std::string table = slurp(cfg.paths.report_dir + "/report.txt");
  CHECK(table.find("sp+cf+t1") != std::string::npos);

  // identical inputs -> identical report
  run_evaluate(cfg);
  CHECK(slurp(cfg.paths.report_dir + "/report.json") == report_json);

  // ---- cli against the same tree: flag plumbing end to end ----
  const std::string cfg_path = tmp.str() + "/exp.json";
  std::ofstream(cfg_path) << cfg.to_json().dump(2) << "\n";
  CHECK(run_cli("evaluate --config " + cfg_path) == 0);
  CHECK(run_cli("infer " + pwml.train[0] + " --config " + cfg_path +
                " --stride 32 --threshold 0.9") == 0);
  const nlohmann::json summary = nlohmann::json::parse(
      slurp(cfg.paths.report_dir + "/predictions/" + pwml.train[0] +
            "/sp+cf+t1/summary.json"));
  CHECK(summary.at("threshold") == 0.9);
}

TEST_CASE("cli maps errors to exit codes") {
  TempDir tmp;
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") != 0);       // a verb is required
  CHECK(run_cli("train") != 0);  // the stage argument is required
  CHECK(run_cli("generate --config " + tmp.str() + "/absent.json") != 0);

  const std::string bad = tmp.str() + "/bad.json";
  std::ofstream(bad) << R"({"splits": {"ratios": [0.5, 0.3, 0.1]}})";
  CHECK(run_cli("generate --config " + bad) == 2);

  ExperimentConfig cfg = micro_config(tmp.str());
  cfg.n_control = 1;
  cfg.n_pwml = 1;
  const std::string good = tmp.str() + "/micro.json";
  std::ofstream(good) << cfg.to_json().dump(2) << "\n";
  CHECK(run_cli("generate --config " + good) == 0);
  CHECK(fs::exists(cfg.paths.data_dir + "/manifest.json"));
  CHECK(run_cli("train warp --config " + good) == 2);
  CHECK(run_cli("train cmg --config " + good) == 3);   // cls checkpoint missing
  CHECK(run_cli("infer --config " + good) == 3);       // no checkpoints at all

  // --seed flag reaches the generator
  CHECK(run_cli("generate --config " + good + " --seed 123") == 0);
  const nlohmann::json m =
      nlohmann::json::parse(slurp(cfg.paths.data_dir + "/manifest.json"));
  CHECK(m.at("seed") == 123);
}
