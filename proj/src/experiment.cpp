#include "pwml/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pwml/checkpoint.hpp"
#include "pwml/nifti.hpp"

namespace fs = std::filesystem;

namespace pwml {

namespace {

// Salts for deriving independent seed streams from the master seed.
constexpr std::uint64_t kSplitSalt = 0x5917;
constexpr std::uint64_t kStageSalt = 0x57a9e000;
constexpr std::uint64_t kInitSalt = 0x1417;
constexpr std::uint64_t kGroupSalt[2] = {0xc0, 0x99};

const Stage kAllStages[4] = {Stage::tseg, Stage::cls, Stage::cmg, Stage::pseg};

std::uint64_t id_salt(const std::string& subject_id) {
  return fnv1a(subject_id.data(), subject_id.size());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

std::uint64_t stage_seed_default(std::uint64_t master, Stage s) {
  return mix_seed(master, kStageSalt + static_cast<std::uint64_t>(s));
}

std::string best_checkpoint_path(const ExperimentConfig& cfg, const std::string& stage) {
  return cfg.paths.checkpoint_dir + "/" + stage + ".best.ckpt";
}

std::string pseg_dir(const ExperimentConfig& cfg, const std::string& fusion_label) {
  return cfg.paths.checkpoint_dir + "/pseg/" + fusion_label;
}

void require_checkpoint(const std::string& path, const std::string& stage) {
  if (!fs::exists(path))
    throw StagingError("missing checkpoint for stage '" + stage + "' (" + path +
                       "); run `train " + stage + "` first");
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path);
}

}  // namespace

void PatchPlan::validate() const {
  if (tseg < 1) throw ConfigError("patches: tseg must be >= 1");
  if (cls_pos < 1 || cls_neg < 1)
    throw ConfigError("patches: cls needs positive and negative patches");
  if (cmg_pos < 1 || cmg_neg < 1)
    throw ConfigError("patches: cmg needs both classes to train both flips");
  if (pseg_pos < 1 || pseg_neg < 0) throw ConfigError("patches: bad pseg counts");
}

void SplitSpec::validate() const {
  double sum = 0;
  for (double r : ratios) {
    if (r < 0) throw ConfigError("splits: ratios must be >= 0");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("splits: ratios must sum to 1");
}

void InferencePlan::validate() const {
  if (stride < 1) throw ConfigError("inference: stride must be >= 1");
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw ConfigError("inference: threshold must lie in [0, 1]");
  if (fusions.empty()) throw ConfigError("inference: at least one fusion set required");
  for (const std::string& f : fusions) FusionSet::parse(f);  // ConfigError on bad labels
  const FusionSet p = FusionSet::parse(primary);
  if (std::find(fusions.begin(), fusions.end(), p.label()) == fusions.end())
    throw ConfigError("inference: primary fusion '" + primary + "' not in fusions");
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig cfg;
  for (Stage s : kAllStages) {
    StageConfig sc;
    sc.stage = s;
    cfg.stages[s] = sc;
  }
  cfg.stages[Stage::tseg].epochs = 50;
  cfg.stages[Stage::cls].epochs = 30;
  cfg.stages[Stage::cmg].epochs = 50;
  cfg.stages[Stage::pseg].epochs = 50;
  for (Stage s : kAllStages) cfg.stages[s].batch_size = 16;
  const char* env = std::getenv("DEEPPWML_DATA_DIR");
  cfg.paths.data_dir = env != nullptr && *env != '\0' ? env : "data";
  cfg.paths.checkpoint_dir = cfg.paths.data_dir + "/checkpoints";
  cfg.paths.report_dir = cfg.paths.data_dir + "/reports";
  cfg.reseed(cfg.seed);
  return cfg;
}

void ExperimentConfig::reseed(std::uint64_t new_seed) {
  seed = new_seed;
  phantom.rng_seed = new_seed;
  splits.seed = mix_seed(new_seed, kSplitSalt);
  for (auto& [stage, sc] : stages) sc.seed = stage_seed_default(new_seed, stage);
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg = defaults();
  reject_unknown_keys(j,
                      {"seed", "phantom", "cohort", "splits", "network", "stages", "patches",
                       "inference", "paths"},
                      "top level");
  if (j.contains("seed")) cfg.reseed(j.at("seed").get<std::uint64_t>());

  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    reject_unknown_keys(p,
                        {"volume_shape", "voxel_spacing", "lesion_count_range",
                         "lesion_size_range", "intensity_means", "intensity_noise_sigma",
                         "deformation_amplitude", "bias_amplitude", "lesion_max_csf_distance"},
                        "phantom");
    auto& ph = cfg.phantom;
    if (p.contains("volume_shape")) ph.volume_shape = p.at("volume_shape").get<Index3>();
    if (p.contains("voxel_spacing")) ph.voxel_spacing = p.at("voxel_spacing").get<Spacing3>();
    if (p.contains("lesion_count_range"))
      ph.lesion_count_range = p.at("lesion_count_range").get<std::array<int, 2>>();
    if (p.contains("lesion_size_range"))
      ph.lesion_size_range = p.at("lesion_size_range").get<std::array<int, 2>>();
    if (p.contains("intensity_means"))
      for (const auto& [k, v] : p.at("intensity_means").items())
        ph.intensity_means[k] = v.get<double>();
    if (p.contains("intensity_noise_sigma"))
      ph.intensity_noise_sigma = p.at("intensity_noise_sigma").get<double>();
    if (p.contains("deformation_amplitude"))
      ph.deformation_amplitude = p.at("deformation_amplitude").get<double>();
    if (p.contains("bias_amplitude")) ph.bias_amplitude = p.at("bias_amplitude").get<double>();
    if (p.contains("lesion_max_csf_distance"))
      ph.lesion_max_csf_distance = p.at("lesion_max_csf_distance").get<int>();
  }

  if (j.contains("cohort")) {
    const auto& c = j.at("cohort");
    reject_unknown_keys(c, {"n_control", "n_pwml"}, "cohort");
    cfg.n_control = c.value("n_control", cfg.n_control);
    cfg.n_pwml = c.value("n_pwml", cfg.n_pwml);
  }

  if (j.contains("splits")) {
    const auto& s = j.at("splits");
    reject_unknown_keys(s, {"ratios", "seed"}, "splits");
    if (s.contains("ratios")) cfg.splits.ratios = s.at("ratios").get<std::array<double, 3>>();
    if (s.contains("seed")) cfg.splits.seed = s.at("seed").get<std::uint64_t>();
  }

  if (j.contains("network")) {
    const auto& n = j.at("network");
    reject_unknown_keys(n,
                        {"growth", "db_layers", "tseg_depth", "cmg_width", "cls_hidden",
                         "pseg_variant", "intensity_scale"},
                        "network");
    cfg.network.growth = n.value("growth", cfg.network.growth);
    cfg.network.db_layers = n.value("db_layers", cfg.network.db_layers);
    cfg.network.tseg_depth = n.value("tseg_depth", cfg.network.tseg_depth);
    cfg.network.cmg_width = n.value("cmg_width", cfg.network.cmg_width);
    cfg.network.cls_hidden = n.value("cls_hidden", cfg.network.cls_hidden);
    if (n.contains("pseg_variant"))
      cfg.network.pseg_variant = pseg_variant_from_string(n.at("pseg_variant").get<std::string>());
    cfg.network.intensity_scale = n.value("intensity_scale", cfg.network.intensity_scale);
  }

  if (j.contains("stages")) {
    reject_unknown_keys(j.at("stages"), {"tseg", "cls", "cmg", "pseg"}, "stages");
    for (const auto& [name, sj] : j.at("stages").items()) {
      const Stage stage = stage_from_string(name);
      reject_unknown_keys(sj, {"epochs", "batch_size", "lr", "loss_weights", "seed"},
                          "stages." + name);
      StageConfig& sc = cfg.stages.at(stage);
      sc.epochs = sj.value("epochs", sc.epochs);
      sc.batch_size = sj.value("batch_size", sc.batch_size);
      if (sj.contains("lr")) {
        reject_unknown_keys(sj.at("lr"), {"initial", "final"}, "stages." + name + ".lr");
        sc.lr.initial = sj.at("lr").value("initial", sc.lr.initial);
        sc.lr.final_rate = sj.at("lr").value("final", sc.lr.final_rate);
      }
      if (sj.contains("loss_weights")) {
        reject_unknown_keys(sj.at("loss_weights"), {"l1", "l2", "cls"},
                            "stages." + name + ".loss_weights");
        sc.loss_weights.l1 = sj.at("loss_weights").value("l1", sc.loss_weights.l1);
        sc.loss_weights.l2 = sj.at("loss_weights").value("l2", sc.loss_weights.l2);
        sc.loss_weights.cls = sj.at("loss_weights").value("cls", sc.loss_weights.cls);
      }
      if (sj.contains("seed")) sc.seed = sj.at("seed").get<std::uint64_t>();
    }
  }

  if (j.contains("patches")) {
    const auto& p = j.at("patches");
    reject_unknown_keys(
        p, {"tseg", "cls_pos", "cls_neg", "cmg_pos", "cmg_neg", "pseg_pos", "pseg_neg"},
        "patches");
    cfg.patches.tseg = p.value("tseg", cfg.patches.tseg);
    cfg.patches.cls_pos = p.value("cls_pos", cfg.patches.cls_pos);
    cfg.patches.cls_neg = p.value("cls_neg", cfg.patches.cls_neg);
    cfg.patches.cmg_pos = p.value("cmg_pos", cfg.patches.cmg_pos);
    cfg.patches.cmg_neg = p.value("cmg_neg", cfg.patches.cmg_neg);
    cfg.patches.pseg_pos = p.value("pseg_pos", cfg.patches.pseg_pos);
    cfg.patches.pseg_neg = p.value("pseg_neg", cfg.patches.pseg_neg);
  }

  if (j.contains("inference")) {
    const auto& i = j.at("inference");
    reject_unknown_keys(i, {"stride", "threshold", "primary", "fusions"}, "inference");
    cfg.inference.stride = i.value("stride", cfg.inference.stride);
    cfg.inference.threshold = i.value("threshold", cfg.inference.threshold);
    cfg.inference.primary = i.value("primary", cfg.inference.primary);
    if (i.contains("fusions"))
      cfg.inference.fusions = i.at("fusions").get<std::vector<std::string>>();
  }

  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    reject_unknown_keys(p, {"data_dir", "checkpoint_dir", "report_dir"}, "paths");
    cfg.paths.data_dir = p.value("data_dir", cfg.paths.data_dir);
    cfg.paths.checkpoint_dir = p.value("checkpoint_dir", std::string());
    cfg.paths.report_dir = p.value("report_dir", std::string());
  }
  if (cfg.paths.checkpoint_dir.empty())
    cfg.paths.checkpoint_dir = cfg.paths.data_dir + "/checkpoints";
  if (cfg.paths.report_dir.empty()) cfg.paths.report_dir = cfg.paths.data_dir + "/reports";

  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["phantom"] = {{"volume_shape", phantom.volume_shape},
                  {"voxel_spacing", phantom.voxel_spacing},
                  {"lesion_count_range", phantom.lesion_count_range},
                  {"lesion_size_range", phantom.lesion_size_range},
                  {"intensity_means", phantom.intensity_means},
                  {"intensity_noise_sigma", phantom.intensity_noise_sigma},
                  {"deformation_amplitude", phantom.deformation_amplitude},
                  {"bias_amplitude", phantom.bias_amplitude},
                  {"lesion_max_csf_distance", phantom.lesion_max_csf_distance}};
  j["cohort"] = {{"n_control", n_control}, {"n_pwml", n_pwml}};
  j["splits"] = {{"ratios", splits.ratios}, {"seed", splits.seed}};
  j["network"] = {{"growth", network.growth},
                  {"db_layers", network.db_layers},
                  {"tseg_depth", network.tseg_depth},
                  {"cmg_width", network.cmg_width},
                  {"cls_hidden", network.cls_hidden},
                  {"pseg_variant", to_string(network.pseg_variant)},
                  {"intensity_scale", network.intensity_scale}};
  for (const auto& [stage, sc] : stages) {
    nlohmann::json sj = {{"epochs", sc.epochs},
                         {"batch_size", sc.batch_size},
                         {"lr", {{"initial", sc.lr.initial}, {"final", sc.lr.final_rate}}},
                         {"seed", sc.seed}};
    if (stage == Stage::cmg)
      sj["loss_weights"] = {{"l1", sc.loss_weights.l1},
                           {"l2", sc.loss_weights.l2},
                           {"cls", sc.loss_weights.cls}};
    j["stages"][to_string(stage)] = sj;
  }
  j["patches"] = {{"tseg", patches.tseg},       {"cls_pos", patches.cls_pos},
                  {"cls_neg", patches.cls_neg}, {"cmg_pos", patches.cmg_pos},
                  {"cmg_neg", patches.cmg_neg}, {"pseg_pos", patches.pseg_pos},
                  {"pseg_neg", patches.pseg_neg}};
  j["inference"] = {{"stride", inference.stride},
                    {"threshold", inference.threshold},
                    {"primary", inference.primary},
                    {"fusions", inference.fusions}};
  j["paths"] = {{"data_dir", paths.data_dir},
                {"checkpoint_dir", paths.checkpoint_dir},
                {"report_dir", paths.report_dir}};
  return j;
}

void ExperimentConfig::validate() const {
  phantom.validate();
  network.validate();
  splits.validate();
  patches.validate();
  inference.validate();
  if (n_control < 1 || n_pwml < 1) throw ConfigError("cohort: group sizes must be >= 1");
  for (Stage s : kAllStages)
    if (stages.count(s) == 0)
      throw ConfigError("stages: missing configuration for " + to_string(s));
  for (const auto& [stage, sc] : stages) {
    if (sc.stage != stage) throw ConfigError("stages: entry mislabeled for " + to_string(stage));
    sc.validate();
  }
  if (paths.data_dir.empty() || paths.checkpoint_dir.empty() || paths.report_dir.empty())
    throw ConfigError("paths: data_dir, checkpoint_dir and report_dir must be set");
}

std::vector<std::string> CohortManifest::ids(Group g) const {
  std::vector<std::string> out;
  for (const ManifestEntry& e : entries)
    if (e.group == g) out.push_back(e.subject_id);
  return out;
}

const ManifestEntry& CohortManifest::entry(const std::string& subject_id) const {
  for (const ManifestEntry& e : entries)
    if (e.subject_id == subject_id) return e;
  throw ValidationError("unknown subject '" + subject_id + "'");
}

CohortManifest run_generate(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.paths.data_dir);
  CohortManifest manifest;
  manifest.seed = cfg.seed;

  // Subjects are generated one at a time (the cohort does not fit comfortably
  // in memory) with the same ids and per-subject seeds as generate_cohort.
  const Group groups[2] = {Group::control, Group::pwml};
  const int counts[2] = {cfg.n_control, cfg.n_pwml};
  for (int g = 0; g < 2; ++g) {
    for (int i = 0; i < counts[g]; ++i) {
      const std::uint64_t sseed = cohort_subject_seed(cfg.seed, groups[g], i);
      PhantomSubject s = generate_subject(cfg.phantom, groups[g], sseed);
      char id[32];
      std::snprintf(id, sizeof(id), "%s-%03d", to_string(groups[g]).c_str(), i);
      s.subject_id = id;

      const fs::path dir = fs::path(cfg.paths.data_dir) / s.subject_id;
      ensure_dir(dir.string());
      write_volume(s.t1, (dir / "t1.nii.gz").string());
      write_volume(s.tissue, (dir / "tissue.nii.gz").string());
      write_volume(s.lesions, (dir / "lesions.nii.gz").string());

      ManifestEntry e;
      e.subject_id = s.subject_id;
      e.group = groups[g];
      e.seed = sseed;
      for (const char* ch : {"t1", "tissue", "lesions"})
        e.paths[ch] = s.subject_id + "/" + ch + ".nii.gz";
      manifest.entries.push_back(std::move(e));
      std::cout << nlohmann::json{{"event", "generate"},
                                  {"subject_id", manifest.entries.back().subject_id},
                                  {"seed", sseed}}
                       .dump()
                << "\n";
    }
  }

  nlohmann::json j;
  j["seed"] = manifest.seed;
  j["subjects"] = nlohmann::json::array();
  for (const ManifestEntry& e : manifest.entries)
    j["subjects"].push_back({{"subject_id", e.subject_id},
                             {"group", to_string(e.group)},
                             {"seed", e.seed},
                             {"paths", e.paths}});
  write_text(cfg.paths.data_dir + "/manifest.json", j.dump(2) + "\n");
  return manifest;
}

CohortManifest read_manifest(const std::string& data_dir) {
  const std::string path = data_dir + "/manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StagingError("no cohort manifest at " + path + "; run `generate` first");
  nlohmann::json j;
  try {
    in >> j;
    CohortManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& sj : j.at("subjects")) {
      ManifestEntry e;
      e.subject_id = sj.at("subject_id").get<std::string>();
      e.group = group_from_string(sj.at("group").get<std::string>());
      e.seed = sj.at("seed").get<std::uint64_t>();
      e.paths = sj.at("paths").get<std::map<std::string, std::string>>();
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path + ": " + e.what());
  }
}

PhantomSubject load_subject(const std::string& data_dir, const ManifestEntry& entry) {
  PhantomSubject s;
  s.subject_id = entry.subject_id;
  s.group = entry.group;
  s.t1 = read_volume<float>(data_dir + "/" + entry.paths.at("t1"));
  s.tissue = read_volume<std::uint8_t>(data_dir + "/" + entry.paths.at("tissue"));
  s.lesions = read_volume<std::uint8_t>(data_dir + "/" + entry.paths.at("lesions"));
  return s;
}

SplitResult group_split(const ExperimentConfig& cfg, const CohortManifest& manifest, Group g) {
  return split_cohort(manifest.ids(g), cfg.splits.ratios,
                      mix_seed(cfg.splits.seed, kGroupSalt[static_cast<int>(g)]));
}

namespace {

struct StagePatchCounts {
  Group group;
  int n_pos, n_neg;
};

StagePatchCounts stage_patch_counts(const ExperimentConfig& cfg, Stage stage) {
  switch (stage) {
    case Stage::tseg:
      return {Group::control, 0, cfg.patches.tseg};
    case Stage::cls:
      return {Group::pwml, cfg.patches.cls_pos, cfg.patches.cls_neg};
    case Stage::cmg:
      return {Group::pwml, cfg.patches.cmg_pos, cfg.patches.cmg_neg};
    case Stage::pseg:
      return {Group::pwml, cfg.patches.pseg_pos, cfg.patches.pseg_neg};
  }
  throw ConfigError("unknown stage");
}

void sample_into(const ExperimentConfig& cfg, const CohortManifest& manifest,
                 const std::vector<std::string>& ids, const StagePatchCounts& counts,
                 std::uint64_t stage_seed, std::vector<Patch>& out) {
  for (const std::string& id : ids) {
    const PhantomSubject s = load_subject(cfg.paths.data_dir, manifest.entry(id));
    std::vector<Patch> p = sample_training_patches(s, counts.n_pos, counts.n_neg,
                                                   mix_seed(stage_seed, id_salt(id)));
    std::move(p.begin(), p.end(), std::back_inserter(out));
  }
}

}  // namespace

TrainData stage_patches(const ExperimentConfig& cfg, const CohortManifest& manifest,
                        Stage stage) {
  const StagePatchCounts counts = stage_patch_counts(cfg, stage);
  const SplitResult split = group_split(cfg, manifest, counts.group);
  const std::uint64_t sseed = cfg.stages.at(stage).seed;

  TrainData data;
  sample_into(cfg, manifest, split.train, counts, sseed, data.train);
  sample_into(cfg, manifest, split.val, counts, sseed, data.val);
  if (stage == Stage::pseg) {
    TsegNet tseg = load_tseg(cfg);
    CmgNet cmg = load_cmg(cfg);
    add_model_channels(data.train, tseg, cmg);
    add_model_channels(data.val, tseg, cmg);
  }
  return data;
}

namespace {

/// Per-epoch JSONL record, written to the stage log and echoed to stdout.
class EpochLogger {
 public:
  EpochLogger(const std::string& path, std::string stage, std::string fusion = {})
      : stage_(std::move(stage)), fusion_(std::move(fusion)) {
    out_.open(path, std::ios::binary | std::ios::app);
    if (!out_) throw IoError("cannot write training log " + path);
  }

  void operator()(const EpochRecord& r) {
    nlohmann::json j{{"stage", stage_},   {"epoch", r.epoch},
                     {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
                     {"val_metric", r.val_metric}, {"lr", r.lr}};
    if (!fusion_.empty()) j["fusion"] = fusion_;
    const std::string line = j.dump();
    out_ << line << "\n";
    out_.flush();
    std::cout << line << "\n";
  }

 private:
  std::string stage_, fusion_;
  std::ofstream out_;
};

/// Save every epoch as {stem}.{epoch}.ckpt under dir, then copy the best
/// epoch (plus its sidecar) to {stem}.best.ckpt and reload it into params.
class CheckpointWriter {
 public:
  CheckpointWriter(std::string dir, std::string stage, std::vector<ParamRef> params,
                   CheckpointMeta meta)
      : dir_(std::move(dir)), stage_(std::move(stage)), params_(std::move(params)),
        meta_(std::move(meta)) {
    ensure_dir(dir_);
  }

  void save_epoch(int epoch) {
    meta_.epoch = epoch;
    save_checkpoint(params_, epoch_path(epoch), meta_);
  }

  std::string finish(int best_epoch) {
    const std::string best = dir_ + "/" + stage_ + ".best.ckpt";
    fs::copy_file(epoch_path(best_epoch), best, fs::copy_options::overwrite_existing);
    fs::copy_file(epoch_path(best_epoch) + ".json", best + ".json",
                  fs::copy_options::overwrite_existing);
    load_checkpoint(params_, best);  // leave the network at its best epoch
    return best;
  }

 private:
  std::string epoch_path(int epoch) const {
    return dir_ + "/" + stage_ + "." + std::to_string(epoch) + ".ckpt";
  }

  std::string dir_, stage_;
  std::vector<ParamRef> params_;
  CheckpointMeta meta_;
};

}  // namespace

TsegNet load_tseg(const ExperimentConfig& cfg) {
  const std::string path = best_checkpoint_path(cfg, "tseg");
  require_checkpoint(path, "tseg");
  TsegNet net(cfg.network);
  load_checkpoint(net.params(), path);
  return net;
}

ClsNet load_cls(const ExperimentConfig& cfg) {
  const std::string path = best_checkpoint_path(cfg, "cls");
  require_checkpoint(path, "cls");
  ClsNet net(cfg.network);
  load_checkpoint(net.params(), path);
  return net;
}

CmgNet load_cmg(const ExperimentConfig& cfg) {
  const std::string path = best_checkpoint_path(cfg, "cmg");
  require_checkpoint(path, "cmg");
  CmgNet net(cfg.network);
  load_checkpoint(net.params(), path);
  return net;
}

PsegNet load_pseg(const ExperimentConfig& cfg, const FusionSet& fusion) {
  const std::string path = pseg_dir(cfg, fusion.label()) + "/pseg.best.ckpt";
  require_checkpoint(path, "pseg");
  PsegNet net(cfg.network, cfg.network.pseg_variant, fusion.channels());
  load_checkpoint(net.params(), path);
  return net;
}

std::map<std::string, TrainResult> run_train(const ExperimentConfig& cfg, Stage stage) {
  cfg.validate();
  const StageConfig& sc = cfg.stages.at(stage);
  const CohortManifest manifest = read_manifest(cfg.paths.data_dir);
  ensure_dir(cfg.paths.checkpoint_dir);
  ensure_dir(cfg.paths.report_dir);

  // Stage prerequisites fail before any patch sampling happens.
  if (stage == Stage::cmg) require_checkpoint(best_checkpoint_path(cfg, "cls"), "cls");
  if (stage == Stage::pseg) {
    require_checkpoint(best_checkpoint_path(cfg, "tseg"), "tseg");
    require_checkpoint(best_checkpoint_path(cfg, "cmg"), "cmg");
  }

  const std::string log_path =
      cfg.paths.report_dir + "/train_" + to_string(stage) + ".jsonl";
  write_text(log_path, "");  // start each stage run with a fresh log

  const TrainData data = stage_patches(cfg, manifest, stage);
  CheckpointMeta meta{to_string(stage), cfg.network, sc.seed, 0};
  std::map<std::string, TrainResult> results;

  if (stage == Stage::pseg) {
    for (const std::string& label : cfg.inference.fusions) {
      const FusionSet fusion = FusionSet::parse(label);
      PsegNet net(cfg.network, cfg.network.pseg_variant, fusion.channels());
      Rng init(mix_seed(sc.seed, kInitSalt ^ id_salt(label)));
      net.init(init);
      CheckpointWriter ckpt(pseg_dir(cfg, label), "pseg", net.params(), meta);
      EpochLogger log(log_path, "pseg", label);
      const TrainResult r = train_pseg(net, fusion, sc, data, [&](const EpochRecord& rec) {
        log(rec);
        ckpt.save_epoch(rec.epoch);
      });
      ckpt.finish(r.best_epoch);
      results[label] = r;
    }
    return results;
  }

  Rng init(mix_seed(sc.seed, kInitSalt));
  EpochLogger log(log_path, to_string(stage));
  TrainResult r;
  if (stage == Stage::tseg) {
    TsegNet net(cfg.network);
    net.init(init);
    CheckpointWriter ckpt(cfg.paths.checkpoint_dir, "tseg", net.params(), meta);
    r = train_tseg(net, sc, data, [&](const EpochRecord& rec) {
      log(rec);
      ckpt.save_epoch(rec.epoch);
    });
    ckpt.finish(r.best_epoch);
  } else if (stage == Stage::cls) {
    ClsNet net(cfg.network);
    net.init(init);
    CheckpointWriter ckpt(cfg.paths.checkpoint_dir, "cls", net.params(), meta);
    r = train_cls(net, sc, data, [&](const EpochRecord& rec) {
      log(rec);
      ckpt.save_epoch(rec.epoch);
    });
    ckpt.finish(r.best_epoch);
  } else {
    ClsNet frozen = load_cls(cfg);
    CmgNet net(cfg.network);
    net.init(init);
    CheckpointWriter ckpt(cfg.paths.checkpoint_dir, "cmg", net.params(), meta);
    r = train_cmg(net, frozen, sc, data, [&](const EpochRecord& rec) {
      log(rec);
      ckpt.save_epoch(rec.epoch);
    });
    ckpt.finish(r.best_epoch);
  }
  results[to_string(stage)] = r;
  return results;
}

namespace {

void run_fusions(const ExperimentConfig& cfg, std::vector<std::string> subject_ids,
                 const std::vector<std::string>& fusion_labels) {
  cfg.validate();
  const CohortManifest manifest = read_manifest(cfg.paths.data_dir);
  if (subject_ids.empty()) subject_ids = group_split(cfg, manifest, Group::pwml).test;

  TsegNet tseg = load_tseg(cfg);
  ClsNet cls = load_cls(cfg);
  CmgNet cmg = load_cmg(cfg);
  std::vector<PsegNet> psegs;
  psegs.reserve(fusion_labels.size());
  std::vector<std::pair<FusionSet, PsegNet*>> heads;
  for (const std::string& label : fusion_labels)
    psegs.push_back(load_pseg(cfg, FusionSet::parse(label)));
  for (std::size_t i = 0; i < fusion_labels.size(); ++i)
    heads.emplace_back(FusionSet::parse(fusion_labels[i]), &psegs[i]);

  const std::string out_dir = cfg.paths.report_dir + "/predictions";
  ensure_dir(out_dir);
  for (const std::string& id : subject_ids) {
    const PhantomSubject s = load_subject(cfg.paths.data_dir, manifest.entry(id));
    const SlidingWindowPlan plan =
        plan_sliding_window(s.t1.shape(), kPatchSize, cfg.inference.stride);
    const auto preds =
        run_ablation(s.t1, tseg, cls, cmg, heads, plan, cfg.inference.threshold);
    for (const auto& [label, pred] : preds) {
      save_prediction(pred, out_dir, id, label, cfg.inference.threshold);
      std::cout << nlohmann::json{{"event", "predict"},
                                  {"subject_id", id},
                                  {"fusion", label},
                                  {"lesion_voxels",
                                   static_cast<std::int64_t>(
                                       pred.lesion_mask.data().cast<std::int64_t>().sum())}}
                       .dump()
                << "\n";
    }
  }
}

}  // namespace

void run_infer(const ExperimentConfig& cfg, std::vector<std::string> subject_ids) {
  run_fusions(cfg, std::move(subject_ids), {cfg.inference.primary});
}

void run_ablate(const ExperimentConfig& cfg, std::vector<std::string> subject_ids) {
  run_fusions(cfg, std::move(subject_ids), cfg.inference.fusions);
}

std::vector<CohortReport> run_evaluate(const ExperimentConfig& cfg) {
  cfg.validate();
  const CohortManifest manifest = read_manifest(cfg.paths.data_dir);
  const std::vector<std::string> test_ids = group_split(cfg, manifest, Group::pwml).test;
  const std::string pred_dir = cfg.paths.report_dir + "/predictions";

  if (test_ids.empty())
    throw ConfigError("evaluate: the PWML test split is empty; grow the cohort or test ratio");

  const auto mask_path = [&](const std::string& id, const std::string& label) {
    return pred_dir + "/" + id + "/" + label + "/lesion_mask.nii.gz";
  };
  std::string missing;
  for (const std::string& label : cfg.inference.fusions)
    for (const std::string& id : test_ids)
      if (!fs::exists(mask_path(id, label))) missing += " " + id + "/" + label;
  if (!missing.empty())
    throw StagingError("missing predictions for:" + missing +
                       "; run `ablate` (or `infer`) first");

  std::vector<CohortReport> reports;
  for (const std::string& label : cfg.inference.fusions) {
    std::vector<SubjectScore> scores;
    for (const std::string& id : test_ids) {
      const VolumeU8 pred = read_volume<std::uint8_t>(mask_path(id, label));
      const VolumeU8 gt = read_volume<std::uint8_t>(
          cfg.paths.data_dir + "/" + manifest.entry(id).paths.at("lesions"));
      scores.push_back(score_subject(id, pred, gt));
    }
    reports.push_back(aggregate(scores, label));
  }

  nlohmann::json arr = nlohmann::json::array();
  for (const CohortReport& r : reports) arr.push_back(nlohmann::json::parse(report_to_json(r)));
  ensure_dir(cfg.paths.report_dir);
  write_text(cfg.paths.report_dir + "/report.json", arr.dump(2) + "\n");
  const std::string table = reports_to_table(reports);
  write_text(cfg.paths.report_dir + "/report.txt", table);
  std::cout << table;
  return reports;
}

}  // namespace pwml
