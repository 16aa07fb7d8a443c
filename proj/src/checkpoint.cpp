#include "pwml/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace pwml {

namespace {

constexpr char kMagic[4] = {'P', 'W', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("checkpoint " + path + ": truncated");
  return v;
}

nlohmann::json spec_to_json(const NetworkSpec& s) {
  return {{"growth", s.growth},
          {"db_layers", s.db_layers},
          {"tseg_depth", s.tseg_depth},
          {"cmg_width", s.cmg_width},
          {"cls_hidden", s.cls_hidden},
          {"pseg_variant", to_string(s.pseg_variant)},
          {"intensity_scale", s.intensity_scale}};
}

NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.growth = j.at("growth").get<int>();
  s.db_layers = j.at("db_layers").get<int>();
  s.tseg_depth = j.at("tseg_depth").get<int>();
  s.cmg_width = j.at("cmg_width").get<int>();
  s.cls_hidden = j.at("cls_hidden").get<int>();
  s.pseg_variant = pseg_variant_from_string(j.at("pseg_variant").get<std::string>());
  s.intensity_scale = j.at("intensity_scale").get<double>();
  return s;
}

}  // namespace

std::uint64_t parameter_hash(const std::vector<ParamRef>& params) {
  std::uint64_t h = fnv1a(nullptr, 0);
  for (const auto& p : params)
    h = fnv1a(p.value, static_cast<std::size_t>(p.size) * sizeof(float), h);
  return h;
}

void save_checkpoint(const std::vector<ParamRef>& params, const std::string& path,
                     const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  put(out, kVersion);
  put(out, static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params) {
    put(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put(out, static_cast<std::uint64_t>(p.size));
    out.write(reinterpret_cast<const char*>(p.value),
              static_cast<std::streamsize>(p.size) * sizeof(float));
  }
  put(out, parameter_hash(params));
  if (!out) throw IoError("short write on checkpoint: " + path);
  out.close();

  nlohmann::json j{{"stage", meta.stage},
                   {"epoch", meta.epoch},
                   {"seed", meta.seed},
                   {"spec", spec_to_json(meta.spec)},
                   {"param_count", count_parameters(params)},
                   {"param_hash", parameter_hash(params)}};
  std::ofstream side(path + ".json");
  if (!side) throw IoError("cannot write checkpoint sidecar: " + path + ".json");
  side << j.dump(2) << "\n";
}

void load_checkpoint(const std::vector<ParamRef>& params, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("checkpoint " + path + ": bad magic");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion)
    throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  const auto count = get<std::uint64_t>(in, path);
  if (count != params.size())
    throw FormatError("checkpoint " + path + ": holds " + std::to_string(count) +
                      " parameters, network expects " + std::to_string(params.size()));
  for (const auto& p : params) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw FormatError("checkpoint " + path + ": truncated name");
    if (name != p.name)
      throw FormatError("checkpoint " + path + ": parameter '" + name + "' where '" + p.name +
                        "' was expected (wrong stage or spec?)");
    const auto size = get<std::uint64_t>(in, path);
    if (size != static_cast<std::uint64_t>(p.size))
      throw FormatError("checkpoint " + path + ": size mismatch for '" + name + "'");
    in.read(reinterpret_cast<char*>(p.value),
            static_cast<std::streamsize>(p.size) * sizeof(float));
    if (!in) throw FormatError("checkpoint " + path + ": truncated data for '" + name + "'");
  }
  const auto stored_hash = get<std::uint64_t>(in, path);
  if (stored_hash != parameter_hash(params))
    throw FormatError("checkpoint " + path + ": value hash mismatch (corrupt file)");
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw IoError("cannot open checkpoint sidecar: " + path + ".json");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint sidecar " + path + ".json: " + e.what());
  }
  CheckpointMeta meta;
  meta.stage = j.at("stage").get<std::string>();
  meta.epoch = j.at("epoch").get<int>();
  meta.seed = j.at("seed").get<std::uint64_t>();
  meta.spec = spec_from_json(j.at("spec"));
  return meta;
}

}  // namespace pwml
