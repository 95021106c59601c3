#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "deepedit/backbone.hpp"
#include "deepedit/error.hpp"
#include "deepedit/rng.hpp"

namespace deepedit {

using nlohmann::json;

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv3: return "conv3";
    case LayerKind::kDown2: return "down2";
    case LayerKind::kPointwise: return "pointwise";
  }
  return "?";
}

void put_floats(std::string& out, const std::vector<float>& v) {
  const std::size_t at = out.size();
  out.resize(at + v.size() * 4);
  std::memcpy(out.data() + at, v.data(), v.size() * 4);
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::uint32_t w;
      std::memcpy(&w, out.data() + at + i * 4, 4);
      w = __builtin_bswap32(w);
      std::memcpy(out.data() + at + i * 4, &w, 4);
    }
  }
}

void get_floats(const std::string& in, std::size_t& pos, std::vector<float>& v) {
  const std::size_t bytes = v.size() * 4;
  if (pos + bytes > in.size()) throw Error(ErrorKind::kFormat, "parameter payload truncated");
  std::memcpy(v.data(), in.data() + pos, bytes);
  if constexpr (std::endian::native == std::endian::big) {
    for (float& f : v) {
      std::uint32_t w;
      std::memcpy(&w, &f, 4);
      w = __builtin_bswap32(w);
      std::memcpy(&f, &w, 4);
    }
  }
  pos += bytes;
}

}  // namespace

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  json manifest = json::array();
  for (const LayerSpec& l : params.layers) {
    manifest.push_back({{"name", l.name}, {"kind", kind_name(l.kind)}, {"in", l.in_channels},
                        {"out", l.out_channels}, {"weights", l.weight_count()}, {"biases", l.out_channels}});
  }
  const json header = {{"format", "deepedit-params"}, {"version", 1}, {"arch", to_json(params.cfg)},
                       {"layers", manifest}};
  std::string blob = header.dump() + "\n";
  for (const ParamTensor& t : params.tensors) {
    put_floats(blob, t.weight);
    put_floats(blob, t.bias);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

ModelParams load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string blob = ss.str();
  const std::size_t nl = blob.find('\n');
  if (nl == std::string::npos) throw Error(ErrorKind::kFormat, "parameter file has no header line");
  json header;
  try {
    header = json::parse(blob.substr(0, nl));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("parameter header: ") + e.what());
  }
  if (header.value("format", "") != "deepedit-params" || header.value("version", 0) != 1) {
    throw Error(ErrorKind::kFormat, "not a version-1 parameter file");
  }
  ModelParams p;
  p.cfg = arch_config_from_json(header.at("arch"));
  p.layers = layer_manifest(p.cfg);
  const json& manifest = header.at("layers");
  if (!manifest.is_array() || manifest.size() != p.layers.size()) {
    throw Error(ErrorKind::kConfig, "parameter manifest does not match architecture");
  }
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerSpec& l = p.layers[i];
    const json& m = manifest[i];
    if (m.value("name", "") != l.name || m.value("in", -1) != l.in_channels ||
        m.value("out", -1) != l.out_channels || m.value("weights", std::size_t{0}) != l.weight_count()) {
      throw Error(ErrorKind::kConfig, "parameter manifest entry " + std::to_string(i) + " is inconsistent");
    }
  }
  std::size_t pos = nl + 1;
  for (const LayerSpec& l : p.layers) {
    ParamTensor t;
    t.weight.resize(l.weight_count());
    t.bias.resize(static_cast<std::size_t>(l.out_channels));
    get_floats(blob, pos, t.weight);
    get_floats(blob, pos, t.bias);
    p.tensors.push_back(std::move(t));
  }
  if (pos != blob.size()) throw Error(ErrorKind::kFormat, "parameter payload has trailing bytes");
  return p;
}

ModelParams load_params(const std::filesystem::path& path, const ArchConfig& expected) {
  ModelParams p = load_params(path);
  if (!(p.cfg == expected)) {
    throw Error(ErrorKind::kConfig, "parameter file architecture " + to_json(p.cfg).dump() +
                                        " does not match expected " + to_json(expected).dump());
  }
  return p;
}

std::string model_version(const ModelParams& params) {
  std::string blob = to_json(params.cfg).dump();
  for (const ParamTensor& t : params.tensors) {
    put_floats(blob, t.weight);
    put_floats(blob, t.bias);
  }
  std::ostringstream out;
  out << std::hex << stable_hash(blob);
  return out.str();
}

}  // namespace deepedit
