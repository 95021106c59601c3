#include "deepedit/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "deepedit/error.hpp"

namespace deepedit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

std::vector<char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_all(const fs::path& path, const char* data, std::size_t size) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(data, static_cast<std::streamsize>(size));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string());
}

json read_header(const fs::path& payload) {
  const auto bytes = read_all(sidecar_path(payload));
  json h;
  try {
    h = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, "bad header " + sidecar_path(payload).string() + ": " + e.what());
  }
  if (!h.is_object()) throw Error(ErrorKind::kFormat, "header is not a JSON object");
  if (h.value("version", -1) != kFormatVersion) {
    throw Error(ErrorKind::kFormat, "unsupported format version in " + sidecar_path(payload).string());
  }
  return h;
}

std::size_t header_dim(const json& h, const char* key) {
  if (!h.contains(key) || !h[key].is_number_unsigned() || h[key].get<std::size_t>() == 0) {
    throw Error(ErrorKind::kFormat, std::string("header field '") + key + "' must be a positive integer");
  }
  return h[key].get<std::size_t>();
}

void write_header(const fs::path& payload, const json& h) {
  const std::string text = h.dump(2) + "\n";
  write_all(sidecar_path(payload), text.data(), text.size());
}

}  // namespace

fs::path sidecar_path(const fs::path& payload) { return fs::path(payload.string() + ".json"); }

void save_volume(const Volume& v, const fs::path& path) {
  if (!v.all_finite()) throw Error(ErrorKind::kNonFinite, "save_volume: non-finite payload");
  const json h = {{"version", kFormatVersion}, {"channels", v.channels()}, {"depth", v.shape().depth},
                  {"height", v.shape().height}, {"width", v.shape().width}, {"dtype", "f32le"}};
  std::vector<std::uint32_t> words(v.data().size());
  std::memcpy(words.data(), v.data().data(), words.size() * 4);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = __builtin_bswap32(w);
  }
  write_all(path, reinterpret_cast<const char*>(words.data()), words.size() * 4);
  write_header(path, h);
}

Volume load_volume(const fs::path& path) {
  const json h = read_header(path);
  if (h.value("dtype", "") != "f32le") throw Error(ErrorKind::kFormat, "volume dtype must be f32le");
  const std::size_t c = header_dim(h, "channels");
  const Shape3D shape(header_dim(h, "depth"), header_dim(h, "height"), header_dim(h, "width"));
  const auto bytes = read_all(path);
  const std::size_t expected = c * shape.voxels() * 4;
  if (bytes.size() != expected) {
    throw Error(ErrorKind::kFormat, "volume payload is " + std::to_string(bytes.size()) +
                                        " bytes, header implies " + std::to_string(expected));
  }
  std::vector<std::uint32_t> words(c * shape.voxels());
  std::memcpy(words.data(), bytes.data(), expected);
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = __builtin_bswap32(w);
  }
  std::vector<float> data(words.size());
  std::memcpy(data.data(), words.data(), expected);
  return Volume(c, shape, std::move(data));
}

void save_labels(const LabelMap& m, const fs::path& path) {
  const json h = {{"version", kFormatVersion}, {"depth", m.shape().depth}, {"height", m.shape().height},
                  {"width", m.shape().width}, {"num_labels", m.num_labels()}, {"dtype", "u8"}};
  write_all(path, reinterpret_cast<const char*>(m.data().data()), m.data().size());
  write_header(path, h);
}

LabelMap load_labels(const fs::path& path) {
  const json h = read_header(path);
  if (h.value("dtype", "") != "u8") throw Error(ErrorKind::kFormat, "label dtype must be u8");
  const Shape3D shape(header_dim(h, "depth"), header_dim(h, "height"), header_dim(h, "width"));
  const int num_labels = static_cast<int>(header_dim(h, "num_labels"));
  const auto bytes = read_all(path);
  if (bytes.size() != shape.voxels()) {
    throw Error(ErrorKind::kFormat, "label payload is " + std::to_string(bytes.size()) +
                                        " bytes, header implies " + std::to_string(shape.voxels()));
  }
  std::vector<std::uint8_t> labels(bytes.begin(), bytes.end());
  return LabelMap(shape, num_labels, std::move(labels));
}

fs::path image_path_for(const fs::path& root, const std::string& case_id) {
  return root / "images" / (case_id + ".vol");
}

fs::path label_path_for(const fs::path& root, const std::string& case_id) {
  return root / "labels" / (case_id + ".lab");
}

std::vector<CaseRecord> scan_dataset(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) throw Error(ErrorKind::kIo, "dataset root unreadable: " + root.string());

  int manifest_labels = 0;
  if (fs::exists(root / "manifest.json")) {
    const auto bytes = read_all(root / "manifest.json");
    const json m = json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (m.is_object() && m.contains("synth") && m["synth"].contains("num_labels")) {
      manifest_labels = m["synth"]["num_labels"].get<int>();
    }
  }

  std::map<std::string, fs::path> images;
  const fs::path image_dir = root / "images";
  if (fs::is_directory(image_dir, ec)) {
    for (const auto& entry : fs::directory_iterator(image_dir)) {
      if (!entry.is_regular_file()) continue;
      const std::string name = entry.path().filename().string();
      if (name.empty() || name[0] == '.' || name.ends_with(".json")) continue;
      const std::string id = name.substr(0, name.find('.'));
      if (!images.emplace(id, entry.path()).second) {
        throw Error(ErrorKind::kFormat, "duplicate case_id '" + id + "' in " + image_dir.string());
      }
    }
  }

  std::vector<CaseRecord> out;
  for (const auto& [id, path] : images) {
    CaseRecord rec;
    rec.case_id = id;
    rec.image_path = path;
    rec.num_labels = manifest_labels;
    const fs::path lab = label_path_for(root, id);
    if (fs::exists(lab)) {
      rec.label_path = lab;
      rec.labeled = true;
      const json h = read_header(lab);
      rec.num_labels = static_cast<int>(header_dim(h, "num_labels"));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

LoadedCase load_case(const CaseRecord& record) {
  LoadedCase c{record.case_id, load_volume(record.image_path), std::nullopt};
  if (record.label_path) {
    c.labels = load_labels(*record.label_path);
    if (!(c.labels->shape() == c.image.shape())) {
      throw Error(ErrorKind::kShapeMismatch, "case " + record.case_id + ": image " + c.image.shape().str() +
                                                 " vs labels " + c.labels->shape().str());
    }
  }
  return c;
}

void SynthConfig::validate() const {
  if (num_labels < 1 || num_labels > 255) throw Error(ErrorKind::kConfig, "synth: num_labels must be in 1..255");
  if (blobs_min < 1 || blobs_max < blobs_min) throw Error(ErrorKind::kConfig, "synth: need 1 <= blobs_min <= blobs_max");
  if (offsets.size() != static_cast<std::size_t>(num_labels)) {
    throw Error(ErrorKind::kConfig, "synth: offsets must have one entry per label");
  }
  if (!(noise_std >= 0.0)) throw Error(ErrorKind::kConfig, "synth: noise_std must be >= 0");
  if (!(min_radius >= 1.0) || max_radius < min_radius) {
    throw Error(ErrorKind::kConfig, "synth: need 1 <= min_radius <= max_radius");
  }
  for (double o : offsets) {
    if (!std::isfinite(o) || std::abs(o) < noise_std || o == 0.0) {
      throw Error(ErrorKind::kConfig, "synth: each offset must differ from background by >= noise_std");
    }
  }
  const double span = 2.0 * std::ceil(min_radius) + 1.0;
  if (static_cast<double>(shape.depth) < span || static_cast<double>(shape.height) < span ||
      static_cast<double>(shape.width) < span) {
    throw Error(ErrorKind::kConfig, "synth: cannot place a blob of minimum radius inside " + shape.str());
  }
}

SynthConfig default_synth_config(int num_labels) {
  SynthConfig cfg;
  cfg.num_labels = num_labels;
  cfg.offsets.clear();
  for (int l = 1; l <= num_labels; ++l) cfg.offsets.push_back(static_cast<double>(l));
  return cfg;
}

json to_json(const SynthConfig& cfg) {
  return {{"shape", {cfg.shape.depth, cfg.shape.height, cfg.shape.width}},
          {"num_labels", cfg.num_labels},
          {"blobs_min", cfg.blobs_min},
          {"blobs_max", cfg.blobs_max},
          {"offsets", cfg.offsets},
          {"noise_std", cfg.noise_std},
          {"min_radius", cfg.min_radius},
          {"max_radius", cfg.max_radius}};
}

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig cfg;
  try {
    if (j.contains("shape")) {
      const auto s = j.at("shape").get<std::vector<std::size_t>>();
      if (s.size() != 3) throw Error(ErrorKind::kConfig, "synth: shape must have 3 entries");
      cfg.shape = Shape3D(s[0], s[1], s[2]);
    }
    cfg.num_labels = j.value("num_labels", cfg.num_labels);
    cfg.blobs_min = j.value("blobs_min", cfg.blobs_min);
    cfg.blobs_max = j.value("blobs_max", cfg.blobs_max);
    cfg.offsets = j.value("offsets", cfg.offsets);
    cfg.noise_std = j.value("noise_std", cfg.noise_std);
    cfg.min_radius = j.value("min_radius", cfg.min_radius);
    cfg.max_radius = j.value("max_radius", cfg.max_radius);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("synth: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

void paint_blob(LabelMap& labels, int label, const SynthConfig& cfg, SeededRng& rng) {
  const Shape3D& s = labels.shape();
  const double dims[3] = {static_cast<double>(s.depth), static_cast<double>(s.height),
                          static_cast<double>(s.width)};
  double radius[3];
  double center[3];
  for (int a = 0; a < 3; ++a) {
    // Cap at what fits so the blob always lies fully inside the volume.
    const double cap = std::max(cfg.min_radius, std::min(cfg.max_radius, (dims[a] - 1.0) / 2.0));
    radius[a] = rng.uniform(cfg.min_radius, cap);
    center[a] = rng.uniform(radius[a], dims[a] - 1.0 - radius[a]);
  }
  for (std::size_t z = 0; z < s.depth; ++z) {
    const double dz = (static_cast<double>(z) - center[0]) / radius[0];
    for (std::size_t y = 0; y < s.height; ++y) {
      const double dy = (static_cast<double>(y) - center[1]) / radius[1];
      for (std::size_t x = 0; x < s.width; ++x) {
        const double dx = (static_cast<double>(x) - center[2]) / radius[2];
        if (dz * dz + dy * dy + dx * dx <= 1.0) labels.at(z, y, x) = static_cast<std::uint8_t>(label);
      }
    }
  }
}

}  // namespace

std::pair<Volume, LabelMap> generate_synthetic_case(const SynthConfig& cfg, SeededRng& rng) {
  cfg.validate();
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    LabelMap labels(cfg.shape, cfg.num_labels);
    for (int k = 1; k <= cfg.num_labels; ++k) {
      const auto span = static_cast<std::uint64_t>(cfg.blobs_max - cfg.blobs_min + 1);
      const int blobs = cfg.blobs_min + static_cast<int>(rng.below(span));
      for (int b = 0; b < blobs; ++b) paint_blob(labels, k, cfg, rng);
    }
    bool all_present = true;
    for (int k = 1; k <= cfg.num_labels; ++k) all_present = all_present && labels.count(k) > 0;
    if (!all_present) continue;

    Volume image(1, cfg.shape);
    auto d = image.data();
    const auto l = labels.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double base = l[i] == 0 ? 0.0 : cfg.offsets[l[i] - 1];
      const double noise = cfg.noise_std > 0.0 ? cfg.noise_std * rng.normal() : 0.0;
      d[i] = static_cast<float>(base + noise);
    }
    return {std::move(image), std::move(labels)};
  }
  throw Error(ErrorKind::kConfig, "synth: could not place every label after repeated attempts");
}

}  // namespace deepedit
