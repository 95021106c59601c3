#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deepedit/rng.hpp"
#include "deepedit/tensor.hpp"

namespace deepedit {

// On-disk format: `X.vol` holds raw little-endian f32 in (channel, z, y, x)
// order, `X.vol.json` the header. Labels use `X.lab` (u8) + `X.lab.json`.
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);
void save_labels(const LabelMap& m, const std::filesystem::path& path);
LabelMap load_labels(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& payload);

struct CaseRecord {
  std::string case_id;
  std::filesystem::path image_path;
  std::optional<std::filesystem::path> label_path;
  bool labeled = false;
  int num_labels = 0;
};

/// Lists `<root>/images/*.vol` in lexicographic case_id order and pairs each
/// with `<root>/labels/<case_id>.lab` when present. num_labels comes from the
/// label header, falling back to `<root>/manifest.json`.
std::vector<CaseRecord> scan_dataset(const std::filesystem::path& root);

/// A case with its image and, when labeled, its ground truth in memory.
struct LoadedCase {
  std::string case_id;
  Volume image;
  std::optional<LabelMap> labels;
};

LoadedCase load_case(const CaseRecord& record);

std::filesystem::path image_path_for(const std::filesystem::path& root, const std::string& case_id);
std::filesystem::path label_path_for(const std::filesystem::path& root, const std::string& case_id);

struct SynthConfig {
  Shape3D shape{32, 32, 32};
  int num_labels = 2;
  int blobs_min = 1;
  int blobs_max = 2;
  /// One intensity offset per foreground label.
  std::vector<double> offsets{1.0, 2.0};
  double noise_std = 0.2;
  double min_radius = 3.0;
  double max_radius = 7.0;

  /// Throws kConfig describing the first violated constraint.
  void validate() const;
};

/// Defaults with offset l for label l.
SynthConfig default_synth_config(int num_labels);

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

/// Ellipsoidal blobs per label (later labels overwrite earlier ones), image =
/// per-label offset plus Gaussian noise. Pure function of (cfg, rng state).
std::pair<Volume, LabelMap> generate_synthetic_case(const SynthConfig& cfg, SeededRng& rng);

}  // namespace deepedit
