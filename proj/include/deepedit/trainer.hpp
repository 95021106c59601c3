#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "deepedit/backbone.hpp"
#include "deepedit/guidance.hpp"
#include "deepedit/volume_io.hpp"

namespace deepedit {

struct AugmentToggles {
  bool flip = true;
  bool rotate = true;
  bool intensity_shift = true;
  /// Chance that each enabled transform fires.
  double probability = 0.5;
};

struct TrainConfig {
  double p_clickfree = 0.5;
  int clicks_per_iteration = 3;
  int interaction_rounds = 2;
  int epochs = 10;
  double lr = 1e-4;
  double sigma = 2.0;
  std::uint64_t seed = 0;
  AugmentToggles augment;
  /// Backbone size; channel counts follow from the data.
  int base_width = 8;
  int levels = 3;
  double dropout_rate = 0.1;

  void validate() const;
  GuidanceConfig guidance() const;
  ArchConfig arch(std::size_t image_channels, int num_labels) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Unknown keys and out-of-range values throw kConfig naming the field.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Flips along y and x, a (y,x) rotation and an intensity shift, each drawn
/// independently; the image is whitened last.
std::pair<Volume, LabelMap> augment(const Volume& image, const LabelMap& gt, SeededRng& rng,
                                    const AugmentToggles& toggles);

enum class IterationMode { kClickFree, kInteractive };

struct IterationResult {
  double loss = 0.0;
  IterationMode mode = IterationMode::kClickFree;
  /// Every click that fed the final guidance (empty when click-free).
  ClickSet clicks;
  /// Maximum of each guidance channel of the network input.
  std::vector<float> guidance_peaks;
};

/// One optimizer step. Mode is decided by the first draw of rng; all other
/// randomness comes from forks of it, so the mode sequence depends only on
/// the stream and p_clickfree.
IterationResult train_iteration(ModelParams& params, AdamState& state, const LoadedCase& c,
                                const TrainConfig& cfg, SeededRng& rng);

struct EpochStats {
  double mean_loss = 0.0;
  int click_free = 0;
  int interactive = 0;
};

struct TrainReport {
  TrainConfig config;
  std::vector<EpochStats> epochs;
  std::vector<double> iteration_losses;
  /// Click-free Dice per label on the training cases after the last epoch.
  std::vector<double> final_dice;

  int click_free_total() const;
  int interactive_total() const;
};

nlohmann::json to_json(const TrainReport& report);

using EpochCallback = std::function<void(int epoch, const EpochStats& stats)>;

/// Throws kInvalidArgument when no case is labeled; unlabeled cases are skipped.
std::pair<ModelParams, TrainReport> train(std::span<const LoadedCase> cases, const TrainConfig& cfg,
                                          const EpochCallback& on_epoch = {});

}  // namespace deepedit
