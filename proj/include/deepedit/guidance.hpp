#pragma once

#include <optional>
#include <vector>

#include "json.hpp"

#include "deepedit/rng.hpp"
#include "deepedit/tensor.hpp"

namespace deepedit {

/// A single interaction: label 0 is a background click.
struct Click {
  int label = 0;
  long long z = 0;
  long long y = 0;
  long long x = 0;

  friend bool operator==(const Click&, const Click&) = default;
};

/// Clicks in interaction order.
struct ClickSet {
  int num_labels = 1;
  std::vector<Click> clicks;

  std::size_t size() const noexcept { return clicks.size(); }
  bool empty() const noexcept { return clicks.empty(); }
  void append(const ClickSet& more);
  /// Throws kOutOfBounds naming the first click outside shape or with a bad label.
  void validate(const Shape3D& shape) const;

  friend bool operator==(const ClickSet&, const ClickSet&) = default;
};

nlohmann::json to_json(const ClickSet& clicks);
nlohmann::json to_json(const Click& click);
/// Parses `{"num_labels":L,"clicks":[{"label","z","y","x"},...]}`; throws kFormat.
ClickSet click_set_from_json(const nlohmann::json& j);

struct GuidanceConfig {
  double sigma = 2.0;
  int radius = 5;

  void validate() const;
};

/// Guidance channel for a click label: labels 1..L map to channels 0..L-1,
/// background clicks to channel L.
inline std::size_t guidance_channel(int label, int num_labels) {
  return label == 0 ? static_cast<std::size_t>(num_labels) : static_cast<std::size_t>(label - 1);
}

Volume zero_guidance(const Shape3D& shape, int num_labels);
Volume rasterize_clicks(const ClickSet& clicks, const Shape3D& shape);
/// Truncated isotropic Gaussian per channel, then peak-normalized so any
/// channel with a click has maximum exactly 1.
Volume smooth_guidance(const Volume& raster, const GuidanceConfig& cfg);
/// smooth_guidance(rasterize_clicks(...)).
Volume make_guidance(const ClickSet& clicks, const Shape3D& shape, const GuidanceConfig& cfg);

/// Per foreground label k (index k-1): FN_k = {gt=k, pred!=k}, FP_k = {pred=k, gt!=k}.
struct Discrepancy {
  std::vector<LabelMap> false_negative;
  std::vector<LabelMap> false_positive;
};

Discrepancy compute_discrepancy(const LabelMap& pred, const LabelMap& gt);

enum class ClickStrategy { kUniformInMask, kUniformInLargestComponent };

std::optional<Click> sample_click(const LabelMap& mask, int label, ClickStrategy strategy, SeededRng& rng);

/// Without pred: round-robin initial clicks inside each label's ground truth.
/// With pred: discrepancy components of every label are ranked by size and the
/// i-th click goes into the i-th largest (cycling when k exceeds the count);
/// FN components yield label clicks, FP components restricted to ground-truth
/// background yield background clicks.
ClickSet simulate_interaction_clicks(const LabelMap& gt, const std::optional<LabelMap>& pred, int k,
                                     SeededRng& rng);

Volume build_input(const Volume& image, const Volume& guidance);

}  // namespace deepedit
