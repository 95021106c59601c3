#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "deepedit/rng.hpp"
#include "deepedit/tensor.hpp"

namespace deepedit {

struct ArchConfig {
  int in_channels = 4;
  int num_classes = 3;
  int base_width = 8;
  int levels = 3;
  double dropout_rate = 0.1;

  /// Spatial dims must be divisible by this.
  std::size_t divisor() const { return std::size_t{1} << (levels - 1); }
  int width_at(int level) const { return base_width << level; }
  void validate() const;
  /// Throws kShapeMismatch unless every dim is divisible by divisor().
  void check_shape(const Shape3D& shape) const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

nlohmann::json to_json(const ArchConfig& cfg);
ArchConfig arch_config_from_json(const nlohmann::json& j);

enum class LayerKind {
  kConv3,     // 3x3x3, stride 1, zero padding 1
  kDown2,     // 2x2x2, stride 2
  kPointwise  // 1x1x1
};

struct LayerSpec {
  std::string name;
  LayerKind kind;
  int in_channels;
  int out_channels;

  int taps() const { return kind == LayerKind::kConv3 ? 27 : kind == LayerKind::kDown2 ? 8 : 1; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * static_cast<std::size_t>(in_channels * taps());
  }
};

/// Weights are row-major (out_channels) x (in_channels * taps), tap index
/// fastest, taps in (dz, dy, dx) order.
struct ParamTensor {
  std::vector<float> weight;
  std::vector<float> bias;
};

/// Layer layout, encoder then decoder then head. Per level l (width base*2^l):
/// down{l} (l>0), enc{l}a, enc{l}b; per decoder level l: up{l} (pointwise at
/// low resolution followed by nearest upsampling), skip concat, dec{l}a,
/// dec{l}b, dropout; finally `head` (pointwise to num_classes).
std::vector<LayerSpec> layer_manifest(const ArchConfig& cfg);

struct ModelParams {
  ArchConfig cfg;
  std::vector<LayerSpec> layers;
  std::vector<ParamTensor> tensors;

  std::size_t parameter_count() const;
};

using ParamGrads = std::vector<ParamTensor>;

/// Glorot-uniform weights, zero biases.
ModelParams init_model(const ArchConfig& cfg, SeededRng& rng);
ParamGrads zero_grads(const ModelParams& params);

enum class Mode { kTrain, kEval };

/// Everything backward() needs: each layer's input and post-activation
/// output, plus the dropout keep masks drawn in train mode.
struct ForwardCache {
  Mode mode = Mode::kEval;
  std::vector<Volume> inputs;                  // per layer
  std::vector<Volume> outputs;                 // per layer
  std::vector<std::vector<std::uint8_t>> keep; // per decoder level, empty in eval mode
};

struct ForwardResult {
  Volume logits;
  ForwardCache cache;
};

/// Train mode draws dropout masks from rng; eval mode applies no dropout and
/// never touches rng.
ForwardResult forward(const ModelParams& params, const Volume& input, Mode mode, SeededRng& rng);
/// Eval-mode logits without keeping the cache.
Volume infer(const ModelParams& params, const Volume& input);

struct LossResult {
  double loss = 0.0;
  double dice_term = 0.0;
  double ce_term = 0.0;
  Volume dlogits;
};

/// 0.5 * (1 - mean_k softDice_k) + 0.5 * mean voxel cross-entropy, over all
/// num_classes classes, smoothing 1e-5. dlogits is the exact gradient.
LossResult loss_and_grad(const Volume& logits, const LabelMap& gt);

ParamGrads backward(const ModelParams& params, const ForwardCache& cache, const Volume& dlogits);

struct AdamState {
  long long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<ParamTensor> m;
  std::vector<ParamTensor> v;
};

AdamState init_adam(const ModelParams& params);
/// In-place Adam update with bias correction. Throws kNonFinite on bad grads
/// before modifying anything.
void adam_step(ModelParams& params, const ParamGrads& grads, AdamState& state, double lr = 1e-4);

/// File: one compact JSON header line (arch + layer manifest), then raw
/// little-endian f32 weight and bias payload per layer in manifest order.
void save_params(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params(const std::filesystem::path& path);
/// Also throws kConfig when the stored ArchConfig differs from expected.
ModelParams load_params(const std::filesystem::path& path, const ArchConfig& expected);

/// Stable content hash of the weights, used as a model version tag.
std::string model_version(const ModelParams& params);

}  // namespace deepedit
