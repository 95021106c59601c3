#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace deepedit {

struct Shape3D {
  std::size_t depth = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  Shape3D() = default;
  /// Throws kInvalidArgument if any dimension is zero.
  Shape3D(std::size_t d, std::size_t h, std::size_t w);

  std::size_t voxels() const noexcept { return depth * height * width; }
  bool contains(long long z, long long y, long long x) const noexcept;
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * height + y) * width + x;
  }
  std::string str() const;

  friend bool operator==(const Shape3D&, const Shape3D&) = default;
};

enum class Axis { kZ = 0, kY = 1, kX = 2 };

/// Multi-channel scalar field stored in (channel, z, y, x) row-major order.
class Volume {
 public:
  Volume() = default;
  Volume(std::size_t channels, Shape3D shape, float fill = 0.0f);
  Volume(std::size_t channels, Shape3D shape, std::vector<float> data);

  std::size_t channels() const noexcept { return channels_; }
  const Shape3D& shape() const noexcept { return shape_; }
  std::size_t voxels() const noexcept { return shape_.voxels(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::span<float> channel(std::size_t c);
  std::span<const float> channel(std::size_t c) const;

  float& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[c * voxels() + shape_.index(z, y, x)];
  }
  float at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[c * voxels() + shape_.index(z, y, x)];
  }

  bool all_finite() const noexcept;

  friend bool operator==(const Volume&, const Volume&) = default;

 private:
  std::size_t channels_ = 0;
  Shape3D shape_;
  std::vector<float> data_;
};

/// Per-voxel labels 0..num_labels, 0 is background.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(Shape3D shape, int num_labels, std::uint8_t fill = 0);
  /// Validates every value against num_labels.
  LabelMap(Shape3D shape, int num_labels, std::vector<std::uint8_t> labels);

  const Shape3D& shape() const noexcept { return shape_; }
  int num_labels() const noexcept { return num_labels_; }
  std::size_t voxels() const noexcept { return shape_.voxels(); }

  std::span<std::uint8_t> data() noexcept { return labels_; }
  std::span<const std::uint8_t> data() const noexcept { return labels_; }

  std::uint8_t& at(std::size_t z, std::size_t y, std::size_t x) { return labels_[shape_.index(z, y, x)]; }
  std::uint8_t at(std::size_t z, std::size_t y, std::size_t x) const { return labels_[shape_.index(z, y, x)]; }

  std::size_t count(int label) const noexcept;
  /// Binary mask (values 0/1, num_labels 1) of voxels equal to label.
  LabelMap mask_of(int label) const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  Shape3D shape_;
  int num_labels_ = 1;
  std::vector<std::uint8_t> labels_;
};

Volume concat_channels(std::span<const Volume> parts);
Volume concat_channels(std::initializer_list<Volume> parts);
/// Channels [first, first + count) as a new volume.
Volume slice_channels(const Volume& v, std::size_t first, std::size_t count);

Volume softmax_channels(const Volume& logits);
/// Per-voxel maximum across channels, as a single-channel volume.
Volume max_over_channels(const Volume& v);
/// Per-channel zero mean and unit population std (std floored at 1e-6).
Volume whiten(const Volume& v);
LabelMap argmax_channels(const Volume& prob);
/// Channel-major one-hot encoding with num_labels + 1 channels.
Volume one_hot(const LabelMap& labels);

/// 6-connected components of the nonzero voxels. Each component lists its
/// linear voxel indices ascending; components are ordered by decreasing size,
/// ties by smallest voxel index.
std::vector<std::vector<std::size_t>> connected_components(const LabelMap& mask);

// Geometric transforms used for augmentation and test-time transforms.
Volume flip(const Volume& v, Axis axis);
LabelMap flip(const LabelMap& m, Axis axis);
/// Rotate k quarter turns in the (y, x) plane, numpy rot90 convention:
/// one turn maps shape (D, H, W) to (D, W, H) with out(z, i, j) = in(z, j, W-1-i).
Volume rot90_yx(const Volume& v, int k);
LabelMap rot90_yx(const LabelMap& m, int k);

}  // namespace deepedit
