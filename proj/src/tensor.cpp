#include "deepedit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "deepedit/error.hpp"

namespace deepedit {

Shape3D::Shape3D(std::size_t d, std::size_t h, std::size_t w) : depth(d), height(h), width(w) {
  if (d == 0 || h == 0 || w == 0) {
    throw Error(ErrorKind::kInvalidArgument, "shape dimensions must be >= 1");
  }
  const std::size_t limit = std::numeric_limits<std::size_t>::max() / 64;
  if (d > limit / h || d * h > limit / w) {
    throw Error(ErrorKind::kInvalidArgument, "shape too large");
  }
}

bool Shape3D::contains(long long z, long long y, long long x) const noexcept {
  return z >= 0 && y >= 0 && x >= 0 && z < static_cast<long long>(depth) &&
         y < static_cast<long long>(height) && x < static_cast<long long>(width);
}

std::string Shape3D::str() const {
  return std::to_string(depth) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

Volume::Volume(std::size_t channels, Shape3D shape, float fill)
    : channels_(channels), shape_(shape), data_(channels * shape.voxels(), fill) {
  if (channels == 0) throw Error(ErrorKind::kInvalidArgument, "volume needs >= 1 channel");
}

Volume::Volume(std::size_t channels, Shape3D shape, std::vector<float> data)
    : channels_(channels), shape_(shape), data_(std::move(data)) {
  if (channels == 0) throw Error(ErrorKind::kInvalidArgument, "volume needs >= 1 channel");
  if (data_.size() != channels * shape.voxels()) {
    throw Error(ErrorKind::kShapeMismatch, "volume data length does not match channels*voxels");
  }
}

std::span<float> Volume::channel(std::size_t c) {
  if (c >= channels_) throw Error(ErrorKind::kOutOfBounds, "channel index out of range");
  return std::span<float>(data_).subspan(c * voxels(), voxels());
}

std::span<const float> Volume::channel(std::size_t c) const {
  if (c >= channels_) throw Error(ErrorKind::kOutOfBounds, "channel index out of range");
  return std::span<const float>(data_).subspan(c * voxels(), voxels());
}

bool Volume::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

LabelMap::LabelMap(Shape3D shape, int num_labels, std::uint8_t fill)
    : shape_(shape), num_labels_(num_labels), labels_(shape.voxels(), fill) {
  if (num_labels < 1 || num_labels > 255) {
    throw Error(ErrorKind::kInvalidArgument, "num_labels must be in 1..255");
  }
  if (fill > num_labels) throw Error(ErrorKind::kInvalidArgument, "fill label exceeds num_labels");
}

LabelMap::LabelMap(Shape3D shape, int num_labels, std::vector<std::uint8_t> labels)
    : shape_(shape), num_labels_(num_labels), labels_(std::move(labels)) {
  if (num_labels < 1 || num_labels > 255) {
    throw Error(ErrorKind::kInvalidArgument, "num_labels must be in 1..255");
  }
  if (labels_.size() != shape.voxels()) {
    throw Error(ErrorKind::kShapeMismatch, "label data length does not match shape");
  }
  for (std::uint8_t v : labels_) {
    if (v > num_labels) {
      throw Error(ErrorKind::kFormat, "label value " + std::to_string(v) + " exceeds num_labels " +
                                          std::to_string(num_labels));
    }
  }
}

std::size_t LabelMap::count(int label) const noexcept {
  return static_cast<std::size_t>(
      std::count(labels_.begin(), labels_.end(), static_cast<std::uint8_t>(label)));
}

LabelMap LabelMap::mask_of(int label) const {
  LabelMap out(shape_, 1);
  for (std::size_t i = 0; i < labels_.size(); ++i) out.labels_[i] = labels_[i] == label ? 1 : 0;
  return out;
}

Volume concat_channels(std::span<const Volume> parts) {
  if (parts.empty()) throw Error(ErrorKind::kInvalidArgument, "concat_channels: empty list");
  const Shape3D shape = parts.front().shape();
  std::size_t channels = 0;
  for (const Volume& p : parts) {
    if (!(p.shape() == shape)) {
      throw Error(ErrorKind::kShapeMismatch,
                  "concat_channels: shape " + p.shape().str() + " != " + shape.str());
    }
    channels += p.channels();
  }
  std::vector<float> data;
  data.reserve(channels * shape.voxels());
  for (const Volume& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Volume(channels, shape, std::move(data));
}

Volume concat_channels(std::initializer_list<Volume> parts) {
  return concat_channels(std::span<const Volume>(parts.begin(), parts.size()));
}

Volume slice_channels(const Volume& v, std::size_t first, std::size_t count) {
  if (count == 0 || first + count > v.channels()) {
    throw Error(ErrorKind::kOutOfBounds, "slice_channels: range out of bounds");
  }
  const auto src = v.data().subspan(first * v.voxels(), count * v.voxels());
  return Volume(count, v.shape(), std::vector<float>(src.begin(), src.end()));
}

Volume softmax_channels(const Volume& logits) {
  if (logits.channels() < 2) throw Error(ErrorKind::kInvalidArgument, "softmax needs >= 2 channels");
  if (!logits.all_finite()) throw Error(ErrorKind::kNonFinite, "softmax: non-finite logits");
  const std::size_t n = logits.voxels();
  const std::size_t c = logits.channels();
  Volume out(c, logits.shape());
  const float* in = logits.data().data();
  float* o = out.data().data();
  std::vector<float> m(n, -std::numeric_limits<float>::infinity());
  std::vector<float> s(n, 0.0f);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) m[i] = std::max(m[i], in[k * n + i]);
  }
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      const float e = std::exp(in[k * n + i] - m[i]);
      o[k * n + i] = e;
      s[i] += e;
    }
  }
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) o[k * n + i] /= s[i];
  }
  return out;
}

Volume max_over_channels(const Volume& v) {
  if (v.channels() == 0) throw Error(ErrorKind::kInvalidArgument, "max_over_channels: no channels");
  Volume out(1, v.shape());
  auto o = out.data();
  std::copy_n(v.channel(0).begin(), v.voxels(), o.begin());
  for (std::size_t c = 1; c < v.channels(); ++c) {
    const auto src = v.channel(c);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::max(o[i], src[i]);
  }
  return out;
}

Volume whiten(const Volume& v) {
  Volume out = v;
  for (std::size_t c = 0; c < v.channels(); ++c) {
    auto ch = out.channel(c);
    double sum = 0.0;
    for (float x : ch) sum += x;
    const double mean = sum / static_cast<double>(ch.size());
    double sq = 0.0;
    for (float x : ch) sq += (x - mean) * (x - mean);
    const double sd = std::max(std::sqrt(sq / static_cast<double>(ch.size())), 1e-6);
    for (float& x : ch) x = static_cast<float>((x - mean) / sd);
  }
  return out;
}

LabelMap argmax_channels(const Volume& prob) {
  const std::size_t c = prob.channels();
  if (c < 2 || c > 256) throw Error(ErrorKind::kInvalidArgument, "argmax needs 2..256 channels");
  const std::size_t n = prob.voxels();
  std::vector<std::uint8_t> labels(n, 0);
  std::vector<float> best(prob.data().begin(), prob.data().begin() + n);
  const float* p = prob.data().data();
  for (std::size_t k = 1; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      // Strict comparison keeps ties on the smaller index.
      if (p[k * n + i] > best[i]) {
        best[i] = p[k * n + i];
        labels[i] = static_cast<std::uint8_t>(k);
      }
    }
  }
  return LabelMap(prob.shape(), static_cast<int>(c - 1), std::move(labels));
}

Volume one_hot(const LabelMap& labels) {
  const std::size_t n = labels.voxels();
  Volume out(static_cast<std::size_t>(labels.num_labels()) + 1, labels.shape());
  auto d = out.data();
  const auto l = labels.data();
  for (std::size_t i = 0; i < n; ++i) d[l[i] * n + i] = 1.0f;
  return out;
}

std::vector<std::vector<std::size_t>> connected_components(const LabelMap& mask) {
  const Shape3D& s = mask.shape();
  const auto m = mask.data();
  const std::size_t n = s.voxels();
  std::vector<std::uint8_t> seen(n, 0);
  std::vector<std::vector<std::size_t>> comps;
  std::vector<std::size_t> stack;
  const std::size_t plane = s.height * s.width;
  for (std::size_t start = 0; start < n; ++start) {
    if (!m[start] || seen[start]) continue;
    std::vector<std::size_t> comp;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      comp.push_back(i);
      const std::size_t z = i / plane;
      const std::size_t y = (i / s.width) % s.height;
      const std::size_t x = i % s.width;
      auto visit = [&](std::size_t j) {
        if (m[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < s.width) visit(i + 1);
      if (y > 0) visit(i - s.width);
      if (y + 1 < s.height) visit(i + s.width);
      if (z > 0) visit(i - plane);
      if (z + 1 < s.depth) visit(i + plane);
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  // Discovery order is by smallest index already; stable sort preserves it for ties.
  std::stable_sort(comps.begin(), comps.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return comps;
}

namespace {

// Source linear index (within one channel) for each destination voxel.
std::vector<std::size_t> flip_map(const Shape3D& s, Axis axis) {
  std::vector<std::size_t> src(s.voxels());
  std::size_t i = 0;
  for (std::size_t z = 0; z < s.depth; ++z) {
    for (std::size_t y = 0; y < s.height; ++y) {
      for (std::size_t x = 0; x < s.width; ++x) {
        const std::size_t sz = axis == Axis::kZ ? s.depth - 1 - z : z;
        const std::size_t sy = axis == Axis::kY ? s.height - 1 - y : y;
        const std::size_t sx = axis == Axis::kX ? s.width - 1 - x : x;
        src[i++] = s.index(sz, sy, sx);
      }
    }
  }
  return src;
}

// One numpy-style quarter turn: out shape (D, W, H), out(z, i, j) = in(z, j, W-1-i).
std::vector<std::size_t> rot_map(const Shape3D& s, Shape3D& out_shape) {
  out_shape = Shape3D(s.depth, s.width, s.height);
  std::vector<std::size_t> src(s.voxels());
  std::size_t idx = 0;
  for (std::size_t z = 0; z < out_shape.depth; ++z) {
    for (std::size_t i = 0; i < out_shape.height; ++i) {
      for (std::size_t j = 0; j < out_shape.width; ++j) {
        src[idx++] = s.index(z, j, s.width - 1 - i);
      }
    }
  }
  return src;
}

Volume gather(const Volume& v, const Shape3D& out_shape, const std::vector<std::size_t>& src) {
  Volume out(v.channels(), out_shape);
  const std::size_t n = v.voxels();
  for (std::size_t c = 0; c < v.channels(); ++c) {
    const float* in = v.data().data() + c * n;
    float* o = out.data().data() + c * n;
    for (std::size_t i = 0; i < n; ++i) o[i] = in[src[i]];
  }
  return out;
}

LabelMap gather(const LabelMap& m, const Shape3D& out_shape, const std::vector<std::size_t>& src) {
  std::vector<std::uint8_t> out(m.voxels());
  const auto in = m.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[src[i]];
  return LabelMap(out_shape, m.num_labels(), std::move(out));
}

int normalize_turns(int k) { return ((k % 4) + 4) % 4; }

}  // namespace

Volume flip(const Volume& v, Axis axis) { return gather(v, v.shape(), flip_map(v.shape(), axis)); }

LabelMap flip(const LabelMap& m, Axis axis) { return gather(m, m.shape(), flip_map(m.shape(), axis)); }

Volume rot90_yx(const Volume& v, int k) {
  Volume out = v;
  for (int t = 0; t < normalize_turns(k); ++t) {
    Shape3D s;
    const auto src = rot_map(out.shape(), s);
    out = gather(out, s, src);
  }
  return out;
}

LabelMap rot90_yx(const LabelMap& m, int k) {
  LabelMap out = m;
  for (int t = 0; t < normalize_turns(k); ++t) {
    Shape3D s;
    const auto src = rot_map(out.shape(), s);
    out = gather(out, s, src);
  }
  return out;
}

}  // namespace deepedit
