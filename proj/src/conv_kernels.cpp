#include "conv_kernels.hpp"

#include <Eigen/Core>
#include <algorithm>

namespace deepedit::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using ConstMap = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

}  // namespace

void im2col3(std::span<const float> in, std::size_t channels, const Shape3D& s, std::span<float> col) {
  const std::size_t n = s.voxels();
  const long long d = static_cast<long long>(s.depth);
  const long long h = static_cast<long long>(s.height);
  const long long w = static_cast<long long>(s.width);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src_c = in.data() + c * n;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const std::size_t tap = static_cast<std::size_t>((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1));
          float* row = col.data() + (c * 27 + tap) * n;
          const long long x0 = std::max(0LL, -static_cast<long long>(dx));
          const long long x1 = std::min(w, w - dx);
          for (long long z = 0; z < d; ++z) {
            const long long zz = z + dz;
            for (long long y = 0; y < h; ++y) {
              float* out = row + (z * h + y) * w;
              const long long yy = y + dy;
              if (zz < 0 || zz >= d || yy < 0 || yy >= h) {
                std::fill(out, out + w, 0.0f);
                continue;
              }
              const float* src = src_c + (zz * h + yy) * w;
              for (long long x = 0; x < x0; ++x) out[x] = 0.0f;
              for (long long x = x0; x < x1; ++x) out[x] = src[x + dx];
              for (long long x = x1; x < w; ++x) out[x] = 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im3(std::span<const float> col, std::size_t channels, const Shape3D& s, std::span<float> in_grad) {
  const std::size_t n = s.voxels();
  const long long d = static_cast<long long>(s.depth);
  const long long h = static_cast<long long>(s.height);
  const long long w = static_cast<long long>(s.width);
  for (std::size_t c = 0; c < channels; ++c) {
    float* dst_c = in_grad.data() + c * n;
    for (int dz = -1; dz <= 1; ++dz) {
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const std::size_t tap = static_cast<std::size_t>((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1));
          const float* row = col.data() + (c * 27 + tap) * n;
          const long long x0 = std::max(0LL, -static_cast<long long>(dx));
          const long long x1 = std::min(w, w - dx);
          for (long long z = 0; z < d; ++z) {
            const long long zz = z + dz;
            if (zz < 0 || zz >= d) continue;
            for (long long y = 0; y < h; ++y) {
              const long long yy = y + dy;
              if (yy < 0 || yy >= h) continue;
              const float* g = row + (z * h + y) * w;
              float* dst = dst_c + (zz * h + yy) * w;
              for (long long x = x0; x < x1; ++x) dst[x + dx] += g[x];
            }
          }
        }
      }
    }
  }
}

void im2col_down2(std::span<const float> in, std::size_t channels, const Shape3D& s, std::span<float> col) {
  const std::size_t n = s.voxels();
  const std::size_t ld = s.depth / 2, lh = s.height / 2, lw = s.width / 2;
  const std::size_t ln = ld * lh * lw;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = in.data() + c * n;
    for (std::size_t tap = 0; tap < 8; ++tap) {
      const std::size_t dz = tap >> 2, dy = (tap >> 1) & 1, dx = tap & 1;
      float* row = col.data() + (c * 8 + tap) * ln;
      for (std::size_t z = 0; z < ld; ++z) {
        for (std::size_t y = 0; y < lh; ++y) {
          const float* line = src + ((2 * z + dz) * s.height + (2 * y + dy)) * s.width + dx;
          float* out = row + (z * lh + y) * lw;
          for (std::size_t x = 0; x < lw; ++x) out[x] = line[2 * x];
        }
      }
    }
  }
}

void col2im_down2(std::span<const float> col, std::size_t channels, const Shape3D& s, std::span<float> in_grad) {
  const std::size_t n = s.voxels();
  const std::size_t ld = s.depth / 2, lh = s.height / 2, lw = s.width / 2;
  const std::size_t ln = ld * lh * lw;
  for (std::size_t c = 0; c < channels; ++c) {
    float* dst = in_grad.data() + c * n;
    for (std::size_t tap = 0; tap < 8; ++tap) {
      const std::size_t dz = tap >> 2, dy = (tap >> 1) & 1, dx = tap & 1;
      const float* row = col.data() + (c * 8 + tap) * ln;
      for (std::size_t z = 0; z < ld; ++z) {
        for (std::size_t y = 0; y < lh; ++y) {
          float* line = dst + ((2 * z + dz) * s.height + (2 * y + dy)) * s.width + dx;
          const float* g = row + (z * lh + y) * lw;
          for (std::size_t x = 0; x < lw; ++x) line[2 * x] += g[x];
        }
      }
    }
  }
}

void upsample2(std::span<const float> low, std::size_t channels, const Shape3D& high, std::span<float> out) {
  const std::size_t lh = high.height / 2, lw = high.width / 2;
  const std::size_t ln = (high.depth / 2) * lh * lw;
  const std::size_t n = high.voxels();
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = low.data() + c * ln;
    float* dst = out.data() + c * n;
    for (std::size_t z = 0; z < high.depth; ++z) {
      for (std::size_t y = 0; y < high.height; ++y) {
        const float* line = src + ((z / 2) * lh + y / 2) * lw;
        float* o = dst + (z * high.height + y) * high.width;
        for (std::size_t x = 0; x < high.width; ++x) o[x] = line[x / 2];
      }
    }
  }
}

void upsample2_adjoint(std::span<const float> high_grad, std::size_t channels, const Shape3D& high,
                       std::span<float> low_grad) {
  const std::size_t lh = high.height / 2, lw = high.width / 2;
  const std::size_t ln = (high.depth / 2) * lh * lw;
  const std::size_t n = high.voxels();
  std::fill(low_grad.begin(), low_grad.begin() + static_cast<std::ptrdiff_t>(channels * ln), 0.0f);
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = high_grad.data() + c * n;
    float* dst = low_grad.data() + c * ln;
    for (std::size_t z = 0; z < high.depth; ++z) {
      for (std::size_t y = 0; y < high.height; ++y) {
        float* line = dst + ((z / 2) * lh + y / 2) * lw;
        const float* g = src + (z * high.height + y) * high.width;
        for (std::size_t x = 0; x < high.width; ++x) line[x / 2] += g[x];
      }
    }
  }
}

void gemm_bias(std::span<const float> weight, std::span<const float> bias, std::span<const float> col,
               std::size_t out_channels, std::size_t k, std::size_t n, std::span<float> out) {
  Map o(out.data(), idx(out_channels), idx(n));
  o.noalias() = ConstMap(weight.data(), idx(out_channels), idx(k)) * ConstMap(col.data(), idx(k), idx(n));
  for (std::size_t c = 0; c < out_channels; ++c) o.row(idx(c)).array() += bias[c];
}

void gemm_weight_grad(std::span<const float> dout, std::span<const float> col, std::size_t out_channels,
                      std::size_t k, std::size_t n, std::span<float> dweight, std::span<float> dbias) {
  ConstMap g(dout.data(), idx(out_channels), idx(n));
  Map dw(dweight.data(), idx(out_channels), idx(k));
  dw.noalias() += g * ConstMap(col.data(), idx(k), idx(n)).transpose();
  for (std::size_t c = 0; c < out_channels; ++c) {
    // Double accumulation keeps bias gradients stable over large voxel counts.
    double acc = 0.0;
    const float* row = dout.data() + c * n;
    for (std::size_t i = 0; i < n; ++i) acc += row[i];
    dbias[c] += static_cast<float>(acc);
  }
}

void gemm_input_grad(std::span<const float> weight, std::span<const float> dout, std::size_t out_channels,
                     std::size_t k, std::size_t n, std::span<float> dcol) {
  Map dc(dcol.data(), idx(k), idx(n));
  dc.noalias() = ConstMap(weight.data(), idx(out_channels), idx(k)).transpose() *
                 ConstMap(dout.data(), idx(out_channels), idx(n));
}

}  // namespace deepedit::kernels
