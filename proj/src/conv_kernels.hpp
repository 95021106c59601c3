#pragma once

// Dense kernels behind the backbone layers. Activations are (channels x
// voxels) row-major, matching Volume storage.

#include <cstddef>
#include <span>

#include "deepedit/tensor.hpp"

namespace deepedit::kernels {

/// col has (channels * 27) rows and shape.voxels() columns.
void im2col3(std::span<const float> in, std::size_t channels, const Shape3D& shape, std::span<float> col);
/// Adds the column gradient back into `in_grad` (the adjoint of im2col3).
void col2im3(std::span<const float> col, std::size_t channels, const Shape3D& shape, std::span<float> in_grad);

/// 2x2x2 stride-2 patches: (channels * 8) rows, voxels/8 columns. `shape` is
/// the full-resolution input shape.
void im2col_down2(std::span<const float> in, std::size_t channels, const Shape3D& shape, std::span<float> col);
void col2im_down2(std::span<const float> col, std::size_t channels, const Shape3D& shape, std::span<float> in_grad);

/// Nearest-neighbour 2x upsampling from `low` (shape half of `high`).
void upsample2(std::span<const float> low, std::size_t channels, const Shape3D& high, std::span<float> out);
/// Adjoint of upsample2: sums each 2x2x2 block.
void upsample2_adjoint(std::span<const float> high_grad, std::size_t channels, const Shape3D& high,
                       std::span<float> low_grad);

/// out(Cout x N) = W(Cout x K) * col(K x N) + bias.
void gemm_bias(std::span<const float> weight, std::span<const float> bias, std::span<const float> col,
               std::size_t out_channels, std::size_t k, std::size_t n, std::span<float> out);
/// dW(Cout x K) += dout(Cout x N) * col^T; db += row sums of dout.
void gemm_weight_grad(std::span<const float> dout, std::span<const float> col, std::size_t out_channels,
                      std::size_t k, std::size_t n, std::span<float> dweight, std::span<float> dbias);
/// dcol(K x N) = W^T * dout.
void gemm_input_grad(std::span<const float> weight, std::span<const float> dout, std::size_t out_channels,
                     std::size_t k, std::size_t n, std::span<float> dcol);

}  // namespace deepedit::kernels
