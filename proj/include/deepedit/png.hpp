#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace deepedit {

/// 8-bit grayscale PNG, rows top to bottom.
std::string encode_png_gray8(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels);

}  // namespace deepedit
