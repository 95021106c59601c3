#include "deepedit/png.hpp"

#include <zlib.h>

#include <vector>

#include "deepedit/error.hpp"

namespace deepedit {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v >> 24));
  out.push_back(static_cast<char>(v >> 16));
  out.push_back(static_cast<char>(v >> 8));
  out.push_back(static_cast<char>(v));
}

void put_chunk(std::string& out, const char type[4], const std::string& body) {
  put_u32(out, static_cast<std::uint32_t>(body.size()));
  const std::size_t at = out.size();
  out.append(type, 4);
  out += body;
  const auto* p = reinterpret_cast<const Bytef*>(out.data() + at);
  put_u32(out, static_cast<std::uint32_t>(crc32(0L, p, static_cast<uInt>(body.size() + 4))));
}

}  // namespace

std::string encode_png_gray8(std::size_t width, std::size_t height, std::span<const std::uint8_t> pixels) {
  if (width == 0 || height == 0 || pixels.size() != width * height) {
    throw Error(ErrorKind::kInvalidArgument, "png: pixel count does not match dimensions");
  }
  std::string raw;
  raw.reserve(height * (width + 1));
  for (std::size_t r = 0; r < height; ++r) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(pixels.data() + r * width), width);
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<Bytef> packed(packed_size);
  if (compress2(packed.data(), &packed_size, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK) {
    throw Error(ErrorKind::kIo, "png: zlib compression failed");
  }

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // depth 8, gray, deflate, adaptive, no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", std::string(reinterpret_cast<const char*>(packed.data()), packed_size));
  put_chunk(out, "IEND", "");
  return out;
}

}  // namespace deepedit
