#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kdlab/error.hpp"

namespace kdlab::idx {

inline constexpr std::uint32_t kImageMagic = 0x00000803;
inline constexpr std::uint32_t kLabelMagic = 0x00000801;

/// The leading 32-bit magic number does not name the expected payload.
class BadMagicError : public FormatError {
 public:
  BadMagicError(std::uint32_t found, std::uint32_t expected);

  std::uint32_t found() const { return found_; }
  std::uint32_t expected() const { return expected_; }

 private:
  std::uint32_t found_;
  std::uint32_t expected_;
};

struct Images {
  std::uint32_t count = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major

  bool operator==(const Images&) const = default;
};

struct Labels {
  std::vector<std::uint8_t> values;

  bool operator==(const Labels&) const = default;
};

// Big-endian u32 magic, big-endian u32 extents, then unsigned bytes.
Images parse_images(std::string_view bytes);
Labels parse_labels(std::string_view bytes);
std::string encode_images(const Images& images);
std::string encode_labels(const Labels& labels);

Images read_images(const std::filesystem::path& path);
Labels read_labels(const std::filesystem::path& path);

}  // namespace kdlab::idx
