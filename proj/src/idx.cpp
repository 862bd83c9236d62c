#include "kdlab/idx.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace kdlab::idx {

namespace {

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08X", v);
  return buf;
}

std::uint32_t read_be32(std::string_view bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw FormatError("IDX: truncated header");
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  return v;
}

void write_be32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xFFu));
}

void check_magic(std::string_view bytes, std::uint32_t expected) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != expected) throw BadMagicError(magic, expected);
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

BadMagicError::BadMagicError(std::uint32_t found, std::uint32_t expected)
    : FormatError("IDX: wrong magic number " + hex32(found) + ", expected " + hex32(expected)),
      found_(found),
      expected_(expected) {}

Images parse_images(std::string_view bytes) {
  check_magic(bytes, kImageMagic);
  Images img;
  img.count = read_be32(bytes, 4);
  img.rows = read_be32(bytes, 8);
  img.cols = read_be32(bytes, 12);
  const std::uint64_t n = std::uint64_t{img.count} * img.rows * img.cols;
  if (bytes.size() - 16 != n) {
    throw FormatError("IDX: image payload holds " + std::to_string(bytes.size() - 16) + " bytes, header declares " +
                      std::to_string(n));
  }
  img.pixels.assign(bytes.begin() + 16, bytes.end());
  return img;
}

Labels parse_labels(std::string_view bytes) {
  check_magic(bytes, kLabelMagic);
  const std::uint32_t count = read_be32(bytes, 4);
  if (bytes.size() - 8 != count) {
    throw FormatError("IDX: label payload holds " + std::to_string(bytes.size() - 8) + " bytes, header declares " +
                      std::to_string(count));
  }
  return Labels{std::vector<std::uint8_t>(bytes.begin() + 8, bytes.end())};
}

std::string encode_images(const Images& images) {
  if (images.pixels.size() != std::size_t{images.count} * images.rows * images.cols) {
    throw FormatError("IDX: pixel count does not match extents");
  }
  std::string out;
  write_be32(out, kImageMagic);
  write_be32(out, images.count);
  write_be32(out, images.rows);
  write_be32(out, images.cols);
  out.append(images.pixels.begin(), images.pixels.end());
  return out;
}

std::string encode_labels(const Labels& labels) {
  std::string out;
  write_be32(out, kLabelMagic);
  write_be32(out, static_cast<std::uint32_t>(labels.values.size()));
  out.append(labels.values.begin(), labels.values.end());
  return out;
}

Images read_images(const std::filesystem::path& path) { return parse_images(slurp(path)); }
Labels read_labels(const std::filesystem::path& path) { return parse_labels(slurp(path)); }

}  // namespace kdlab::idx
