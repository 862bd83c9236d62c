#include "kdlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace kdlab {

namespace {

constexpr char kMagic[8] = {'K', 'D', 'L', 'A', 'B', 'C', 'K', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_u64(const std::string& in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_checkpoint(const std::vector<NamedArray>& entries) {
  std::ostringstream manifest;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.find_first_of(" \n") != std::string::npos) {
      throw FormatError("checkpoint entry names must be non-empty without spaces: '" + e.name + "'");
    }
    if (numel(e.shape) != e.values.size()) throw ShapeError("checkpoint entry " + e.name + " size mismatch");
    manifest << e.name << ' ' << e.shape.size();
    for (Index d : e.shape) manifest << ' ' << d;
    manifest << '\n';
  }
  const std::string m = manifest.str();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, m.size());
  out += m;
  for (const auto& e : entries) {
    for (Index i = 0; i < e.values.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(e.values[i]));
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::uint64_t mlen = get_u64(bytes, 8);
  if (mlen > bytes.size() - 16) throw FormatError("checkpoint: manifest length exceeds file size");
  std::istringstream manifest(bytes.substr(16, mlen));
  std::vector<NamedArray> entries;
  std::string line;
  while (std::getline(manifest, line)) {
    std::istringstream ls(line);
    NamedArray e;
    std::size_t rank = 0;
    if (!(ls >> e.name >> rank)) throw FormatError("checkpoint: malformed manifest line '" + line + "'");
    e.shape.resize(rank);
    for (auto& d : e.shape) {
      if (!(ls >> d) || d < 0) throw FormatError("checkpoint: malformed extent in '" + line + "'");
    }
    entries.push_back(std::move(e));
  }
  std::size_t offset = 16 + mlen;
  for (auto& e : entries) {
    const Index n = numel(e.shape);
    if (static_cast<std::uint64_t>(n) * 8 > bytes.size() - offset) throw FormatError("checkpoint: truncated data");
    e.values.resize(n);
    for (Index i = 0; i < n; ++i, offset += 8) e.values[i] = std::bit_cast<double>(get_u64(bytes, offset));
  }
  if (offset != bytes.size()) throw FormatError("checkpoint: trailing bytes after data");
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& entries) {
  const std::string bytes = encode_checkpoint(entries);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace kdlab
