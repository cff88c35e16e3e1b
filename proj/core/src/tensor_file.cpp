#include "xslearn/tensor_file.hpp"

#include <cstring>
#include <fstream>

#include "xslearn/errors.hpp"

namespace xsl {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', '1'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xFF);
  b[1] = static_cast<char>((v >> 8) & 0xFF);
  b[2] = static_cast<char>((v >> 16) & 0xFF);
  b[3] = static_cast<char>((v >> 24) & 0xFF);
  out.append(b, 4);
}

std::uint32_t get_u32(const char* p) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(p[0])) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 8 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 16 |
         static_cast<std::uint32_t>(static_cast<unsigned char>(p[3])) << 24;
}

void put_f32(std::string& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

float get_f32(const char* p) {
  const std::uint32_t v = get_u32(p);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

}  // namespace

void TensorFile::save(const std::filesystem::path& path) const {
  std::string buf;
  buf.reserve(16 + records.size() * (12 + static_cast<std::size_t>(dim) * 4));
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(records.size()));
  put_u32(buf, dim);
  for (const auto& r : records) {
    if (static_cast<std::uint32_t>(r.values.size()) != dim)
      throw DimMismatch("tensor record dim " + std::to_string(r.values.size()) +
                        " does not match file dim " + std::to_string(dim));
    put_u32(buf, r.category);
    put_u32(buf, r.speaker);
    put_u32(buf, r.token_id);
    for (int i = 0; i < r.values.size(); ++i) put_f32(buf, r.values[i]);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tensor file: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

TensorFile TensorFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open tensor file: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 16) throw FormatError("tensor file truncated header: " + path.string());
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError("tensor file bad magic: " + path.string());
  const std::uint32_t version = get_u32(buf.data() + 4);
  if (version != kVersion)
    throw FormatError("tensor file unsupported version " + std::to_string(version) + ": " +
                      path.string());
  const std::uint32_t count = get_u32(buf.data() + 8);
  const std::uint32_t dim = get_u32(buf.data() + 12);

  const std::size_t record_bytes = 12 + static_cast<std::size_t>(dim) * 4;
  const std::size_t expected = 16 + static_cast<std::size_t>(count) * record_bytes;
  if (buf.size() < expected) throw FormatError("tensor file truncated payload: " + path.string());
  if (buf.size() > expected) throw FormatError("tensor file trailing bytes: " + path.string());

  TensorFile out;
  out.dim = dim;
  out.records.resize(count);
  const char* p = buf.data() + 16;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord& r = out.records[i];
    r.category = get_u32(p);
    r.speaker = get_u32(p + 4);
    r.token_id = get_u32(p + 8);
    p += 12;
    r.values.resize(dim);
    for (std::uint32_t j = 0; j < dim; ++j, p += 4) r.values[j] = get_f32(p);
  }
  return out;
}

}  // namespace xsl
