#include "xslearn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "xslearn/errors.hpp"

namespace xsl {

namespace {

constexpr char kMagic[4] = {'X', 'S', 'L', '1'};
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

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamSet& params) {
  std::string manifest;
  std::string data;
  std::uint32_t count = 0;
  params.for_each([&](const std::string& name, const auto& t) {
    ++count;
    put_u32(manifest, static_cast<std::uint32_t>(name.size()));
    manifest += name;
    put_u32(manifest, static_cast<std::uint32_t>(t.rows()));
    put_u32(manifest, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const auto f = static_cast<float>(t.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(data, bits);
    }
  });

  std::string buf;
  buf.reserve(12 + manifest.size() + data.size());
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, count);
  buf += manifest;
  buf += data;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("checkpoint write failed: " + path.string());
}

ParamSet load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingCheckpoint("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 12) throw FormatError("checkpoint truncated header: " + path.string());
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError("checkpoint bad magic: " + path.string());
  if (get_u32(buf.data() + 4) != kVersion)
    throw FormatError("checkpoint unsupported version: " + path.string());
  const std::uint32_t count = get_u32(buf.data() + 8);

  // shape template in canonical order
  ParamSet params = init_params(config, 0);
  std::uint32_t expected_count = 0;
  params.for_each([&](const std::string&, const auto&) { ++expected_count; });
  if (count != expected_count)
    throw FormatError("checkpoint tensor count " + std::to_string(count) + " != expected " +
                      std::to_string(expected_count) + ": " + path.string());

  struct Entry {
    std::string name;
    std::uint32_t rows, cols;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  std::size_t pos = 12;
  for (std::uint32_t i = 0; i < count; ++i) {
    if (pos + 4 > buf.size()) throw FormatError("checkpoint truncated manifest: " + path.string());
    const std::uint32_t len = get_u32(buf.data() + pos);
    pos += 4;
    if (pos + len + 8 > buf.size())
      throw FormatError("checkpoint truncated manifest: " + path.string());
    Entry e;
    e.name.assign(buf.data() + pos, len);
    pos += len;
    e.rows = get_u32(buf.data() + pos);
    e.cols = get_u32(buf.data() + pos + 4);
    pos += 8;
    entries.push_back(std::move(e));
  }

  std::size_t idx = 0;
  std::size_t data_pos = pos;
  params.for_each([&](const std::string& name, auto& t) {
    const Entry& e = entries[idx++];
    if (e.name != name)
      throw FormatError("checkpoint tensor '" + e.name + "' where '" + name +
                        "' expected: " + path.string());
    if (e.rows != static_cast<std::uint32_t>(t.rows()) ||
        e.cols != static_cast<std::uint32_t>(t.cols()))
      throw FormatError("checkpoint tensor '" + name + "' shape " + std::to_string(e.rows) + "x" +
                        std::to_string(e.cols) + " does not match model config: " + path.string());
    if (data_pos + static_cast<std::size_t>(t.size()) * 4 > buf.size())
      throw FormatError("checkpoint truncated payload: " + path.string());
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const std::uint32_t bits = get_u32(buf.data() + data_pos);
      data_pos += 4;
      float f;
      std::memcpy(&f, &bits, 4);
      t.data()[i] = static_cast<double>(f);
    }
  });
  if (data_pos != buf.size()) throw FormatError("checkpoint trailing bytes: " + path.string());
  return params;
}

}  // namespace xsl
