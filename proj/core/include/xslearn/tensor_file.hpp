#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Core>

namespace xsl {

/// One labeled vector in a TNS1 container.
struct TensorRecord {
  std::uint32_t category = 0;  // 0xFFFFFFFF marks filler/no category
  std::uint32_t speaker = 0;
  std::uint32_t token_id = 0;
  Eigen::VectorXf values;
};

inline constexpr std::uint32_t kNoCategory = 0xFFFFFFFFu;

/// Binary tensor container:
///   magic "TNS1" | u32 version | u32 record count | u32 dim |
///   count x { u32 category, u32 speaker, u32 token_id, dim x f32 }
/// all little-endian. Readers reject bad magic, truncated payloads and
/// trailing bytes with distinct messages.
struct TensorFile {
  std::uint32_t dim = 0;
  std::vector<TensorRecord> records;

  void save(const std::filesystem::path& path) const;
  static TensorFile load(const std::filesystem::path& path);
};

}  // namespace xsl
