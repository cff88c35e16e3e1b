#pragma once

#include <filesystem>

#include "xslearn/learner.hpp"

namespace xsl {

/// Checkpoint container:
///   magic "XSL1" | u32 version | u32 tensor count |
///   count x { u32 name_len, name, u32 rows, u32 cols } |
///   concatenated f32 little-endian column-major tensor data
/// Tensors appear in the canonical ParamSet order. Loading validates names and
/// shapes against the model config and rejects malformed files.
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params);

ParamSet load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);

}  // namespace xsl
