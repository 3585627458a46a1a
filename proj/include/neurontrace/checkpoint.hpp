#pragma once

// Checkpoint file layout (all integers little-endian u64, values little-endian
// IEEE-754 binary64):
//
//   "NTCKPT01"                      8-byte magic
//   arch fingerprint                ModelArch::fingerprint()
//   tensor count                    2 per parametric layer (weight, bias)
//   per tensor: rank, dims..., values...

#include <filesystem>
#include <string>
#include <string_view>

#include "neurontrace/nn.hpp"

namespace neurontrace {

std::string encode_checkpoint(const ModelArch& arch, const ModelWeights& weights);
/// Throws IoError (naming `source`) on malformed bytes or a fingerprint that
/// does not match `arch`.
ModelWeights decode_checkpoint(const ModelArch& arch, std::string_view bytes, const std::string& source);

void write_checkpoint(const std::filesystem::path& path, const ModelArch& arch, const ModelWeights& weights);
ModelWeights read_checkpoint(const std::filesystem::path& path, const ModelArch& arch);

/// Writes `path.tmp` then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace neurontrace
