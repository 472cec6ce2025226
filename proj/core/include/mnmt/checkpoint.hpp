#pragma once

// Binary parameter container: the line "MNMTCKPT1", one line of JSON header
// (config, vocabulary fingerprint, step, parameter names and shapes), then
// every parameter as raw little-endian float64 in header order.

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "mnmt/transformer.hpp"

namespace mnmt {

inline constexpr std::string_view kCheckpointMagic = "MNMTCKPT1";

struct CheckpointHeader {
  TransformerConfig config;
  std::uint64_t vocab_fingerprint = 0;
  std::uint64_t step = 0;
  std::string module;  // "encoder" or "decoder"
};

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const CheckpointHeader& header);

// Overwrites params in place; names and shapes must match the file exactly.
CheckpointHeader load_checkpoint(const std::filesystem::path& path, ParamStore& params);

// Header only, without touching parameters.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

}  // namespace mnmt
