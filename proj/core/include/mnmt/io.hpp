#pragma once

// Whole-file helpers for workspace artifacts. Missing inputs raise
// MissingInput; write failures raise Io. Writers create parent directories.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mnmt {

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);
// One entry per line, without the trailing newline.
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);

}  // namespace mnmt
