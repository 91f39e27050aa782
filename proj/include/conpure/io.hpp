#pragma once

#include <filesystem>
#include <string>

#include "conpure/image.hpp"
#include "json.hpp"

namespace conpure {

/// Binary 8-bit PGM (P5). Pixels are clamped to [0, 1] and rounded to the nearest 1/255.
void write_pgm(const std::filesystem::path& path, const Image& image);
Image read_pgm(const std::filesystem::path& path);

void write_mask_pgm(const std::filesystem::path& path, const Mask& mask);
/// Any non-zero pixel is set.
Mask read_mask_pgm(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
/// Writes pretty-printed JSON with a trailing newline; creates parent directories.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace conpure
